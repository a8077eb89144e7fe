//! Tensor-level reverse-mode tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in exact reverse recording order, so gradients are a pure,
//! bitwise-reproducible function of the recorded graph.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{NetError, Owner, ParamSet, Tensor};

/// Floor applied to probabilities before taking the log in cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

const INPUT_BIT: u8 = 0b1000;
const ALL_BITS: u8 = 0b1111;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param {
        owner: Owner,
        index: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv1d {
        x: usize,
        k: usize,
        b: usize,
        width: usize,
    },
    Relu(usize),
    Softmax(usize),
    Lstm {
        x: usize,
        state: usize,
        w_ih: usize,
        w_hh: usize,
        b: usize,
        gates: Vec<f64>,
    },
    Slice {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    AddScaled {
        a: usize,
        b: usize,
        beta: f64,
    },
    HalfSqNorm(usize),
    CrossEntropy {
        probs: usize,
        labels: Vec<usize>,
    },
    Mse {
        pred: usize,
        target: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    /// Owners (and the input bit) of every leaf this node depends on.
    mask: u8,
}

pub struct Tape<'a> {
    id: usize,
    nodes: Vec<Node<'a>>,
    registered: [Option<Vec<Var>>; 3],
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            registered: [None, None, None],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, mask: u8) -> Var {
        self.nodes.push(Node { value, op, mask });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize, NetError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NetError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    fn mask(&self, idx: usize) -> u8 {
        self.nodes[idx].mask
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Constant, 0)
    }

    /// A tracked leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, INPUT_BIT)
    }

    /// Records every tensor of `set` as a parameter leaf, in set order.
    /// Registering the same owner twice returns the existing handles, so
    /// repeated uses of one network share gradient accumulators.
    pub fn register(&mut self, set: &'a ParamSet) -> Vec<Var> {
        let slot = set.owner() as usize;
        if let Some(vars) = &self.registered[slot] {
            return vars.clone();
        }
        let owner = set.owner();
        let vars: Vec<Var> = (0..set.len())
            .map(|index| {
                self.push(
                    Cow::Borrowed(set.tensor(index)),
                    Op::Param { owner, index },
                    owner.bit(),
                )
            })
            .collect();
        self.registered[slot] = Some(vars.clone());
        vars
    }

    /// `W·x + b` with `W: [n_out × n_in]`, `b: [n_out]`, `x` any shape of
    /// `n_in` elements.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NetError> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xt, wt, bt) = (self.val(xi), self.val(wi), self.val(bi));
        if wt.rank() != 2 || wt.shape()[1] != xt.len() || bt.len() != wt.shape()[0] {
            return Err(NetError::Shape {
                op: "linear",
                detail: format!("x {:?}, W {:?}, b {:?}", xt.shape(), wt.shape(), bt.shape()),
            });
        }
        let n_in = xt.len();
        let xs = xt.data();
        let out: Vec<f64> = wt
            .data()
            .chunks_exact(n_in)
            .zip(bt.data())
            .map(|(row, bias)| bias + dot(row, xs))
            .collect();
        let mask = self.mask(xi) | self.mask(wi) | self.mask(bi);
        Ok(self.push(
            Cow::Owned(Tensor::vector(out)),
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
            },
            mask,
        ))
    }

    /// Valid cross-correlation along time: `x: [T × C]`,
    /// `kernels: [F × w × C]`, `bias: [F]` → `[(T−w+1) × F]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var, NetError> {
        let (xi, ki, bi) = (self.check(x)?, self.check(kernels)?, self.check(bias)?);
        let (xt, kt, bt) = (self.val(xi), self.val(ki), self.val(bi));
        if xt.rank() != 2
            || kt.rank() != 3
            || kt.shape()[2] != xt.shape()[1]
            || bt.len() != kt.shape()[0]
        {
            return Err(NetError::Shape {
                op: "conv1d",
                detail: format!(
                    "x {:?}, kernels {:?}, bias {:?}",
                    xt.shape(),
                    kt.shape(),
                    bt.shape()
                ),
            });
        }
        let (t_len, ch) = (xt.shape()[0], xt.shape()[1]);
        let (filters, width) = (kt.shape()[0], kt.shape()[1]);
        if width > t_len {
            return Err(NetError::Shape {
                op: "conv1d",
                detail: format!("kernel width {width} exceeds sequence length {t_len}"),
            });
        }
        let t_out = t_len - width + 1;
        let span = width * ch;
        let (xs, ks) = (xt.data(), kt.data());
        let mut out = vec![0.0; t_out * filters];
        for t in 0..t_out {
            // rows t..t+width are contiguous in row-major x
            let patch = &xs[t * ch..t * ch + span];
            for (f, o) in out[t * filters..(t + 1) * filters].iter_mut().enumerate() {
                *o = bt.data()[f] + dot(&ks[f * span..(f + 1) * span], patch);
            }
        }
        let mask = self.mask(xi) | self.mask(ki) | self.mask(bi);
        let value = Tensor::new(vec![t_out, filters], out)?;
        Ok(self.push(
            Cow::Owned(value),
            Op::Conv1d {
                x: xi,
                k: ki,
                b: bi,
                width,
            },
            mask,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0. NaN passes through.
    pub fn relu(&mut self, x: Var) -> Result<Var, NetError> {
        let xi = self.check(x)?;
        let xt = self.val(xi);
        let out = Tensor::new(
            xt.shape().to_vec(),
            xt.data()
                .iter()
                .map(|&v| if v.is_nan() { v } else { v.max(0.0) })
                .collect(),
        )?;
        let mask = self.mask(xi);
        Ok(self.push(Cow::Owned(out), Op::Relu(xi), mask))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NetError> {
        let xi = self.check(x)?;
        let xt = self.val(xi);
        if xt.data().iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("softmax input"));
        }
        let rows = xt.rows();
        let cols = xt.len() / rows;
        let mut out = xt.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let mask = self.mask(xi);
        Ok(self.push(Cow::Owned(value), Op::Softmax(xi), mask))
    }

    /// One LSTM step over a packed state `[h; c]` of length `2H`.
    ///
    /// Gates are laid out `[input, forget, candidate, output]` along the
    /// `4H` axis of `w_ih: [4H × I]`, `w_hh: [4H × H]` and `b: [4H]`.
    pub fn lstm_step(
        &mut self,
        x: Var,
        state: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
    ) -> Result<Var, NetError> {
        let (xi, si) = (self.check(x)?, self.check(state)?);
        let (wii, whi, bi) = (self.check(w_ih)?, self.check(w_hh)?, self.check(b)?);
        let (xt, st) = (self.val(xi), self.val(si));
        let (wit, wht, bt) = (self.val(wii), self.val(whi), self.val(bi));
        let hidden = st.len() / 2;
        let n_in = xt.len();
        if st.len() != 2 * hidden
            || wit.shape() != [4 * hidden, n_in]
            || wht.shape() != [4 * hidden, hidden]
            || bt.len() != 4 * hidden
        {
            return Err(NetError::Shape {
                op: "lstm",
                detail: format!(
                    "x {:?}, state {:?}, w_ih {:?}, w_hh {:?}, b {:?}",
                    xt.shape(),
                    st.shape(),
                    wit.shape(),
                    wht.shape(),
                    bt.shape()
                ),
            });
        }
        let (h_prev, c_prev) = st.data().split_at(hidden);
        let mut gates: Vec<f64> = wit
            .data()
            .chunks_exact(n_in)
            .zip(wht.data().chunks_exact(hidden))
            .zip(bt.data())
            .map(|((wx, wh), bias)| bias + dot(wx, xt.data()) + dot(wh, h_prev))
            .collect();
        let (ig, rest) = gates.split_at_mut(hidden);
        let (fg, rest) = rest.split_at_mut(hidden);
        let (gg, og) = rest.split_at_mut(hidden);
        let mut out = vec![0.0; 2 * hidden];
        let (h, c) = out.split_at_mut(hidden);
        for j in 0..hidden {
            ig[j] = sigmoid(ig[j]);
            fg[j] = sigmoid(fg[j]);
            gg[j] = gg[j].tanh();
            og[j] = sigmoid(og[j]);
            c[j] = fg[j] * c_prev[j] + ig[j] * gg[j];
            h[j] = og[j] * c[j].tanh();
        }
        let mask = self.mask(xi) | self.mask(si) | self.mask(wii) | self.mask(whi) | self.mask(bi);
        let op = Op::Lstm {
            x: xi,
            state: si,
            w_ih: wii,
            w_hh: whi,
            b: bi,
            gates,
        };
        Ok(self.push(Cow::Owned(Tensor::vector(out)), op, mask))
    }

    /// `(h_t, c_t)` from separate `h_prev`, `c_prev`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        params: &LstmParams,
    ) -> Result<(Var, Var), NetError> {
        let hidden = self.value(h_prev).len();
        let state = self.concat_rows(&[h_prev, c_prev])?;
        let next = self.lstm_step(x, state, params.w_ih, params.w_hh, params.b)?;
        Ok((
            self.slice(next, 0, hidden)?,
            self.slice(next, hidden, hidden)?,
        ))
    }

    /// Flat sub-range `[start, start+len)` as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NetError> {
        let xi = self.check(x)?;
        let xt = self.val(xi);
        if start + len > xt.len() {
            return Err(NetError::Shape {
                op: "slice",
                detail: format!("range {start}..{} of {} values", start + len, xt.len()),
            });
        }
        let value = Tensor::vector(xt.data()[start..start + len].to_vec());
        let mask = self.mask(xi);
        Ok(self.push(Cow::Owned(value), Op::Slice { x: xi, start }, mask))
    }

    /// Stacks row blocks with a common width. Rank-1 inputs count as one
    /// row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NetError> {
        if parts.is_empty() {
            return Err(NetError::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let idx: Vec<usize> = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<_, _>>()?;
        let width = |t: &Tensor| {
            if t.rank() >= 2 {
                t.len() / t.shape()[0]
            } else {
                t.len()
            }
        };
        let cols = width(self.val(idx[0]));
        let mut rows = 0;
        let mut data = Vec::new();
        let mut mask = 0;
        for &i in &idx {
            let t = self.val(i);
            if width(t) != cols {
                return Err(NetError::Shape {
                    op: "concat",
                    detail: format!("row width {} vs {cols}", width(t)),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
            mask |= self.mask(i);
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Cow::Owned(value), Op::ConcatRows(idx), mask))
    }

    /// `a + β·b` for equal-length operands.
    pub fn add_scaled(&mut self, a: Var, b: Var, beta: f64) -> Result<Var, NetError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (at, bt) = (self.val(ai), self.val(bi));
        if at.len() != bt.len() {
            return Err(NetError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| x + beta * y)
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        let mask = self.mask(ai) | self.mask(bi);
        Ok(self.push(
            Cow::Owned(value),
            Op::AddScaled { a: ai, b: bi, beta },
            mask,
        ))
    }

    /// `½‖x‖²`.
    pub fn half_sq_norm(&mut self, x: Var) -> Result<Var, NetError> {
        let xi = self.check(x)?;
        let v = 0.5 * self.val(xi).data().iter().map(|v| v * v).sum::<f64>();
        let mask = self.mask(xi);
        Ok(self.push(Cow::Owned(Tensor::scalar(v)), Op::HalfSqNorm(xi), mask))
    }

    /// Mean negative log-likelihood of `labels` under probability rows
    /// `probs: [n × M]` (a single row may be rank 1).
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var, NetError> {
        let pi = self.check(probs)?;
        let pt = self.val(pi);
        let rows = pt.rows();
        let cols = pt.len() / rows;
        if labels.len() != rows || labels.iter().any(|&l| l >= cols) {
            return Err(NetError::Shape {
                op: "cross_entropy",
                detail: format!("{} labels for probabilities {:?}", labels.len(), pt.shape()),
            });
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -pt.data()[r * cols + l].max(LOG_FLOOR).ln())
            .sum();
        let value = Tensor::scalar(total / rows as f64);
        let mask = self.mask(pi);
        let op = Op::CrossEntropy {
            probs: pi,
            labels: labels.to_vec(),
        };
        Ok(self.push(Cow::Owned(value), op, mask))
    }

    /// Mean over rows of the squared error summed across each row. For
    /// IQ rows `[n × 2]` this is the mean squared complex modulus.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var, NetError> {
        let pi = self.check(pred)?;
        let pt = self.val(pi);
        if pt.len() != target.len() || pt.is_empty() {
            return Err(NetError::Shape {
                op: "mse",
                detail: format!("prediction {:?} vs target {:?}", pt.shape(), target.shape()),
            });
        }
        let rows = pt.rows();
        let total: f64 = pt
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t).powi(2))
            .sum();
        let value = Tensor::scalar(total / rows as f64);
        let mask = self.mask(pi);
        let op = Op::Mse {
            pred: pi,
            target: target.data().to_vec(),
        };
        Ok(self.push(Cow::Owned(value), op, mask))
    }

    /// Gradients of a scalar with respect to everything on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NetError> {
        self.backward_masked(loss, ALL_BITS)
    }

    /// Gradients restricted to the parameters of `owners`; subgraphs that
    /// cannot reach those parameters are skipped.
    pub fn backward_for(&self, loss: Var, owners: &[Owner]) -> Result<Gradients, NetError> {
        let mask = owners.iter().fold(0, |m, o| m | o.bit());
        self.backward_masked(loss, mask)
    }

    fn backward_masked(&self, loss: Var, want: u8) -> Result<Gradients, NetError> {
        let li = self.check(loss)?;
        if self.val(li).len() != 1 {
            return Err(NetError::NotScalar(self.val(li).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for n in (0..=li).rev() {
            let node = &self.nodes[n];
            if node.mask & want == 0 {
                continue;
            }
            let Some(g) = grads[n].take() else { continue };
            let (lower, upper) = grads.split_at_mut(n);
            self.propagate(node, &g, lower, want);
            upper[0] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(li + 1) {
            if let (Op::Param { owner, index }, Some(g)) = (&node.op, &grads[i]) {
                params.insert((*owner, *index), g.clone());
            }
        }
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>], want: u8) {
        let wants = |i: usize| self.nodes[i].mask & want != 0;
        match &node.op {
            Op::Constant | Op::Input | Op::Param { .. } => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.val(*x), self.val(*w));
                let n_in = xt.len();
                if wants(*x) {
                    let dx = acc(grads, *x, n_in);
                    for (row, go) in wt.data().chunks_exact(n_in).zip(g) {
                        axpy(*go, row, dx);
                    }
                }
                if wants(*w) {
                    let dw = acc(grads, *w, wt.len());
                    for (drow, go) in dw.chunks_exact_mut(n_in).zip(g) {
                        axpy(*go, xt.data(), drow);
                    }
                }
                if wants(*b) {
                    axpy(1.0, g, acc(grads, *b, g.len()));
                }
            }
            Op::Conv1d { x, k, b, width } => {
                let (xt, kt) = (self.val(*x), self.val(*k));
                let ch = xt.shape()[1];
                let filters = kt.shape()[0];
                let span = width * ch;
                let t_out = g.len() / filters;
                if wants(*x) {
                    let dx = acc(grads, *x, xt.len());
                    for t in 0..t_out {
                        let patch = &mut dx[t * ch..t * ch + span];
                        for f in 0..filters {
                            axpy(
                                g[t * filters + f],
                                &kt.data()[f * span..(f + 1) * span],
                                patch,
                            );
                        }
                    }
                }
                if wants(*k) {
                    let dk = acc(grads, *k, kt.len());
                    for t in 0..t_out {
                        let patch = &xt.data()[t * ch..t * ch + span];
                        for f in 0..filters {
                            axpy(g[t * filters + f], patch, &mut dk[f * span..(f + 1) * span]);
                        }
                    }
                }
                if wants(*b) {
                    let db = acc(grads, *b, filters);
                    for row in g.chunks_exact(filters) {
                        axpy(1.0, row, db);
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xs = self.val(*x).data();
                    let dx = acc(grads, *x, xs.len());
                    for ((d, &xv), &go) in dx.iter_mut().zip(xs).zip(g) {
                        if xv > 0.0 {
                            *d += go;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let cols = y.len() / node.value.rows();
                    let dx = acc(grads, *x, y.len());
                    for ((yr, gr), dr) in y
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                    {
                        let inner = dot(yr, gr);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::Lstm {
                x,
                state,
                w_ih,
                w_hh,
                b,
                gates,
            } => {
                let xt = self.val(*x);
                let st = self.val(*state);
                let hidden = st.len() / 2;
                let n_in = xt.len();
                let (h_prev, c_prev) = st.data().split_at(hidden);
                let c_new = &node.value.data()[hidden..];
                let (dh, dc) = g.split_at(hidden);
                let (ig, rest) = gates.split_at(hidden);
                let (fg, rest) = rest.split_at(hidden);
                let (gg, og) = rest.split_at(hidden);
                // pre-activation gradients, same layout as the gates
                let mut da = vec![0.0; 4 * hidden];
                let mut dc_prev = vec![0.0; hidden];
                for j in 0..hidden {
                    let tc = c_new[j].tanh();
                    let dct = dc[j] + dh[j] * og[j] * (1.0 - tc * tc);
                    da[j] = dct * gg[j] * ig[j] * (1.0 - ig[j]);
                    da[hidden + j] = dct * c_prev[j] * fg[j] * (1.0 - fg[j]);
                    da[2 * hidden + j] = dct * ig[j] * (1.0 - gg[j] * gg[j]);
                    da[3 * hidden + j] = dh[j] * tc * og[j] * (1.0 - og[j]);
                    dc_prev[j] = dct * fg[j];
                }
                if wants(*x) {
                    let wi = self.val(*w_ih).data();
                    let dx = acc(grads, *x, n_in);
                    for (row, a) in wi.chunks_exact(n_in).zip(&da) {
                        axpy(*a, row, dx);
                    }
                }
                if wants(*state) {
                    let wh = self.val(*w_hh).data();
                    let ds = acc(grads, *state, 2 * hidden);
                    let (dsh, dsc) = ds.split_at_mut(hidden);
                    for (row, a) in wh.chunks_exact(hidden).zip(&da) {
                        axpy(*a, row, dsh);
                    }
                    axpy(1.0, &dc_prev, dsc);
                }
                if wants(*w_ih) {
                    let dw = acc(grads, *w_ih, 4 * hidden * n_in);
                    for (drow, a) in dw.chunks_exact_mut(n_in).zip(&da) {
                        axpy(*a, xt.data(), drow);
                    }
                }
                if wants(*w_hh) {
                    let dw = acc(grads, *w_hh, 4 * hidden * hidden);
                    for (drow, a) in dw.chunks_exact_mut(hidden).zip(&da) {
                        axpy(*a, h_prev, drow);
                    }
                }
                if wants(*b) {
                    axpy(1.0, &da, acc(grads, *b, 4 * hidden));
                }
            }
            Op::Slice { x, start } => {
                if wants(*x) {
                    let n = self.val(*x).len();
                    let dx = acc(grads, *x, n);
                    axpy(1.0, g, &mut dx[*start..*start + g.len()]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if wants(p) {
                        axpy(1.0, &g[offset..offset + n], acc(grads, p, n));
                    }
                    offset += n;
                }
            }
            Op::AddScaled { a, b, beta } => {
                if wants(*a) {
                    axpy(1.0, g, acc(grads, *a, g.len()));
                }
                if wants(*b) {
                    axpy(*beta, g, acc(grads, *b, g.len()));
                }
            }
            Op::HalfSqNorm(x) => {
                if wants(*x) {
                    let xs = self.val(*x).data();
                    axpy(g[0], xs, acc(grads, *x, xs.len()));
                }
            }
            Op::CrossEntropy { probs, labels } => {
                if wants(*probs) {
                    let pt = self.val(*probs);
                    let rows = labels.len();
                    let cols = pt.len() / rows;
                    let dp = acc(grads, *probs, pt.len());
                    for (r, &l) in labels.iter().enumerate() {
                        let p = pt.data()[r * cols + l];
                        if p > LOG_FLOOR {
                            dp[r * cols + l] -= g[0] / (rows as f64 * p);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                if wants(*pred) {
                    let pt = self.val(*pred);
                    let scale = 2.0 * g[0] / pt.rows() as f64;
                    let dp = acc(grads, *pred, pt.len());
                    for ((d, p), t) in dp.iter_mut().zip(pt.data()).zip(target) {
                        *d += scale * (p - t);
                    }
                }
            }
        }
    }
}

/// Handles for one LSTM layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<(Owner, usize), Vec<f64>>,
}

impl Gradients {
    /// Gradient reaching `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.idx)?.as_deref()
    }

    pub fn param(&self, owner: Owner, index: usize) -> Option<&[f64]> {
        self.params.get(&(owner, index)).map(Vec::as_slice)
    }

    /// Gradients aligned with `set`, zero where nothing flowed.
    pub fn for_set(&self, set: &ParamSet) -> Vec<Tensor> {
        (0..set.len())
            .map(|i| {
                let shape = set.tensor(i).shape();
                match self.param(set.owner(), i) {
                    Some(g) => Tensor::new(shape.to_vec(), g.to_vec())
                        .expect("gradient matches parameter shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

/// Inner product with four fixed-order partial sums.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut part = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            part[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (part[0] + part[1]) + (part[2] + part[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
