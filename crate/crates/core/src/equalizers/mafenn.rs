use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Combine, EqualizerConfig, FeedbackSource, Schedule};
use super::{argmax, cosine_scale, lane_starts, EqError, SymbolDetector};
use crate::channel::{qpsk_point, IqSample, WindowedExample};
use crate::diffnet::{self, Owner, ParamSet, Tape, Tensor, Var};

/// Losses of one batch, measured before any parameter moved.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    /// Leader loss `l2 + β·l3`.
    pub l1: f64,
    /// Mean squared error of the recovered symbol.
    pub l2: f64,
    /// Cross-entropy of the class probabilities.
    pub l3: f64,
}

impl StepLosses {
    fn add(&mut self, o: &StepLosses) {
        self.l1 += o.l1;
        self.l2 += o.l2;
        self.l3 += o.l3;
    }

    fn scale(&mut self, s: f64) {
        self.l1 *= s;
        self.l2 *= s;
        self.l3 *= s;
    }
}

/// Output of one inference step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forward {
    pub probs: [f64; 4],
    /// `x̂` after the last cycle (the raw sample when there are no cycles).
    pub recovered: IqSample,
    pub decision: usize,
}

/// Encoder, Feedbacker and Processor parameters.
#[derive(Debug)]
pub struct MafennModel {
    config: EqualizerConfig,
    encoder: ParamSet,
    feedbacker: ParamSet,
    processor: ParamSet,
    feedbacker_calls: AtomicU64,
}

impl Clone for MafennModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            feedbacker: self.feedbacker.clone(),
            processor: self.processor.clone(),
            feedbacker_calls: AtomicU64::new(self.feedbacker_calls()),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

fn init_head(
    owner: Owner,
    rng: &mut ChaCha8Rng,
    n_in: usize,
    hidden: usize,
    n_out: usize,
) -> ParamSet {
    let mut s = ParamSet::new(owner);
    let put = |s: &mut ParamSet, n: &str, t: Tensor| s.insert(n, t).expect("fresh names");
    put(
        &mut s,
        "fc1.weight",
        glorot(rng, &[hidden, n_in], n_in, hidden),
    );
    put(&mut s, "fc1.bias", Tensor::zeros(&[hidden]));
    put(
        &mut s,
        "fc2.weight",
        glorot(rng, &[n_out, hidden], hidden, n_out),
    );
    put(&mut s, "fc2.bias", Tensor::zeros(&[n_out]));
    s
}

/// Encoder input in time order, oldest row first.
///
/// `raw[j]` is `x(i−j)` and `history[j]` is slot `j+1`. Concat stacks the
/// whole raw window, then the feedback window, then slot 0. Replace keeps
/// the row count at N: slot 0 is the estimate of the symbol decided
/// `delay` steps back, so it takes raw row `delay` and slot `j` takes raw
/// row `delay + j`, pulled forward when the block would run off the window.
pub fn build_input(
    raw: &[IqSample],
    history: &[IqSample],
    slot0: IqSample,
    combine: Combine,
    delay: usize,
) -> Tensor {
    let (mut rows, after) = context_rows(raw, history, combine, delay);
    rows.push(slot0);
    rows.extend(after);
    iq_matrix(&rows)
}

/// Rows before and after slot 0.
fn context_rows(
    raw: &[IqSample],
    history: &[IqSample],
    combine: Combine,
    delay: usize,
) -> (Vec<IqSample>, Vec<IqSample>) {
    match combine {
        Combine::Concat => {
            let mut rows: Vec<IqSample> = raw.iter().rev().copied().collect();
            rows.extend(history.iter().rev());
            (rows, Vec::new())
        }
        Combine::Replace => {
            let fed = (history.len() + 1).min(raw.len());
            let lo = delay.min(raw.len() - fed);
            let mut rows: Vec<IqSample> = raw[lo + fed..].iter().rev().copied().collect();
            rows.extend(history[..fed - 1].iter().rev());
            (rows, raw[..lo].iter().rev().copied().collect())
        }
    }
}

/// Encoder rows around feedback slot 0.
struct Context {
    before: Tensor,
    after: Tensor,
}

impl Context {
    fn new(raw: &[IqSample], history: &[IqSample], cfg: &EqualizerConfig) -> Self {
        let (before, after) = context_rows(raw, history, cfg.combine, cfg.delay);
        Context {
            before: iq_matrix(&before),
            after: iq_matrix(&after),
        }
    }
}

fn iq_matrix(rows: &[IqSample]) -> Tensor {
    let data = rows.iter().flat_map(|s| [s.i, s.q]).collect();
    Tensor::new(vec![rows.len(), 2], data).expect("two columns per row")
}

fn iq_vector(s: IqSample) -> Tensor {
    Tensor::vector(vec![s.i, s.q])
}

struct Head {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct EncoderVars {
    convs: Vec<(Var, Var)>,
    lstm: (Var, Var, Var),
    proj: (Var, Var),
    hidden: usize,
}

/// Handles of whichever sets were registered on one tape.
struct Handles {
    enc: EncoderVars,
    fb: Option<Head>,
    pr: Option<Head>,
}

fn head_vars(v: &[Var]) -> Head {
    Head {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
    }
}

fn run_head(tape: &mut Tape<'_>, h: &Head, z: Var) -> Result<Var, diffnet::NetError> {
    let a = tape.linear(z, h.w1, h.b1)?;
    let a = tape.relu(a)?;
    tape.linear(a, h.w2, h.b2)
}

#[derive(Clone, Copy, PartialEq)]
enum Objective {
    /// Processor on `l3`, Feedbacker on `l2`, Encoder on `l1`.
    Game,
    /// Encoder and Feedbacker on `l2`.
    Reconstruction,
}

struct BatchGraph {
    l1: Var,
    l2: Var,
    l3: Option<Var>,
    /// What each lane pushes into its history.
    fed_back: Vec<IqSample>,
}

impl MafennModel {
    pub fn new(config: &EqualizerConfig) -> Result<Self, EqError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut enc = ParamSet::new(Owner::Encoder);
        let mut ch = 2;
        for (i, (&f, &w)) in config
            .conv_filters
            .iter()
            .zip(&config.conv_widths)
            .enumerate()
        {
            enc.insert(
                format!("conv{i}.weight"),
                glorot(&mut rng, &[f, w, ch], w * ch, w * f),
            )?;
            enc.insert(format!("conv{i}.bias"), Tensor::zeros(&[f]))?;
            ch = f;
        }
        let h = config.lstm_hidden;
        let a = 1.0 / (h as f64).sqrt();
        enc.insert(
            "lstm.w_ih",
            Tensor::from_fn(&[4 * h, ch], |_| rng.random_range(-a..a)),
        )?;
        enc.insert(
            "lstm.w_hh",
            Tensor::from_fn(&[4 * h, h], |_| rng.random_range(-a..a)),
        )?;
        // forget gate starts open
        enc.insert(
            "lstm.bias",
            Tensor::from_fn(
                &[4 * h],
                |j| if (h..2 * h).contains(&j) { 1.0 } else { 0.0 },
            ),
        )?;
        enc.insert(
            "proj.weight",
            glorot(&mut rng, &[config.latent_dim, h], h, config.latent_dim),
        )?;
        enc.insert("proj.bias", Tensor::zeros(&[config.latent_dim]))?;
        let feedbacker = init_head(
            Owner::Feedbacker,
            &mut rng,
            config.latent_dim,
            config.head_hidden,
            2,
        );
        let processor = init_head(
            Owner::Processor,
            &mut rng,
            config.latent_dim,
            config.head_hidden,
            4,
        );
        Ok(Self {
            config: config.clone(),
            encoder: enc,
            feedbacker,
            processor,
            feedbacker_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EqualizerConfig {
        &self.config
    }

    pub fn params(&self, owner: Owner) -> &ParamSet {
        match owner {
            Owner::Encoder => &self.encoder,
            Owner::Feedbacker => &self.feedbacker,
            Owner::Processor => &self.processor,
        }
    }

    pub fn params_mut(&mut self, owner: Owner) -> &mut ParamSet {
        match owner {
            Owner::Encoder => &mut self.encoder,
            Owner::Feedbacker => &mut self.feedbacker,
            Owner::Processor => &mut self.processor,
        }
    }

    /// Number of Feedbacker evaluations so far.
    pub fn feedbacker_calls(&self) -> u64 {
        self.feedbacker_calls.load(Ordering::Relaxed)
    }

    pub fn save_weights<W: Write>(&self, w: W) -> std::io::Result<()> {
        diffnet::save_param_sets(w, &[&self.encoder, &self.feedbacker, &self.processor])
    }

    pub fn load_weights<R: Read>(config: &EqualizerConfig, r: R) -> Result<Self, EqError> {
        let mut m = Self::new(config)?;
        diffnet::load_param_sets(
            r,
            &mut [&mut m.encoder, &mut m.feedbacker, &mut m.processor],
        )?;
        Ok(m)
    }

    fn register<'a>(&'a self, tape: &mut Tape<'a>, fb: bool, pr: bool) -> Handles {
        let e = tape.register(&self.encoder);
        let n_conv = self.config.conv_filters.len();
        let convs = (0..n_conv).map(|i| (e[2 * i], e[2 * i + 1])).collect();
        let o = 2 * n_conv;
        let enc = EncoderVars {
            convs,
            lstm: (e[o], e[o + 1], e[o + 2]),
            proj: (e[o + 3], e[o + 4]),
            hidden: self.config.lstm_hidden,
        };
        Handles {
            enc,
            fb: fb.then(|| head_vars(&tape.register(&self.feedbacker))),
            pr: pr.then(|| head_vars(&tape.register(&self.processor))),
        }
    }

    /// Conv → ReLU stack, LSTM over the rows oldest to newest, then the
    /// affine map of the last hidden state to the latent.
    fn encode(tape: &mut Tape<'_>, e: &EncoderVars, input: Var) -> Result<Var, diffnet::NetError> {
        let mut x = input;
        for &(k, b) in &e.convs {
            x = tape.conv1d(x, k, b)?;
            x = tape.relu(x)?;
        }
        let shape = tape.value(x).shape().to_vec();
        let (steps, width) = (shape[0], shape[1]);
        let (w_ih, w_hh, b) = e.lstm;
        let mut state = tape.constant(Tensor::zeros(&[2 * e.hidden]));
        for t in 0..steps {
            let xt = tape.slice(x, t * width, width)?;
            state = tape.lstm_step(xt, state, w_ih, w_hh, b)?;
        }
        let h = tape.slice(state, 0, e.hidden)?;
        tape.linear(h, e.proj.0, e.proj.1)
    }

    fn encode_with_slot(
        &self,
        tape: &mut Tape<'_>,
        h: &Handles,
        context: &Context,
        slot0: Var,
    ) -> Result<Var, diffnet::NetError> {
        let mut parts = Vec::with_capacity(3);
        if !context.before.is_empty() {
            parts.push(tape.constant(context.before.clone()));
        }
        parts.push(slot0);
        if !context.after.is_empty() {
            parts.push(tape.constant(context.after.clone()));
        }
        let input = tape.concat_rows(&parts)?;
        Self::encode(tape, &h.enc, input)
    }

    /// One detached cycle: `F(E(input))` with `slot0` in feedback slot 0.
    fn feedback_pass(&self, context: &Context, slot0: IqSample) -> Result<IqSample, EqError> {
        let mut tape = Tape::new();
        let h = self.register(&mut tape, true, false);
        let s = tape.constant(iq_vector(slot0));
        let z = self.encode_with_slot(&mut tape, &h, context, s)?;
        let x = run_head(&mut tape, h.fb.as_ref().expect("registered"), z)?;
        self.feedbacker_calls.fetch_add(1, Ordering::Relaxed);
        let v = tape.value(x).data();
        Ok(IqSample::new(v[0], v[1]))
    }

    /// Cycles, then classification. A pure function of the parameters and
    /// inputs; `history[j]` is feedback slot `j+1`.
    pub fn forward(&self, raw: &[IqSample], history: &[IqSample]) -> Result<Forward, EqError> {
        self.check_inputs(raw, history)?;
        let context = Context::new(raw, history, &self.config);
        let mut slot0 = raw[0];
        for _ in 0..self.config.cycles {
            slot0 = self.feedback_pass(&context, slot0)?;
        }
        let mut tape = Tape::new();
        let h = self.register(&mut tape, false, true);
        let s = tape.constant(iq_vector(slot0));
        let z = self.encode_with_slot(&mut tape, &h, &context, s)?;
        let logits = run_head(&mut tape, h.pr.as_ref().expect("registered"), z)?;
        let y = tape.softmax(logits)?;
        let p = tape.value(y).data();
        let probs = [p[0], p[1], p[2], p[3]];
        Ok(Forward {
            probs,
            recovered: slot0,
            decision: argmax(&probs),
        })
    }

    fn check_inputs(&self, raw: &[IqSample], history: &[IqSample]) -> Result<(), EqError> {
        if raw.len() != self.config.n || history.len() != self.config.k {
            return Err(EqError::Shape(format!(
                "raw window {} (N = {}), history {} (K = {})",
                raw.len(),
                self.config.n,
                history.len(),
                self.config.k
            )));
        }
        Ok(())
    }

    /// Records the batch on `tape`. Cycles before the last (or all, with
    /// `full_unroll`) are evaluated on their own tapes and enter as
    /// constants.
    fn batch_graph<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &[&WindowedExample],
        histories: &[Vec<IqSample>],
        objective: Objective,
    ) -> Result<BatchGraph, EqError> {
        let cfg = &self.config;
        let h = self.register(tape, true, objective == Objective::Game);
        let graded = if cfg.full_unroll {
            cfg.cycles
        } else {
            cfg.cycles.min(1)
        };
        let mut recons = Vec::with_capacity(batch.len());
        let mut probs = Vec::with_capacity(batch.len());
        let mut fed_back = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(2 * batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for (ex, hist) in batch.iter().zip(histories) {
            self.check_inputs(&ex.raw_window, hist)?;
            let context = Context::new(&ex.raw_window, hist, cfg);
            let mut first = ex.raw_window[0];
            for _ in 0..cfg.cycles - graded {
                first = self.feedback_pass(&context, first)?;
            }
            let mut slot0 = tape.constant(iq_vector(first));
            for _ in 0..graded {
                let z = self.encode_with_slot(tape, &h, &context, slot0)?;
                slot0 = run_head(tape, h.fb.as_ref().expect("registered"), z)?;
            }
            let z = self.encode_with_slot(tape, &h, &context, slot0)?;
            let recon = if cfg.cycles == 0 {
                // no cycle to supervise: the Feedbacker reads the final latent
                run_head(tape, h.fb.as_ref().expect("registered"), z)?
            } else {
                slot0
            };
            let current = tape.value(slot0).data();
            let mut push = IqSample::new(current[0], current[1]);
            if let Some(pr) = &h.pr {
                let logits = run_head(tape, pr, z)?;
                let y = tape.softmax(logits)?;
                if cfg.feedback == FeedbackSource::HardDecision {
                    push = qpsk_point(argmax(tape.value(y).data()));
                }
                probs.push(y);
            }
            if cfg.teacher_forcing {
                push = ex.clean;
            }
            fed_back.push(push);
            recons.push(recon);
            targets.extend([ex.clean.i, ex.clean.q]);
            labels.push(ex.label as usize);
        }
        let recon = tape.concat_rows(&recons)?;
        let l2 = tape.mse(recon, &Tensor::new(vec![batch.len(), 2], targets)?)?;
        let (l1, l3) = if probs.is_empty() {
            (l2, None)
        } else {
            let y = tape.concat_rows(&probs)?;
            let l3 = tape.cross_entropy(y, &labels)?;
            (tape.add_scaled(l2, l3, cfg.beta)?, Some(l3))
        };
        Ok(BatchGraph {
            l1,
            l2,
            l3,
            fed_back,
        })
    }

    fn read_losses(tape: &Tape<'_>, g: &BatchGraph, batch_id: u64) -> Result<StepLosses, EqError> {
        let l = StepLosses {
            l1: tape.value(g.l1).item(),
            l2: tape.value(g.l2).item(),
            l3: g.l3.map_or(0.0, |v| tape.value(v).item()),
        };
        if !(l.l1.is_finite() && l.l2.is_finite() && l.l3.is_finite()) {
            return Err(EqError::NonFiniteLoss { batch: batch_id });
        }
        Ok(l)
    }

    /// Losses of a batch without touching parameters or histories.
    pub fn losses(
        &self,
        batch: &[&WindowedExample],
        histories: &[Vec<IqSample>],
    ) -> Result<StepLosses, EqError> {
        let mut tape = Tape::new();
        let g = self.batch_graph(&mut tape, batch, histories, Objective::Game)?;
        Self::read_losses(&tape, &g, 0)
    }

    /// Each player's gradient of its own loss at the current parameters:
    /// `[∇E l1, ∇F l2, ∇P l3]`.
    pub fn player_gradients(
        &self,
        batch: &[&WindowedExample],
        histories: &[Vec<IqSample>],
    ) -> Result<(StepLosses, [Vec<Tensor>; 3]), EqError> {
        let mut tape = Tape::new();
        let g = self.batch_graph(&mut tape, batch, histories, Objective::Game)?;
        let losses = Self::read_losses(&tape, &g, 0)?;
        let l3 = g.l3.expect("game objective has a cross-entropy");
        let ge = tape
            .backward_for(g.l1, &[Owner::Encoder])?
            .for_set(&self.encoder);
        let gf = tape
            .backward_for(g.l2, &[Owner::Feedbacker])?
            .for_set(&self.feedbacker);
        let gp = tape
            .backward_for(l3, &[Owner::Processor])?
            .for_set(&self.processor);
        Ok((losses, [ge, gf, gp]))
    }

    /// One step of the follower-first schedule: Processor on `l3` at `λ3`,
    /// Feedbacker on `l2` at `λ2`, Encoder on `l1` at `λ1` with the
    /// followers held fixed. `histories` advance by one slot.
    pub fn train_step(
        &mut self,
        batch: &[&WindowedExample],
        histories: &mut [Vec<IqSample>],
        batch_id: u64,
    ) -> Result<StepLosses, EqError> {
        self.train_step_scaled(batch, histories, batch_id, 1.0)
    }

    /// [`Self::train_step`] with every player's rate multiplied by `scale`.
    pub fn train_step_scaled(
        &mut self,
        batch: &[&WindowedExample],
        histories: &mut [Vec<IqSample>],
        batch_id: u64,
        scale: f64,
    ) -> Result<StepLosses, EqError> {
        self.step_inner(batch, histories, batch_id, scale)
            .map_err(|e| match e {
                // a NaN reaching the softmax guard is a non-finite loss in the making
                EqError::Net(diffnet::NetError::NonFinite(_)) => {
                    EqError::NonFiniteLoss { batch: batch_id }
                }
                e => e,
            })
    }

    fn step_inner(
        &mut self,
        batch: &[&WindowedExample],
        histories: &mut [Vec<IqSample>],
        batch_id: u64,
        scale: f64,
    ) -> Result<StepLosses, EqError> {
        if batch.len() != histories.len() || batch.is_empty() {
            return Err(EqError::Shape(format!(
                "{} examples for {} histories",
                batch.len(),
                histories.len()
            )));
        }
        if self.config.schedule == Schedule::Joint {
            return self.joint_step(batch, histories, batch_id, scale);
        }
        let (losses, fed_back, mut gp, mut gf, ge) = {
            let mut tape = Tape::new();
            let g = self.batch_graph(&mut tape, batch, histories, Objective::Game)?;
            let losses = Self::read_losses(&tape, &g, batch_id)?;
            let l3 = g.l3.expect("game objective has a cross-entropy");
            let gp = tape
                .backward_for(l3, &[Owner::Processor])?
                .for_set(&self.processor);
            let gf = tape
                .backward_for(g.l2, &[Owner::Feedbacker])?
                .for_set(&self.feedbacker);
            let ge = if self.config.leader_refresh {
                None
            } else {
                Some(
                    tape.backward_for(g.l1, &[Owner::Encoder])?
                        .for_set(&self.encoder),
                )
            };
            (losses, g.fed_back, gp, gf, ge)
        };
        let (l1r, l2r, l3r) = (
            self.config.lambda1 * scale,
            self.config.lambda2 * scale,
            self.config.lambda3 * scale,
        );
        let clip = self.config.grad_clip;
        clip_gradients(&mut gp, clip);
        clip_gradients(&mut gf, clip);
        self.processor.sgd_step(&gp, l3r)?;
        self.feedbacker.sgd_step(&gf, l2r)?;
        let mut ge = match ge {
            Some(g) => g,
            None => {
                let mut tape = Tape::new();
                let g = self.batch_graph(&mut tape, batch, histories, Objective::Game)?;
                tape.backward_for(g.l1, &[Owner::Encoder])?
                    .for_set(&self.encoder)
            }
        };
        clip_gradients(&mut ge, clip);
        self.encoder.sgd_step(&ge, l1r)?;
        advance(histories, &fed_back);
        Ok(losses)
    }

    /// All parameters descend `l1` together at one rate.
    fn joint_step(
        &mut self,
        batch: &[&WindowedExample],
        histories: &mut [Vec<IqSample>],
        batch_id: u64,
        scale: f64,
    ) -> Result<StepLosses, EqError> {
        let (losses, fed_back, mut grads) = {
            let mut tape = Tape::new();
            let g = self.batch_graph(&mut tape, batch, histories, Objective::Game)?;
            let losses = Self::read_losses(&tape, &g, batch_id)?;
            let all = tape.backward(g.l1)?;
            let grads = [
                all.for_set(&self.encoder),
                all.for_set(&self.feedbacker),
                all.for_set(&self.processor),
            ];
            (losses, g.fed_back, grads)
        };
        let rate = self.config.joint_rate * scale;
        for (set, g) in [&mut self.encoder, &mut self.feedbacker, &mut self.processor]
            .into_iter()
            .zip(&mut grads)
        {
            clip_gradients(g, self.config.grad_clip);
            set.sgd_step(g, rate)?;
        }
        advance(histories, &fed_back);
        Ok(losses)
    }

    /// Trains over `windows` split into `lanes` contiguous sub-streams, each
    /// with its own zero-initialized history. Returns mean losses per epoch.
    pub fn fit(
        &mut self,
        windows: &[WindowedExample],
        epochs: usize,
    ) -> Result<Vec<StepLosses>, EqError> {
        let (starts, per) = lane_starts(windows.len(), self.config.lanes);
        let mut out = Vec::with_capacity(epochs);
        let mut batch_id = 0u64;
        let steps = (epochs * per) as u64;
        for epoch in 0..epochs {
            let mut hist = vec![vec![IqSample::ZERO; self.config.k]; starts.len()];
            let mut mean = StepLosses::default();
            for t in 0..per {
                let batch: Vec<&WindowedExample> =
                    starts.iter().map(|&s| &windows[s + t]).collect();
                let scale = cosine_scale(batch_id, steps, self.config.rate_floor);
                let l = self.train_step_scaled(&batch, &mut hist, batch_id, scale)?;
                mean.add(&l);
                batch_id += 1;
                if t % 500 == 0 {
                    log::debug!(
                        "epoch {epoch} step {t}/{per}: l1 {:.4} l2 {:.4} l3 {:.4}",
                        l.l1,
                        l.l2,
                        l.l3
                    );
                }
            }
            mean.scale(1.0 / per.max(1) as f64);
            log::info!(
                "epoch {epoch}: l1 {:.4} l2 {:.4} l3 {:.4}",
                mean.l1,
                mean.l2,
                mean.l3
            );
            out.push(mean);
        }
        Ok(out)
    }

    /// Mean losses over `windows` read the same way as [`fit`](Self::fit)
    /// reads them, without updating anything.
    pub fn validation_losses(&self, windows: &[WindowedExample]) -> Result<StepLosses, EqError> {
        let (starts, per) = lane_starts(windows.len(), self.config.lanes);
        let mut hist = vec![vec![IqSample::ZERO; self.config.k]; starts.len()];
        let mut mean = StepLosses::default();
        for t in 0..per {
            let batch: Vec<&WindowedExample> = starts.iter().map(|&s| &windows[s + t]).collect();
            let mut tape = Tape::new();
            let g = self.batch_graph(&mut tape, &batch, &hist, Objective::Game)?;
            mean.add(&Self::read_losses(&tape, &g, t as u64)?);
            advance(&mut hist, &g.fed_back);
        }
        mean.scale(1.0 / per.max(1) as f64);
        Ok(mean)
    }

    /// Encoder and Feedbacker trained on the reconstruction loss alone;
    /// the Processor is left untouched. Returns mean `l2` per epoch.
    pub fn pretrain(
        &mut self,
        windows: &[WindowedExample],
        epochs: usize,
    ) -> Result<Vec<f64>, EqError> {
        let (starts, per) = lane_starts(windows.len(), self.config.lanes);
        let mut out = Vec::with_capacity(epochs);
        let mut batch_id = 0u64;
        for _ in 0..epochs {
            let mut hist = vec![vec![IqSample::ZERO; self.config.k]; starts.len()];
            let mut total = 0.0;
            for t in 0..per {
                let batch: Vec<&WindowedExample> =
                    starts.iter().map(|&s| &windows[s + t]).collect();
                let (l2, fed_back, mut ge, mut gf) = {
                    let mut tape = Tape::new();
                    let g =
                        self.batch_graph(&mut tape, &batch, &hist, Objective::Reconstruction)?;
                    let l = Self::read_losses(&tape, &g, batch_id)?;
                    let grads = tape.backward_for(g.l2, &[Owner::Encoder, Owner::Feedbacker])?;
                    (
                        l.l2,
                        g.fed_back,
                        grads.for_set(&self.encoder),
                        grads.for_set(&self.feedbacker),
                    )
                };
                clip_gradients(&mut ge, self.config.grad_clip);
                clip_gradients(&mut gf, self.config.grad_clip);
                self.encoder.sgd_step(&ge, self.config.lambda1)?;
                self.feedbacker.sgd_step(&gf, self.config.lambda2)?;
                advance(&mut hist, &fed_back);
                total += l2;
                batch_id += 1;
            }
            out.push(total / per.max(1) as f64);
        }
        Ok(out)
    }
}

/// Scales `grads` down to Euclidean norm `max_norm` (no-op for 0).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn advance(histories: &mut [Vec<IqSample>], fed_back: &[IqSample]) {
    for (h, &x) in histories.iter_mut().zip(fed_back) {
        if !h.is_empty() {
            h.pop();
            h.insert(0, x);
        }
    }
}

/// A model plus the feedback history of the stream it is reading.
#[derive(Debug, Clone)]
pub struct MafennState {
    model: MafennModel,
    history: Vec<IqSample>,
}

impl MafennState {
    pub fn new(model: MafennModel) -> Self {
        let k = model.config.k;
        Self {
            model,
            history: vec![IqSample::ZERO; k],
        }
    }

    pub fn model(&self) -> &MafennModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut MafennModel {
        &mut self.model
    }

    /// Feedback slots `1..=K`, most recent first.
    pub fn history(&self) -> &[IqSample] {
        &self.history
    }

    /// One causal step: forward on the current history, then slide the
    /// history by the value fed back.
    pub fn step(&mut self, raw: &[IqSample]) -> Result<Forward, EqError> {
        let f = self.model.forward(raw, &self.history)?;
        let push = match self.model.config.feedback {
            FeedbackSource::Learned => f.recovered,
            FeedbackSource::HardDecision => qpsk_point(f.decision),
        };
        advance(std::slice::from_mut(&mut self.history), &[push]);
        Ok(f)
    }
}

impl SymbolDetector for MafennState {
    fn window(&self) -> usize {
        self.model.config.n
    }

    fn delay(&self) -> usize {
        self.model.config.delay
    }

    fn reset(&mut self) {
        self.history.fill(IqSample::ZERO);
    }

    fn decide(&mut self, raw_window: &[IqSample]) -> Result<usize, EqError> {
        Ok(self.step(raw_window)?.decision)
    }
}
