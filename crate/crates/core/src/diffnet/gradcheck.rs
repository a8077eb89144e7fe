use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NetError, Owner, ParamSet, Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(1e−8, |a| + |n|)` over every scalar parameter.
    pub max_rel_err: f64,
    /// (set index, flat index) of the worst scalar.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks the gradient of the scalar built by `build` with respect to every
/// scalar in `sets`, using central differences with step `eps`.
///
/// `build` receives a fresh tape and the registered handles of each set (in
/// order) and must return a scalar loss.
pub fn grad_check<F>(sets: &[ParamSet], eps: f64, build: F) -> Result<GradCheckReport, NetError>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Vec<Var>]) -> Result<Var, NetError>,
{
    if !(eps > 0.0) {
        return Err(NetError::Shape {
            op: "grad_check",
            detail: format!("step must be positive, got {eps}"),
        });
    }
    let eval = |sets: &[ParamSet]| -> Result<f64, NetError> {
        let mut tape = Tape::new();
        let handles: Vec<Vec<Var>> = sets.iter().map(|s| tape.register(s)).collect();
        let loss = build(&mut tape, &handles)?;
        Ok(tape.value(loss).item())
    };

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let handles: Vec<Vec<Var>> = sets.iter().map(|s| tape.register(s)).collect();
        let loss = build(&mut tape, &handles)?;
        let grads = tape.backward(loss)?;
        sets.iter()
            .map(|s| {
                grads
                    .for_set(s)
                    .into_iter()
                    .flat_map(|t| t.into_data())
                    .collect()
            })
            .collect()
    };

    let mut work: Vec<ParamSet> = sets.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (si, set) in sets.iter().enumerate() {
        let base = set.flatten();
        for j in 0..base.len() {
            let mut flat = base.clone();
            flat[j] = base[j] + eps;
            work[si].unflatten(&flat)?;
            let plus = eval(&work)?;
            flat[j] = base[j] - eps;
            work[si].unflatten(&flat)?;
            let minus = eval(&work)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[si][j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (si, j);
            }
            report.checked += 1;
        }
        work[si].unflatten(&base)?;
    }
    Ok(report)
}

/// One entry of [`gradcheck_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub seed: u64,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl GradCheckCase {
    pub fn pass(&self) -> bool {
        self.report.max_rel_err < self.tolerance
    }
}

/// Tolerance for single layers and losses.
pub const LAYER_TOLERANCE: f64 = 1e-5;
/// Tolerance for compositions through an LSTM.
pub const LSTM_TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0))
}

fn set_of(owner: Owner, tensors: Vec<(&str, Tensor)>) -> Result<ParamSet, NetError> {
    let mut s = ParamSet::new(owner);
    for (n, t) in tensors {
        s.insert(n, t)?;
    }
    Ok(s)
}

/// Checks every layer and loss on random data drawn from `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckCase>, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut case = |name, tolerance, report| {
        out.push(GradCheckCase {
            name,
            seed,
            tolerance,
            report,
        })
    };

    let p = set_of(
        Owner::Processor,
        vec![
            ("w", uniform(&mut rng, &[3, 4], 1.0)),
            ("b", uniform(&mut rng, &[3], 1.0)),
        ],
    )?;
    let x = uniform(&mut rng, &[4], 1.0);
    let r = grad_check(std::slice::from_ref(&p), 1e-5, |tape, h| {
        let xv = tape.constant(x.clone());
        let y = tape.linear(xv, h[0][0], h[0][1])?;
        tape.half_sq_norm(y)
    })?;
    case("linear", LAYER_TOLERANCE, r);

    let p = set_of(
        Owner::Encoder,
        vec![
            ("k", uniform(&mut rng, &[3, 3, 2], 1.0)),
            ("b", uniform(&mut rng, &[3], 1.0)),
        ],
    )?;
    let x = uniform(&mut rng, &[7, 2], 1.0);
    let r = grad_check(std::slice::from_ref(&p), 1e-5, |tape, h| {
        let xv = tape.constant(x.clone());
        let y = tape.conv1d(xv, h[0][0], h[0][1])?;
        tape.half_sq_norm(y)
    })?;
    case("conv1d", LAYER_TOLERANCE, r);

    // pre-activations kept at least 0.1 from the kink
    let a = Tensor::from_fn(&[6], |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let p = set_of(Owner::Encoder, vec![("a", a)])?;
    let w = uniform(&mut rng, &[2, 6], 1.0);
    let r = grad_check(std::slice::from_ref(&p), 1e-5, |tape, h| {
        let y = tape.relu(h[0][0])?;
        let wv = tape.constant(w.clone());
        let b = tape.constant(Tensor::zeros(&[2]));
        let z = tape.linear(y, wv, b)?;
        tape.half_sq_norm(z)
    })?;
    case("relu", LAYER_TOLERANCE, r);

    let p = set_of(
        Owner::Feedbacker,
        vec![
            ("w", uniform(&mut rng, &[2, 5], 1.0)),
            ("b", uniform(&mut rng, &[2], 1.0)),
        ],
    )?;
    let x = uniform(&mut rng, &[5], 1.0);
    let target = uniform(&mut rng, &[1, 2], 1.0);
    let r = grad_check(std::slice::from_ref(&p), 1e-4, |tape, h| {
        let xv = tape.constant(x.clone());
        let y = tape.linear(xv, h[0][0], h[0][1])?;
        tape.mse(y, &target)
    })?;
    case("linear+mse", LAYER_TOLERANCE, r);

    let p = set_of(
        Owner::Processor,
        vec![
            ("w", uniform(&mut rng, &[4, 3], 1.0)),
            ("b", uniform(&mut rng, &[4], 1.0)),
        ],
    )?;
    let xs = uniform(&mut rng, &[3, 3], 1.0);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let r = grad_check(std::slice::from_ref(&p), 1e-5, |tape, h| {
        let mut rows = Vec::new();
        for i in 0..3 {
            let xv = tape.constant(Tensor::new(vec![3], xs.data()[3 * i..3 * i + 3].to_vec())?);
            let logits = tape.linear(xv, h[0][0], h[0][1])?;
            rows.push(tape.softmax(logits)?);
        }
        let y = tape.concat_rows(&rows)?;
        tape.cross_entropy(y, &labels)
    })?;
    case("softmax+cross_entropy", LAYER_TOLERANCE, r);

    let (n_in, hidden, steps) = (2, 4, 5);
    let enc = set_of(
        Owner::Encoder,
        vec![
            ("w_ih", uniform(&mut rng, &[4 * hidden, n_in], 0.7)),
            ("w_hh", uniform(&mut rng, &[4 * hidden, hidden], 0.7)),
            ("b", uniform(&mut rng, &[4 * hidden], 0.7)),
        ],
    )?;
    let head = set_of(
        Owner::Processor,
        vec![
            ("w", uniform(&mut rng, &[4, hidden], 1.0)),
            ("b", uniform(&mut rng, &[4], 1.0)),
        ],
    )?;
    let xs: Vec<Tensor> = (0..steps)
        .map(|_| uniform(&mut rng, &[n_in], 1.0))
        .collect();
    let labels = [rng.random_range(0..4usize)];
    let r = grad_check(&[enc, head], 1e-5, |tape, h| {
        let mut state = tape.constant(Tensor::zeros(&[2 * hidden]));
        for x in &xs {
            let xv = tape.constant(x.clone());
            state = tape.lstm_step(xv, state, h[0][0], h[0][1], h[0][2])?;
        }
        let h_last = tape.slice(state, 0, hidden)?;
        let logits = tape.linear(h_last, h[1][0], h[1][1])?;
        let y = tape.softmax(logits)?;
        tape.cross_entropy(y, &labels)
    })?;
    case("lstm+softmax+cross_entropy", LSTM_TOLERANCE, r);
    Ok(out)
}
