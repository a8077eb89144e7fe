use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::EqualizerConfig;
use super::{argmax, cosine_scale, lane_starts, EqError, SymbolDetector};
use crate::channel::{IqSample, WindowedExample};
use crate::diffnet::{self, Owner, ParamSet, Tape, Tensor, Var};

/// Feedforward classifier on the flattened raw window: ReLU hidden layers
/// then a softmax over the four classes.
#[derive(Debug, Clone)]
pub struct MlpModel {
    config: EqualizerConfig,
    params: ParamSet,
}

impl MlpModel {
    pub fn new(config: &EqualizerConfig) -> Result<Self, EqError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new(Owner::Processor);
        let mut n_in = 2 * config.n;
        let widths = config.mlp_hidden.iter().copied().chain(std::iter::once(4));
        for (i, n_out) in widths.enumerate() {
            let a = (6.0 / (n_in + n_out) as f64).sqrt();
            params.insert(
                format!("fc{i}.weight"),
                Tensor::from_fn(&[n_out, n_in], |_| rng.random_range(-a..a)),
            )?;
            params.insert(format!("fc{i}.bias"), Tensor::zeros(&[n_out]))?;
            n_in = n_out;
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &EqualizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn probs<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        w: &[Var],
        raw: &[IqSample],
    ) -> Result<Var, EqError> {
        if raw.len() != self.config.n {
            return Err(EqError::Shape(format!(
                "raw window {} (N = {})",
                raw.len(),
                self.config.n
            )));
        }
        let x = Tensor::vector(raw.iter().flat_map(|s| [s.i, s.q]).collect());
        let mut a = tape.constant(x);
        let layers = w.len() / 2;
        for l in 0..layers {
            a = tape.linear(a, w[2 * l], w[2 * l + 1])?;
            if l + 1 < layers {
                a = tape.relu(a)?;
            }
        }
        Ok(tape.softmax(a)?)
    }

    /// Class probabilities for one window.
    pub fn predict(&self, raw: &[IqSample]) -> Result<[f64; 4], EqError> {
        let mut tape = Tape::new();
        let w = tape.register(&self.params);
        let y = self.probs(&mut tape, &w, raw)?;
        let p = tape.value(y).data();
        Ok([p[0], p[1], p[2], p[3]])
    }

    /// Plain SGD on cross-entropy over lane-parallel batches. Returns mean
    /// loss per epoch.
    pub fn fit(&mut self, windows: &[WindowedExample], epochs: usize) -> Result<Vec<f64>, EqError> {
        let (starts, per) = lane_starts(windows.len(), self.config.lanes);
        let mut out = Vec::with_capacity(epochs);
        let mut batch_id = 0u64;
        let steps = (epochs * per) as u64;
        for _ in 0..epochs {
            let mut total = 0.0;
            for t in 0..per {
                let (loss, grads) = {
                    let mut tape = Tape::new();
                    let w = tape.register(&self.params);
                    let mut ys = Vec::with_capacity(starts.len());
                    let mut labels = Vec::with_capacity(starts.len());
                    for &s in &starts {
                        let ex = &windows[s + t];
                        ys.push(self.probs(&mut tape, &w, &ex.raw_window)?);
                        labels.push(ex.label as usize);
                    }
                    let y = tape.concat_rows(&ys)?;
                    let l = tape.cross_entropy(y, &labels)?;
                    let loss = tape.value(l).item();
                    if !loss.is_finite() {
                        return Err(EqError::NonFiniteLoss { batch: batch_id });
                    }
                    (loss, tape.backward(l)?.for_set(&self.params))
                };
                let scale = cosine_scale(batch_id, steps, self.config.rate_floor);
                self.params.sgd_step(&grads, self.config.mlp_rate * scale)?;
                total += loss;
                batch_id += 1;
            }
            out.push(total / per.max(1) as f64);
        }
        Ok(out)
    }

    pub fn save_weights<W: Write>(&self, w: W) -> std::io::Result<()> {
        diffnet::save_param_sets(w, &[&self.params])
    }

    pub fn load_weights<R: Read>(config: &EqualizerConfig, r: R) -> Result<Self, EqError> {
        let mut m = Self::new(config)?;
        diffnet::load_param_sets(r, &mut [&mut m.params])?;
        Ok(m)
    }
}

impl SymbolDetector for MlpModel {
    fn window(&self) -> usize {
        self.config.n
    }

    fn delay(&self) -> usize {
        self.config.delay
    }

    fn reset(&mut self) {}

    fn decide(&mut self, raw_window: &[IqSample]) -> Result<usize, EqError> {
        Ok(argmax(&self.predict(raw_window)?))
    }
}
