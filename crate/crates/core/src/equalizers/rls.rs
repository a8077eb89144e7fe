use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::config::{EqualizerConfig, EqualizerKind};
use super::{EqError, SymbolDetector};
use crate::channel::{qpsk_class, raw_window_at, IqSample, TransmissionRecord};
use crate::diffnet::{read_tensors, write_tensors, Tensor};

const WEIGHTS_NAME: &str = "rls.weights";

/// Exponentially weighted recursive least squares with complex taps.
#[derive(Debug, Clone)]
pub struct RlsState {
    config: EqualizerConfig,
    w: DVector<Complex64>,
    p: DMatrix<Complex64>,
    reinits: u64,
}

fn to_complex(s: &IqSample) -> Complex64 {
    Complex64::new(s.i, s.q)
}

impl RlsState {
    /// Zero taps and `P = I/δ`, so `δ` weighs a ridge penalty `δ·λⁿ·‖w‖²`.
    pub fn new(n_taps: usize, lambda: f64, delta: f64) -> Result<Self, EqError> {
        let mut config = EqualizerConfig::new(EqualizerKind::Rls);
        config.rls_taps = n_taps;
        config.rls_lambda = lambda;
        config.rls_delta = delta;
        Self::from_config(&config)
    }

    pub fn from_config(config: &EqualizerConfig) -> Result<Self, EqError> {
        let (n, lambda, delta) = (config.rls_taps, config.rls_lambda, config.rls_delta);
        if n == 0 || !(lambda > 0.0 && lambda <= 1.0) || !(delta > 0.0 && delta.is_finite()) {
            return Err(EqError::Config(format!(
                "rls needs taps ≥ 1, 0 < λ ≤ 1, δ > 0 (got {n}, {lambda}, {delta})"
            )));
        }
        Ok(Self {
            config: config.clone(),
            w: DVector::zeros(n),
            p: DMatrix::identity(n, n) * Complex64::new(1.0 / delta, 0.0),
            reinits: 0,
        })
    }

    pub fn config(&self) -> &EqualizerConfig {
        &self.config
    }

    pub fn weights(&self) -> &DVector<Complex64> {
        &self.w
    }

    /// Inverse-correlation estimate.
    pub fn inverse_correlation(&self) -> &DMatrix<Complex64> {
        &self.p
    }

    /// Times `P` was reset after losing positive definiteness.
    pub fn reinit_count(&self) -> u64 {
        self.reinits
    }

    fn input(&self, window: &[IqSample]) -> Result<DVector<Complex64>, EqError> {
        if window.len() < self.w.len() {
            return Err(EqError::Shape(format!(
                "window {} shorter than {} taps",
                window.len(),
                self.w.len()
            )));
        }
        Ok(DVector::from_iterator(
            self.w.len(),
            window.iter().map(to_complex),
        ))
    }

    /// Filter output `wᴴu`.
    pub fn filter(&self, window: &[IqSample]) -> Result<IqSample, EqError> {
        let y = self.w.dotc(&self.input(window)?);
        Ok(IqSample::new(y.re, y.im))
    }

    /// One gain / inverse-correlation recursion toward `desired`.
    pub fn update(&mut self, window: &[IqSample], desired: IqSample) -> Result<(), EqError> {
        let u = self.input(window)?;
        let lambda = self.config.rls_lambda;
        let pu = &self.p * &u;
        let denom = lambda + u.dotc(&pu).re;
        if !(denom > 0.0 && denom.is_finite()) {
            self.reinitialize("gain denominator not positive");
            return Ok(());
        }
        let k = &pu / Complex64::new(denom, 0.0);
        let e = to_complex(&desired) - self.w.dotc(&u);
        self.w += &k * e.conj();
        // P ← (P − k·(Pu)ᴴ) / λ, using Hermitian P so uᴴP = (Pu)ᴴ
        self.p -= &k * pu.adjoint();
        self.p /= Complex64::new(lambda, 0.0);
        let ph = self.p.adjoint();
        self.p = (&self.p + ph) * Complex64::new(0.5, 0.0);
        if !self.is_positive_definite() {
            self.reinitialize("inverse correlation lost positive definiteness");
        }
        Ok(())
    }

    fn is_positive_definite(&self) -> bool {
        self.p.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            && (0..self.p.nrows()).all(|i| self.p[(i, i)].re > 0.0)
            && self.p.clone().cholesky().is_some()
    }

    fn reinitialize(&mut self, why: &str) {
        let n = self.w.len();
        self.p = DMatrix::identity(n, n) * Complex64::new(1.0 / self.config.rls_delta, 0.0);
        self.reinits += 1;
        log::warn!("rls: {why}; P reset to I/δ (reset #{})", self.reinits);
    }

    /// Adapts on the first `preamble` targets of `train` (symbol `i − delay`
    /// from the window ending at `i`), after which the taps stay frozen.
    pub fn train_on(&mut self, train: &TransmissionRecord, preamble: usize) -> Result<(), EqError> {
        let delay = self.config.delay;
        let end = train.len().min(preamble.saturating_add(delay));
        for i in delay..end {
            let u = raw_window_at(&train.received, i, self.w.len());
            self.update(&u, train.clean[i - delay])?;
        }
        Ok(())
    }

    pub fn save_weights<W: Write>(&self, w: W) -> std::io::Result<()> {
        let data = self.w.iter().flat_map(|z| [z.re, z.im]).collect();
        let t = Tensor::new(vec![self.w.len(), 2], data).expect("two columns per tap");
        write_tensors(w, [(WEIGHTS_NAME, &t)])
    }

    /// Restores the taps; `P` restarts at `I/δ`.
    pub fn load_weights<R: Read>(config: &EqualizerConfig, r: R) -> Result<Self, EqError> {
        let mut st = Self::from_config(config)?;
        let tensors = read_tensors(r)?;
        let (_, t) = tensors
            .iter()
            .find(|(n, _)| n == WEIGHTS_NAME)
            .ok_or_else(|| EqError::Checkpoint(format!("missing tensor {WEIGHTS_NAME}")))?;
        if t.shape() != [st.w.len(), 2] {
            return Err(EqError::Checkpoint(format!(
                "{WEIGHTS_NAME} has shape {:?}",
                t.shape()
            )));
        }
        for (w, c) in st.w.iter_mut().zip(t.data().chunks_exact(2)) {
            *w = Complex64::new(c[0], c[1]);
        }
        Ok(st)
    }
}

impl SymbolDetector for RlsState {
    fn window(&self) -> usize {
        self.w.len()
    }

    fn delay(&self) -> usize {
        self.config.delay
    }

    fn reset(&mut self) {}

    fn decide(&mut self, raw_window: &[IqSample]) -> Result<usize, EqError> {
        Ok(qpsk_class(self.filter(raw_window)?))
    }
}
