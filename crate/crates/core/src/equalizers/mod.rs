//! Equalizers: the three-agent feedback network and its baselines.
//!
//! Every equalizer estimates the symbol sent `delay` slots before the newest
//! received sample. The reference channel's strongest path sits four taps
//! back, so a zero delay would ask for a symbol the window barely sees.

mod config;
mod mafenn;
mod mlp;
mod rls;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::channel::{
    make_windows_delayed, raw_window_at, ChannelError, IqSample, TransmissionRecord,
};
use crate::diffnet::NetError;
use crate::kv::KvError;

pub use config::{Combine, EqualizerConfig, EqualizerKind, FeedbackSource, Schedule};
pub use mafenn::{build_input, clip_gradients, Forward, MafennModel, MafennState, StepLosses};
pub use mlp::MlpModel;
pub use rls::RlsState;

#[derive(Debug, Error)]
pub enum EqError {
    #[error("invalid equalizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: u64 },
    #[error("input shape: {0}")]
    Shape(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Index of the largest probability; ties go to the smallest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// A causal symbol-by-symbol detector.
pub trait SymbolDetector {
    /// Received samples consumed per decision (newest first).
    fn window(&self) -> usize;

    /// How many slots the decided symbol lags the newest sample.
    fn delay(&self) -> usize;

    /// Clears any per-stream state (feedback history).
    fn reset(&mut self);

    /// Class of the symbol sent `delay` slots before `raw_window[0]`.
    fn decide(&mut self, raw_window: &[IqSample]) -> Result<usize, EqError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerReport {
    pub errors: u64,
    pub n: u64,
    pub ser: f64,
    pub decisions: Vec<u8>,
}

/// Fraction of mismatched decisions; `n = 0` gives `NaN`.
pub fn ser_from_decisions(decisions: &[u8], labels: &[u8]) -> f64 {
    let n = decisions.len().min(labels.len());
    if n == 0 {
        return f64::NAN;
    }
    let errors = decisions.iter().zip(labels).filter(|(a, b)| a != b).count();
    errors as f64 / n as f64
}

/// Runs the detector over the stream from a reset state and scores every
/// slot that has a target (`delay..L`).
pub fn evaluate_ser<D: SymbolDetector + ?Sized>(
    model: &mut D,
    record: &TransmissionRecord,
) -> Result<SerReport, EqError> {
    let delay = model.delay();
    let n = model.window();
    if record.len() <= delay {
        return Err(EqError::Shape(format!(
            "stream of {} symbols is shorter than the decision delay {delay}",
            record.len()
        )));
    }
    model.reset();
    let mut decisions = Vec::with_capacity(record.len() - delay);
    for i in delay..record.len() {
        let w = raw_window_at(&record.received, i, n);
        decisions.push(model.decide(&w)? as u8);
    }
    let labels = &record.labels[..record.len() - delay];
    let errors = decisions.iter().zip(labels).filter(|(a, b)| a != b).count() as u64;
    let n = decisions.len() as u64;
    Ok(SerReport {
        errors,
        n,
        ser: errors as f64 / n as f64,
        decisions,
    })
}

/// A trained equalizer of any kind.
#[derive(Debug, Clone)]
pub enum Equalizer {
    Mafenn(MafennState),
    Mlp(MlpModel),
    Rls(RlsState),
}

impl Equalizer {
    /// Trains the configured kind on `train`.
    pub fn train(config: &EqualizerConfig, train: &TransmissionRecord) -> Result<Self, EqError> {
        config.validate()?;
        match config.kind {
            EqualizerKind::Rls => {
                let mut st = RlsState::from_config(config)?;
                st.train_on(train, config.rls_preamble)?;
                Ok(Equalizer::Rls(st))
            }
            EqualizerKind::Mlp => {
                let mut m = MlpModel::new(config)?;
                let windows = make_windows_delayed(train, config.n, 0, config.delay)?;
                m.fit(&windows, config.epochs)?;
                Ok(Equalizer::Mlp(m))
            }
            EqualizerKind::Mafenn | EqualizerKind::Feedforward | EqualizerKind::SimpleLoop => {
                let cfg = config.effective();
                let mut m = MafennModel::new(&cfg)?;
                let windows = make_windows_delayed(train, cfg.n, cfg.k, cfg.delay)?;
                if cfg.pretrain_epochs > 0 {
                    m.pretrain(&windows, cfg.pretrain_epochs)?;
                }
                m.fit(&windows, cfg.epochs)?;
                Ok(Equalizer::Mafenn(MafennState::new(m)))
            }
        }
    }

    pub fn config(&self) -> &EqualizerConfig {
        match self {
            Equalizer::Mafenn(s) => s.model().config(),
            Equalizer::Mlp(m) => m.config(),
            Equalizer::Rls(r) => r.config(),
        }
    }

    /// Writes `<stem>.mafw` and the `<stem>.cfg` sidecar.
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf), EqError> {
        let (weights, sidecar) = checkpoint_paths(stem);
        let mut w = BufWriter::new(File::create(&weights)?);
        match self {
            Equalizer::Mafenn(s) => s.model().save_weights(&mut w)?,
            Equalizer::Mlp(m) => m.save_weights(&mut w)?,
            Equalizer::Rls(r) => r.save_weights(&mut w)?,
        }
        w.flush()?;
        std::fs::write(&sidecar, self.config().to_kv())?;
        Ok((weights, sidecar))
    }

    pub fn load(stem: &Path) -> Result<Self, EqError> {
        let (weights, sidecar) = checkpoint_paths(stem);
        let config = EqualizerConfig::from_kv(&std::fs::read_to_string(&sidecar)?)?;
        let r = BufReader::new(File::open(&weights)?);
        Ok(match config.kind {
            EqualizerKind::Rls => Equalizer::Rls(RlsState::load_weights(&config, r)?),
            EqualizerKind::Mlp => Equalizer::Mlp(MlpModel::load_weights(&config, r)?),
            _ => Equalizer::Mafenn(MafennState::new(MafennModel::load_weights(
                &config.effective(),
                r,
            )?)),
        })
    }
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("mafw"), stem.with_extension("cfg"))
}

impl SymbolDetector for Equalizer {
    fn window(&self) -> usize {
        match self {
            Equalizer::Mafenn(s) => s.window(),
            Equalizer::Mlp(m) => m.window(),
            Equalizer::Rls(r) => r.window(),
        }
    }

    fn delay(&self) -> usize {
        self.config().delay
    }

    fn reset(&mut self) {
        match self {
            Equalizer::Mafenn(s) => s.reset(),
            Equalizer::Mlp(m) => m.reset(),
            Equalizer::Rls(r) => r.reset(),
        }
    }

    fn decide(&mut self, raw_window: &[IqSample]) -> Result<usize, EqError> {
        match self {
            Equalizer::Mafenn(s) => s.decide(raw_window),
            Equalizer::Mlp(m) => m.decide(raw_window),
            Equalizer::Rls(r) => r.decide(raw_window),
        }
    }
}

/// Splits `len` items into `lanes` contiguous runs of equal length; the
/// remainder is dropped.
/// Half-cosine rate multiplier: 1 at `step` 0, `floor` at `total − 1`.
pub fn cosine_scale(step: u64, total: u64, floor: f64) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub(crate) fn lane_starts(len: usize, lanes: usize) -> (Vec<usize>, usize) {
    let lanes = lanes.max(1).min(len.max(1));
    let per = len / lanes;
    ((0..lanes).map(|b| b * per).collect(), per)
}
