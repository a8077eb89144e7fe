use std::fmt;
use std::str::FromStr;

use super::EqError;
use crate::kv::{self, KvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EqualizerKind {
    Mafenn,
    Mlp,
    Rls,
    /// The feedback network with no cycles and no feedback window.
    Feedforward,
    /// Feedback window filled with past hard decisions instead of learned
    /// estimates.
    SimpleLoop,
}

impl EqualizerKind {
    pub const ALL: [EqualizerKind; 5] = [
        EqualizerKind::Mafenn,
        EqualizerKind::Mlp,
        EqualizerKind::Rls,
        EqualizerKind::Feedforward,
        EqualizerKind::SimpleLoop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EqualizerKind::Mafenn => "mafenn",
            EqualizerKind::Mlp => "mlp",
            EqualizerKind::Rls => "rls",
            EqualizerKind::Feedforward => "ff",
            EqualizerKind::SimpleLoop => "loop",
        }
    }
}

impl fmt::Display for EqualizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EqualizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EqualizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!("unknown equalizer {s:?} (expected mafenn, mlp, rls, ff or loop)")
            })
    }
}

/// How the feedback window joins the raw window at the Encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Combine {
    /// `(N + K + 1) × 2` input.
    #[default]
    Concat,
    /// Feedback slot `j` overwrites raw row `j`; `N × 2` input.
    Replace,
}

impl Combine {
    pub fn name(self) -> &'static str {
        match self {
            Combine::Concat => "concat",
            Combine::Replace => "replace",
        }
    }
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Combine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(Combine::Concat),
            "replace" => Ok(Combine::Replace),
            _ => Err(format!("unknown combine mode {s:?}")),
        }
    }
}

/// What fills feedback slots `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeedbackSource {
    /// The Feedbacker's recovered symbols.
    #[default]
    Learned,
    /// Constellation points of past hard decisions.
    HardDecision,
}

impl FromStr for FeedbackSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned" => Ok(FeedbackSource::Learned),
            "hard" => Ok(FeedbackSource::HardDecision),
            _ => Err(format!("unknown feedback source {s:?}")),
        }
    }
}

impl fmt::Display for FeedbackSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackSource::Learned => "learned",
            FeedbackSource::HardDecision => "hard",
        })
    }
}

/// How the three players' updates are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// Processor, then Feedbacker, then Encoder, each on its own loss and
    /// rate.
    #[default]
    Stackelberg,
    /// Every parameter descends `l1` at `joint_rate`; the no-game baseline.
    Joint,
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stackelberg" => Ok(Schedule::Stackelberg),
            "joint" => Ok(Schedule::Joint),
            _ => Err(format!("unknown schedule {s:?}")),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Stackelberg => "stackelberg",
            Schedule::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqualizerConfig {
    pub kind: EqualizerKind,
    /// Raw window length N.
    pub n: usize,
    /// Feedback window length K (slots beyond the current one).
    pub k: usize,
    /// Feedback cycles C.
    pub cycles: usize,
    pub latent_dim: usize,
    /// Weight of the cross-entropy in the leader loss `l2 + β·l3`.
    pub beta: f64,
    pub combine: Combine,
    /// Encoder, Feedbacker and Processor learning rates.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub conv_filters: Vec<usize>,
    pub conv_widths: Vec<usize>,
    pub lstm_hidden: usize,
    /// Hidden width of the Feedbacker and Processor.
    pub head_hidden: usize,
    pub delay: usize,
    /// Parallel contiguous sub-streams per training step.
    pub lanes: usize,
    pub epochs: usize,
    /// Rate multiplier at the last training step. Every player's rate
    /// follows a half cosine from 1 down to it; 1 keeps rates constant.
    pub rate_floor: f64,
    /// Reconstruction-only epochs for Encoder and Feedbacker before the main
    /// schedule.
    pub pretrain_epochs: usize,
    /// Fill training history with the clean symbols.
    pub teacher_forcing: bool,
    /// Differentiate through every feedback cycle, not just the last.
    pub full_unroll: bool,
    /// Recompute the leader loss after the followers have stepped.
    pub leader_refresh: bool,
    /// Rescale each player's gradient to at most this Euclidean norm; 0
    /// turns clipping off.
    pub grad_clip: f64,
    pub schedule: Schedule,
    pub joint_rate: f64,
    pub feedback: FeedbackSource,
    pub mlp_hidden: Vec<usize>,
    pub mlp_rate: f64,
    pub rls_taps: usize,
    pub rls_lambda: f64,
    pub rls_delta: f64,
    pub rls_preamble: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for EqualizerConfig {
    fn default() -> Self {
        Self {
            kind: EqualizerKind::Mafenn,
            n: 12,
            k: 6,
            cycles: 5,
            latent_dim: 128,
            beta: 1.0,
            combine: Combine::Concat,
            lambda1: 0.02,
            lambda2: 0.03,
            lambda3: 0.05,
            conv_filters: vec![16, 32, 64],
            conv_widths: vec![3, 3, 3],
            lstm_hidden: 64,
            head_hidden: 64,
            delay: 4,
            lanes: 16,
            epochs: 1,
            rate_floor: 0.02,
            pretrain_epochs: 0,
            teacher_forcing: false,
            full_unroll: false,
            leader_refresh: false,
            grad_clip: 0.0,
            schedule: Schedule::Stackelberg,
            joint_rate: 0.03,
            feedback: FeedbackSource::Learned,
            mlp_hidden: vec![64, 64, 32],
            mlp_rate: 0.05,
            rls_taps: 16,
            rls_lambda: 0.999,
            rls_delta: 100.0,
            rls_preamble: 2000,
            seed: 0,
        }
    }
}

impl EqualizerConfig {
    pub fn new(kind: EqualizerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Narrower Encoder for single-core budgets, with three passes over
    /// the shorter training stream.
    pub fn desk(kind: EqualizerKind) -> Self {
        Self {
            kind,
            conv_filters: vec![8, 16, 16],
            lstm_hidden: 32,
            head_hidden: 32,
            epochs: 3,
            ..Self::default()
        }
    }

    /// The configuration the network is actually built with: the
    /// feedforward variant has no cycles and no window, the simple loop has
    /// no cycles and hard-decision history.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        match self.kind {
            EqualizerKind::Feedforward => {
                c.cycles = 0;
                c.k = 0;
                c.feedback = FeedbackSource::Learned;
            }
            EqualizerKind::SimpleLoop => {
                c.cycles = 0;
                c.feedback = FeedbackSource::HardDecision;
            }
            _ => {}
        }
        c
    }

    /// Rows of the Encoder input.
    pub fn input_rows(&self) -> usize {
        match self.combine {
            Combine::Concat => self.n + self.k + 1,
            Combine::Replace => self.n,
        }
    }

    pub fn validate(&self) -> Result<(), EqError> {
        let bad = |m: String| Err(EqError::Config(m));
        if self.n < 1 {
            return bad("N must be at least 1".into());
        }
        if !(self.lambda3 > self.lambda2 && self.lambda2 > self.lambda1 && self.lambda1 > 0.0) {
            return bad(format!(
                "need λ3 > λ2 > λ1 > 0, got ({}, {}, {})",
                self.lambda1, self.lambda2, self.lambda3
            ));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!(
                "β must be finite and non-negative, got {}",
                self.beta
            ));
        }
        if self.conv_filters.len() != self.conv_widths.len() {
            return bad("conv_filters and conv_widths differ in length".into());
        }
        if self.conv_widths.contains(&0) || self.conv_filters.contains(&0) {
            return bad("convolution widths and filter counts must be positive".into());
        }
        let shrink: usize = self.conv_widths.iter().map(|w| w - 1).sum();
        let rows = self.effective().input_rows();
        if rows <= shrink {
            return bad(format!(
                "{rows}-row input is too short for convolution widths {:?}",
                self.conv_widths
            ));
        }
        if self.latent_dim == 0 || self.lstm_hidden == 0 || self.head_hidden == 0 || self.lanes == 0
        {
            return bad("layer sizes and lane count must be positive".into());
        }
        if self.mlp_hidden.len() != 3 || self.mlp_hidden.contains(&0) {
            return bad("the MLP needs three positive hidden widths".into());
        }
        if !(0.0..=1.0).contains(&self.rate_floor) {
            return bad(format!(
                "rate_floor must lie in [0, 1], got {}",
                self.rate_floor
            ));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!(
                "grad_clip must be finite and non-negative, got {}",
                self.grad_clip
            ));
        }
        if !(self.joint_rate > 0.0 && self.joint_rate.is_finite()) {
            return bad("joint_rate must be positive".into());
        }
        if !(self.mlp_rate > 0.0 && self.mlp_rate.is_finite()) {
            return bad("mlp_rate must be positive".into());
        }
        if self.rls_taps == 0
            || !(self.rls_lambda > 0.0 && self.rls_lambda <= 1.0)
            || !(self.rls_delta > 0.0)
        {
            return bad("RLS needs taps ≥ 1, 0 < λ ≤ 1 and δ > 0".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("equalizer", self.kind.to_string());
        put("n", self.n.to_string());
        put("k", self.k.to_string());
        put("cycles", self.cycles.to_string());
        put("latent_dim", self.latent_dim.to_string());
        put("beta", self.beta.to_string());
        put("combine", self.combine.to_string());
        put("lambda1", self.lambda1.to_string());
        put("lambda2", self.lambda2.to_string());
        put("lambda3", self.lambda3.to_string());
        put("conv_filters", kv::join(&self.conv_filters));
        put("conv_widths", kv::join(&self.conv_widths));
        put("lstm_hidden", self.lstm_hidden.to_string());
        put("head_hidden", self.head_hidden.to_string());
        put("delay", self.delay.to_string());
        put("lanes", self.lanes.to_string());
        put("epochs", self.epochs.to_string());
        put("rate_floor", self.rate_floor.to_string());
        put("pretrain_epochs", self.pretrain_epochs.to_string());
        put("teacher_forcing", self.teacher_forcing.to_string());
        put("full_unroll", self.full_unroll.to_string());
        put("leader_refresh", self.leader_refresh.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("schedule", self.schedule.to_string());
        put("joint_rate", self.joint_rate.to_string());
        put("feedback", self.feedback.to_string());
        put("mlp_hidden", kv::join(&self.mlp_hidden));
        put("mlp_rate", self.mlp_rate.to_string());
        put("rls_taps", self.rls_taps.to_string());
        put("rls_lambda", self.rls_lambda.to_string());
        put("rls_delta", self.rls_delta.to_string());
        put("rls_preamble", self.rls_preamble.to_string());
        put("seed", self.seed.to_string());
        s
    }

    /// Sets one field from its sidecar key. Returns `Ok(false)` for keys
    /// that are not equalizer settings.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool, KvError> {
        match key {
            "equalizer" => self.kind = kv::value(key, v)?,
            "n" => self.n = kv::value(key, v)?,
            "k" => self.k = kv::value(key, v)?,
            "cycles" => self.cycles = kv::value(key, v)?,
            "latent_dim" => self.latent_dim = kv::value(key, v)?,
            "beta" => self.beta = kv::value(key, v)?,
            "combine" => self.combine = kv::value(key, v)?,
            "lambda1" => self.lambda1 = kv::value(key, v)?,
            "lambda2" => self.lambda2 = kv::value(key, v)?,
            "lambda3" => self.lambda3 = kv::value(key, v)?,
            "conv_filters" => self.conv_filters = kv::list(key, v)?,
            "conv_widths" => self.conv_widths = kv::list(key, v)?,
            "lstm_hidden" => self.lstm_hidden = kv::value(key, v)?,
            "head_hidden" => self.head_hidden = kv::value(key, v)?,
            "delay" => self.delay = kv::value(key, v)?,
            "lanes" => self.lanes = kv::value(key, v)?,
            "epochs" => self.epochs = kv::value(key, v)?,
            "rate_floor" => self.rate_floor = kv::value(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = kv::value(key, v)?,
            "teacher_forcing" => self.teacher_forcing = kv::value(key, v)?,
            "full_unroll" => self.full_unroll = kv::value(key, v)?,
            "leader_refresh" => self.leader_refresh = kv::value(key, v)?,
            "grad_clip" => self.grad_clip = kv::value(key, v)?,
            "schedule" => self.schedule = kv::value(key, v)?,
            "joint_rate" => self.joint_rate = kv::value(key, v)?,
            "feedback" => self.feedback = kv::value(key, v)?,
            "mlp_hidden" => self.mlp_hidden = kv::list(key, v)?,
            "mlp_rate" => self.mlp_rate = kv::value(key, v)?,
            "rls_taps" => self.rls_taps = kv::value(key, v)?,
            "rls_lambda" => self.rls_lambda = kv::value(key, v)?,
            "rls_delta" => self.rls_delta = kv::value(key, v)?,
            "rls_preamble" => self.rls_preamble = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self, EqError> {
        let mut c = Self::default();
        for (k, v) in kv::parse(text)? {
            if !c.set(&k, &v)? {
                return Err(KvError::Unknown(k).into());
            }
        }
        c.validate()?;
        Ok(c)
    }
}
