use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use super::HarnessError;
use crate::channel::ChannelConfig;
use crate::equalizers::{Combine, EqualizerConfig, EqualizerKind};
use crate::kv::{self, KvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelKind {
    Linear,
    #[default]
    Nonlinear,
    /// Single unit tap, noise only.
    Identity,
}

impl ChannelKind {
    pub fn config(self, snr_db: f64, seed: u64) -> ChannelConfig {
        match self {
            ChannelKind::Linear => ChannelConfig::linear(snr_db, seed),
            ChannelKind::Nonlinear => ChannelConfig::nonlinear(snr_db, seed),
            ChannelKind::Identity => ChannelConfig::identity(snr_db, seed),
        }
    }

    /// Index of the strongest tap, the natural decision delay.
    pub fn cursor(self) -> usize {
        let cfg = self.config(0.0, 0);
        let taps = cfg.taps.taps();
        (0..taps.len()).fold(0, |best, i| {
            if taps[i].norm() > taps[best].norm() {
                i
            } else {
                best
            }
        })
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Linear => "linear",
            ChannelKind::Nonlinear => "nonlinear",
            ChannelKind::Identity => "identity",
        })
    }
}

impl FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ChannelKind::Linear),
            "nonlinear" => Ok(ChannelKind::Nonlinear),
            "identity" => Ok(ChannelKind::Identity),
            _ => Err(format!(
                "unknown channel {s:?} (expected linear, nonlinear or identity)"
            )),
        }
    }
}

/// Network sizes the equalizers start from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// Small enough to train 10⁵ symbols on one core in about a minute.
    #[default]
    Desk,
    Full,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(format!("unknown preset {s:?}")),
        }
    }
}

/// Hyperparameter grid over the feedback network.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub cycles: Vec<usize>,
    pub k: Vec<usize>,
    pub combine: Vec<Combine>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.cycles.len() * self.k.len() * self.combine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            cycles: vec![0, 1, 5],
            k: vec![6],
            combine: vec![Combine::Concat],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub channel: ChannelKind,
    pub equalizers: Vec<EqualizerKind>,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub train_symbols: usize,
    pub val_symbols: usize,
    pub test_symbols: usize,
    pub base_seed: u64,
    pub preset: Preset,
    pub grid: Grid,
    /// `eq.<key>` settings applied to every equalizer config.
    pub overrides: IndexMap<String, String>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            channel: ChannelKind::Nonlinear,
            equalizers: vec![
                EqualizerKind::Mafenn,
                EqualizerKind::Mlp,
                EqualizerKind::Rls,
            ],
            snr_db: vec![0.0, 4.0, 8.0, 12.0, 16.0, 20.0, 24.0, 28.0, 30.0],
            trials: 3,
            train_symbols: 100_000,
            val_symbols: 10_000,
            test_symbols: 100_000,
            base_seed: 0,
            preset: Preset::Desk,
            grid: Grid::default(),
            overrides: IndexMap::new(),
        }
    }
}

impl ExperimentPlan {
    /// Parses a `key = value` plan; unset keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self, HarnessError> {
        let mut p = Self::default();
        for (k, v) in kv::parse(text)? {
            p.set(&k, &v)?;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        match key {
            "channel" => self.channel = kv::value(key, v)?,
            "equalizers" => self.equalizers = kv::list(key, v)?,
            "snr_db" => self.snr_db = kv::list(key, v)?,
            "trials" => self.trials = kv::value(key, v)?,
            "train_symbols" => self.train_symbols = kv::value(key, v)?,
            "val_symbols" => self.val_symbols = kv::value(key, v)?,
            "test_symbols" => self.test_symbols = kv::value(key, v)?,
            "base_seed" => self.base_seed = kv::value(key, v)?,
            "preset" => self.preset = kv::value(key, v)?,
            "grid.cycles" => self.grid.cycles = kv::list(key, v)?,
            "grid.k" => self.grid.k = kv::list(key, v)?,
            "grid.combine" => self.grid.combine = kv::list(key, v)?,
            _ => match key.strip_prefix("eq.") {
                Some(name) => {
                    // reject unknown settings now rather than per cell
                    let mut probe = EqualizerConfig::default();
                    if !probe.set(name, v)? {
                        return Err(KvError::Unknown(key.to_string()).into());
                    }
                    self.overrides.insert(name.to_string(), v.to_string());
                }
                None => return Err(KvError::Unknown(key.to_string()).into()),
            },
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("channel", self.channel.to_string());
        put("equalizers", kv::join(&self.equalizers));
        put("snr_db", kv::join(&self.snr_db));
        put("trials", self.trials.to_string());
        put("train_symbols", self.train_symbols.to_string());
        put("val_symbols", self.val_symbols.to_string());
        put("test_symbols", self.test_symbols.to_string());
        put("base_seed", self.base_seed.to_string());
        put("preset", self.preset.to_string());
        put("grid.cycles", kv::join(&self.grid.cycles));
        put("grid.k", kv::join(&self.grid.k));
        put("grid.combine", kv::join(&self.grid.combine));
        for (k, v) in &self.overrides {
            put(&format!("eq.{k}"), v.clone());
        }
        s
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Plan(m.to_string()));
        if self.equalizers.is_empty() {
            return bad("no equalizers");
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| s.is_nan()) {
            return bad("the SNR grid must be non-empty and free of NaN");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.train_symbols == 0 || self.test_symbols == 0 || self.val_symbols == 0 {
            return bad("stream lengths must be positive");
        }
        for &kind in &self.equalizers {
            self.equalizer_config(kind, 0).validate()?;
        }
        Ok(())
    }

    /// Preset sizes with the delay at the channel cursor, then the plan's
    /// overrides, then `kind` and `seed`.
    pub fn equalizer_config(&self, kind: EqualizerKind, seed: u64) -> EqualizerConfig {
        let mut c = match self.preset {
            Preset::Desk => EqualizerConfig::desk(kind),
            Preset::Full => EqualizerConfig::new(kind),
        };
        c.delay = self.channel.cursor();
        for (k, v) in &self.overrides {
            c.set(k, v).expect("overrides are checked when set");
        }
        c.kind = kind;
        c.seed = seed;
        c
    }
}

/// Stable 64-bit seed for `(base, label, snr, trial)`: FNV-1a over the
/// fields followed by the SplitMix64 finalizer.
pub fn derive_seed(base: u64, label: &str, snr_db: f64, trial: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&base.to_le_bytes());
    eat(label.as_bytes());
    eat(&[0xff]);
    eat(&snr_db.to_bits().to_le_bytes());
    eat(&(trial as u64).to_le_bytes());
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
