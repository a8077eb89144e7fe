//! Multi-agent feedback equalization lab.
//!
//! * [`channel`]: QPSK over the reference multipath channel with optional
//!   amplifier nonlinearity and AWGN.
//! * [`diffnet`]: the small reverse-mode network kernel.
//! * [`game`]: three-player Stackelberg learning dynamics with
//!   implicit-function-theorem response Jacobians.
//! * [`equalizers`]: the Encoder/Feedbacker/Processor equalizer and its
//!   baselines (RLS, MLP, feedforward and simple-loop variants).
//! * [`harness`]: seeded SNR sweeps, grid search, result tables and the
//!   game-dynamics verification report.

pub mod channel;
pub mod diffnet;
pub mod equalizers;
pub mod game;
pub mod harness;
pub mod kv;

pub use channel::{ChannelConfig, ChannelTaps, IqSample, TransmissionRecord, WindowedExample};
pub use diffnet::{Owner, ParamSet, Tape, Tensor};
pub use equalizers::{Equalizer, EqualizerConfig, EqualizerKind};
pub use game::{JointPoint, LearnRates, ThreePlayerGame};
pub use harness::{ExperimentPlan, SweepResult};
