//! Fixtures shared by the benchmarks.

use mafenn_core::channel::{make_windows_delayed, transmit, ChannelConfig, TransmissionRecord};
use mafenn_core::equalizers::{EqualizerConfig, EqualizerKind};
use mafenn_core::WindowedExample;

/// Nonlinear channel at 20 dB.
pub fn stream(len: usize) -> TransmissionRecord {
    transmit(&ChannelConfig::nonlinear(20.0, 1), len).expect("valid channel")
}

/// Desk-sized MAFENN configuration with `cycles` feedback cycles.
pub fn desk_mafenn(cycles: usize) -> EqualizerConfig {
    let mut c = EqualizerConfig::desk(EqualizerKind::Mafenn);
    c.cycles = cycles;
    c
}

/// Training windows for `config` over a fresh stream.
pub fn windows(config: &EqualizerConfig, len: usize) -> Vec<WindowedExample> {
    make_windows_delayed(&stream(len), config.n, config.k, config.delay)
        .expect("stream longer than the window")
}
