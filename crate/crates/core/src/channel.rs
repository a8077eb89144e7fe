//! QPSK baseband link over a fixed multipath channel.
//!
//! The transmit chain is: i.i.d. bits → Gray-mapped unit-energy QPSK →
//! causal FIR channel → optional memoryless AM/AM nonlinearity → AWGN.
//! Everything is driven by a single 64-bit seed; bits and noise draw from
//! separate ChaCha streams so that changing the SNR never changes the
//! transmitted symbols.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Number of QPSK classes.
pub const QPSK_CLASSES: usize = 4;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// RNG stream carrying the bit source.
const BIT_STREAM: u64 = 0;
/// RNG stream carrying the channel noise.
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("bit sequence has odd length {0}")]
    OddBitCount(usize),
    #[error("bit value {0} is not 0 or 1")]
    InvalidBit(u8),
    #[error("channel needs at least one tap")]
    EmptyTaps,
    #[error("raw window length must be at least 1")]
    EmptyWindow,
    #[error("SNR must not be NaN or -inf (got {0})")]
    InvalidSnr(f64),
    #[error("dataset: {0}")]
    Format(String),
}

/// Complex baseband sample as an (in-phase, quadrature) pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IqSample {
    pub i: f64,
    pub q: f64,
}

impl IqSample {
    pub const ZERO: IqSample = IqSample { i: 0.0, q: 0.0 };

    pub const fn new(i: f64, q: f64) -> Self {
        Self { i, q }
    }

    pub fn norm_sqr(self) -> f64 {
        self.i * self.i + self.q * self.q
    }

    pub fn norm(self) -> f64 {
        self.norm_sqr().sqrt()
    }
}

impl From<Complex64> for IqSample {
    fn from(c: Complex64) -> Self {
        Self { i: c.re, q: c.im }
    }
}

impl From<IqSample> for Complex64 {
    fn from(s: IqSample) -> Self {
        Complex64::new(s.i, s.q)
    }
}

/// Constellation point of a class index. Class = Gray code value of the
/// bit pair (b0 b1): b0 selects the in-phase sign, b1 the quadrature sign.
pub fn qpsk_point(class: usize) -> IqSample {
    debug_assert!(class < QPSK_CLASSES);
    let i = if class & 0b10 == 0 {
        INV_SQRT_2
    } else {
        -INV_SQRT_2
    };
    let q = if class & 0b01 == 0 {
        INV_SQRT_2
    } else {
        -INV_SQRT_2
    };
    IqSample::new(i, q)
}

/// Maps bit pairs to QPSK symbols: 00→(+,+), 01→(+,−), 11→(−,−), 10→(−,+).
pub fn qpsk_modulate(bits: &[u8]) -> Result<Vec<IqSample>, ChannelError> {
    Ok(qpsk_modulate_labeled(bits)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// Like [`qpsk_modulate`] but also returns each symbol's class index.
pub fn qpsk_modulate_labeled(bits: &[u8]) -> Result<Vec<(IqSample, usize)>, ChannelError> {
    if bits.len() % 2 != 0 {
        return Err(ChannelError::OddBitCount(bits.len()));
    }
    if let Some(&b) = bits.iter().find(|&&b| b > 1) {
        return Err(ChannelError::InvalidBit(b));
    }
    Ok(bits
        .chunks_exact(2)
        .map(|pair| {
            let class = usize::from(pair[0]) << 1 | usize::from(pair[1]);
            (qpsk_point(class), class)
        })
        .collect())
}

/// Hard decision: nearest constellation point, ties to the smallest index.
pub fn qpsk_class(s: IqSample) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for class in 0..QPSK_CLASSES {
        let p = qpsk_point(class);
        let d = (s.i - p.i).powi(2) + (s.q - p.q).powi(2);
        if d < best_d {
            best_d = d;
            best = class;
        }
    }
    best
}

/// Impulse response of a multipath channel, tap 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTaps(Vec<Complex64>);

impl ChannelTaps {
    pub fn new(taps: Vec<Complex64>) -> Result<Self, ChannelError> {
        if taps.is_empty() {
            return Err(ChannelError::EmptyTaps);
        }
        Ok(Self(taps))
    }

    /// Ten-tap ISI channel used throughout the equalization experiments.
    /// The dominant echo sits at delay 4.
    pub fn reference_multipath() -> Self {
        const TAPS: [(f64, f64); 10] = [
            (0.0410, 0.0109),
            (0.0495, 0.0123),
            (0.0672, 0.0170),
            (0.0919, 0.0235),
            (0.7920, 0.1281),
            (0.3960, 0.0871),
            (0.2715, 0.0498),
            (0.2291, 0.0414),
            (0.1287, 0.0154),
            (0.1032, 0.0119),
        ];
        Self(
            TAPS.iter()
                .map(|&(re, im)| Complex64::new(re, im))
                .collect(),
        )
    }

    pub fn identity() -> Self {
        Self(vec![Complex64::new(1.0, 0.0)])
    }

    pub fn taps(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.0.iter().map(|t| t.norm_sqr()).sum()
    }
}

/// Causal convolution with zero prehistory; output length equals input
/// length.
pub fn fir_filter(symbols: &[IqSample], taps: &[Complex64]) -> Result<Vec<IqSample>, ChannelError> {
    if taps.is_empty() {
        return Err(ChannelError::EmptyTaps);
    }
    let input: Vec<Complex64> = symbols.iter().map(|&s| s.into()).collect();
    Ok((0..input.len())
        .map(|n| {
            taps.iter()
                .take(n + 1)
                .enumerate()
                .map(|(k, &h)| h * input[n - k])
                .sum::<Complex64>()
                .into()
        })
        .collect())
}

/// Raw magnitude response of the amplifier model; may be negative far
/// outside the operating range.
pub fn distortion_magnitude(r: f64) -> f64 {
    r + 0.2 * r * r - 0.1 * r * r * r + 0.5 * (std::f64::consts::PI * r).cos()
}

/// AM/AM nonlinearity. The output magnitude is |g(|v|)| and the phase of
/// `v` is kept; a zero input maps to phase zero.
pub fn nonlinear_distort(v: IqSample) -> IqSample {
    distort_counting(v).0
}

/// Returns the distorted sample and whether the magnitude had to be
/// reflected from a negative value.
fn distort_counting(v: IqSample) -> (IqSample, bool) {
    let r = v.norm();
    let g = distortion_magnitude(r);
    let clamped = g < 0.0;
    let g = g.abs();
    if r == 0.0 {
        return (IqSample::new(g, 0.0), clamped);
    }
    let scale = g / r;
    (IqSample::new(v.i * scale, v.q * scale), clamped)
}

/// Signal-to-noise ratio in dB. `f64::INFINITY` disables noise.
fn check_snr(snr_db: f64) -> Result<(), ChannelError> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(ChannelError::InvalidSnr(snr_db));
    }
    Ok(())
}

/// Adds circularly symmetric complex Gaussian noise with total variance
/// `P/10^(snr/10)`, where `P` is the empirical mean power of `samples`.
pub fn awgn<R: Rng + ?Sized>(
    samples: &[IqSample],
    snr_db: f64,
    rng: &mut R,
) -> Result<Vec<IqSample>, ChannelError> {
    check_snr(snr_db)?;
    if snr_db == f64::INFINITY || samples.is_empty() {
        return Ok(samples.to_vec());
    }
    let power = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    Ok(samples
        .iter()
        .map(|s| {
            let ni: f64 = rng.sample(StandardNormal);
            let nq: f64 = rng.sample(StandardNormal);
            IqSample::new(s.i + sigma * ni, s.q + sigma * nq)
        })
        .collect())
}

/// Where the amplifier sits relative to the noise source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistortionOrder {
    /// taps → g(·) → AWGN
    #[default]
    BeforeNoise,
    /// taps → AWGN → g(·)
    AfterNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub taps: ChannelTaps,
    pub nonlinear: bool,
    pub snr_db: f64,
    pub seed: u64,
    pub order: DistortionOrder,
}

impl ChannelConfig {
    pub fn linear(snr_db: f64, seed: u64) -> Self {
        Self {
            taps: ChannelTaps::reference_multipath(),
            nonlinear: false,
            snr_db,
            seed,
            order: DistortionOrder::BeforeNoise,
        }
    }

    pub fn nonlinear(snr_db: f64, seed: u64) -> Self {
        Self {
            nonlinear: true,
            ..Self::linear(snr_db, seed)
        }
    }

    pub fn identity(snr_db: f64, seed: u64) -> Self {
        Self {
            taps: ChannelTaps::identity(),
            ..Self::linear(snr_db, seed)
        }
    }
}

/// One transmitted burst: clean symbols, their classes, received samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransmissionRecord {
    pub clean: Vec<IqSample>,
    pub labels: Vec<u8>,
    pub received: Vec<IqSample>,
}

impl TransmissionRecord {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Serializes in the `MAFD` little-endian layout.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(DATASET_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        for ((c, r), &label) in self.clean.iter().zip(&self.received).zip(&self.labels) {
            w.write_f64::<LittleEndian>(c.i)?;
            w.write_f64::<LittleEndian>(c.q)?;
            w.write_f64::<LittleEndian>(r.i)?;
            w.write_f64::<LittleEndian>(r.q)?;
            w.write_u8(label)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ChannelError> {
        let fmt = |e: io::Error| ChannelError::Format(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != DATASET_MAGIC {
            return Err(ChannelError::Format(format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != DATASET_VERSION {
            return Err(ChannelError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let len = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let mut rec = TransmissionRecord::default();
        for _ in 0..len {
            let ci = r.read_f64::<LittleEndian>().map_err(fmt)?;
            let cq = r.read_f64::<LittleEndian>().map_err(fmt)?;
            let ri = r.read_f64::<LittleEndian>().map_err(fmt)?;
            let rq = r.read_f64::<LittleEndian>().map_err(fmt)?;
            let label = r.read_u8().map_err(fmt)?;
            if usize::from(label) >= QPSK_CLASSES {
                return Err(ChannelError::Format(format!("label {label} out of range")));
            }
            rec.clean.push(IqSample::new(ci, cq));
            rec.received.push(IqSample::new(ri, rq));
            rec.labels.push(label);
        }
        Ok(rec)
    }
}

const DATASET_MAGIC: &[u8; 4] = b"MAFD";
const DATASET_VERSION: u32 = 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates `len` symbols through the configured channel.
pub fn transmit(config: &ChannelConfig, len: usize) -> Result<TransmissionRecord, ChannelError> {
    check_snr(config.snr_db)?;
    let mut bit_rng = stream_rng(config.seed, BIT_STREAM);
    let bits: Vec<u8> = (0..2 * len).map(|_| bit_rng.random_range(0..2u8)).collect();
    let symbols = qpsk_modulate_labeled(&bits)?;
    let clean: Vec<IqSample> = symbols.iter().map(|&(s, _)| s).collect();
    let labels: Vec<u8> = symbols.iter().map(|&(_, c)| c as u8).collect();

    let mut noise_rng = stream_rng(config.seed, NOISE_STREAM);
    let mut signal = fir_filter(&clean, config.taps.taps())?;
    let mut clamped = 0usize;
    let mut distort = |xs: &mut Vec<IqSample>| {
        for s in xs.iter_mut() {
            let (d, c) = distort_counting(*s);
            clamped += usize::from(c);
            *s = d;
        }
    };
    let received = match (config.nonlinear, config.order) {
        (false, _) => awgn(&signal, config.snr_db, &mut noise_rng)?,
        (true, DistortionOrder::BeforeNoise) => {
            distort(&mut signal);
            awgn(&signal, config.snr_db, &mut noise_rng)?
        }
        (true, DistortionOrder::AfterNoise) => {
            let mut noisy = awgn(&signal, config.snr_db, &mut noise_rng)?;
            distort(&mut noisy);
            noisy
        }
    };
    if clamped > 0 {
        log::debug!(
            "nonlinearity clamped {clamped} of {len} magnitudes ({:.3e})",
            clamped as f64 / len as f64
        );
    }
    Ok(TransmissionRecord {
        clean,
        labels,
        received,
    })
}

/// One equalizer input instance.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedExample {
    /// `[x(i), x(i-1), …, x(i-N+1)]`, zero where the index is negative.
    pub raw_window: Vec<IqSample>,
    /// Slot 0 holds the current estimate (initially the raw sample), slots
    /// `1..=K` are filled with recovered history by the equalizer.
    pub feed_window: Vec<IqSample>,
    pub label: u8,
    pub clean: IqSample,
}

/// One example per slot with the label taken from the same slot.
pub fn make_windows(
    record: &TransmissionRecord,
    n: usize,
    k: usize,
) -> Result<Vec<WindowedExample>, ChannelError> {
    make_windows_delayed(record, n, k, 0)
}

/// Windows whose target is the symbol sent `delay` slots before the
/// newest received sample. Slots `i < delay` have no target and are
/// skipped, so the result holds `L - delay` examples.
pub fn make_windows_delayed(
    record: &TransmissionRecord,
    n: usize,
    k: usize,
    delay: usize,
) -> Result<Vec<WindowedExample>, ChannelError> {
    if n < 1 {
        return Err(ChannelError::EmptyWindow);
    }
    Ok((delay..record.len())
        .map(|i| {
            let raw_window = raw_window_at(&record.received, i, n);
            let mut feed_window = vec![IqSample::ZERO; k + 1];
            feed_window[0] = record.received[i];
            WindowedExample {
                raw_window,
                feed_window,
                label: record.labels[i - delay],
                clean: record.clean[i - delay],
            }
        })
        .collect())
}

/// `[x(i), …, x(i-n+1)]` with zero padding before the stream start.
pub fn raw_window_at(received: &[IqSample], i: usize, n: usize) -> Vec<IqSample> {
    (0..n)
        .map(|j| {
            if j <= i {
                received[i - j]
            } else {
                IqSample::ZERO
            }
        })
        .collect()
}
