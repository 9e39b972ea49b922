//! Synthetic device-emission recordings.
//!
//! A [`DeviceProfile`] describes the steady-state spectral fingerprint of one
//! device class: a set of harmonics with optional amplitude modulation, slow
//! frequency drift, and a Gaussian noise floor. Recordings synthesized from a
//! profile are split into fixed-length windows that become one spectrogram
//! image each. Externally captured recordings can be ingested through the raw
//! file format ([`load_raw_recording`]).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seeds;

/// Magic bytes of the raw recording format.
pub const RAW_MAGIC: &[u8; 4] = b"URE1";

#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("harmonic frequency {freq} Hz at/above Nyquist ({nyquist} Hz)")]
    NyquistViolation { freq: f64, nyquist: f64 },
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("sample rate must be positive, got {0}")]
    NonPositiveSampleRate(f64),
    #[error("recording would contain no samples")]
    EmptyRecording,
    #[error("segment length must be >= 1")]
    ZeroSegmentLen,
    #[error("harmonic amplitude must be >= 0, got {0}")]
    NegativeAmplitude(f64),
    #[error("AM depth must be in [0, 1], got {0}")]
    BadAmDepth(f64),
    #[error("notch center {center} Hz outside (0, {nyquist}) Hz")]
    BadNotchCenter { center: f64, nyquist: f64 },
    #[error("notch quality must be positive, got {0}")]
    BadNotchQuality(f64),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: header declares {declared} samples, file holds {actual}")]
    Truncated { declared: u64, actual: u64 },
    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("time series must be non-empty")]
    EmptyTimeSeries,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One spectral line of a device profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    /// Frequency in Hz; must stay below Nyquist for the target sample rate.
    pub freq: f64,
    /// Dimensionless amplitude, >= 0.
    pub amp: f64,
    /// Phase offset in radians.
    pub phase: f64,
}

/// Amplitude modulation applied to the whole harmonic stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmMod {
    /// Modulation rate in Hz.
    pub rate: f64,
    /// Modulation depth in [0, 1].
    pub depth: f64,
}

/// Steady-state spectral fingerprint of one device class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Class label in `[0, n_classes)`; unique across a profile set.
    pub class_id: usize,
    pub harmonics: Vec<Harmonic>,
    pub am_mod: Option<AmMod>,
    /// Linear instantaneous-frequency ramp over the recording, in ppm.
    pub drift_ppm: f64,
    /// Standard deviation of the additive background Gaussian noise.
    pub noise_floor: f64,
}

impl DeviceProfile {
    /// Check profile invariants against a target sample rate.
    pub fn validate(&self, sample_rate: f64) -> Result<(), SignalError> {
        let nyquist = sample_rate / 2.0;
        for h in &self.harmonics {
            if h.freq >= nyquist {
                return Err(SignalError::NyquistViolation { freq: h.freq, nyquist });
            }
            if h.amp < 0.0 {
                return Err(SignalError::NegativeAmplitude(h.amp));
            }
        }
        if let Some(am) = &self.am_mod {
            if !(0.0..=1.0).contains(&am.depth) {
                return Err(SignalError::BadAmDepth(am.depth));
            }
        }
        Ok(())
    }
}

/// Raw voltage samples at a fixed sample rate; the unit of collection.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub samples: Vec<f32>,
    pub sample_rate: f64,
}

impl TimeSeries {
    pub fn new(samples: Vec<f32>, sample_rate: f64) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::EmptyTimeSeries);
        }
        if sample_rate <= 0.0 {
            return Err(SignalError::NonPositiveSampleRate(sample_rate));
        }
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::NonFiniteSample { index });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Synthesize a recording: sum of drifting, optionally AM-modulated
/// sinusoids plus a Gaussian noise floor. Pure function of its arguments.
///
/// The instantaneous frequency of each harmonic ramps linearly from `f` to
/// `f * (1 + drift_ppm * 1e-6)` over the recording, so the phase at time `t`
/// is `2*pi*f*(t + ppm*1e-6*t^2/(2T)) + phase0`.
pub fn synthesize_recording(
    profile: &DeviceProfile,
    duration: f64,
    sample_rate: f64,
    seed: u64,
) -> Result<TimeSeries, SignalError> {
    if duration <= 0.0 {
        return Err(SignalError::NonPositiveDuration(duration));
    }
    if sample_rate <= 0.0 {
        return Err(SignalError::NonPositiveSampleRate(sample_rate));
    }
    profile.validate(sample_rate)?;

    let n = (duration * sample_rate).round() as usize;
    if n == 0 {
        return Err(SignalError::EmptyRecording);
    }

    let total_time = n as f64 / sample_rate;
    let drift = profile.drift_ppm * 1e-6;
    let mut rng = seeds::rng(seed);
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / sample_rate;
        // Phase integral of the linear frequency ramp.
        let warped_t = t + drift * t * t / (2.0 * total_time);
        let mut v = 0.0f64;
        for h in &profile.harmonics {
            v += h.amp * (std::f64::consts::TAU * h.freq * warped_t + h.phase).sin();
        }
        if let Some(am) = &profile.am_mod {
            v *= 1.0 + am.depth * (std::f64::consts::TAU * am.rate * t).sin();
        }
        if profile.noise_floor > 0.0 {
            let xi: f64 = rng.sample(StandardNormal);
            v += profile.noise_floor * xi;
        }
        samples.push(v as f32);
    }
    TimeSeries::new(samples, sample_rate)
}

/// Split into consecutive non-overlapping windows of `segment_len` samples;
/// the trailing remainder is dropped.
pub fn segment(ts: &TimeSeries, segment_len: usize) -> Result<Vec<TimeSeries>, SignalError> {
    if segment_len == 0 {
        return Err(SignalError::ZeroSegmentLen);
    }
    Ok(ts
        .samples
        .chunks_exact(segment_len)
        .map(|chunk| TimeSeries { samples: chunk.to_vec(), sample_rate: ts.sample_rate })
        .collect())
}

/// Apply a second-order IIR notch at `center` Hz with the given quality
/// factor. Output length equals input length; the filter passes DC exactly.
pub fn notch_filter(ts: &TimeSeries, center: f64, quality: f64) -> Result<TimeSeries, SignalError> {
    let nyquist = ts.sample_rate / 2.0;
    if center <= 0.0 || center >= nyquist {
        return Err(SignalError::BadNotchCenter { center, nyquist });
    }
    if quality <= 0.0 {
        return Err(SignalError::BadNotchQuality(quality));
    }

    // Biquad notch: unity gain at DC and Nyquist, zero at the center bin.
    let w0 = std::f64::consts::TAU * center / ts.sample_rate;
    let alpha = w0.sin() / (2.0 * quality);
    let cos_w0 = w0.cos();
    let a0 = 1.0 + alpha;
    let b0 = 1.0 / a0;
    let b1 = -2.0 * cos_w0 / a0;
    let b2 = 1.0 / a0;
    let a1 = -2.0 * cos_w0 / a0;
    let a2 = (1.0 - alpha) / a0;

    let mut out = Vec::with_capacity(ts.len());
    let (mut x1, mut x2, mut y1, mut y2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &x in &ts.samples {
        let x = x as f64;
        let y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        out.push(y as f32);
    }
    TimeSeries::new(out, ts.sample_rate)
}

/// Write a time series in the raw recording format.
pub fn write_raw(ts: &TimeSeries, path: &Path) -> Result<(), SignalError> {
    let mut buf = Vec::with_capacity(16 + ts.len() * 4);
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(ts.sample_rate.round() as u32).to_le_bytes());
    buf.extend_from_slice(&(ts.len() as u64).to_le_bytes());
    for &v in &ts.samples {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Load a raw recording: 16-byte header (magic, u32 LE sample rate, u64 LE
/// sample count) followed by IEEE-754 little-endian f32 samples.
pub fn load_raw_recording(path: &Path) -> Result<TimeSeries, SignalError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_raw(&bytes)
}

fn parse_raw(bytes: &[u8]) -> Result<TimeSeries, SignalError> {
    if bytes.len() < 16 {
        return Err(SignalError::Truncated { declared: 0, actual: bytes.len() as u64 });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if &magic != RAW_MAGIC {
        return Err(SignalError::BadMagic { expected: *RAW_MAGIC, found: magic });
    }
    let sample_rate = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as f64;
    let declared = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload = &bytes[16..];
    let actual = (payload.len() / 4) as u64;
    if actual < declared || payload.len() % 4 != 0 {
        return Err(SignalError::Truncated { declared, actual });
    }
    let mut samples = Vec::with_capacity(declared as usize);
    for i in 0..declared as usize {
        let v = f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(SignalError::NonFiniteSample { index: i });
        }
        samples.push(v);
    }
    TimeSeries::new(samples, sample_rate)
}

/// Dataset manifest: class names, profile parameters, seeds, and the file
/// path of every emitted segment image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_rate: f64,
    pub segment_len: usize,
    pub classes: Vec<ManifestClass>,
    pub segments: Vec<ManifestSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub class_id: usize,
    pub name: String,
    pub profile: DeviceProfile,
    /// Seed used to synthesize this class's recording.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSegment {
    pub class_id: usize,
    pub segment_index: usize,
    pub split: Split,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), SignalError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
