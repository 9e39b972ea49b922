//! Time series to normalized log-magnitude spectrogram images.
//!
//! The transform chain is STFT (over a self-contained radix-2 FFT), log1p
//! scaling, bilinear resize, and per-image min-max normalization. Rows index
//! frequency and columns index time throughout, so a stable periodic signal
//! shows up as horizontal bands in the resulting [`ImageTensor`].

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::signalgen::TimeSeries;

/// Magic bytes of the image tensor format.
pub const IMAGE_MAGIC: &[u8; 4] = b"IMG1";

#[derive(Debug, thiserror::Error)]
pub enum SpectralError {
    #[error("FFT length must be a power of two >= 1, got {0}")]
    NotPowerOfTwo(usize),
    #[error("window size must be a power of two, got {0}")]
    BadWindowSize(usize),
    #[error("hop must be >= 1")]
    ZeroHop,
    #[error("input has {len} samples, shorter than one window ({window_size})")]
    InputShorterThanWindow { len: usize, window_size: usize },
    #[error("target image dimensions must be >= 1, got {h}x{w}")]
    BadTargetDims { h: usize, w: usize },
    #[error("spectrogram is empty")]
    EmptySpectrogram,
    #[error("image values outside [0, 1] at index {index}: {value}")]
    ValueOutOfRange { index: usize, value: f32 },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated image payload: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Analysis window applied to each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rect,
}

impl WindowKind {
    fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Rect => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos()))
                .collect(),
        }
    }
}

/// In-place radix-2 Cooley-Tukey FFT. `inverse` applies the conjugate
/// transform scaled by `1/n`, so `ifft(fft(x)) == x`.
pub fn fft_radix2(buffer: &mut [Complex64], inverse: bool) -> Result<(), SpectralError> {
    let n = buffer.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(SpectralError::NotPowerOfTwo(n));
    }
    if n == 1 {
        return Ok(());
    }

    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            buffer.swap(i, j);
        }
    }

    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let w_len = Complex64::new(ang.cos(), ang.sin());
        for chunk in buffer.chunks_exact_mut(len) {
            let mut w = Complex64::new(1.0, 0.0);
            let (lo, hi) = chunk.split_at_mut(len / 2);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let t = w * *b;
                *b = *a - t;
                *a += t;
                w *= w_len;
            }
        }
        len <<= 1;
    }

    if inverse {
        let scale = 1.0 / n as f64;
        for v in buffer.iter_mut() {
            *v *= scale;
        }
    }
    Ok(())
}

/// Frequency x time magnitude grid. `magnitudes[f][t]` with
/// `freq_bins = window_size/2 + 1` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Row-major `[freq_bins * time_frames]` non-negative magnitudes.
    pub magnitudes: Vec<f32>,
    pub freq_bins: usize,
    pub time_frames: usize,
    pub sample_rate: f64,
    pub window_size: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn at(&self, freq_bin: usize, frame: usize) -> f32 {
        self.magnitudes[freq_bin * self.time_frames + frame]
    }
}

/// Short-time Fourier transform. Frame `t` covers samples
/// `[t*hop, t*hop + window_size)`; magnitudes are `|FFT(window * frame)|`
/// for bins `0..=window_size/2`.
pub fn stft(
    ts: &TimeSeries,
    window_size: usize,
    hop: usize,
    window: WindowKind,
) -> Result<Spectrogram, SpectralError> {
    if window_size == 0 || !window_size.is_power_of_two() {
        return Err(SpectralError::BadWindowSize(window_size));
    }
    if hop == 0 {
        return Err(SpectralError::ZeroHop);
    }
    if ts.len() < window_size {
        return Err(SpectralError::InputShorterThanWindow {
            len: ts.len(),
            window_size,
        });
    }

    let coeffs = window.coefficients(window_size);
    let freq_bins = window_size / 2 + 1;
    let time_frames = 1 + (ts.len() - window_size) / hop;
    let mut magnitudes = vec![0.0f32; freq_bins * time_frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];

    for frame in 0..time_frames {
        let start = frame * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(ts.samples[start + i] as f64 * coeffs[i], 0.0);
        }
        fft_radix2(&mut buf, false)?;
        for bin in 0..freq_bins {
            magnitudes[bin * time_frames + frame] = buf[bin].norm() as f32;
        }
    }

    Ok(Spectrogram {
        magnitudes,
        freq_bins,
        time_frames,
        sample_rate: ts.sample_rate,
        window_size,
        hop,
    })
}

/// STFT parameters an image was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_rate: f64,
    pub window_size: usize,
    pub hop: usize,
}

/// Normalized `[1 x H x W]` image in [0, 1]; the classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    /// Row-major `[h * w]` values.
    pub values: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub provenance: Option<Provenance>,
}

impl ImageTensor {
    /// Construct with full validation of the [0, 1] range invariant.
    pub fn new(values: Vec<f32>, h: usize, w: usize) -> Result<Self, SpectralError> {
        assert_eq!(values.len(), h * w, "value count must equal h*w");
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(SpectralError::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(SpectralError::ValueOutOfRange { index, value });
            }
        }
        Ok(Self { values, h, w, provenance: None })
    }

    /// Construct without the range check. Used for perturbed images, which
    /// deliberately leave [0, 1].
    pub fn new_unchecked(values: Vec<f32>, h: usize, w: usize) -> Self {
        assert_eq!(values.len(), h * w, "value count must equal h*w");
        Self { values, h, w, provenance: None }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.w + col]
    }

    /// Write in the image tensor format: magic, H and W as u32 LE, then
    /// `h*w` f32 LE values row-major.
    pub fn save(&self, path: &Path) -> Result<(), SpectralError> {
        let mut buf = Vec::with_capacity(12 + self.values.len() * 4);
        buf.extend_from_slice(IMAGE_MAGIC);
        buf.extend_from_slice(&(self.h as u32).to_le_bytes());
        buf.extend_from_slice(&(self.w as u32).to_le_bytes());
        for &v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Load from the image tensor format without the [0, 1] range check
    /// (the container also stores signed attribution grids).
    pub fn load(path: &Path) -> Result<Self, SpectralError> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() < 12 {
            return Err(SpectralError::Truncated { expected: 12, found: bytes.len() });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[0..4]);
        if &magic != IMAGE_MAGIC {
            return Err(SpectralError::BadMagic { expected: *IMAGE_MAGIC, found: magic });
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[12..];
        if payload.len() < h * w * 4 {
            return Err(SpectralError::Truncated { expected: h * w, found: payload.len() / 4 });
        }
        let mut values = Vec::with_capacity(h * w);
        for i in 0..h * w {
            let v = f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(SpectralError::NonFinite { index: i });
            }
            values.push(v);
        }
        Ok(Self { values, h, w, provenance: None })
    }
}

/// Bilinear resize of a row-major grid. Uses corner-aligned sampling so a
/// same-size resize is the identity.
pub fn bilinear_resize(src: &[f32], src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), src_h * src_w);
    assert!(dst_h >= 1 && dst_w >= 1);
    let scale_y = if dst_h > 1 { (src_h - 1) as f64 / (dst_h - 1) as f64 } else { 0.0 };
    let scale_x = if dst_w > 1 { (src_w - 1) as f64 / (dst_w - 1) as f64 } else { 0.0 };
    let mut dst = vec![0.0f32; dst_h * dst_w];
    for y in 0..dst_h {
        let sy = y as f64 * scale_y;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        for x in 0..dst_w {
            let sx = x as f64 * scale_x;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            let v00 = src[y0 * src_w + x0] as f64;
            let v01 = src[y0 * src_w + x1] as f64;
            let v10 = src[y1 * src_w + x0] as f64;
            let v11 = src[y1 * src_w + x1] as f64;
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            dst[y * dst_w + x] = (top + (bot - top) * fy) as f32;
        }
    }
    dst
}

/// Convert a spectrogram to a classifier input: log1p, bilinear resize to
/// `target_h x target_w`, then per-image min-max normalization. A constant
/// grid maps to all zeros.
pub fn to_image(spec: &Spectrogram, target_h: usize, target_w: usize) -> Result<ImageTensor, SpectralError> {
    if spec.magnitudes.is_empty() {
        return Err(SpectralError::EmptySpectrogram);
    }
    if target_h == 0 || target_w == 0 {
        return Err(SpectralError::BadTargetDims { h: target_h, w: target_w });
    }

    let logged: Vec<f32> = spec.magnitudes.iter().map(|&m| m.ln_1p()).collect();
    let mut values = bilinear_resize(&logged, spec.freq_bins, spec.time_frames, target_h, target_w);

    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    if range > 0.0 {
        for v in values.iter_mut() {
            *v = ((*v - min) / range).clamp(0.0, 1.0);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }

    let mut img = ImageTensor::new(values, target_h, target_w)?;
    img.provenance = Some(Provenance {
        sample_rate: spec.sample_rate,
        window_size: spec.window_size,
        hop: spec.hop,
    });
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signalgen::TimeSeries;
    use proptest::prelude::*;

    /// O(n^2) DFT reference, accumulated in f64.
    fn naive_dft(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
        let n = input.len();
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &x) in input.iter().enumerate() {
                let ang = sign * std::f64::consts::TAU * (k * j) as f64 / n as f64;
                acc += x * Complex64::new(ang.cos(), ang.sin());
            }
            if inverse {
                acc /= n as f64;
            }
            out.push(acc);
        }
        out
    }

    fn random_complex(n: usize, seed: u64) -> Vec<Complex64> {
        use rand::Rng;
        let mut rng = crate::seeds::rng(seed);
        (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let mut buf = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
        ];
        fft_radix2(&mut buf, false).unwrap();
        for v in &buf {
            assert!((v.re - 1.0).abs() < 1e-12 && v.im.abs() < 1e-12);
        }
    }

    #[test]
    fn dc_concentrates_in_bin_zero() {
        let mut buf = vec![Complex64::new(1.0, 0.0); 4];
        fft_radix2(&mut buf, false).unwrap();
        assert!((buf[0].re - 4.0).abs() < 1e-12);
        for v in &buf[1..] {
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn fft_matches_naive_dft_on_length_1024() {
        let input = random_complex(1024, 11);
        let expected = naive_dft(&input, false);
        let mut buf = input.clone();
        fft_radix2(&mut buf, false).unwrap();
        let max_err = buf
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-4, "max abs error {max_err}");
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        let mut buf = vec![Complex64::new(0.0, 0.0); 3];
        assert!(matches!(fft_radix2(&mut buf, false), Err(SpectralError::NotPowerOfTwo(3))));
        let mut empty: Vec<Complex64> = vec![];
        assert!(fft_radix2(&mut empty, false).is_err());
    }

    proptest! {
        #[test]
        fn fft_round_trip(seed in 0u64..1000) {
            let input = random_complex(256, seed);
            let mut buf = input.clone();
            fft_radix2(&mut buf, false).unwrap();
            fft_radix2(&mut buf, true).unwrap();
            for (a, b) in buf.iter().zip(&input) {
                prop_assert!((a - b).norm() < 1e-5);
            }
        }

        #[test]
        fn fft_linearity(seed in 0u64..1000) {
            let x = random_complex(256, seed);
            let y = random_complex(256, seed.wrapping_add(1_000_000));
            let (a, b) = (0.7, -1.3);
            let mut combined: Vec<Complex64> =
                x.iter().zip(&y).map(|(xi, yi)| a * xi + b * yi).collect();
            fft_radix2(&mut combined, false).unwrap();
            let mut fx = x.clone();
            fft_radix2(&mut fx, false).unwrap();
            let mut fy = y.clone();
            fft_radix2(&mut fy, false).unwrap();
            for i in 0..256 {
                let lhs = combined[i];
                let rhs = a * fx[i] + b * fy[i];
                prop_assert!((lhs - rhs).norm() < 1e-5);
            }
        }

        #[test]
        fn fft_parseval(seed in 0u64..1000) {
            let input = random_complex(256, seed);
            let mut buf = input.clone();
            fft_radix2(&mut buf, false).unwrap();
            let time_energy: f64 = input.iter().map(|v| v.norm_sqr()).sum();
            let freq_energy: f64 = buf.iter().map(|v| v.norm_sqr()).sum::<f64>() / 256.0;
            let rel = (time_energy - freq_energy).abs() / time_energy.max(1e-30);
            prop_assert!(rel < 1e-5);
        }
    }

    #[test]
    fn stft_zero_signal_gives_zero_magnitudes() {
        let ts = TimeSeries::new(vec![0.0; 512], 8000.0).unwrap();
        let spec = stft(&ts, 64, 32, WindowKind::Hann).unwrap();
        assert_eq!(spec.freq_bins, 33);
        assert_eq!(spec.time_frames, 1 + (512 - 64) / 32);
        assert!(spec.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn stft_pure_bin_sinusoid_peaks_at_its_bin() {
        // Bin-5 sinusoid over a 64-sample window: every frame's argmax is 5.
        let n = 640;
        let samples: Vec<f32> = (0..n)
            .map(|i| (std::f64::consts::TAU * 5.0 * i as f64 / 64.0).sin() as f32)
            .collect();
        let ts = TimeSeries::new(samples, 8000.0).unwrap();
        let spec = stft(&ts, 64, 16, WindowKind::Rect).unwrap();
        for frame in 0..spec.time_frames {
            let argmax = (0..spec.freq_bins)
                .max_by(|&a, &b| spec.at(a, frame).partial_cmp(&spec.at(b, frame)).unwrap())
                .unwrap();
            assert_eq!(argmax, 5, "frame {frame}");
        }
    }

    #[test]
    fn stft_dc_magnitude_equals_window_size() {
        let ts = TimeSeries::new(vec![1.0; 256], 8000.0).unwrap();
        let spec = stft(&ts, 128, 64, WindowKind::Rect).unwrap();
        for frame in 0..spec.time_frames {
            assert!((spec.at(0, frame) - 128.0).abs() < 1e-3);
            for bin in 1..spec.freq_bins {
                assert!(spec.at(bin, frame) < 1e-6);
            }
        }
    }

    #[test]
    fn stft_rejects_short_input() {
        let ts = TimeSeries::new(vec![0.0; 32], 8000.0).unwrap();
        assert!(matches!(
            stft(&ts, 64, 32, WindowKind::Hann),
            Err(SpectralError::InputShorterThanWindow { .. })
        ));
    }

    fn direct_spectrogram(magnitudes: Vec<f32>, freq_bins: usize, time_frames: usize) -> Spectrogram {
        assert_eq!(magnitudes.len(), freq_bins * time_frames);
        Spectrogram {
            magnitudes,
            freq_bins,
            time_frames,
            sample_rate: 8000.0,
            window_size: (freq_bins - 1) * 2,
            hop: 1,
        }
    }

    #[test]
    fn to_image_zero_spectrogram_is_zero_image() {
        let spec = direct_spectrogram(vec![0.0; 9 * 8], 9, 8);
        let img = to_image(&spec, 9, 8).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn to_image_single_hot_row_becomes_band() {
        // Same-size resize keeps the hot row on exactly one output row.
        let mut mags = vec![0.0f32; 9 * 8];
        for t in 0..8 {
            mags[3 * 8 + t] = 5.0;
        }
        let spec = direct_spectrogram(mags, 9, 8);
        let img = to_image(&spec, 9, 8).unwrap();
        for r in 0..9 {
            for c in 0..8 {
                let expected = if r == 3 { 1.0 } else { 0.0 };
                assert_eq!(img.at(r, c), expected, "({r},{c})");
            }
        }
    }

    #[test]
    fn to_image_constant_spectrogram_is_zero_image() {
        let spec = direct_spectrogram(vec![2.5; 9 * 8], 9, 8);
        let img = to_image(&spec, 9, 8).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn to_image_rejects_zero_dims() {
        let spec = direct_spectrogram(vec![0.0; 9 * 8], 9, 8);
        assert!(matches!(to_image(&spec, 0, 8), Err(SpectralError::BadTargetDims { .. })));
    }

    #[test]
    fn band_property_of_steady_multi_harmonic_signal() {
        // Per-row time variance of a steady signal's image is under 1% of
        // the total image variance.
        use crate::signalgen::{synthesize_recording, DeviceProfile, Harmonic};
        let profile = DeviceProfile {
            class_id: 0,
            harmonics: vec![
                Harmonic { freq: 400.0, amp: 1.0, phase: 0.0 },
                Harmonic { freq: 1200.0, amp: 0.7, phase: 1.0 },
                Harmonic { freq: 2800.0, amp: 0.5, phase: 2.0 },
            ],
            am_mod: None,
            drift_ppm: 0.0,
            noise_floor: 0.0,
        };
        let ts = synthesize_recording(&profile, 1.0, 8192.0, 0).unwrap();
        let spec = stft(&ts, 256, 128, WindowKind::Hann).unwrap();
        let img = to_image(&spec, 64, 64).unwrap();

        let total_mean = img.values.iter().map(|&v| v as f64).sum::<f64>() / img.values.len() as f64;
        let total_var = img
            .values
            .iter()
            .map(|&v| (v as f64 - total_mean).powi(2))
            .sum::<f64>()
            / img.values.len() as f64;
        let mut row_var_sum = 0.0;
        for r in 0..img.h {
            let row = &img.values[r * img.w..(r + 1) * img.w];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
            row_var_sum +=
                row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / row.len() as f64;
        }
        let mean_row_var = row_var_sum / img.h as f64;
        assert!(
            mean_row_var < 0.01 * total_var,
            "row variance {mean_row_var} vs total {total_var}"
        );
    }

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.img");
        let img = ImageTensor::new(vec![0.0, 0.25, 0.5, 1.0, 0.75, 0.1], 2, 3).unwrap();
        img.save(&path).unwrap();
        let loaded = ImageTensor::load(&path).unwrap();
        assert_eq!(loaded.values, img.values);
        assert_eq!((loaded.h, loaded.w), (2, 3));
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(matches!(
            ImageTensor::new(vec![0.0, 1.5], 1, 2),
            Err(SpectralError::ValueOutOfRange { index: 1, .. })
        ));
    }
}
