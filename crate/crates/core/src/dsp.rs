//! Spectrogram and MFCC features.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, FormatError, Result};
use crate::rng::rng_from_seed;
use crate::synth::{ClipGeometry, LabeledClip, Waveform};

/// Frame count expected by the crop augmentation and the models.
pub const MODEL_FRAMES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 1000,
            window: 512,
            hop: 384,
            band_lo_hz: 8.0,
            band_hi_hz: 100.0,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.hop > self.window {
            return Err(Error::InvalidParam(format!("need 0 < hop <= window, got {self:?}")));
        }
        if !(self.band_lo_hz < self.band_hi_hz) || self.band_hi_hz > f64::from(self.sample_rate) / 2.0 {
            return Err(Error::InvalidParam(format!("band [{}, {}) invalid", self.band_lo_hz, self.band_hi_hz)));
        }
        if self.bins().is_empty() {
            return Err(Error::InvalidParam("band selection keeps no bins".into()));
        }
        Ok(())
    }

    pub fn bin_hz(&self) -> f64 {
        f64::from(self.sample_rate) / self.window as f64
    }

    /// FFT bins whose center frequency lies in `[band_lo_hz, band_hi_hz)`.
    /// Bins 5..=51 (47 bins) under the defaults.
    pub fn bins(&self) -> std::ops::Range<usize> {
        let df = self.bin_hz();
        let lo = (self.band_lo_hz / df).ceil() as usize;
        let hi = (self.band_hi_hz / df).ceil() as usize;
        lo..hi.min(self.window / 2 + 1)
    }

    pub fn n_bands(&self) -> usize {
        self.bins().len()
    }

    pub fn band_freqs_hz(&self) -> Vec<f64> {
        let df = self.bin_hz();
        self.bins().map(|k| k as f64 * df).collect()
    }

    pub fn frame_rate(&self) -> f64 {
        f64::from(self.sample_rate) / self.hop as f64
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.window {
            0
        } else {
            (n_samples - self.window) / self.hop + 1
        }
    }

    pub fn geometry(&self, frames: usize) -> ClipGeometry {
        ClipGeometry {
            sample_rate: self.sample_rate,
            window: self.window,
            hop: self.hop,
            frames,
        }
    }
}

/// Time by frequency magnitudes, stored row-major (`data[t * bands + f]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bands: usize,
    pub data: Vec<f64>,
    /// Frame center times; empty when the source geometry is unknown.
    pub frame_times_s: Vec<f64>,
    /// Band center frequencies; empty when the source geometry is unknown.
    pub band_freqs_hz: Vec<f64>,
}

impl Spectrogram {
    pub fn new(frames: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * bands {
            return Err(Error::Shape(format!("{} values for {frames}x{bands}", data.len())));
        }
        Ok(Self {
            frames,
            bands,
            data,
            frame_times_s: Vec::new(),
            band_freqs_hz: Vec::new(),
        })
    }

    pub fn zeros(frames: usize, bands: usize) -> Self {
        Self::new(frames, bands, vec![0.0; frames * bands]).expect("shape is consistent")
    }

    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bands + f]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.bands..(t + 1) * self.bands]
    }

    pub fn with_axes_from(mut self, other: &Spectrogram) -> Self {
        if other.frames == self.frames && other.bands == self.bands {
            self.frame_times_s = other.frame_times_s.clone();
            self.band_freqs_hz = other.band_freqs_hz.clone();
        }
        self
    }

    /// 16-byte header (`SPEC`, frames, bands, reserved as little-endian u32)
    /// followed by the values as little-endian f32, row-major.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.data.len());
        buf.extend_from_slice(b"SPEC");
        for v in [self.frames as u32, self.bands as u32, 0u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 {
            return Err(FormatError::TruncatedHeader {
                needed: 16,
                available: bytes.len(),
            }
            .into());
        }
        if &bytes[..4] != b"SPEC" {
            return Err(FormatError::BadMagic { expected: "SPEC" }.into());
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (frames, bands) = (u(0), u(1));
        let needed = 16 + 4 * frames * bands;
        if bytes.len() < needed {
            return Err(FormatError::TruncatedPayload {
                needed,
                available: bytes.len(),
            }
            .into());
        }
        if bytes.len() > needed {
            return Err(FormatError::TrailingBytes {
                extra: bytes.len() - needed,
            }
            .into());
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Self::new(frames, bands, data)
    }
}

/// Hann-windowed short-time Fourier transform with a cached FFT plan.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window;
        // periodic Hann
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self { cfg, window, fft })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Magnitudes of all `window / 2 + 1` non-negative-frequency bins of one frame.
    pub fn frame_magnitudes(&self, frame: &[f32]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Complex::new(f64::from(x) * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..self.cfg.window / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    pub fn process(&self, w: &Waveform) -> Result<Spectrogram> {
        let cfg = &self.cfg;
        if w.len() < cfg.window {
            return Err(Error::InvalidParam(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                w.len(),
                cfg.window
            )));
        }
        let frames = cfg.n_frames(w.len());
        let bins = cfg.bins();
        let mut data = Vec::with_capacity(frames * bins.len());
        for t in 0..frames {
            let start = t * cfg.hop;
            let mags = self.frame_magnitudes(&w.samples[start..start + cfg.window]);
            data.extend_from_slice(&mags[bins.clone()]);
        }
        let fs = f64::from(cfg.sample_rate);
        Ok(Spectrogram {
            frames,
            bands: bins.len(),
            data,
            frame_times_s: (0..frames).map(|t| (t * cfg.hop + cfg.window / 2) as f64 / fs).collect(),
            band_freqs_hz: cfg.band_freqs_hz(),
        })
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    Stft::new(*cfg)?.process(w)
}

/// A spectrogram with its clip and frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecExample {
    pub spec: Spectrogram,
    pub frame_labels: Vec<bool>,
    pub label: bool,
}

pub fn spectrogram_examples(clips: &[LabeledClip], cfg: &StftConfig) -> Result<Vec<SpecExample>> {
    use rayon::prelude::*;
    let stft = Stft::new(*cfg)?;
    clips
        .par_iter()
        .map(|c| {
            let spec = stft.process(&c.waveform)?;
            if spec.frames != c.frame_labels.len() {
                return Err(Error::Shape(format!(
                    "{} frames but {} frame labels",
                    spec.frames,
                    c.frame_labels.len()
                )));
            }
            Ok(SpecExample {
                spec,
                frame_labels: c.frame_labels.clone(),
                label: c.clip_label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    /// Mean magnitude per band over every frame labeled negative.
    pub noise_mean: Vec<f64>,
    /// Median over positive frames of the frame's mean magnitude.
    pub median_call_intensity: f64,
}

impl NormStats {
    pub fn identity(bands: usize) -> Self {
        Self {
            noise_mean: vec![0.0; bands],
            median_call_intensity: 1.0,
        }
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

pub fn compute_norm_stats(train: &[SpecExample]) -> Result<NormStats> {
    let bands = train
        .first()
        .map(|e| e.spec.bands)
        .ok_or_else(|| Error::Empty("no training spectrograms".into()))?;
    let mut sum = vec![0.0; bands];
    let mut negatives = 0usize;
    let mut call_means = Vec::new();
    for ex in train {
        if ex.spec.bands != bands || ex.frame_labels.len() != ex.spec.frames {
            return Err(Error::Shape("inconsistent spectrogram shapes".into()));
        }
        for (t, &positive) in ex.frame_labels.iter().enumerate() {
            let row = ex.spec.row(t);
            if positive {
                call_means.push(row.iter().sum::<f64>() / bands as f64);
            } else {
                negatives += 1;
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
        }
    }
    if negatives == 0 {
        return Err(Error::Empty("no negative frames to estimate the noise floor".into()));
    }
    let median_call_intensity =
        median(&mut call_means).ok_or_else(|| Error::Empty("no positive frames to estimate call intensity".into()))?;
    if !(median_call_intensity > 0.0) {
        return Err(Error::InvalidParam("median call intensity is not positive".into()));
    }
    Ok(NormStats {
        noise_mean: sum.into_iter().map(|s| s / negatives as f64).collect(),
        median_call_intensity,
    })
}

fn check_stats(s: &Spectrogram, stats: &NormStats) -> Result<()> {
    if stats.noise_mean.len() != s.bands {
        return Err(Error::Shape(format!("{} band means for {} bands", stats.noise_mean.len(), s.bands)));
    }
    if !(stats.median_call_intensity > 0.0) {
        return Err(Error::InvalidParam("median call intensity must be > 0".into()));
    }
    Ok(())
}

/// `(s - noise_mean) / median_call_intensity`, band by band.
pub fn normalize(s: &Spectrogram, stats: &NormStats) -> Result<Spectrogram> {
    check_stats(s, stats)?;
    let m = stats.median_call_intensity;
    let mut out = s.clone();
    for row in out.data.chunks_exact_mut(s.bands) {
        for (v, mean) in row.iter_mut().zip(&stats.noise_mean) {
            *v = (*v - mean) / m;
        }
    }
    Ok(out)
}

pub fn denormalize(s: &Spectrogram, stats: &NormStats) -> Result<Spectrogram> {
    check_stats(s, stats)?;
    let m = stats.median_call_intensity;
    let mut out = s.clone();
    for row in out.data.chunks_exact_mut(s.bands) {
        for (v, mean) in row.iter_mut().zip(&stats.noise_mean) {
            *v = *v * m + mean;
        }
    }
    Ok(out)
}

/// Window `[offset, offset + frames)` of the input zero-padded by `pad`
/// frames on both sides. `offset == pad` returns the input unchanged.
pub fn crop_at(s: &Spectrogram, pad: usize, offset: usize) -> Result<Spectrogram> {
    if offset > 2 * pad {
        return Err(Error::InvalidParam(format!("crop offset {offset} exceeds {}", 2 * pad)));
    }
    let mut out = Spectrogram::zeros(s.frames, s.bands).with_axes_from(s);
    for t in 0..s.frames {
        let src = t + offset;
        if src >= pad && src - pad < s.frames {
            let src = src - pad;
            out.data[t * s.bands..(t + 1) * s.bands].copy_from_slice(s.row(src));
        }
    }
    Ok(out)
}

/// Uniformly random crop offset in `0..=2 * pad`.
pub fn crop_offset(pad: usize, seed: u64) -> usize {
    rng_from_seed(seed).gen_range(0..=2 * pad)
}

pub fn random_crop(s: &Spectrogram, pad: usize, seed: u64) -> Result<Spectrogram> {
    if s.frames != MODEL_FRAMES {
        return Err(Error::Shape(format!("crop expects {MODEL_FRAMES} frames, got {}", s.frames)));
    }
    crop_at(s, pad, crop_offset(pad, seed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfccConfig {
    pub stft: StftConfig,
    pub n_filters: usize,
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub n_coeffs: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            n_filters: 20,
            f_lo_hz: 0.0,
            f_hi_hz: 500.0,
            n_coeffs: 13,
        }
    }
}

/// Triangular filters with linearly spaced edges; below 500 Hz the mel scale
/// is close to linear. Returns `n_filters` rows of per-bin weights.
pub fn filterbank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.stft.window / 2 + 1;
    let df = cfg.stft.bin_hz();
    let step = (cfg.f_hi_hz - cfg.f_lo_hz) / (cfg.n_filters + 1) as f64;
    (0..cfg.n_filters)
        .map(|m| {
            let (lo, mid, hi) = (
                cfg.f_lo_hz + m as f64 * step,
                cfg.f_lo_hz + (m + 1) as f64 * step,
                cfg.f_lo_hz + (m + 2) as f64 * step,
            );
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * df;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            s * x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .sum::<f64>()
        })
        .collect()
}

const LOG_FLOOR: f64 = 1e-10;

/// Per-frame cepstral coefficients from per-frame power spectra.
pub fn mfcc_from_power(power_frames: &[Vec<f64>], cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let bank = filterbank(cfg);
    power_frames
        .iter()
        .map(|p| {
            let log_e: Vec<f64> = bank
                .iter()
                .map(|w| (w.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + LOG_FLOOR).ln())
                .collect();
            dct2(&log_e, cfg.n_coeffs)
        })
        .collect()
}

pub fn mfcc_frames(w: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let stft = Stft::new(cfg.stft)?;
    let frames = cfg.stft.n_frames(w.len());
    let power: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let start = t * cfg.stft.hop;
            stft.frame_magnitudes(&w.samples[start..start + cfg.stft.window])
                .into_iter()
                .map(|m| m * m)
                .collect()
        })
        .collect();
    Ok(mfcc_from_power(&power, cfg))
}

/// Concatenates per-coefficient mean, population variance, and mean first
/// temporal difference.
pub fn pool_coefficients(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 frames, got {}", frames.len())));
    }
    let n = frames.len() as f64;
    let k = frames[0].len();
    let mut out = vec![0.0; 3 * k];
    for c in 0..k {
        let mean = frames.iter().map(|f| f[c]).sum::<f64>() / n;
        let var = frames.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / n;
        let delta = frames.windows(2).map(|w| w[1][c] - w[0][c]).sum::<f64>() / (n - 1.0);
        out[c] = mean;
        out[k + c] = var;
        out[2 * k + c] = delta;
    }
    Ok(out)
}

/// 39-dimensional clip descriptor: pooled statistics of 13 MFCCs.
pub fn mfcc_features(w: &Waveform, cfg: &MfccConfig) -> Result<Vec<f64>> {
    if cfg.stft.n_frames(w.len()) < 2 {
        return Err(Error::InvalidParam("MFCC pooling needs at least 2 frames".into()));
    }
    pool_coefficients(&mfcc_frames(w, cfg)?)
}
