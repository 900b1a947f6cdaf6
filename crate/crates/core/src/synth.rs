//! Labeled synthetic soundscapes.
//!
//! Rumbles are harmonic stacks with a low fundamental and slow frequency
//! modulation. Backgrounds cover a handful of confusers (wind, engines,
//! short harmonic bursts, rain). Clips are exactly as long as the audio
//! needed for a fixed number of STFT frames, and carry per-frame labels.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, FormatError, Result};
use crate::rng::{derive_seed, derived_rng, rng_from_seed};

pub const FUNDAMENTAL_RANGE_HZ: (f64, f64) = (8.0, 34.0);
pub const DURATION_RANGE_S: (f64, f64) = (2.0, 8.0);
pub const MAX_FM_DEPTH: f64 = 0.15;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn zeros(sample_rate: u32, n: usize) -> Self {
        Self {
            sample_rate,
            samples: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Frame layout shared by the generator and the STFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipGeometry {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub frames: usize,
}

impl Default for ClipGeometry {
    fn default() -> Self {
        Self {
            sample_rate: 1000,
            window: 512,
            hop: 384,
            frames: 64,
        }
    }
}

impl ClipGeometry {
    /// `(frames - 1) * hop + window`: 24,704 samples under the defaults.
    pub fn clip_samples(&self) -> usize {
        (self.frames - 1) * self.hop + self.window
    }

    pub fn frame_span(&self, frame: usize) -> (usize, usize) {
        let start = frame * self.hop;
        (start, start + self.window)
    }

    /// Frames whose sample span intersects `[start, end)`.
    pub fn frames_overlapping(&self, start: usize, end: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.frames).filter(move |&i| {
            let (a, b) = self.frame_span(i);
            start < b && a < end && start < end
        })
    }

    fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.window == 0 || self.hop == 0 || self.frames == 0 {
            return Err(Error::InvalidParam(format!("degenerate clip geometry {self:?}")));
        }
        if self.hop > self.window {
            return Err(Error::InvalidParam("hop must not exceed window".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RumbleSpec {
    pub fundamental_hz: f64,
    pub duration_s: f64,
    pub n_harmonics: u32,
    /// Amplitude of harmonic `k` is proportional to `k^-harmonic_rolloff`.
    pub harmonic_rolloff: f64,
    /// Fractional frequency modulation depth.
    pub fm_depth: f64,
    pub fm_rate_hz: f64,
    pub amplitude: f64,
    pub onset_s: f64,
}

impl RumbleSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        let (flo, fhi) = FUNDAMENTAL_RANGE_HZ;
        if !(flo..=fhi).contains(&self.fundamental_hz) {
            return bad(format!("fundamental {} Hz outside [{flo}, {fhi}]", self.fundamental_hz));
        }
        let (dlo, dhi) = DURATION_RANGE_S;
        if !(dlo..=dhi).contains(&self.duration_s) {
            return bad(format!("duration {} s outside [{dlo}, {dhi}]", self.duration_s));
        }
        if self.n_harmonics == 0 {
            return bad("n_harmonics must be >= 1".into());
        }
        if !(self.harmonic_rolloff > 0.0) {
            return bad("harmonic_rolloff must be > 0".into());
        }
        if !(0.0..=MAX_FM_DEPTH).contains(&self.fm_depth) {
            return bad(format!("fm_depth {} outside [0, {MAX_FM_DEPTH}]", self.fm_depth));
        }
        if !(self.fm_rate_hz > 0.0) || !(self.amplitude > 0.0) || !(self.onset_s >= 0.0) {
            return bad("fm_rate_hz and amplitude must be > 0, onset_s >= 0".into());
        }
        if sample_rate < 1000 {
            return bad(format!("sample rate {sample_rate} below 1000 Hz"));
        }
        let top = f64::from(self.n_harmonics) * self.fundamental_hz * (1.0 + self.fm_depth);
        if top >= f64::from(sample_rate) / 2.0 {
            return bad(format!("highest harmonic {top:.1} Hz reaches Nyquist"));
        }
        Ok(())
    }

    pub fn n_samples(&self, sample_rate: u32) -> usize {
        (self.duration_s * f64::from(sample_rate)).round() as usize
    }

    pub fn onset_sample(&self, sample_rate: u32) -> usize {
        (self.onset_s * f64::from(sample_rate)).round() as usize
    }
}

/// Raised-cosine attack and decay, each covering 10% of the signal.
fn envelope(i: usize, n: usize) -> f64 {
    let ramp = ((n as f64) * 0.1).max(1.0);
    let x = i as f64;
    let tail = (n - 1 - i) as f64;
    let edge = x.min(tail);
    if edge >= ramp {
        1.0
    } else {
        0.5 * (1.0 - (PI * edge / ramp).cos())
    }
}

/// Renders a rumble of `duration_s * fs` samples starting at time zero.
/// Harmonic start phases are drawn from `seed`.
pub fn gen_rumble(spec: &RumbleSpec, fs: u32, seed: u64) -> Result<Waveform> {
    spec.validate(fs)?;
    let n = spec.n_samples(fs);
    let mut rng = rng_from_seed(seed);
    let phases: Vec<f64> = (0..spec.n_harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let f0 = spec.fundamental_hz;
    let (depth, rate) = (spec.fm_depth, spec.fm_rate_hz);
    let fs = f64::from(fs);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            // closed-form integral of f0 * (1 + depth * sin(2 pi rate t))
            let cycles = f0 * t + f0 * depth * (1.0 - (2.0 * PI * rate * t).cos()) / (2.0 * PI * rate);
            let mut v = 0.0;
            for (k, phase) in phases.iter().enumerate() {
                let h = (k + 1) as f64;
                v += h.powf(-spec.harmonic_rolloff) * (2.0 * PI * h * cycles + phase).sin();
            }
            (spec.amplitude * v * envelope(i, n)) as f32
        })
        .collect();
    Ok(Waveform {
        sample_rate: fs as u32,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BackgroundKind {
    BroadbandWind,
    EngineHarmonic,
    CrocBurst,
    Rain,
    Silence,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 5] = [
        BackgroundKind::BroadbandWind,
        BackgroundKind::EngineHarmonic,
        BackgroundKind::CrocBurst,
        BackgroundKind::Rain,
        BackgroundKind::Silence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackgroundKind::BroadbandWind => "broadband_wind",
            BackgroundKind::EngineHarmonic => "engine_harmonic",
            BackgroundKind::CrocBurst => "croc_burst",
            BackgroundKind::Rain => "rain",
            BackgroundKind::Silence => "silence",
        }
    }

    /// `(name, min, max, default)` for every parameter the kind accepts.
    pub fn param_ranges(self) -> &'static [(&'static str, f64, f64, f64)] {
        match self {
            BackgroundKind::BroadbandWind => &[("gust_rate_hz", 0.0, 1.0, 0.1)],
            BackgroundKind::EngineHarmonic => &[
                ("fundamental_hz", 20.0, 60.0, 30.0),
                ("n_harmonics", 1.0, 8.0, 4.0),
                ("jitter", 0.0, 0.05, 0.01),
            ],
            BackgroundKind::CrocBurst => &[
                ("fundamental_hz", 15.0, 45.0, 25.0),
                ("bursts", 1.0, 10.0, 3.0),
                ("burst_s", 0.2, 0.9, 0.6),
            ],
            BackgroundKind::Rain => &[("drops_per_s", 1.0, 200.0, 40.0)],
            BackgroundKind::Silence => &[],
        }
    }
}

impl fmt::Display for BackgroundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackgroundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown background kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSpec {
    pub kind: BackgroundKind,
    /// Target RMS of the rendered background.
    pub level: f64,
    pub params: BTreeMap<String, f64>,
}

impl BackgroundSpec {
    pub fn new(kind: BackgroundKind, level: f64) -> Self {
        Self {
            kind,
            level,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level >= 0.0) {
            return Err(Error::InvalidParam(format!("background level {} < 0", self.level)));
        }
        let ranges = self.kind.param_ranges();
        for (key, value) in &self.params {
            let Some(&(_, lo, hi, _)) = ranges.iter().find(|r| r.0 == key) else {
                return Err(Error::InvalidParam(format!("{} does not take parameter {key:?}", self.kind)));
            };
            if !(lo..=hi).contains(value) {
                return Err(Error::InvalidParam(format!("{}.{key} = {value} outside [{lo}, {hi}]", self.kind)));
            }
        }
        Ok(())
    }

    /// Resolved parameter, falling back to the documented default.
    pub fn param(&self, key: &str) -> f64 {
        self.params.get(key).copied().unwrap_or_else(|| {
            self.kind
                .param_ranges()
                .iter()
                .find(|r| r.0 == key)
                .map(|r| r.3)
                .unwrap_or(0.0)
        })
    }
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn scale_to_rms(x: &mut [f64], level: f64) {
    let r = rms(x);
    if r > 0.0 {
        let g = level / r;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// White Gaussian noise reshaped to a 1/f power spectrum.
fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let freq_index = k.min(n - k);
        *c = if freq_index == 0 {
            Complex::new(0.0, 0.0)
        } else {
            *c / (freq_index as f64).sqrt()
        };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re / n as f64).collect()
}

/// Slowly varying zero-mean wobble in roughly [-1, 1].
fn slow_wobble(n: usize, fs: f64, rng: &mut impl Rng) -> Vec<f64> {
    let parts: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.05..0.5), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            parts.iter().map(|(r, p)| (2.0 * PI * r * t + p).sin()).sum::<f64>() / 3.0
        })
        .collect()
}

fn harmonic_stack(out: &mut [f64], start: usize, len: usize, f0: f64, harmonics: u32, fs: f64, rng: &mut impl Rng) {
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    for i in 0..len.min(out.len().saturating_sub(start)) {
        let t = i as f64 / fs;
        let w = 0.5 * (1.0 - (2.0 * PI * i as f64 / len as f64).cos());
        let v: f64 = phases
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let h = (k + 1) as f64;
                (2.0 * PI * h * f0 * t + p).sin() / h
            })
            .sum();
        out[start + i] += w * v;
    }
}

pub fn gen_background(spec: &BackgroundSpec, n_samples: usize, fs: u32, seed: u64) -> Result<Waveform> {
    if n_samples == 0 {
        return Err(Error::InvalidParam("n_samples must be > 0".into()));
    }
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let fsf = f64::from(fs);
    let mut x = match spec.kind {
        BackgroundKind::Silence => vec![0.0; n_samples],
        BackgroundKind::BroadbandWind => {
            let mut x = pink_noise(n_samples, &mut rng);
            let gust = spec.param("gust_rate_hz");
            let phase = rng.gen_range(0.0..2.0 * PI);
            for (i, v) in x.iter_mut().enumerate() {
                *v *= 1.0 + 0.5 * (2.0 * PI * gust * i as f64 / fsf + phase).sin();
            }
            x
        }
        BackgroundKind::EngineHarmonic => {
            let f0 = spec.param("fundamental_hz");
            let harmonics = spec.param("n_harmonics").round() as u32;
            let jitter = spec.param("jitter");
            let wobble = slow_wobble(n_samples, fsf, &mut rng);
            let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let mut cycles = 0.0;
            let mut x = Vec::with_capacity(n_samples);
            for w in &wobble {
                let v: f64 = phases
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let h = (k + 1) as f64;
                        (2.0 * PI * h * cycles + p).sin() / h
                    })
                    .sum();
                x.push(v);
                cycles += f0 * (1.0 + jitter * w) / fsf;
            }
            x
        }
        BackgroundKind::CrocBurst => {
            let f0 = spec.param("fundamental_hz");
            let bursts = spec.param("bursts").round() as usize;
            let burst_s = spec.param("burst_s");
            let mut x = vec![0.0; n_samples];
            for _ in 0..bursts {
                let len = ((burst_s * rng.gen_range(0.7..1.0)) * fsf).round() as usize;
                let len = len.clamp(2, n_samples);
                let start = rng.gen_range(0..=n_samples - len);
                let f = f0 * rng.gen_range(0.9..1.1);
                harmonic_stack(&mut x, start, len, f, 3, fsf, &mut rng);
            }
            x
        }
        BackgroundKind::Rain => {
            let drops = spec.param("drops_per_s") * n_samples as f64 / fsf;
            let mut x: Vec<f64> = (0..n_samples)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.2 * z
                })
                .collect();
            let decay = (-1.0 / (0.005 * fsf)).exp();
            for _ in 0..drops.round() as usize {
                let at = rng.gen_range(0..n_samples);
                let mut amp: f64 = rng.gen_range(-1.0..1.0);
                for v in x[at..].iter_mut() {
                    *v += amp;
                    amp *= decay;
                    if amp.abs() < 1e-4 {
                        break;
                    }
                }
            }
            x
        }
    };
    scale_to_rms(&mut x, spec.level);
    Ok(Waveform {
        sample_rate: fs,
        samples: x.into_iter().map(|v| v as f32).collect(),
    })
}

/// Sample interval `[start, start + len)` occupied by one rumble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub waveform: Waveform,
    pub frame_labels: Vec<bool>,
    pub clip_label: bool,
    /// Generator metadata; empty for clips loaded from a dataset file.
    pub events: Vec<Event>,
}

/// Per-frame labels from rumble supports.
pub fn frame_labels(geometry: &ClipGeometry, events: &[Event]) -> Vec<bool> {
    let mut labels = vec![false; geometry.frames];
    for e in events {
        for i in geometry.frames_overlapping(e.start, e.start + e.len) {
            labels[i] = true;
        }
    }
    labels
}

/// Mixes rumbles into a background. The rumble sum is scaled so that
/// `20 log10(rms(calls) / rms(background))`, both measured over the union of
/// rumble supports, equals `snr_db`. A silent background leaves the rumbles
/// at their specified amplitude.
pub fn gen_clip(
    rumbles: &[RumbleSpec],
    background: &BackgroundSpec,
    snr_db: f64,
    geometry: &ClipGeometry,
    seed: u64,
) -> Result<LabeledClip> {
    geometry.validate()?;
    let fs = geometry.sample_rate;
    let n = geometry.clip_samples();
    let mut calls = vec![0.0f64; n];
    let mut support = vec![false; n];
    let mut events = Vec::with_capacity(rumbles.len());
    for (i, spec) in rumbles.iter().enumerate() {
        let start = spec.onset_sample(fs);
        let len = spec.n_samples(fs);
        if start + len > n {
            return Err(Error::InvalidParam(format!(
                "rumble {i} ends at sample {} past clip end {n}",
                start + len
            )));
        }
        let w = gen_rumble(spec, fs, derive_seed(seed, &format!("rumble/{i}")))?;
        for (j, v) in w.samples.iter().enumerate() {
            calls[start + j] += f64::from(*v);
            support[start + j] = true;
        }
        events.push(Event { start, len });
    }
    let bg = gen_background(background, n, fs, derive_seed(seed, "background"))?;
    let bg: Vec<f64> = bg.samples.iter().map(|v| f64::from(*v)).collect();

    let on: Vec<usize> = (0..n).filter(|&i| support[i]).collect();
    let rms_calls = rms(&on.iter().map(|&i| calls[i]).collect::<Vec<_>>());
    let rms_bg = rms(&on.iter().map(|&i| bg[i]).collect::<Vec<_>>());
    let gain = if rms_calls > 0.0 && rms_bg > 0.0 {
        10f64.powf(snr_db / 20.0) * rms_bg / rms_calls
    } else {
        1.0
    };
    let samples = bg
        .iter()
        .zip(&calls)
        .map(|(b, c)| (b + gain * c) as f32)
        .collect();
    let labels = frame_labels(geometry, &events);
    Ok(LabeledClip {
        waveform: Waveform { sample_rate: fs, samples },
        clip_label: labels.iter().any(|&l| l),
        frame_labels: labels,
        events,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_clips: usize,
    /// Fraction of clips assigned to the training split.
    pub train_fraction: f64,
    pub snr_db_range: (f64, f64),
    pub geometry: ClipGeometry,
    pub max_rumbles: usize,
    pub background_level_range: (f64, f64),
    /// Relative frequency of each background kind.
    pub background_weights: Vec<(BackgroundKind, f64)>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_clips: 2000,
            train_fraction: 0.5,
            snr_db_range: (-5.0, 20.0),
            geometry: ClipGeometry::default(),
            max_rumbles: 2,
            background_level_range: (0.5, 2.0),
            background_weights: vec![
                (BackgroundKind::BroadbandWind, 0.3),
                (BackgroundKind::EngineHarmonic, 0.25),
                (BackgroundKind::CrocBurst, 0.2),
                (BackgroundKind::Rain, 0.2),
                (BackgroundKind::Silence, 0.05),
            ],
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(Error::Empty("dataset requests zero clips".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::InvalidParam(format!("train_fraction {} outside [0, 1]", self.train_fraction)));
        }
        if self.snr_db_range.0 > self.snr_db_range.1 || self.background_level_range.0 > self.background_level_range.1 {
            return Err(Error::InvalidParam("empty SNR or level range".into()));
        }
        if self.max_rumbles == 0 {
            return Err(Error::InvalidParam("max_rumbles must be >= 1".into()));
        }
        let total: f64 = self.background_weights.iter().map(|w| w.1).sum();
        if self.background_weights.iter().any(|w| w.1 < 0.0) || !(total > 0.0) {
            return Err(Error::InvalidParam("background weights must be >= 0 with positive sum".into()));
        }
        self.geometry.validate()?;
        let clip_s = self.geometry.clip_samples() as f64 / f64::from(self.geometry.sample_rate);
        if clip_s < DURATION_RANGE_S.1 {
            return Err(Error::InvalidParam(format!("clip of {clip_s:.1} s cannot hold the longest rumble")));
        }
        Ok(())
    }
}

fn pick_background(cfg: &DatasetConfig, rng: &mut impl Rng) -> BackgroundSpec {
    let total: f64 = cfg.background_weights.iter().map(|w| w.1).sum();
    let mut u = rng.gen_range(0.0..total);
    let mut kind = cfg.background_weights[0].0;
    for &(k, w) in &cfg.background_weights {
        if u < w {
            kind = k;
            break;
        }
        u -= w;
    }
    let (lo, hi) = cfg.background_level_range;
    let level = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let mut spec = BackgroundSpec::new(kind, level);
    for &(name, lo, hi, _) in kind.param_ranges() {
        let v = rng.gen_range(lo..=hi);
        let v = if matches!(name, "n_harmonics" | "bursts") { v.round() } else { v };
        spec.params.insert(name.to_string(), v);
    }
    spec
}

fn random_rumble(clip_s: f64, fs: u32, rng: &mut impl Rng) -> RumbleSpec {
    let fundamental_hz = rng.gen_range(FUNDAMENTAL_RANGE_HZ.0..=FUNDAMENTAL_RANGE_HZ.1);
    let duration_s = rng.gen_range(DURATION_RANGE_S.0..=DURATION_RANGE_S.1);
    let fm_depth = rng.gen_range(0.0..=MAX_FM_DEPTH);
    let nyquist_cap = ((f64::from(fs) / 2.0) / (fundamental_hz * (1.0 + fm_depth))).ceil() as u32 - 1;
    RumbleSpec {
        fundamental_hz,
        duration_s,
        n_harmonics: rng.gen_range(2..=6).min(nyquist_cap.max(1)),
        harmonic_rolloff: rng.gen_range(0.5..=1.5),
        fm_depth,
        fm_rate_hz: rng.gen_range(0.1..=0.5),
        amplitude: 1.0,
        // keep a sample of slack so rounding never pushes the end past the clip
        onset_s: rng.gen_range(0.0..=(clip_s - duration_s - 0.002).max(0.0)),
    }
}

/// Clip `index` of a dataset drawn from `master_seed`.
pub fn gen_dataset_clip(cfg: &DatasetConfig, master_seed: u64, index: usize, positive: bool) -> Result<LabeledClip> {
    let seed = derive_seed(master_seed, &format!("clip/{index}"));
    let mut rng = rng_from_seed(seed);
    let g = &cfg.geometry;
    let clip_s = g.clip_samples() as f64 / f64::from(g.sample_rate);
    let background = pick_background(cfg, &mut rng);
    let rumbles: Vec<RumbleSpec> = if positive {
        let count = rng.gen_range(1..=cfg.max_rumbles);
        (0..count).map(|_| random_rumble(clip_s, g.sample_rate, &mut rng)).collect()
    } else {
        Vec::new()
    };
    let (lo, hi) = cfg.snr_db_range;
    let snr = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    gen_clip(&rumbles, &background, snr, g, derive_seed(seed, "mix"))
}

/// A list of clips sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geometry: ClipGeometry,
    pub clips: Vec<LabeledClip>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Balanced dataset: `n/2` positives and `n - n/2` negatives, stratified into
/// train and test by a seeded shuffle. Clip `i` is generated from the stream
/// `derive_seed(seed, "clip/{i}")`, so generation order does not matter.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let n_pos = cfg.n_clips / 2;
    let clips: Vec<LabeledClip> = (0..cfg.n_clips)
        .into_par_iter()
        .map(|i| gen_dataset_clip(cfg, seed, i, i < n_pos))
        .collect::<Result<_>>()?;

    let mut rng = derived_rng(seed, "split");
    let mut pos: Vec<usize> = (0..n_pos).collect();
    let mut neg: Vec<usize> = (n_pos..cfg.n_clips).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n_pos_train = (pos.len() as f64 * cfg.train_fraction).round() as usize;
    let n_neg_train = (neg.len() as f64 * cfg.train_fraction).round() as usize;
    let mut train_idx: Vec<usize> = pos[..n_pos_train].iter().chain(&neg[..n_neg_train]).copied().collect();
    let mut test_idx: Vec<usize> = pos[n_pos_train..].iter().chain(&neg[n_neg_train..]).copied().collect();
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);

    let pick = |idx: &[usize]| Dataset {
        geometry: cfg.geometry,
        clips: idx.iter().map(|&i| clips[i].clone()).collect(),
    };
    Ok(DatasetSplit {
        train: pick(&train_idx),
        test: pick(&test_idx),
    })
}

const DATASET_MAGIC: &[u8; 6] = b"PAMDS1";
const LABEL_BITMAP_BYTES: usize = 64;

impl Dataset {
    pub fn positives(&self) -> usize {
        self.clips.iter().filter(|c| c.clip_label).count()
    }

    /// Header: magic `PAMDS1`, then sample rate, clip count, frame count and
    /// samples per clip as little-endian u32. Each clip record is its samples
    /// as little-endian f32, a 64-byte frame-label bitmap (frame `i` is bit
    /// `i % 8` of byte `i / 8`, remaining bits zero) and a one-byte clip label.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let g = &self.geometry;
        if g.frames > LABEL_BITMAP_BYTES * 8 {
            return Err(Error::InvalidParam(format!("{} frames do not fit the label bitmap", g.frames)));
        }
        let n = g.clip_samples();
        w.write_all(DATASET_MAGIC)?;
        for v in [g.sample_rate, self.clips.len() as u32, g.frames as u32, n as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(n * 4 + LABEL_BITMAP_BYTES + 1);
        for clip in &self.clips {
            if clip.waveform.len() != n || clip.frame_labels.len() != g.frames {
                return Err(Error::Shape("clip does not match dataset geometry".into()));
            }
            buf.clear();
            for s in &clip.waveform.samples {
                buf.extend_from_slice(&s.to_le_bytes());
            }
            let mut bitmap = [0u8; LABEL_BITMAP_BYTES];
            for (i, &l) in clip.frame_labels.iter().enumerate() {
                if l {
                    bitmap[i / 8] |= 1 << (i % 8);
                }
            }
            buf.extend_from_slice(&bitmap);
            buf.push(u8::from(clip.clip_label));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a dataset file. The window and hop are not stored, so they are
    /// taken from `geometry`; the stored sample rate, frame count and clip
    /// length must agree with it.
    pub fn read_from(r: &mut impl Read, geometry: ClipGeometry) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let header = DATASET_MAGIC.len() + 16;
        if bytes.len() < header {
            return Err(FormatError::TruncatedHeader {
                needed: header,
                available: bytes.len(),
            }
            .into());
        }
        if &bytes[..6] != DATASET_MAGIC {
            return Err(FormatError::BadMagic { expected: "PAMDS1" }.into());
        }
        let u = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap());
        let (sample_rate, count, frames, n) = (u(0), u(1) as usize, u(2) as usize, u(3) as usize);
        if sample_rate != geometry.sample_rate || frames != geometry.frames || n != geometry.clip_samples() {
            return Err(FormatError::InvalidField {
                field: "geometry",
                reason: format!("file has fs={sample_rate} frames={frames} samples={n}, expected {geometry:?}"),
            }
            .into());
        }
        let record = n * 4 + LABEL_BITMAP_BYTES + 1;
        let needed = header + count * record;
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
        let clips = bytes[header..]
            .chunks_exact(record)
            .map(|rec| {
                let samples = rec[..n * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let bitmap = &rec[n * 4..n * 4 + LABEL_BITMAP_BYTES];
                let frame_labels = (0..frames).map(|i| bitmap[i / 8] >> (i % 8) & 1 == 1).collect();
                let clip_label = match rec[record - 1] {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(FormatError::InvalidField {
                            field: "clip_label",
                            reason: format!("byte {other}"),
                        })
                    }
                };
                Ok(LabeledClip {
                    waveform: Waveform { sample_rate, samples },
                    frame_labels,
                    clip_label,
                    events: Vec::new(),
                })
            })
            .collect::<std::result::Result<_, FormatError>>()?;
        Ok(Self { geometry, clips })
    }

    /// `clip_id,clip_label,frame_labels` with labels as a 0/1 string.
    pub fn write_labels_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "clip_id,clip_label,frame_labels")?;
        for (i, c) in self.clips.iter().enumerate() {
            let frames: String = c.frame_labels.iter().map(|&l| if l { '1' } else { '0' }).collect();
            writeln!(w, "{i},{},{frames}", u8::from(c.clip_label))?;
        }
        Ok(())
    }
}
