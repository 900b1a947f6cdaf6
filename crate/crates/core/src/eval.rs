//! Evaluation protocols: detection metrics and PR curves, per-frame
//! segmentation accuracy, the MFCC+SVM baseline, and the rate-accuracy sweep
//! over allocation methods and budgets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bitalloc::{lambda_to_allocation, train_allocation, AllocTrainConfig};
use crate::codec::{
    compression_ratio_for_budget, human_allocation_with_floor, uniform_allocation_with_floor, AllocMethod,
    AllocationPlan, Compression, ScaleF32, MIN_BITS,
};
use crate::dsp::{
    compute_norm_stats, mfcc_features, normalize, spectrogram_examples, MfccConfig, NormStats, SpecExample, Spectrogram,
    StftConfig,
};
use crate::error::{Error, Result};
use crate::neural::svm::{mfcc_svm_train, Standardizer, SvmConfig};
use crate::neural::{train_classifier, Architecture, DetectorSpec, History, ModelParams, SegmenterSpec, TrainConfig};
use crate::rng::derive_seed;
use crate::synth::DatasetSplit;

/// Decision threshold on the call probability.
pub const THRESHOLD: f64 = 0.5;

/// Budgets at 5, 7 and 9 bits per band on average over 47 bands.
pub const DESK_BUDGETS: [u32; 3] = [235, 329, 423];
/// The original grid of 1, 3 and 5 bits per band; needs a floor of 1.
pub const COMPAT_BUDGETS: [u32; 3] = [47, 141, 235];
pub const COMPAT_FLOOR: u8 = 1;

/// Quantile of |normalized training magnitude| that maps to codec full scale.
pub const SCALE_QUANTILE: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Counts with "positive" meaning `score >= threshold`.
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// 1 when nothing is predicted positive (no false alarms).
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
    /// Call probability per example (or per frame for segmenters).
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl Metrics {
    pub fn from_scores(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
        }
        if scores.is_empty() {
            return Err(Error::Empty("no scores to evaluate".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        let confusion = Confusion::at(&scores, &labels, THRESHOLD);
        Ok(Self {
            accuracy: confusion.accuracy(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            confusion,
            scores,
            labels,
        })
    }
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score, ascending in threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::InvalidParam("a PR curve needs both positive and negative labels".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // sweep from the highest score down; a point is emitted once all
    // examples sharing a score have been counted
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_score {
            points.push(PrPoint {
                threshold: scores[i],
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / positives as f64,
            });
        }
    }
    points.reverse();
    Ok(points)
}

/// Trapezoid area under precision as a function of recall, between the
/// curve's own end points.
pub fn pr_auc(points: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

pub fn write_pr_csv(w: &mut impl Write, points: &[PrPoint]) -> Result<()> {
    writeln!(w, "threshold,precision,recall")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    Ok(())
}

/// A dataset as normalized spectrograms, with the statistics and codec
/// scale fitted on its training split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub stft: StftConfig,
    pub norm: NormStats,
    pub scale: ScaleF32,
    pub train: Vec<SpecExample>,
    pub test: Vec<SpecExample>,
    pub band_freqs: Vec<f64>,
}

impl Prepared {
    pub fn new(split: &DatasetSplit, stft: &StftConfig) -> Result<Self> {
        let raw_train = spectrogram_examples(&split.train.clips, stft)?;
        let raw_test = spectrogram_examples(&split.test.clips, stft)?;
        let norm = compute_norm_stats(&raw_train)?;
        let train = normalize_all(&raw_train, &norm)?;
        let test = normalize_all(&raw_test, &norm)?;
        let scale = fit_scale(&train)?;
        Ok(Self {
            stft: *stft,
            norm,
            scale,
            train,
            test,
            band_freqs: stft.band_freqs_hz(),
        })
    }

    pub fn bands(&self) -> usize {
        self.band_freqs.len()
    }

    pub fn compression(&self, plan: &AllocationPlan) -> Compression {
        Compression {
            plan: plan.clone(),
            scale: self.scale,
        }
    }

    /// Identifies everything applied between the STFT and the network:
    /// STFT settings, normalization statistics and the codec, if any.
    pub fn fingerprint(&self, codec: Option<&Compression>) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.stft));
        for v in self.norm.noise_mean.iter().chain([&self.norm.median_call_intensity]) {
            h.update(v.to_le_bytes());
        }
        let codec_tag = match codec {
            None => "none".to_string(),
            Some(c) => {
                h.update(c.scale.as_f32().to_le_bytes());
                h.update(&c.plan.bits);
                format!("{}@{}", c.plan.method, c.plan.budget)
            }
        };
        let digest = h.finalize();
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        format!("{hex} codec={codec_tag}")
    }

    /// Passes every example through the codec; `None` returns a copy.
    pub fn encode_all(&self, data: &[SpecExample], codec: Option<&Compression>) -> Result<Vec<SpecExample>> {
        match codec {
            None => Ok(data.to_vec()),
            Some(c) => data
                .par_iter()
                .map(|e| {
                    Ok(SpecExample {
                        spec: c.apply(&e.spec)?,
                        ..e.clone()
                    })
                })
                .collect(),
        }
    }
}

fn normalize_all(data: &[SpecExample], norm: &NormStats) -> Result<Vec<SpecExample>> {
    data.par_iter()
        .map(|e| {
            Ok(SpecExample {
                spec: normalize(&e.spec, norm)?,
                ..e.clone()
            })
        })
        .collect()
}

/// Codec scale: the `SCALE_QUANTILE` quantile (nearest rank) of the absolute
/// normalized training values.
pub fn fit_scale(train: &[SpecExample]) -> Result<ScaleF32> {
    let mut mags: Vec<f64> = train.iter().flat_map(|e| e.spec.data.iter().map(|v| v.abs())).collect();
    if mags.is_empty() {
        return Err(Error::Empty("no training values for the codec scale".into()));
    }
    let rank = ((SCALE_QUANTILE * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    let (_, v, _) = mags.select_nth_unstable_by(rank - 1, f64::total_cmp);
    ScaleF32::new(if *v > 0.0 { *v } else { 1.0 })
}

/// Trains a detector on `prep.train` passed through `codec`.
pub fn train_detector(
    prep: &Prepared,
    arch: Architecture,
    codec: Option<&Compression>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, History)> {
    let data = prep.encode_all(&prep.train, codec)?;
    let (mut model, history) = train_classifier(arch, &data, cfg)?;
    model.representation = prep.fingerprint(codec);
    Ok((model, history))
}

fn check_representation(model: &ModelParams<f32>, expected: String) -> Result<()> {
    if model.representation != expected {
        return Err(Error::Representation {
            trained: model.representation.clone(),
            evaluated: expected,
        });
    }
    Ok(())
}

/// Clip-level metrics on `test`, after the codec when one is given. The
/// model must have been trained on the same representation.
pub fn evaluate_detector(
    model: &ModelParams<f32>,
    prep: &Prepared,
    test: &[SpecExample],
    codec: Option<&Compression>,
) -> Result<Metrics> {
    if model.arch.is_segmenter() {
        return Err(Error::InvalidParam("evaluate_detector needs a detector".into()));
    }
    check_representation(model, prep.fingerprint(codec))?;
    let data = prep.encode_all(test, codec)?;
    let specs: Vec<&Spectrogram> = data.iter().map(|e| &e.spec).collect();
    let scores = model.predict(&specs)?.into_iter().map(|s| s[0]).collect();
    Metrics::from_scores(scores, data.iter().map(|e| e.label).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMetrics {
    /// Pooled over every test frame.
    pub frames: Metrics,
    pub ablation_accuracy: Option<f64>,
}

/// Per-frame call probabilities flattened over examples.
pub fn frame_scores(model: &ModelParams<f32>, test: &[SpecExample]) -> Result<(Vec<f64>, Vec<bool>)> {
    if !model.arch.is_segmenter() {
        return Err(Error::InvalidParam("frame scores need a segmenter".into()));
    }
    let specs: Vec<&Spectrogram> = test.iter().map(|e| &e.spec).collect();
    let scores = model.predict(&specs)?.concat();
    let labels = test.iter().flat_map(|e| e.frame_labels.iter().copied()).collect();
    Ok((scores, labels))
}

/// Per-frame metrics of `model`, plus the per-frame accuracy of `ablation`
/// on the same frames when supplied.
pub fn evaluate_segmenter(
    model: &ModelParams<f32>,
    ablation: Option<&ModelParams<f32>>,
    prep: &Prepared,
    test: &[SpecExample],
) -> Result<SegmentMetrics> {
    check_representation(model, prep.fingerprint(None))?;
    let (scores, labels) = frame_scores(model, test)?;
    let frames = Metrics::from_scores(scores, labels)?;
    let ablation_accuracy = match ablation {
        None => None,
        Some(a) => {
            check_representation(a, prep.fingerprint(None))?;
            let (s, l) = frame_scores(a, test)?;
            Some(Metrics::from_scores(s, l)?.accuracy)
        }
    };
    Ok(SegmentMetrics {
        frames,
        ablation_accuracy,
    })
}

/// Trains a segmenter on the uncompressed training split.
pub fn train_segmenter(prep: &Prepared, spec: SegmenterSpec, cfg: &TrainConfig) -> Result<(ModelParams<f32>, History)> {
    let (mut model, history) = train_classifier(Architecture::Segmenter(spec), &prep.train, cfg)?;
    model.representation = prep.fingerprint(None);
    Ok((model, history))
}

/// MFCC features, z-scored with training statistics, into a linear SVM.
pub fn svm_baseline(split: &DatasetSplit, mfcc: &MfccConfig, cfg: &SvmConfig) -> Result<Metrics> {
    let feats = |clips: &[crate::synth::LabeledClip]| -> Result<Vec<Vec<f64>>> {
        clips.par_iter().map(|c| mfcc_features(&c.waveform, mfcc)).collect()
    };
    let train = feats(&split.train.clips)?;
    let test = feats(&split.test.clips)?;
    let z = Standardizer::fit(&train)?;
    let train: Vec<Vec<f64>> = train.iter().map(|f| z.apply(f)).collect::<Result<_>>()?;
    let labels: Vec<bool> = split.train.clips.iter().map(|c| c.clip_label).collect();
    let svm = mfcc_svm_train(&train, &labels, cfg)?;
    let scores = test.iter().map(|f| Ok(svm.score(&z.apply(f)?))).collect::<Result<Vec<_>>>()?;
    Metrics::from_scores(scores, split.test.clips.iter().map(|c| c.clip_label).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateAccuracyConfig {
    pub budgets: Vec<u32>,
    pub methods: Vec<AllocMethod>,
    pub n_seeds: usize,
    pub floor: u8,
    pub detector: DetectorSpec,
    pub train: TrainConfig,
    /// Settings for the learned allocation; its inner training config is
    /// used for the joint classifier.
    pub alloc: AllocTrainConfig,
    /// Also train one uncompressed detector per seed as the reference.
    pub baseline: bool,
    pub master_seed: u64,
}

impl Default for RateAccuracyConfig {
    fn default() -> Self {
        Self {
            budgets: DESK_BUDGETS.to_vec(),
            methods: AllocMethod::ALL.to_vec(),
            n_seeds: 5,
            floor: MIN_BITS,
            detector: DetectorSpec::default(),
            train: TrainConfig::default(),
            alloc: AllocTrainConfig::default(),
            baseline: true,
            master_seed: 0,
        }
    }
}

impl RateAccuracyConfig {
    /// The original 47/141/235 grid, which only fits under a floor of 1.
    pub fn compat(mut self) -> Self {
        self.budgets = COMPAT_BUDGETS.to_vec();
        self.floor = COMPAT_FLOOR;
        self
    }

    pub fn validate(&self, bands: usize) -> Result<()> {
        if self.n_seeds == 0 || self.methods.is_empty() || self.budgets.is_empty() {
            return Err(Error::InvalidParam("need at least one seed, method and budget".into()));
        }
        for &b in &self.budgets {
            crate::codec::check_budget(bands, b, self.floor)?;
        }
        self.train.validate()?;
        self.alloc.validate()
    }

    /// Stream root of seed `k`; every model trained for that seed derives
    /// from it, so methods are compared on paired initializations.
    pub fn seed(&self, k: usize) -> u64 {
        derive_seed(self.master_seed, &format!("seed/{k}"))
    }

    fn detector_cfg(&self, k: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed(k), "detector"),
            ..self.train
        }
    }

    fn alloc_cfg(&self, k: usize) -> AllocTrainConfig {
        let mut a = self.alloc.clone();
        a.train.seed = derive_seed(self.seed(k), "alloc");
        a
    }
}

/// One trained-and-evaluated detector.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: AllocMethod,
    pub budget: u32,
    pub seed: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub compression_ratio: f64,
    pub bits: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateAccuracyRow {
    pub method: AllocMethod,
    pub budget: u32,
    pub accuracy: Summary,
    pub compression_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateAccuracyReport {
    /// Sorted by (method, budget).
    pub rows: Vec<RateAccuracyRow>,
    /// Sorted by (method, budget, seed).
    pub runs: Vec<RunRecord>,
    /// Learned lambda per seed, when the learned method ran.
    pub lambdas: Vec<Vec<f64>>,
    /// Uncompressed detector accuracy per seed, when requested.
    pub baseline: Option<Summary>,
}

impl RateAccuracyReport {
    pub fn row(&self, method: AllocMethod, budget: u32) -> Option<&RateAccuracyRow> {
        self.rows.iter().find(|r| r.method == method && r.budget == budget)
    }

    pub fn run(&self, method: AllocMethod, budget: u32, seed: usize) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.method == method && r.budget == budget && r.seed == seed)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "method,budget,seed,accuracy,precision@0.5,recall@0.5,compression_ratio")?;
        for r in &self.runs {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.method, r.budget, r.seed, r.accuracy, r.precision, r.recall, r.compression_ratio
            )?;
        }
        Ok(())
    }

    /// Human-readable table of mean and std per (method, budget).
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<9} {:>7} {:>9} {:>17} {:>6}", "method", "budget", "ratio", "accuracy", "seeds");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<9} {:>7} {:>9.2} {:>8.4} ± {:<6.4} {:>6}",
                r.method.as_str(),
                r.budget,
                r.compression_ratio,
                r.accuracy.mean,
                r.accuracy.std,
                r.accuracy.values.len()
            );
        }
        if let Some(b) = &self.baseline {
            let _ = writeln!(
                s,
                "{:<9} {:>7} {:>9} {:>8.4} ± {:<6.4} {:>6}",
                "none",
                "-",
                "1.00",
                b.mean,
                b.std,
                b.values.len()
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Job {
    Detector { method: AllocMethod, budget: u32, seed: usize },
    Baseline { seed: usize },
}

/// Plan for `method` at `budget`; learned plans need the seed's lambda.
pub fn plan_for(
    method: AllocMethod,
    budget: u32,
    floor: u8,
    band_freqs: &[f64],
    lambda: Option<&[f64]>,
) -> Result<AllocationPlan> {
    match method {
        AllocMethod::Human => human_allocation_with_floor(band_freqs, budget, floor),
        AllocMethod::Uniform => uniform_allocation_with_floor(band_freqs.len(), budget, floor),
        AllocMethod::Learned => {
            let lam = lambda.ok_or_else(|| Error::InvalidParam("learned plan without lambda".into()))?;
            let mut plan = lambda_to_allocation(lam, budget, floor)?;
            plan.method = AllocMethod::Learned;
            Ok(plan)
        }
    }
}

/// For every (method, budget, seed): build the plan (learning lambda first
/// for the learned method), train a fresh detector on compressed training
/// data, and evaluate it on compressed test data. Jobs run in parallel and
/// are merged by key, so the result does not depend on scheduling.
pub fn rate_accuracy_table(prep: &Prepared, cfg: &RateAccuracyConfig) -> Result<RateAccuracyReport> {
    cfg.validate(prep.bands())?;
    let arch = Architecture::Detector(DetectorSpec {
        frames: prep.train.first().map_or(cfg.detector.frames, |e| e.spec.frames),
        bands: prep.bands(),
        ..cfg.detector
    });

    let lambdas: Vec<Vec<f64>> = if cfg.methods.contains(&AllocMethod::Learned) {
        (0..cfg.n_seeds)
            .into_par_iter()
            .map(|k| Ok(train_allocation(arch, &prep.train, &cfg.alloc_cfg(k), None)?.0))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        for &budget in &cfg.budgets {
            for seed in 0..cfg.n_seeds {
                jobs.push(Job::Detector { method, budget, seed });
            }
        }
    }
    if cfg.baseline {
        jobs.extend((0..cfg.n_seeds).map(|seed| Job::Baseline { seed }));
    }

    let results: BTreeMap<Job, (Metrics, Vec<u8>)> = jobs
        .par_iter()
        .map(|&job| {
            let (codec, seed) = match job {
                Job::Baseline { seed } => (None, seed),
                Job::Detector { method, budget, seed } => {
                    let lam = lambdas.get(seed).map(Vec::as_slice);
                    let plan = plan_for(method, budget, cfg.floor, &prep.band_freqs, lam)?;
                    (Some(prep.compression(&plan)), seed)
                }
            };
            let (model, _) = train_detector(prep, arch, codec.as_ref(), &cfg.detector_cfg(seed))?;
            let metrics = evaluate_detector(&model, prep, &prep.test, codec.as_ref())?;
            let bits = codec.map(|c| c.plan.bits).unwrap_or_default();
            Ok((job, (metrics, bits)))
        })
        .collect::<Result<_>>()?;

    let mut runs = Vec::new();
    let mut baseline = Vec::new();
    for (job, (m, bits)) in results {
        match job {
            Job::Baseline { .. } => baseline.push(m.accuracy),
            Job::Detector { method, budget, seed } => runs.push(RunRecord {
                method,
                budget,
                seed,
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                compression_ratio: compression_ratio_for_budget(budget, &prep.stft),
                bits,
            }),
        }
    }
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &budget in &cfg.budgets {
            let acc = runs
                .iter()
                .filter(|r| r.method == method && r.budget == budget)
                .map(|r| r.accuracy)
                .collect();
            rows.push(RateAccuracyRow {
                method,
                budget,
                accuracy: Summary::of(acc),
                compression_ratio: compression_ratio_for_budget(budget, &prep.stft),
            });
        }
    }
    rows.sort_by_key(|r| (r.method, r.budget));
    Ok(RateAccuracyReport {
        rows,
        runs,
        lambdas,
        baseline: cfg.baseline.then(|| Summary::of(baseline)),
    })
}

/// Indices of bands whose frequency span `[f - bin/2, f + bin/2]` meets
/// `[lo, hi]` Hz.
pub fn bands_intersecting(band_freqs: &[f64], bin_hz: f64, lo: f64, hi: f64) -> Vec<usize> {
    band_freqs
        .iter()
        .enumerate()
        .filter(|(_, &f)| f - bin_hz / 2.0 <= hi && f + bin_hz / 2.0 >= lo)
        .map(|(i, _)| i)
        .collect()
}

/// Total bits a plan spends on the given bands.
pub fn bits_in(plan: &AllocationPlan, bands: &[usize]) -> u32 {
    bands.iter().map(|&i| u32::from(plan.bits[i])).sum()
}
