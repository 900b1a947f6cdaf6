use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pam::bitalloc::{lambda_to_allocation, read_lambda_csv, train_allocation, write_lambda_csv};
use pam::codec::{decode_bytes, encode, float_to_fixed, human_allocation, AllocationPlan, Compression, ScaleF32};
use pam::dsp::{Spectrogram, StftConfig};
use pam::eval::{
    bands_intersecting, bits_in, evaluate_detector, evaluate_segmenter, plan_for, pr_auc, pr_curve,
    rate_accuracy_table, train_detector, train_segmenter, write_pr_csv, Metrics, Prepared,
};
use pam::neural::{Architecture, Checkpoint, DetectorSpec, SegmenterSpec};
use pam::synth::{build_dataset, ClipGeometry, Dataset, DatasetSplit};

use crate::artifacts::OutDir;
use crate::config::{RunConfig, Settings};
use crate::{CliError, Command, Context};

pub const TRAIN_FILE: &str = "train.pamds";
pub const TEST_FILE: &str = "test.pamds";

/// Runs one subcommand and returns the output directory.
pub fn dispatch(cmd: &Command, cfg: &RunConfig, s: &Settings) -> Result<PathBuf, CliError> {
    let common = cmd.common();
    let out = |names: &[&str]| {
        let names: Vec<String> = names.iter().map(|n| n.to_string()).collect();
        OutDir::create(&common.out, &names, common.force, &s.hash)
    };
    match cmd {
        Command::Synth { .. } => synth(out(&[TRAIN_FILE, TEST_FILE, "train_labels.csv", "test_labels.csv"])?, cfg, s),
        Command::Train { data, .. } => {
            let o = out(&["detector.pamm", "history.csv", "scores.csv", "metrics.csv"])?;
            train(o, cfg, s, data)
        }
        Command::Segment { data, .. } => {
            let o = out(&[
                "segmenter.pamm",
                "ablation.pamm",
                "segmenter_history.csv",
                "ablation_history.csv",
                "segment_metrics.csv",
            ])?;
            segment(o, cfg, s, data)
        }
        Command::Alloc { data, .. } => alloc(out(&["lambda.csv", "alloc.pamm", "alloc_history.csv"])?, cfg, s, data),
        Command::Compress { data, inputs, .. } => compress(cfg, s, common, data.as_deref(), inputs),
        Command::Decompress { inputs, .. } => decompress(cfg, s, common, inputs),
        Command::Eval { data, .. } => {
            let mut names = vec!["rate_accuracy.csv".to_string(), "rate_accuracy.txt".to_string()];
            names.extend((0..s.eval.n_seeds).map(|k| format!("lambda_seed{k}.csv")));
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            eval(out(&names)?, cfg, s, data)
        }
        Command::Pr { data, model, .. } => pr(out(&["pr.csv"])?, cfg, s, data, model),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn load_split(dir: &Path) -> Result<DatasetSplit, CliError> {
    let read = |name: &str| {
        let path = dir.join(name);
        let bytes = read_file(&path)?;
        Dataset::read_from(&mut bytes.as_slice(), ClipGeometry::default()).context(path.display().to_string())
    };
    Ok(DatasetSplit {
        train: read(TRAIN_FILE)?,
        test: read(TEST_FILE)?,
    })
}

fn prepare(dir: &Path) -> Result<Prepared, CliError> {
    let split = load_split(dir)?;
    Prepared::new(&split, &StftConfig::default()).context("computing spectrograms")
}

fn detector_arch(s: &Settings, prep: &Prepared) -> Architecture {
    Architecture::Detector(DetectorSpec {
        frames: prep.train.first().map_or(s.detector.frames, |e| e.spec.frames),
        bands: prep.bands(),
        ..s.detector
    })
}

fn bytes_of(f: impl FnOnce(&mut Vec<u8>) -> pam::Result<()>, what: &str) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).context(what.to_string())?;
    Ok(buf)
}

fn text_of(f: impl FnOnce(&mut Vec<u8>) -> pam::Result<()>, what: &str) -> Result<String, CliError> {
    Ok(String::from_utf8(bytes_of(f, what)?).expect("CSV writers emit UTF-8"))
}

/// The configured plan; `None` when `codec.method = none`.
fn plan(s: &Settings, band_freqs: &[f64]) -> Result<Option<AllocationPlan>, CliError> {
    let Some(method) = s.codec.method else {
        return Ok(None);
    };
    let lambda = match &s.codec.lambda {
        Some(path) => {
            let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
            Some(read_lambda_csv(&text).context(path.display().to_string())?)
        }
        None => None,
    };
    plan_for(method, s.codec.budget, s.codec.floor, band_freqs, lambda.as_deref())
        .context("building the allocation plan")
        .map(Some)
}

/// Configured scale, or the one fitted to the training data when 0.
fn scale(s: &Settings, prep: Option<&Prepared>) -> Result<ScaleF32, CliError> {
    if s.codec.scale > 0.0 {
        return ScaleF32::new(s.codec.scale).context("codec.scale");
    }
    prep.map(|p| p.scale)
        .ok_or_else(|| CliError::Usage("codec.scale = 0 needs --data to fit the scale".into()))
}

fn codec(s: &Settings, prep: &Prepared) -> Result<Option<Compression>, CliError> {
    Ok(match plan(s, &prep.band_freqs)? {
        None => None,
        Some(plan) => Some(Compression {
            plan,
            scale: scale(s, Some(prep))?,
        }),
    })
}

fn metrics_row(name: &str, m: &Metrics) -> String {
    format!("{name},{},{},{}\n", m.accuracy, m.precision, m.recall)
}

fn synth(mut out: OutDir, cfg: &RunConfig, s: &Settings) -> Result<PathBuf, CliError> {
    let split = build_dataset(&s.data, s.dataset_seed()).context("building the dataset")?;
    for (name, ds) in [("train", &split.train), ("test", &split.test)] {
        out.write(&format!("{name}.pamds"), &bytes_of(|w| ds.write_to(w), "writing dataset")?)?;
        out.write_text(&format!("{name}_labels.csv"), &text_of(|w| ds.write_labels_csv(w), "writing labels")?)?;
    }
    println!(
        "synth: {} train / {} test clips ({} / {} positive)",
        split.train.clips.len(),
        split.test.clips.len(),
        split.train.positives(),
        split.test.positives()
    );
    out.finish(cfg)
}

fn train(mut out: OutDir, cfg: &RunConfig, s: &Settings, data: &Path) -> Result<PathBuf, CliError> {
    let prep = prepare(data)?;
    let codec = codec(s, &prep)?;
    let arch = detector_arch(s, &prep);
    let (model, history) = train_detector(&prep, arch, codec.as_ref(), &s.train).context("training")?;
    let m = evaluate_detector(&model, &prep, &prep.test, codec.as_ref()).context("evaluating")?;

    let ckpt = Checkpoint {
        model,
        config_hash: s.hash.clone(),
    };
    out.write("detector.pamm", &bytes_of(|w| ckpt.write_to(w), "writing checkpoint")?)?;
    out.write_text("history.csv", &text_of(|w| history.write_csv(w), "writing history")?)?;
    let mut scores = String::from("clip_id,label,score\n");
    for (i, (sc, l)) in m.scores.iter().zip(&m.labels).enumerate() {
        let _ = writeln!(scores, "{i},{},{sc}", u8::from(*l));
    }
    out.write_text("scores.csv", &scores)?;
    out.write_text("metrics.csv", &format!("model,accuracy,precision,recall\n{}", metrics_row("detector", &m)))?;
    println!(
        "train: test accuracy {:.4} precision {:.4} recall {:.4} ({})",
        m.accuracy,
        m.precision,
        m.recall,
        codec.as_ref().map_or("uncompressed".to_string(), |c| format!("{} at {} bits", c.plan.method, c.plan.budget))
    );
    out.finish(cfg)
}

fn segment(mut out: OutDir, cfg: &RunConfig, s: &Settings, data: &Path) -> Result<PathBuf, CliError> {
    let prep = prepare(data)?;
    let spec = SegmenterSpec {
        frames: prep.train.first().map_or(s.segmenter.frames, |e| e.spec.frames),
        bands: prep.bands(),
        ..s.segmenter
    };
    let ablation_spec = SegmenterSpec {
        freq_conv: false,
        ..spec
    };
    let (full, full_hist) = train_segmenter(&prep, spec, &s.segment_train).context("training segmenter")?;
    let (abl, abl_hist) = train_segmenter(&prep, ablation_spec, &s.segment_train).context("training ablation")?;
    let m = evaluate_segmenter(&full, Some(&abl), &prep, &prep.test).context("evaluating")?;
    let abl_m = evaluate_segmenter(&abl, None, &prep, &prep.test).context("evaluating")?;

    for (name, model) in [("segmenter.pamm", full), ("ablation.pamm", abl)] {
        let ckpt = Checkpoint {
            model,
            config_hash: s.hash.clone(),
        };
        out.write(name, &bytes_of(|w| ckpt.write_to(w), "writing checkpoint")?)?;
    }
    out.write_text("segmenter_history.csv", &text_of(|w| full_hist.write_csv(w), "writing history")?)?;
    out.write_text("ablation_history.csv", &text_of(|w| abl_hist.write_csv(w), "writing history")?)?;
    out.write_text(
        "segment_metrics.csv",
        &format!(
            "model,frame_accuracy,precision,recall\n{}{}",
            metrics_row("freq_conv", &m.frames),
            metrics_row("ablation", &abl_m.frames)
        ),
    )?;
    println!(
        "segment: per-frame accuracy {:.4} with frequency convolution, {:.4} without",
        m.frames.accuracy, abl_m.frames.accuracy
    );
    out.finish(cfg)
}

fn alloc(mut out: OutDir, cfg: &RunConfig, s: &Settings, data: &Path) -> Result<PathBuf, CliError> {
    let prep = prepare(data)?;
    let arch = detector_arch(s, &prep);
    for &b in &s.eval.budgets {
        pam::codec::check_budget(prep.bands(), b, s.eval.floor).context("eval.budgets")?;
    }
    let (lam, mut model, history) = train_allocation(arch, &prep.train, &s.alloc, None).context("training")?;
    model.representation = prep.fingerprint(None);

    out.write_text(
        "lambda.csv",
        &text_of(
            |w| write_lambda_csv(w, &lam, &prep.band_freqs, &s.eval.budgets, s.eval.floor),
            "writing lambda",
        )?,
    )?;
    let ckpt = Checkpoint {
        model,
        config_hash: s.hash.clone(),
    };
    out.write("alloc.pamm", &bytes_of(|w| ckpt.write_to(w), "writing checkpoint")?)?;
    out.write_text("alloc_history.csv", &text_of(|w| history.write_csv(w), "writing history")?)?;

    let budget = s.codec.budget;
    let learned = lambda_to_allocation(&lam, budget, s.codec.floor).context("allocating")?;
    let human = human_allocation(&prep.band_freqs, budget).context("allocating")?;
    let low = bands_intersecting(&prep.band_freqs, prep.stft.bin_hz(), 8.0, 34.0);
    let first = history.epochs.first().map_or(f64::NAN, |e| e.record.train_loss);
    let last = history.epochs.last().map_or(f64::NAN, |e| e.record.train_loss);
    println!(
        "alloc: class loss {:.4} -> {:.4} (initial {:.4}); bits on 8-34 Hz at {budget}: learned {} human {}",
        first,
        last,
        history.initial_class_loss,
        bits_in(&learned, &low),
        bits_in(&human, &low)
    );
    out.finish(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "block".into(), |s| s.to_string_lossy().into_owned())
}

fn compress(
    cfg: &RunConfig,
    s: &Settings,
    common: &crate::Common,
    data: Option<&Path>,
    inputs: &[PathBuf],
) -> Result<PathBuf, CliError> {
    if data.is_none() == inputs.is_empty() {
        return Err(CliError::Usage("compress takes either --data or --input".into()));
    }
    if s.codec.method.is_none() {
        return Err(CliError::Usage("compress needs codec.method other than none".into()));
    }
    let prep = data.map(prepare).transpose()?;
    let band_freqs = StftConfig::default().band_freqs_hz();
    let plan = plan(s, &band_freqs)?.expect("method checked above");
    let scale = scale(s, prep.as_ref())?;

    let specs: Vec<(String, Spectrogram)> = match &prep {
        Some(p) => p.test.iter().enumerate().map(|(i, e)| (format!("clips/{i:05}.pamc"), e.spec.clone())).collect(),
        None => inputs
            .iter()
            .map(|path| {
                let bytes = read_file(path)?;
                let spec = Spectrogram::read_from(&mut bytes.as_slice()).context(path.display().to_string())?;
                Ok((format!("{}.pamc", stem(path)), spec))
            })
            .collect::<Result<_, CliError>>()?,
    };
    let names: Vec<String> = specs.iter().map(|(n, _)| n.clone()).collect();
    let mut out = OutDir::create(&common.out, &names, common.force, &s.hash)?;
    let mut payload = 0u64;
    for (name, spec) in &specs {
        let block = encode(&float_to_fixed(spec, scale), &plan).context(format!("encoding {name}"))?;
        payload += block.payload_bits();
        out.write(name, &block.to_bytes())?;
    }
    println!(
        "compress: {} blocks, {} payload bits, plan {} at {} bits",
        specs.len(),
        payload,
        plan.method,
        plan.budget
    );
    out.finish(cfg)
}

/// Rounds to an `f32` no smaller in magnitude, so that re-encoding the
/// stored value reproduces the block it came from.
fn away_from_zero_f32(x: f64) -> f64 {
    let f = x as f32;
    if f64::from(f).abs() < x.abs() {
        f64::from(f32::from_bits(f.to_bits() + 1))
    } else {
        f64::from(f)
    }
}

fn decompress(cfg: &RunConfig, s: &Settings, common: &crate::Common, inputs: &[PathBuf]) -> Result<PathBuf, CliError> {
    let names: Vec<String> = inputs.iter().map(|p| format!("{}.spec", stem(p))).collect();
    let mut out = OutDir::create(&common.out, &names, common.force, &s.hash)?;
    for (path, name) in inputs.iter().zip(&names) {
        let mut spec = decode_bytes(&read_file(path)?).context(path.display().to_string())?;
        for v in &mut spec.data {
            *v = away_from_zero_f32(*v);
        }
        out.write(name, &bytes_of(|w| spec.write_to(w), "writing spectrogram")?)?;
    }
    println!("decompress: {} blocks", inputs.len());
    out.finish(cfg)
}

fn eval(mut out: OutDir, cfg: &RunConfig, s: &Settings, data: &Path) -> Result<PathBuf, CliError> {
    let prep = prepare(data)?;
    let mut ecfg = s.eval.clone();
    ecfg.detector = match detector_arch(s, &prep) {
        Architecture::Detector(d) => d,
        Architecture::Segmenter(_) => unreachable!("detector_arch builds detectors"),
    };
    let report = rate_accuracy_table(&prep, &ecfg).context("rate-accuracy sweep")?;
    out.write_text("rate_accuracy.csv", &text_of(|w| report.write_csv(w), "writing results")?)?;
    let table = report.render();
    out.write_text("rate_accuracy.txt", &table)?;
    for (k, lam) in report.lambdas.iter().enumerate() {
        out.write_text(
            &format!("lambda_seed{k}.csv"),
            &text_of(
                |w| write_lambda_csv(w, lam, &prep.band_freqs, &ecfg.budgets, ecfg.floor),
                "writing lambda",
            )?,
        )?;
    }
    print!("{table}");
    out.finish(cfg)
}

fn pr(mut out: OutDir, cfg: &RunConfig, s: &Settings, data: &Path, model: &Path) -> Result<PathBuf, CliError> {
    let prep = prepare(data)?;
    let ckpt = Checkpoint::read_from(&mut read_file(model)?.as_slice()).context(model.display().to_string())?;
    let codec = codec(s, &prep)?;
    let m = evaluate_detector(&ckpt.model, &prep, &prep.test, codec.as_ref()).context("evaluating")?;
    let points = pr_curve(&m.scores, &m.labels).context("PR curve")?;
    out.write_text("pr.csv", &text_of(|w| write_pr_csv(w, &points), "writing PR curve")?)?;
    println!("pr: {} points, area {:.4}, accuracy {:.4}", points.len(), pr_auc(&points), m.accuracy);
    out.finish(cfg)
}
