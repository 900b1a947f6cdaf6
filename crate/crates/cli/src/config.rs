//! Run configuration: built-in defaults, an INI file, `PAM_*` environment
//! variables and `--set key=value` flags, applied in that order and resolved
//! into typed settings before any work starts.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use pam::bitalloc::AllocTrainConfig;
use pam::codec::{AllocMethod, MIN_BITS};
use pam::eval::{RateAccuracyConfig, COMPAT_BUDGETS, COMPAT_FLOOR};
use pam::neural::{DetectorSpec, SegmenterSpec, TrainConfig};
use pam::rng::derive_seed;
use pam::synth::DatasetConfig;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Prefix of environment overrides: `train.epochs` is `PAM_TRAIN_EPOCHS`.
pub const ENV_PREFIX: &str = "PAM_";

/// Small enough for the whole pipeline to finish in a few minutes.
pub const DEMO_CONFIG: &str = include_str!("../configs/demo.ini");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("malformed override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("config file {path}: {reason}")]
    File { path: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Every key with its default. The table is the schema: anything else is
/// rejected.
const SCHEMA: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.threads", "0"),
    ("data.n_clips", "2000"),
    ("data.train_fraction", "0.5"),
    ("data.snr_db_min", "-5"),
    ("data.snr_db_max", "20"),
    ("data.max_rumbles", "2"),
    ("detector.blocks", "2"),
    ("detector.layers_per_block", "3"),
    ("detector.growth", "8"),
    ("detector.kernel", "3"),
    ("train.learning_rate", "0.025"),
    ("train.momentum", "0.9"),
    ("train.batch_size", "16"),
    ("train.weight_decay", "0.0001"),
    ("train.epochs", "25"),
    ("train.plateau_patience", "3"),
    ("train.plateau_min_delta", "0.001"),
    ("train.lr_decay", "0.1"),
    ("train.val_fraction", "0.1"),
    ("train.crop_pad", "8"),
    ("train.grad_clip", "1"),
    ("segment.learning_rate", "0.01"),
    ("segment.epochs", "25"),
    ("segment.freq_filters", "25"),
    ("segment.freq_kernel", "9"),
    ("segment.hidden", "16"),
    ("segment.time_kernel", "7"),
    ("alloc.mu", "1e-7"),
    ("alloc.lambda_init", "2"),
    ("alloc.learning_rate", "0.025"),
    ("alloc.epochs", "25"),
    ("codec.method", "none"),
    ("codec.budget", "329"),
    ("codec.floor", "5"),
    ("codec.scale", "0"),
    ("codec.lambda", ""),
    ("eval.budgets", "235,329,423"),
    ("eval.methods", "learned,human,uniform"),
    ("eval.n_seeds", "5"),
    ("eval.compat", "false"),
    ("eval.baseline", "true"),
];

/// Keys that do not change any output and so stay out of the hash.
const UNHASHED: &[&str] = &["run.threads"];

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

/// Flat `section.key -> value` map, always holding every schema key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Applies an INI document. Keys may sit under `[section]` headers or
    /// be written in full as `section.key` at the top.
    pub fn apply_ini(&mut self, text: &str, origin: &str) -> Result<()> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| ConfigError::File {
            path: origin.to_string(),
            reason: e.to_string(),
        })?;
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_string(),
                };
                self.set(&key, v)?;
            }
        }
        Ok(())
    }

    /// `demo` names the bundled config unless a file of that name exists.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        if path == Path::new("demo") && !path.exists() {
            return self.apply_ini(DEMO_CONFIG, "demo");
        }
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        self.apply_ini(&text, &path.display().to_string())
    }

    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let names: BTreeMap<String, String> = self.values.keys().map(|k| (env_name(k), k.clone())).collect();
        for (name, value) in vars {
            if let Some(key) = names.get(&name) {
                self.set(key, &value)?;
            } else if name.starts_with(ENV_PREFIX) {
                return Err(ConfigError::UnknownKey(name));
            }
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::BadOverride(kv.to_string()))?;
        self.set(k.trim(), v)
    }

    /// Hex SHA-256 of the sorted `key=value` lines that affect outputs.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if !UNHASHED.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The resolved config as INI, headed by its hash.
    pub fn to_ini(&self) -> String {
        let mut out = format!("# config_hash = {}\n", self.hash());
        let mut section = "";
        for (k, v) in &self.values {
            let (s, key) = k.split_once('.').expect("schema keys are dotted");
            if s != section {
                out.push_str(&format!("\n[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key).expect("schema key");
        raw.parse().map_err(|e: T::Err| ConfigError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
            reason: e.to_string(),
        })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key).expect("schema key");
        raw.split(',')
            .map(|p| {
                p.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
                    key: key.to_string(),
                    value: raw.to_string(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    pub fn resolve(&self) -> Result<Settings> {
        let seed: u64 = self.parse("run.seed")?;
        let train = TrainConfig {
            learning_rate: self.parse("train.learning_rate")?,
            momentum: self.parse("train.momentum")?,
            batch_size: self.parse("train.batch_size")?,
            weight_decay: self.parse("train.weight_decay")?,
            epochs: self.parse("train.epochs")?,
            plateau_patience: self.parse("train.plateau_patience")?,
            plateau_min_delta: self.parse("train.plateau_min_delta")?,
            lr_decay: self.parse("train.lr_decay")?,
            val_fraction: self.parse("train.val_fraction")?,
            crop_pad: self.parse("train.crop_pad")?,
            grad_clip: self.parse("train.grad_clip")?,
            seed: derive_seed(seed, "train"),
        };
        let segment_train = TrainConfig {
            learning_rate: self.parse("segment.learning_rate")?,
            epochs: self.parse("segment.epochs")?,
            seed: derive_seed(seed, "segment"),
            ..train
        };
        let alloc = AllocTrainConfig {
            mu: self.parse("alloc.mu")?,
            lambda_init: self.parse("alloc.lambda_init")?,
            train: TrainConfig {
                learning_rate: self.parse("alloc.learning_rate")?,
                epochs: self.parse("alloc.epochs")?,
                seed: derive_seed(seed, "alloc"),
                ..train
            },
        };
        let data = DatasetConfig {
            n_clips: self.parse("data.n_clips")?,
            train_fraction: self.parse("data.train_fraction")?,
            snr_db_range: (self.parse("data.snr_db_min")?, self.parse("data.snr_db_max")?),
            max_rumbles: self.parse("data.max_rumbles")?,
            ..DatasetConfig::default()
        };
        let detector = DetectorSpec {
            blocks: self.parse("detector.blocks")?,
            layers_per_block: self.parse("detector.layers_per_block")?,
            growth: self.parse("detector.growth")?,
            kernel: self.parse("detector.kernel")?,
            ..DetectorSpec::default()
        };
        let segmenter = SegmenterSpec {
            freq_filters: self.parse("segment.freq_filters")?,
            freq_kernel: self.parse("segment.freq_kernel")?,
            hidden: self.parse("segment.hidden")?,
            time_kernel: self.parse("segment.time_kernel")?,
            ..SegmenterSpec::default()
        };
        let method_raw = self.get("codec.method").expect("schema key");
        let method = match method_raw {
            "none" => None,
            m => Some(self.parse::<AllocMethod>("codec.method").map_err(|_| ConfigError::BadValue {
                key: "codec.method".into(),
                value: m.into(),
                reason: "expected none, learned, human or uniform".into(),
            })?),
        };
        let lambda = self.get("codec.lambda").expect("schema key");
        let codec = CodecSettings {
            method,
            budget: self.parse("codec.budget")?,
            floor: self.parse("codec.floor")?,
            scale: self.parse("codec.scale")?,
            lambda: (!lambda.is_empty()).then(|| lambda.into()),
        };
        if method == Some(AllocMethod::Learned) && codec.lambda.is_none() {
            return Err(ConfigError::Invalid("codec.method = learned needs codec.lambda (a lambda CSV)".into()));
        }
        if !(codec.scale >= 0.0 && codec.scale.is_finite()) {
            return Err(ConfigError::Invalid(format!("codec.scale {} must be >= 0", codec.scale)));
        }
        if !(1..=32).contains(&codec.floor) {
            return Err(ConfigError::Invalid(format!("codec.floor {} outside 1..=32", codec.floor)));
        }

        let compat: bool = self.parse("eval.compat")?;
        let mut eval = RateAccuracyConfig {
            budgets: self.list("eval.budgets")?,
            methods: self.list("eval.methods").map_err(|_| ConfigError::BadValue {
                key: "eval.methods".into(),
                value: self.get("eval.methods").unwrap_or_default().into(),
                reason: "expected a list of learned, human, uniform".into(),
            })?,
            n_seeds: self.parse("eval.n_seeds")?,
            floor: MIN_BITS,
            detector,
            train,
            alloc: alloc.clone(),
            baseline: self.parse("eval.baseline")?,
            master_seed: derive_seed(seed, "eval"),
        };
        if compat {
            // the original grid unless budgets were given explicitly
            if self.get("eval.budgets") == Some("235,329,423") {
                eval.budgets = COMPAT_BUDGETS.to_vec();
            }
            eval.floor = COMPAT_FLOOR;
        }
        for (what, r) in [
            ("train", train.validate()),
            ("segment", segment_train.validate()),
            ("alloc", alloc.validate()),
        ] {
            r.map_err(|e| ConfigError::Invalid(format!("{what}: {e}")))?;
        }
        if eval.n_seeds == 0 || eval.methods.is_empty() || eval.budgets.is_empty() {
            return Err(ConfigError::Invalid("eval needs at least one seed, method and budget".into()));
        }

        Ok(Settings {
            seed,
            threads: self.parse("run.threads")?,
            hash: self.hash(),
            data,
            detector,
            segmenter,
            train,
            segment_train,
            alloc,
            codec,
            eval,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecSettings {
    pub method: Option<AllocMethod>,
    pub budget: u32,
    pub floor: u8,
    /// 0 fits the scale to the training data.
    pub scale: f64,
    pub lambda: Option<std::path::PathBuf>,
}

/// Typed view of a resolved config.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub threads: usize,
    pub hash: String,
    pub data: DatasetConfig,
    pub detector: DetectorSpec,
    pub segmenter: SegmenterSpec,
    pub train: TrainConfig,
    pub segment_train: TrainConfig,
    pub alloc: AllocTrainConfig,
    pub codec: CodecSettings,
    pub eval: RateAccuracyConfig,
}

impl Settings {
    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, "dataset")
    }
}

/// The bundled demo settings.
pub fn demo() -> Settings {
    let mut c = RunConfig::default();
    c.apply_ini(DEMO_CONFIG, "demo").expect("bundled demo config parses");
    c.resolve().expect("bundled demo config resolves")
}
