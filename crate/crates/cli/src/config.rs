//! Run configuration: a flat set of dotted keys.
//!
//! Sources apply in order: built-in defaults, the `--config` file, the
//! `LIX_SEED` environment variable, then `--key value` flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use lix_core::dwc::{BetaBounds, DwcInit};
use lix_core::feature::{HsicMode, KernelKind, Similarity};
use lix_core::harness::{DatasetSpec, DwcInput, Method, OmegaMode, TrainConfig};
use lix_core::logit::{KlDirection, Reduction};
use serde::de::DeserializeOwned;

use crate::exit::Failure;

/// What `train` produces: a teacher or a student distilled by a method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMethod {
    Teacher,
    Student(Method),
}

impl RunMethod {
    pub fn name(self) -> &'static str {
        match self {
            RunMethod::Teacher => "teacher",
            RunMethod::Student(m) => m.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub method: RunMethod,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub teacher: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub ablate_seeds: usize,
    pub verify_seed: u64,
    pub verify_kl_direction: KlDirection,
    /// Bounds are validated together once all sources are applied.
    beta_range: (f64, f64),
    explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: RunMethod::Student(Method::Lix),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            teacher: None,
            checkpoint: None,
            data: DatasetSpec::default(),
            train: TrainConfig::default(),
            ablate_seeds: 3,
            verify_seed: 0,
            verify_kl_direction: KlDirection::Teacher,
            beta_range: (BetaBounds::default().min(), BetaBounds::default().max()),
            explicit: BTreeSet::new(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed of data generation, initialization and shuffling"),
    ("method", "teacher | none | kd | dkd | dwld | arfd | lix"),
    ("data.dir", "dataset directory"),
    ("data.train", "number of training scenes"),
    ("data.val", "number of validation scenes"),
    ("data.height", "scene height (multiple of 8)"),
    ("data.width", "scene width (multiple of 8)"),
    ("data.classes", "number of classes (at least 4)"),
    ("out", "output directory"),
    ("teacher", "teacher checkpoint for distillation and sweeps"),
    ("checkpoint", "checkpoint evaluated by `eval`"),
    ("train.epochs", "training epochs"),
    ("train.batch", "scenes per optimizer step"),
    ("train.lr", "learning rate"),
    ("train.momentum", "momentum in [0, 1)"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.lambda_l", "weight of the logit distillation loss"),
    ("train.lambda_f", "weight of the feature distillation loss"),
    ("logit.alpha", "TCLD weight"),
    ("logit.temperature", "softmax temperature"),
    ("logit.kl_direction", "teacher | literal"),
    ("logit.reduction", "sum | mean over pixels"),
    ("logit.dkd_beta", "fixed NCLD weight of the dkd method"),
    ("dwc.omega", "probs | probs_conf"),
    ("dwc.input", "student | teacher probabilities feed the controller"),
    ("dwc.hidden", "hidden width of the controller"),
    ("dwc.dropout", "dropout rate on hidden layers"),
    ("dwc.full_flow", "let gradients reach the student through the controller input"),
    ("dwc.init", "xavier | zero"),
    ("dwc.trainable", "train the controller"),
    ("dwc.beta_min", "lower bound of the NCLD weights"),
    ("dwc.beta_max", "upper bound of the NCLD weights"),
    ("feature.kernel", "none | linear | gaussian | laplace"),
    ("feature.hsic_mode", "standard | paper_literal"),
    ("feature.similarity", "cka | euclidean"),
    ("ablate.seeds", "number of seeds per sweep cell (at least 3)"),
    ("verify.seed", "seed of the property suite"),
    ("verify.kl_direction", "KL direction forced into the decomposition check"),
];

fn key_name(key: &str) -> Result<&'static str, Failure> {
    KEYS.iter()
        .map(|(k, _)| *k)
        .find(|k| *k == key)
        .ok_or_else(|| Failure::usage(format!("unknown configuration key `{key}`")))
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Failure::usage(format!("{key}: cannot parse `{v}`: {e}")))
}

/// Parses a snake_case enum variant through its serde representation.
fn variant<T: DeserializeOwned>(key: &str, v: &str) -> Result<T, Failure> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Failure::usage(format!("{key}: unknown value `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool, Failure> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Failure::usage(format!("{key}: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), Failure> {
        let name = key_name(key)?;
        let t = &mut self.train;
        match name {
            "seed" => self.seed = parse(key, v)?,
            "method" => {
                self.method = match v {
                    "teacher" => RunMethod::Teacher,
                    m => RunMethod::Student(parse(key, m)?),
                }
            }
            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.train" => self.data.train = parse(key, v)?,
            "data.val" => self.data.val = parse(key, v)?,
            "data.height" => self.data.height = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "out" => self.out_dir = PathBuf::from(v),
            "teacher" => self.teacher = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.lr" => t.sgd.lr = parse(key, v)?,
            "train.momentum" => t.sgd.momentum = parse(key, v)?,
            "train.weight_decay" => t.sgd.weight_decay = parse(key, v)?,
            "train.lambda_l" => t.lambda_l = parse(key, v)?,
            "train.lambda_f" => t.lambda_f = parse(key, v)?,
            "logit.alpha" => t.logit.alpha = parse(key, v)?,
            "logit.temperature" => t.logit.temperature = parse(key, v)?,
            "logit.kl_direction" => t.logit.direction = variant::<KlDirection>(key, v)?,
            "logit.reduction" => t.logit.reduction = variant::<Reduction>(key, v)?,
            "logit.dkd_beta" => t.dkd_beta = parse(key, v)?,
            "dwc.omega" => t.dwc.omega = variant::<OmegaMode>(key, v)?,
            "dwc.input" => t.dwc.input = variant::<DwcInput>(key, v)?,
            "dwc.hidden" => t.dwc.hidden = parse(key, v)?,
            "dwc.dropout" => t.dwc.dropout = parse(key, v)?,
            "dwc.full_flow" => t.dwc.full_flow = boolean(key, v)?,
            "dwc.init" => t.dwc.init = variant::<DwcInit>(key, v)?,
            "dwc.trainable" => t.dwc.trainable = boolean(key, v)?,
            "dwc.beta_min" => self.beta_range.0 = parse(key, v)?,
            "dwc.beta_max" => self.beta_range.1 = parse(key, v)?,
            "feature.kernel" => t.feature.kernel = variant::<KernelKind>(key, v)?,
            "feature.hsic_mode" => t.feature.hsic_mode = variant::<HsicMode>(key, v)?,
            "feature.similarity" => t.feature.similarity = variant::<Similarity>(key, v)?,
            "ablate.seeds" => {
                self.ablate_seeds = parse(key, v)?;
                if self.ablate_seeds < 3 {
                    return Err(Failure::usage("ablate.seeds must be at least 3"));
                }
            }
            "verify.seed" => self.verify_seed = parse(key, v)?,
            "verify.kl_direction" => self.verify_kl_direction = variant::<KlDirection>(key, v)?,
            _ => unreachable!("every registered key is handled"),
        }
        self.explicit.insert(name);
        Ok(())
    }

    /// Applies a `key = value` document. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), Failure> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Failure::usage(format!("{origin}:{}: duplicate key `{key}`", n + 1)));
            }
            self.set(key, value)
                .map_err(|f| f.context(format!("{origin}:{}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::missing(format!("config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Builds the configuration from its layered sources and validates it.
    pub fn resolve<'a>(
        config: Option<&Path>,
        env_seed: Option<&str>,
        flags: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, Failure> {
        let mut cfg = Self::default();
        if let Some(p) = config {
            cfg.apply_file(p)?;
        }
        if let Some(s) = env_seed {
            cfg.set("seed", s).map_err(|f| f.context("LIX_SEED"))?;
        }
        for (k, v) in flags {
            cfg.set(k, v).map_err(|f| f.context(format!("--{k}")))?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    fn finish(&mut self) -> Result<(), Failure> {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.train.dwc.bounds = BetaBounds::new(self.beta_range.0, self.beta_range.1).map_err(Failure::from_core)?;
        self.train.validate().map_err(Failure::from_core)?;
        let defaulted: Vec<&str> = KEYS.iter().map(|(k, _)| *k).filter(|k| !self.explicit.contains(k)).collect();
        if !defaulted.is_empty() {
            log::info!("{} of {} keys left at their defaults", defaulted.len(), KEYS.len());
            log::debug!("defaulted keys: {}", defaulted.join(", "));
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }
}
