//! Experiment configuration: a key-value file with nested sections, strict
//! unknown-key rejection, documented defaults, and a canonical snapshot
//! format that re-parses byte-identically.
//!
//! ```text
//! [experiment]
//! kind = train-cnn        # swissroll | train-cnn | grad-check
//! seed = 0
//! out = runs/out
//! ```

use crate::CliError;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Swissroll,
    TrainCnn,
    GradCheck,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Swissroll => "swissroll",
            Kind::TrainCnn => "train-cnn",
            Kind::GradCheck => "grad-check",
        }
    }

    pub fn parse(s: &str) -> Result<Kind, CliError> {
        match s {
            "swissroll" => Ok(Kind::Swissroll),
            "train-cnn" => Ok(Kind::TrainCnn),
            "grad-check" => Ok(Kind::GradCheck),
            other => Err(CliError::Config(format!("unknown experiment kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaInit {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Uniform,
    ClassBalanced,
    ClassCovering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    E2,
    Rho,
}

/// Fully resolved experiment configuration. Every field has a default; see
/// [`ExperimentConfig::default`] and the `snapshot` output for the complete
/// key list.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    // [experiment]
    pub kind: Kind,
    pub seed: u64,
    pub out: PathBuf,

    // [data]
    pub data_source: DataSource,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub alt_test_images: String,
    pub alt_test_labels: String,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
    pub train_limit: usize,
    pub test_limit: usize,
    pub augment: bool,
    pub augment_translate: f64,
    pub augment_rotate_deg: f64,
    pub augment_shear: f64,

    // [network]
    pub width_factor: f64,
    pub batchnorm: bool,
    pub dropout_conv: f64,
    pub dropout_dense: f64,

    // [kf]
    pub taps: Vec<String>,
    pub weights: Vec<f64>,
    pub ce_weight: f64,
    pub sampling: Sampling,
    pub per_class: usize,
    pub log_gamma: GammaInit,

    // [optimizer]
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,

    // [eval]
    pub train_subsample: usize,
    pub probe_splits: usize,
    pub ratio_batches: usize,
    pub diagnostics: Vec<String>,
    pub eval_batch: usize,

    // [swissroll]
    pub sw_n_per_class: usize,
    pub sw_turns: f64,
    pub sw_noise_std: f64,
    pub sw_steps: usize,
    pub sw_batch_size: usize,
    pub sw_lr_start: f64,
    pub sw_lr_end: f64,
    pub sw_hidden: Vec<usize>,
    pub sw_checkpoint_interval: usize,
    pub sw_loss: LossKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: Kind::TrainCnn,
            seed: 0,
            out: PathBuf::from("runs/out"),

            data_source: DataSource::Synthetic,
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
            alt_test_images: String::new(),
            alt_test_labels: String::new(),
            synthetic_train: 5000,
            synthetic_test: 1000,
            synthetic_seed: 7,
            train_limit: 0,
            test_limit: 0,
            augment: false,
            augment_translate: 2.0,
            augment_rotate_deg: 10.0,
            augment_shear: 0.1,

            width_factor: 0.1,
            batchnorm: true,
            dropout_conv: 0.0,
            dropout_dense: 0.0,

            taps: Vec::new(),
            weights: Vec::new(),
            ce_weight: 1.0,
            sampling: Sampling::Uniform,
            per_class: 5,
            log_gamma: GammaInit::Median,

            lr_start: 1e-2,
            lr_end: 1e-6,
            epochs: 5,
            batch_size: 100,
            momentum: 0.0,

            train_subsample: 1000,
            probe_splits: 4,
            ratio_batches: 4,
            diagnostics: Vec::new(),
            eval_batch: 100,

            sw_n_per_class: 128,
            sw_turns: 1.5,
            sw_noise_std: 0.1,
            sw_steps: 2000,
            sw_batch_size: 128,
            sw_lr_start: 0.1,
            sw_lr_end: 0.01,
            sw_hidden: vec![32, 32],
            sw_checkpoint_interval: 400,
            sw_loss: LossKind::E2,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file on top of the defaults. Unknown sections or keys
    /// are errors.
    pub fn from_text(text: &str) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(CliError::Config(format!(
                        "line {}: malformed section '{raw}'",
                        lineno + 1
                    )));
                };
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            self.apply(&section, key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Applies one `section.key=value` override (the `--override` flag).
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let Some((dotted, value)) = assignment.split_once('=') else {
            return Err(CliError::Config(format!(
                "override '{assignment}' must be section.key=value"
            )));
        };
        let Some((section, key)) = dotted.trim().split_once('.') else {
            return Err(CliError::Config(format!(
                "override key '{dotted}' must be section.key"
            )));
        };
        self.apply(section.trim(), key.trim(), value.trim())
            .map_err(|e| CliError::Config(format!("override '{assignment}': {e}")))
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let unknown = || Err(format!("unknown key '{key}' in section [{section}]"));
        match section {
            "experiment" => match key {
                "kind" => self.kind = Kind::parse(value).map_err(|e| e.to_string())?,
                "seed" => self.seed = parse(value, "seed")?,
                "out" => self.out = PathBuf::from(value),
                _ => return unknown(),
            },
            "data" => match key {
                "source" => {
                    self.data_source = match value {
                        "synthetic" => DataSource::Synthetic,
                        "idx" => DataSource::Idx,
                        other => return Err(format!("unknown data source '{other}'")),
                    }
                }
                "train_images" => self.train_images = value.to_string(),
                "train_labels" => self.train_labels = value.to_string(),
                "test_images" => self.test_images = value.to_string(),
                "test_labels" => self.test_labels = value.to_string(),
                "alt_test_images" => self.alt_test_images = value.to_string(),
                "alt_test_labels" => self.alt_test_labels = value.to_string(),
                "synthetic_train" => self.synthetic_train = parse(value, "synthetic_train")?,
                "synthetic_test" => self.synthetic_test = parse(value, "synthetic_test")?,
                "synthetic_seed" => self.synthetic_seed = parse(value, "synthetic_seed")?,
                "train_limit" => self.train_limit = parse(value, "train_limit")?,
                "test_limit" => self.test_limit = parse(value, "test_limit")?,
                "augment" => self.augment = parse_bool(value)?,
                "augment_translate" => self.augment_translate = parse(value, "augment_translate")?,
                "augment_rotate_deg" => {
                    self.augment_rotate_deg = parse(value, "augment_rotate_deg")?
                }
                "augment_shear" => self.augment_shear = parse(value, "augment_shear")?,
                _ => return unknown(),
            },
            "network" => match key {
                "width_factor" => self.width_factor = parse(value, "width_factor")?,
                "batchnorm" => self.batchnorm = parse_bool(value)?,
                "dropout_conv" => self.dropout_conv = parse(value, "dropout_conv")?,
                "dropout_dense" => self.dropout_dense = parse(value, "dropout_dense")?,
                _ => return unknown(),
            },
            "kf" => match key {
                "taps" => self.taps = parse_list(value),
                "weights" => {
                    self.weights = parse_f64_list(value)?;
                }
                "ce_weight" => self.ce_weight = parse(value, "ce_weight")?,
                "sampling" => {
                    self.sampling = match value {
                        "uniform" => Sampling::Uniform,
                        "class-balanced" => Sampling::ClassBalanced,
                        "class-covering" => Sampling::ClassCovering,
                        other => return Err(format!("unknown sampling '{other}'")),
                    }
                }
                "per_class" => self.per_class = parse(value, "per_class")?,
                "log_gamma" => {
                    self.log_gamma = if value == "median" {
                        GammaInit::Median
                    } else {
                        GammaInit::Fixed(parse(value, "log_gamma")?)
                    }
                }
                _ => return unknown(),
            },
            "optimizer" => match key {
                "lr_start" => self.lr_start = parse(value, "lr_start")?,
                "lr_end" => self.lr_end = parse(value, "lr_end")?,
                "epochs" => self.epochs = parse(value, "epochs")?,
                "batch_size" => self.batch_size = parse(value, "batch_size")?,
                "momentum" => self.momentum = parse(value, "momentum")?,
                _ => return unknown(),
            },
            "eval" => match key {
                "train_subsample" => self.train_subsample = parse(value, "train_subsample")?,
                "probe_splits" => self.probe_splits = parse(value, "probe_splits")?,
                "ratio_batches" => self.ratio_batches = parse(value, "ratio_batches")?,
                "diagnostics" => self.diagnostics = parse_list(value),
                "eval_batch" => self.eval_batch = parse(value, "eval_batch")?,
                _ => return unknown(),
            },
            "swissroll" => match key {
                "n_per_class" => self.sw_n_per_class = parse(value, "n_per_class")?,
                "turns" => self.sw_turns = parse(value, "turns")?,
                "noise_std" => self.sw_noise_std = parse(value, "noise_std")?,
                "steps" => self.sw_steps = parse(value, "steps")?,
                "batch_size" => self.sw_batch_size = parse(value, "batch_size")?,
                "lr_start" => self.sw_lr_start = parse(value, "lr_start")?,
                "lr_end" => self.sw_lr_end = parse(value, "lr_end")?,
                "hidden" => {
                    self.sw_hidden = parse_f64_list(value)?
                        .into_iter()
                        .map(|v| v as usize)
                        .collect()
                }
                "checkpoint_interval" => {
                    self.sw_checkpoint_interval = parse(value, "checkpoint_interval")?
                }
                "loss" => {
                    self.sw_loss = match value {
                        "e2" => LossKind::E2,
                        "rho" => LossKind::Rho,
                        other => return Err(format!("unknown loss '{other}'")),
                    }
                }
                _ => return unknown(),
            },
            "" => return Err(format!("key '{key}' outside any [section]")),
            other => return Err(format!("unknown section [{other}]")),
        }
        Ok(())
    }

    /// Validates cross-field invariants.
    pub fn validate(&self) -> Result<(), CliError> {
        let check_lr = |start: f64, end: f64, ctx: &str| -> Result<(), CliError> {
            if !(start >= end && end > 0.0) {
                return Err(CliError::Config(format!(
                    "{ctx}: need lr_start >= lr_end > 0, got {start} and {end}"
                )));
            }
            Ok(())
        };
        check_lr(self.lr_start, self.lr_end, "optimizer")?;
        check_lr(self.sw_lr_start, self.sw_lr_end, "swissroll")?;
        if self.epochs < 1 {
            return Err(CliError::Config("optimizer.epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CliError::Config(format!(
                "optimizer.momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !self.weights.is_empty() && self.weights.len() != self.taps.len() {
            return Err(CliError::Config(format!(
                "kf.weights has {} entries for {} taps",
                self.weights.len(),
                self.taps.len()
            )));
        }
        if self.data_source == DataSource::Idx && self.kind == Kind::TrainCnn {
            for (name, v) in [
                ("train_images", &self.train_images),
                ("train_labels", &self.train_labels),
                ("test_images", &self.test_images),
                ("test_labels", &self.test_labels),
            ] {
                if v.is_empty() {
                    return Err(CliError::Config(format!(
                        "data.{name} required when data.source = idx"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Weight of tap `i` (defaults to 1.0 when `kf.weights` is empty).
    pub fn weight_of(&self, i: usize) -> f64 {
        self.weights.get(i).copied().unwrap_or(1.0)
    }

    /// Canonical re-parseable rendering; `snapshot(parse(snapshot(c)))` is
    /// byte-identical.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[experiment]");
        let _ = writeln!(w, "kind = {}", self.kind.as_str());
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "out = {}", self.out.display());
        let _ = writeln!(w, "\n[data]");
        let _ = writeln!(
            w,
            "source = {}",
            match self.data_source {
                DataSource::Synthetic => "synthetic",
                DataSource::Idx => "idx",
            }
        );
        for (k, v) in [
            ("train_images", &self.train_images),
            ("train_labels", &self.train_labels),
            ("test_images", &self.test_images),
            ("test_labels", &self.test_labels),
            ("alt_test_images", &self.alt_test_images),
            ("alt_test_labels", &self.alt_test_labels),
        ] {
            if !v.is_empty() {
                let _ = writeln!(w, "{k} = {v}");
            }
        }
        let _ = writeln!(w, "synthetic_train = {}", self.synthetic_train);
        let _ = writeln!(w, "synthetic_test = {}", self.synthetic_test);
        let _ = writeln!(w, "synthetic_seed = {}", self.synthetic_seed);
        let _ = writeln!(w, "train_limit = {}", self.train_limit);
        let _ = writeln!(w, "test_limit = {}", self.test_limit);
        let _ = writeln!(w, "augment = {}", self.augment);
        let _ = writeln!(w, "augment_translate = {:?}", self.augment_translate);
        let _ = writeln!(w, "augment_rotate_deg = {:?}", self.augment_rotate_deg);
        let _ = writeln!(w, "augment_shear = {:?}", self.augment_shear);
        let _ = writeln!(w, "\n[network]");
        let _ = writeln!(w, "width_factor = {:?}", self.width_factor);
        let _ = writeln!(w, "batchnorm = {}", self.batchnorm);
        let _ = writeln!(w, "dropout_conv = {:?}", self.dropout_conv);
        let _ = writeln!(w, "dropout_dense = {:?}", self.dropout_dense);
        let _ = writeln!(w, "\n[kf]");
        let _ = writeln!(w, "taps = {}", self.taps.join(","));
        let _ = writeln!(
            w,
            "weights = {}",
            self.weights
                .iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(w, "ce_weight = {:?}", self.ce_weight);
        let _ = writeln!(
            w,
            "sampling = {}",
            match self.sampling {
                Sampling::Uniform => "uniform",
                Sampling::ClassBalanced => "class-balanced",
                Sampling::ClassCovering => "class-covering",
            }
        );
        let _ = writeln!(w, "per_class = {}", self.per_class);
        let _ = writeln!(
            w,
            "log_gamma = {}",
            match self.log_gamma {
                GammaInit::Median => "median".to_string(),
                GammaInit::Fixed(v) => format!("{v:?}"),
            }
        );
        let _ = writeln!(w, "\n[optimizer]");
        let _ = writeln!(w, "lr_start = {:?}", self.lr_start);
        let _ = writeln!(w, "lr_end = {:?}", self.lr_end);
        let _ = writeln!(w, "epochs = {}", self.epochs);
        let _ = writeln!(w, "batch_size = {}", self.batch_size);
        let _ = writeln!(w, "momentum = {:?}", self.momentum);
        let _ = writeln!(w, "\n[eval]");
        let _ = writeln!(w, "train_subsample = {}", self.train_subsample);
        let _ = writeln!(w, "probe_splits = {}", self.probe_splits);
        let _ = writeln!(w, "ratio_batches = {}", self.ratio_batches);
        let _ = writeln!(w, "diagnostics = {}", self.diagnostics.join(","));
        let _ = writeln!(w, "eval_batch = {}", self.eval_batch);
        let _ = writeln!(w, "\n[swissroll]");
        let _ = writeln!(w, "n_per_class = {}", self.sw_n_per_class);
        let _ = writeln!(w, "turns = {:?}", self.sw_turns);
        let _ = writeln!(w, "noise_std = {:?}", self.sw_noise_std);
        let _ = writeln!(w, "steps = {}", self.sw_steps);
        let _ = writeln!(w, "batch_size = {}", self.sw_batch_size);
        let _ = writeln!(w, "lr_start = {:?}", self.sw_lr_start);
        let _ = writeln!(w, "lr_end = {:?}", self.sw_lr_end);
        let _ = writeln!(
            w,
            "hidden = {}",
            self.sw_hidden
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(w, "checkpoint_interval = {}", self.sw_checkpoint_interval);
        let _ = writeln!(
            w,
            "loss = {}",
            match self.sw_loss {
                LossKind::E2 => "e2",
                LossKind::Rho => "rho",
            }
        );
        s
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse<T: std::str::FromStr>(value: &str, key: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("bad value '{value}' for {key}: {e}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("bad boolean '{other}'")),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_f64_list(value: &str) -> Result<Vec<f64>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| format!("bad number '{s}': {e}")))
        .collect()
}
