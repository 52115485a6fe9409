//! Run configuration: training, network and augmentation settings, read from
//! a flat `key = value` text file with `#` comments.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentSpec;
use crate::error::{Result, SpaceError};
use crate::networks::NetworkConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Multiply the learning rate by `lr_decay_factor` every this many iterations; 0 disables.
    pub lr_decay_every: u64,
    pub lr_decay_factor: f32,
    pub wd_student: f32,
    pub wd_fe_fm: f32,
    pub lambda1_warmup_iters: u64,
    pub lambda1_value: f32,
    pub lambda2: f32,
    pub q_hard: f64,
    pub alpha_ema: f64,
    pub student_weight_ema: f32,
    pub student_ema_for_fm: bool,
    pub normalize_teacher: bool,
    pub seed: u64,
    pub teacher_seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 70_000,
            batch_size: 1,
            learning_rate: 1e-4,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            wd_student: 1e-5,
            wd_fe_fm: 1e-6,
            lambda1_warmup_iters: 5_000,
            lambda1_value: 1.0,
            lambda2: 0.1,
            q_hard: 0.99,
            alpha_ema: 0.999,
            student_weight_ema: 0.999,
            student_ema_for_fm: true,
            normalize_teacher: true,
            seed: 0,
            teacher_seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, v: String| {
            if ok {
                Ok(())
            } else {
                Err(SpaceError::config(format!("invalid value for '{key}': {v}")))
            }
        };
        check(self.batch_size > 0, "batch_size", self.batch_size.to_string())?;
        for (key, v) in [
            ("learning_rate", self.learning_rate),
            ("wd_student", self.wd_student),
            ("wd_fe_fm", self.wd_fe_fm),
            ("lambda1_value", self.lambda1_value),
            ("lambda2", self.lambda2),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            check(v.is_finite() && v >= 0.0, key, v.to_string())?;
        }
        check((0.0..=1.0).contains(&self.q_hard), "q_hard", self.q_hard.to_string())?;
        check((0.0..=1.0).contains(&self.alpha_ema), "alpha_ema", self.alpha_ema.to_string())?;
        check(
            (0.0..=1.0).contains(&self.student_weight_ema),
            "student_weight_ema",
            self.student_weight_ema.to_string(),
        )?;
        Ok(())
    }

    /// Learning-rate multiplier at `iter` under the step decay option.
    pub fn lr_scale_at(&self, iter: u64) -> f32 {
        if self.lr_decay_every == 0 {
            1.0
        } else {
            self.lr_decay_factor.powi((iter / self.lr_decay_every) as i32)
        }
    }
}

/// Consistency weight: 0 during warmup, `lambda1_value` afterwards.
pub fn lambda1_at(iter: u64, cfg: &TrainConfig) -> f32 {
    if iter < cfg.lambda1_warmup_iters {
        0.0
    } else {
        cfg.lambda1_value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub network: NetworkConfig,
    #[serde(flatten)]
    pub augment: AugmentSpec,
    pub validation_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
            augment: AugmentSpec::default(),
            validation_fraction: 0.1,
        }
    }
}

/// Every accepted key with a one-line description, in display order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("iterations", "optimization steps"),
    ("batch_size", "images per step"),
    ("learning_rate", "step size of both optimizers"),
    ("lr_decay_every", "step-decay period in iterations (0 = constant rate)"),
    ("lr_decay_factor", "learning-rate multiplier per decay period"),
    ("wd_student", "decoupled weight decay of the student"),
    ("wd_fe_fm", "decoupled weight decay of the feature encoder and converter"),
    ("lambda1_warmup_iters", "iterations before the consistency terms switch on"),
    ("lambda1_value", "weight of the consistency terms after warmup"),
    ("lambda2", "weight of the hard-mined converter loss"),
    ("q_hard", "quantile selecting the hardest converter discrepancies"),
    ("alpha_ema", "smoothing factor of the feature-selection criterion"),
    ("student_weight_ema", "smoothing factor of the shadow student weights"),
    ("student_ema_for_fm", "feed the shadow student to the converter (true/false)"),
    ("normalize_teacher", "standardize teacher features with training statistics"),
    ("seed", "seed for student/encoder init, sampling and augmentation"),
    ("teacher_seed", "seed for the teacher init"),
    ("checkpoint_every", "write an intermediate checkpoint every N iterations (0 = never)"),
    ("feature_dim", "channels of every feature map"),
    ("pdn_variant", "teacher/student stack: m, s or tiny"),
    ("fe_bottleneck_dim", "latent width of the feature encoder"),
    ("fm_layers", "conv layers of the feature converter (0 = identity)"),
    ("fm_kernel", "kernel size of the feature converter convs"),
    ("input_size", "side of the square network input (power of two >= 32)"),
    ("weak_max_shift", "largest pixel shift of the weak view"),
    ("rand_n", "random operations per strong view"),
    ("rand_m", "magnitude of the strong-view operations (0-30)"),
    ("flip_h", "allow horizontal flips in the strong view"),
    ("flip_v", "allow vertical flips in the strong view"),
    ("jitter_strength", "color-jitter strength of the encoder view (0 disables)"),
    ("validation_fraction", "share of train/good held out for calibration"),
];

fn to_flat(cfg: &RunConfig) -> Map<String, Value> {
    // via text so single-precision fields keep their short decimal form
    let text = serde_json::to_string(cfg).expect("config serializes");
    serde_json::from_str(&text).expect("config round-trips")
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_like(key: &str, default: &Value, raw: &str) -> Result<Value> {
    let bad = || SpaceError::config(format!("invalid value for '{key}': '{raw}'"));
    Ok(match default {
        Value::Bool(_) => Value::Bool(raw.parse::<bool>().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
        }
        Value::String(_) => Value::String(raw.to_string()),
        _ => return Err(bad()),
    })
}

impl RunConfig {
    /// Parse `key = value` lines over the defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut flat = to_flat(&RunConfig::default());
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| {
                SpaceError::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            let default = flat
                .get(key)
                .ok_or_else(|| SpaceError::config(format!("unknown config key '{key}'")))?;
            let v = parse_like(key, default, raw)?;
            flat.insert(key.to_string(), v);
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(flat))
            .map_err(|e| SpaceError::config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SpaceError::config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.network.validate()?;
        self.augment.validate()?;
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(SpaceError::config(format!(
                "invalid value for 'validation_fraction': {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// The configuration as `key = value` lines in [`KEY_DOCS`] order.
    pub fn to_text(&self) -> String {
        let flat = to_flat(self);
        KEY_DOCS
            .iter()
            .map(|(k, _)| format!("{k} = {}\n", render(&flat[*k])))
            .collect()
    }
}

/// Key reference with defaults, as printed by `--help`.
pub fn keys_help() -> String {
    let flat = to_flat(&RunConfig::default());
    let mut out = String::from("Config keys (`key = value`, `#` comments; defaults shown):\n");
    for (k, doc) in KEY_DOCS {
        out.push_str(&format!("  {k:<22} {:<10} {doc}\n", render(&flat[*k])));
    }
    out
}
