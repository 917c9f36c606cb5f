//! Run configuration: TOML on disk, named presets, strict key checking.
//!
//! Resolution order: the preset named by the top-level `preset` key
//! (`default` or `desk`), then the file's own values merged over it. A
//! top-level `[regularizer]` table is accepted as shorthand for
//! `[plan.regularizer]`, and `lambda_preset` may name one of the published
//! strengths instead of giving `lambda`.

use filterprune::data::Augment;
use filterprune::graph::ResNetShape;
use filterprune::nn::OptimizerConfig;
use filterprune::objective::LambdaPreset;
use filterprune::schedule::TrainingPlan;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {0} does not exist")]
    Missing(PathBuf),
    #[error("cannot read config {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("syntax error in {path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("unknown config key {}", .0.join(", "))]
    UnknownKey(Vec<String>),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub name: String,
    pub depth: usize,
    pub num_classes: usize,
    pub base_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: "resnet".into(),
            depth: 56,
            num_classes: 10,
            base_width: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Synthetic,
}

/// Sizes of the generated stand-in dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub train: usize,
    pub eval: usize,
    pub image_size: usize,
    pub noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train: 512,
            eval: 256,
            image_size: 32,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub root: PathBuf,
    /// Fraction of both splits kept, drawn with `seed`.
    pub subset: f64,
    pub augment: Augment,
    /// Seeds the subset draw, model initialisation and every epoch's shuffle.
    pub seed: u64,
    pub download: bool,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Cifar10,
            root: PathBuf::from("data"),
            subset: 1.0,
            augment: Augment::default(),
            seed: 0,
            download: false,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub plan: TrainingPlan,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            plan: TrainingPlan::default(),
            output: OutputConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 2] = ["default", "desk"];

impl RunConfig {
    /// ResNet-20 on a fifth of CIFAR-10 with a shortened schedule.
    pub fn desk() -> Self {
        let mut plan = TrainingPlan {
            warmup_epochs: 5,
            cycles: 4,
            score_epochs: 1,
            weight_epochs: 2,
            finetune_epochs: 20,
            batch_size: 128,
            score_optimizer: OptimizerConfig::adam(1e-4),
            ..TrainingPlan::default()
        };
        plan.regularizer.lambda = 1e-3;
        Self {
            preset: "desk".into(),
            model: ModelConfig {
                depth: 20,
                ..ModelConfig::default()
            },
            data: DataConfig {
                subset: 0.2,
                ..DataConfig::default()
            },
            plan,
            output: OutputConfig {
                dir: PathBuf::from("runs/desk"),
            },
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    /// Network shape for images of `image_size` pixels with `in_channels` planes.
    pub fn shape(&self, image_size: usize, in_channels: usize) -> ResNetShape {
        ResNetShape {
            depth: self.model.depth,
            num_classes: self.model.num_classes,
            base_width: self.model.base_width,
            image_size,
            in_channels,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.name != "resnet" {
            return Err(ConfigError::invalid(
                "model.name",
                format!("unknown model `{}`, expected `resnet`", m.name),
            ));
        }
        ResNetShape::cifar(m.depth, m.num_classes)
            .blocks_per_stage()
            .map_err(|e| ConfigError::invalid("model.depth", e.to_string()))?;
        if m.num_classes < 2 || m.num_classes > 256 {
            return Err(ConfigError::invalid(
                "model.num_classes",
                format!("{} is outside 2..=256", m.num_classes),
            ));
        }
        if m.base_width == 0 {
            return Err(ConfigError::invalid(
                "model.base_width",
                "must be at least 1",
            ));
        }
        let d = &self.data;
        if d.dataset == DatasetKind::Cifar10 && m.num_classes != 10 {
            return Err(ConfigError::invalid(
                "model.num_classes",
                "CIFAR-10 has 10 classes",
            ));
        }
        if !(d.subset > 0.0 && d.subset <= 1.0) {
            return Err(ConfigError::invalid(
                "data.subset",
                format!("{} is outside (0, 1]", d.subset),
            ));
        }
        let s = &d.synthetic;
        for (key, v) in [
            ("data.synthetic.train", s.train),
            ("data.synthetic.eval", s.eval),
            ("data.synthetic.image_size", s.image_size),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(key, "must be at least 1"));
            }
        }
        if !(s.noise.is_finite() && s.noise >= 0.0) {
            return Err(ConfigError::invalid(
                "data.synthetic.noise",
                "must be finite and non-negative",
            ));
        }
        let p = &self.plan;
        let r = &p.regularizer;
        if !(r.lambda.is_finite() && r.lambda >= 0.0) {
            return Err(ConfigError::invalid(
                "regularizer.lambda",
                format!("must be >= 0, got {}", r.lambda),
            ));
        }
        if !(0.0..=1.0).contains(&r.target_ratio_p) {
            return Err(ConfigError::invalid(
                "regularizer.target_ratio_p",
                format!("{} is outside [0, 1]", r.target_ratio_p),
            ));
        }
        if p.batch_size == 0 {
            return Err(ConfigError::invalid(
                "plan.batch_size",
                "must be at least 1",
            ));
        }
        if !(p.slope_a.is_finite() && p.slope_a > 0.0) {
            return Err(ConfigError::invalid(
                "plan.slope_a",
                format!("must be > 0, got {}", p.slope_a),
            ));
        }
        for (key, o) in [
            ("plan.warmup_optimizer", &p.warmup_optimizer),
            ("plan.weight_optimizer", &p.weight_optimizer),
            ("plan.score_optimizer", &p.score_optimizer),
            ("plan.finetune_optimizer", &p.finetune_optimizer),
        ] {
            for (field, v) in [
                ("lr", o.lr),
                ("momentum", o.momentum),
                ("weight_decay", o.weight_decay),
                ("eps", o.eps),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(ConfigError::invalid(
                        &format!("{key}.{field}"),
                        format!("must be >= 0, got {v}"),
                    ));
                }
            }
            for (field, v) in [("beta1", o.beta1), ("beta2", o.beta2)] {
                if !(0.0..1.0).contains(&v) {
                    return Err(ConfigError::invalid(
                        &format!("{key}.{field}"),
                        format!("{v} is outside [0, 1)"),
                    ));
                }
            }
        }
        p.validate()
            .map_err(|e| ConfigError::invalid("plan", e.to_string()))
    }

    /// Resolved config as TOML; parsing it back yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }
}

/// Parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ConfigError::Missing(path.into()))
        }
        Err(e) => {
            return Err(ConfigError::Unreadable {
                path: path.into(),
                message: e.to_string(),
            })
        }
    };
    parse_config_str(&text, path)
}

/// Same as [`parse_config`] on text already in memory; `origin` labels errors.
pub fn parse_config_str(text: &str, origin: &Path) -> Result<RunConfig, ConfigError> {
    let syntax = |message: String| ConfigError::Syntax {
        path: origin.into(),
        message,
    };
    let mut user: Table = text
        .parse()
        .map_err(|e: toml::de::Error| syntax(e.to_string()))?;
    let preset = match user.remove("preset") {
        None => "default".to_string(),
        Some(Value::String(s)) => s,
        Some(other) => {
            return Err(ConfigError::invalid(
                "preset",
                format!("expected a string, got {other}"),
            ))
        }
    };
    let base = RunConfig::preset(&preset).ok_or_else(|| {
        ConfigError::invalid(
            "preset",
            format!(
                "unknown preset `{preset}`, expected one of {}",
                PRESETS.join(", ")
            ),
        )
    })?;

    let lifted = lift_regularizer(&mut user)?;
    resolve_lambda_preset(&mut user, lifted)?;

    let mut merged = Table::try_from(&base).expect("presets serialize");
    merge(&mut merged, user);

    let mut unknown = Vec::new();
    let mut record = |p: serde_ignored::Path<'_>| unknown.push(p.to_string());
    let tracked = serde_ignored::Deserializer::new(Value::Table(merged), &mut record);
    let cfg: RunConfig = serde_path_to_error::deserialize(tracked).map_err(|e| {
        let key = e.path().to_string();
        ConfigError::invalid(&key, e.into_inner().message())
    })?;
    if !unknown.is_empty() {
        if lifted {
            for k in &mut unknown {
                if let Some(rest) = k.strip_prefix("plan.regularizer") {
                    *k = format!("regularizer{rest}");
                }
            }
        }
        return Err(ConfigError::UnknownKey(unknown));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Moves a top-level `[regularizer]` under `[plan]`; true if it did.
fn lift_regularizer(user: &mut Table) -> Result<bool, ConfigError> {
    let Some(reg) = user.remove("regularizer") else {
        return Ok(false);
    };
    let plan = user
        .entry("plan")
        .or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(plan) = plan else {
        return Err(ConfigError::invalid("plan", "expected a table"));
    };
    if plan.contains_key("regularizer") {
        return Err(ConfigError::invalid(
            "regularizer",
            "given both as [regularizer] and [plan.regularizer]",
        ));
    }
    plan.insert("regularizer".into(), reg);
    Ok(true)
}

fn resolve_lambda_preset(user: &mut Table, lifted: bool) -> Result<(), ConfigError> {
    let key = if lifted {
        "regularizer.lambda_preset"
    } else {
        "plan.regularizer.lambda_preset"
    };
    let Some(Value::Table(plan)) = user.get_mut("plan") else {
        return Ok(());
    };
    let Some(Value::Table(reg)) = plan.get_mut("regularizer") else {
        return Ok(());
    };
    let Some(name) = reg.remove("lambda_preset") else {
        return Ok(());
    };
    let Value::String(name) = name else {
        return Err(ConfigError::invalid(key, "expected a string"));
    };
    let preset = LambdaPreset::from_name(&name).ok_or_else(|| {
        let names: Vec<&str> = LambdaPreset::ALL.iter().map(|p| p.name()).collect();
        ConfigError::invalid(
            key,
            format!(
                "unknown preset `{name}`, expected one of {}",
                names.join(", ")
            ),
        )
    })?;
    if reg.contains_key("lambda") {
        return Err(ConfigError::invalid(key, "given together with lambda"));
    }
    reg.insert("lambda".into(), Value::Float(preset.value()));
    Ok(())
}

/// Recursive merge; tables merge key by key, everything else is replaced.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
