//! Run configuration: defaults < file < `--set` flags, with per-field provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use uno_core::evalsuite::AblationGrid;
use uno_core::model::ModelConfig;
use uno_core::objectives::UnoLossConfig;
use uno_core::packing::{IntraRule, MaskToggles};
use uno_core::trainer::{DataConfig, Schedule, Stage, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("unknown key `{key}`{}", suggestion.as_ref().map(|s| format!(", did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("bad override `{0}`: expected section.key=value")]
    BadOverride(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: PathBuf,
    /// Worker threads; 0 defers to `UNO_LAB_THREADS` or the core count.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out_dir: PathBuf::from("runs"), threads: 0 }
    }
}

/// Stage-0 overrides on top of `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub caption_weight: f64,
    pub init_seed: u64,
    /// Held-out scenes used by the sufficiency gate.
    pub gate_scenes: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 4000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 100,
            caption_weight: 1.0,
            init_seed: 0,
            gate_scenes: 64,
        }
    }
}

/// Optimizer and loop settings shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_ratio: f64,
    pub ema_warmup: bool,
    pub timestep_shift: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub unfreeze_und: bool,
    pub extra_frozen: Vec<String>,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            schedule: t.schedule,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            ema_ratio: t.ema_ratio,
            ema_warmup: t.ema_warmup,
            timestep_shift: t.timestep_shift,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            unfreeze_und: t.unfreeze_und,
            extra_frozen: t.extra_frozen,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            log_wall_time: t.log_wall_time,
        }
    }
}

/// Joint-supervision settings: loss weights, augmentation and mask toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnoSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub enable_language: bool,
    pub enable_vision: bool,
    pub augment: bool,
    pub mask_condition_prompt: bool,
    pub metaquery_order: IntraRule,
    pub sup_blocks_see_source: bool,
}

impl Default for UnoSection {
    fn default() -> Self {
        let l = UnoLossConfig::default();
        let m = MaskToggles::default();
        UnoSection {
            lambda1: l.lambda1,
            lambda2: l.lambda2,
            enable_language: l.enable_language,
            enable_vision: l.enable_vision,
            augment: true,
            mask_condition_prompt: m.mask_condition_prompt,
            metaquery_order: m.metaquery_order,
            sup_blocks_see_source: m.sup_blocks_see_source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub samples: usize,
    pub sampler_steps: usize,
    pub seeds: Vec<u64>,
    pub use_ema: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { samples: 100, sampler_steps: 32, seeds: vec![0, 1, 2, 3], use_ema: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub batch_size: usize,
    pub fd_per_group: usize,
    pub fd_step: f64,
    pub pca_t: f64,
    /// Hidden-state layer of the PCA view; unset means `n_layers / 2`.
    pub pca_layer: Option<usize>,
    pub leakage_steps: usize,
    pub leakage_batch_size: usize,
    pub leakage_lr: f64,
    pub leakage_seeds: Vec<u64>,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            batch_size: 16,
            fd_per_group: 3,
            fd_step: 1e-4,
            pca_t: 0.8,
            pca_layer: None,
            leakage_steps: 1200,
            leakage_batch_size: 16,
            leakage_lr: 1e-3,
            leakage_seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub uno: UnoSection,
    pub data: DataConfig,
    pub eval: EvalSection,
    pub diagnose: DiagnoseSection,
    pub ablate: AblationGrid,
}

impl RunConfig {
    pub fn loss(&self) -> UnoLossConfig {
        UnoLossConfig {
            lambda1: self.uno.lambda1,
            lambda2: self.uno.lambda2,
            enable_language: self.uno.enable_language,
            enable_vision: self.uno.enable_vision,
        }
    }

    pub fn toggles(&self) -> MaskToggles {
        MaskToggles {
            mask_condition_prompt: self.uno.mask_condition_prompt,
            metaquery_order: self.uno.metaquery_order,
            sup_blocks_see_source: self.uno.sup_blocks_see_source,
        }
    }

    /// Trainer settings for a post-training stage.
    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage,
            steps: t.steps,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            schedule: t.schedule,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            ema_ratio: t.ema_ratio,
            ema_warmup: t.ema_warmup,
            timestep_shift: t.timestep_shift,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            unfreeze_und: t.unfreeze_und,
            extra_frozen: t.extra_frozen.clone(),
            pretrain_caption_weight: self.pretrain.caption_weight,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            log_wall_time: t.log_wall_time,
            threads: self.run.threads,
            loss: if stage == Stage::Sft { UnoLossConfig::sft() } else { self.loss() },
            toggles: self.toggles(),
            augment: self.uno.augment,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        let p = &self.pretrain;
        TrainConfig {
            steps: p.steps,
            batch_size: p.batch_size,
            peak_lr: p.peak_lr,
            warmup_steps: p.warmup_steps,
            ..self.train_config(Stage::Pretrain)
        }
    }

    /// Post-training run of the leakage probe; warmup is a tenth of the budget.
    pub fn leakage_config(&self) -> TrainConfig {
        let d = &self.diagnose;
        TrainConfig {
            steps: d.leakage_steps,
            batch_size: d.leakage_batch_size,
            peak_lr: d.leakage_lr,
            warmup_steps: d.leakage_steps / 10,
            ..self.train_config(Stage::Uno)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| ConfigError::Invalid(m);
        self.model.validate().map_err(|e| inv(e.to_string()))?;
        self.data.validate().map_err(inv)?;
        self.train_config(Stage::Uno).validate().map_err(|e| inv(e.to_string()))?;
        self.pretrain_config().validate().map_err(|e| inv(e.to_string()))?;
        self.leakage_config().validate().map_err(|e| inv(format!("diagnose: {e}")))?;
        let seeds = [self.train.seed, self.pretrain.init_seed].into_iter().chain(self.eval.seeds.iter().copied());
        let mut seeds = seeds.chain(self.diagnose.leakage_seeds.iter().copied()).chain(self.ablate.seeds.iter().copied());
        if seeds.any(|s| s > i64::MAX as u64) {
            return Err(inv("seeds must not exceed 2^63 - 1 so the snapshot stays valid TOML".into()));
        }
        self.ablate.validate().map_err(|e| inv(e.to_string()))?;
        if self.eval.seeds.is_empty() || self.eval.sampler_steps == 0 {
            return Err(inv("eval needs at least one seed and one sampler step".into()));
        }
        if !(self.diagnose.pca_t > 0.0 && self.diagnose.pca_t < 1.0) {
            return Err(inv(format!("diagnose.pca_t must lie in (0,1), got {}", self.diagnose.pca_t)));
        }
        if let Some(l) = self.diagnose.pca_layer {
            if l > self.model.n_layers {
                return Err(inv(format!("diagnose.pca_layer {l} exceeds model.n_layers {}", self.model.n_layers)));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }
}

/// A fully resolved configuration and where each leaf value came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

impl Resolved {
    /// JSON snapshot stored in run directories.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({ "config": self.config, "provenance": self.provenance })
    }
}

fn defaults_table() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize")
}

/// Every accepted key: the defaults plus optional fields that default to unset.
fn schema() -> Table {
    let mut t = defaults_table();
    let mut put = |section: &str, key: &str, v: Value| {
        if let Some(Value::Table(s)) = t.get_mut(section) {
            s.entry(key.to_string()).or_insert(v);
        }
    };
    put("data", "manifest", Value::String(String::new()));
    put("diagnose", "pca_layer", Value::Integer(0));
    t
}

fn leaves(t: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(sub) => leaves(sub, &path, out),
            _ => out.push(path),
        }
    }
}

fn suggest(key: &str, candidates: impl Iterator<Item = String>) -> Option<String> {
    candidates
        .map(|c| (strsim::levenshtein(key, &c), c))
        .filter(|(d, _)| *d <= 3)
        .min()
        .map(|(_, c)| c)
}

fn check_keys(given: &Table, schema: &Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match schema.get(k) {
            None => {
                let near = suggest(k, schema.keys().cloned())
                    .map(|s| if prefix.is_empty() { s } else { format!("{prefix}.{s}") });
                return Err(ConfigError::UnknownKey { key: path, suggestion: near });
            }
            Some(Value::Table(sub)) => match v {
                Value::Table(gv) => check_keys(gv, sub, &path)?,
                _ => return Err(ConfigError::Invalid(format!("`{path}` must be a table"))),
            },
            Some(_) => {}
        }
    }
    Ok(())
}

fn merge(into: &mut Table, from: &Table, prefix: &str, prov: &mut BTreeMap<String, Source>, source: Source) {
    for (k, v) in from {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (into.get_mut(k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src, &path, prov, source),
            _ => {
                let mut marked = Vec::new();
                match v {
                    Value::Table(sub) => leaves(sub, &path, &mut marked),
                    _ => marked.push(path),
                }
                for p in marked {
                    prov.insert(p, source);
                }
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parses TOML text; errors carry the line and column.
pub fn parse_table(text: &str, path: &str) -> Result<Table, ConfigError> {
    text.parse::<Table>().map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse { path: path.to_string(), line, column, message: e.message().to_string() }
    })
}

/// `section.key=value` as a one-entry nested table. Values parse as TOML and
/// fall back to a bare string.
pub fn parse_override(spec: &str) -> Result<Table, ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut node = value;
    for p in parts.iter().rev() {
        let mut t = Table::new();
        t.insert(p.to_string(), node);
        node = Value::Table(t);
    }
    match node {
        Value::Table(t) => Ok(t),
        _ => unreachable!("wrapped in at least one table"),
    }
}

/// Resolves a configuration from an optional TOML text (with its display
/// path) and `--set` overrides.
pub fn resolve_text(file: Option<(&str, &str)>, overrides: &[String]) -> Result<Resolved, ConfigError> {
    let schema = schema();
    let mut merged = defaults_table();
    let mut all = Vec::new();
    leaves(&schema, "", &mut all);
    let mut prov: BTreeMap<String, Source> = all.into_iter().map(|p| (p, Source::Default)).collect();
    if let Some((text, path)) = file {
        let t = parse_table(text, path)?;
        check_keys(&t, &schema, "")?;
        merge(&mut merged, &t, "", &mut prov, Source::File);
    }
    for o in overrides {
        let t = parse_override(o)?;
        check_keys(&t, &schema, "")?;
        merge(&mut merged, &t, "", &mut prov, Source::Flag);
    }
    let config: RunConfig = Value::Table(merged).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.message().to_string()))?;
    config.validate()?;
    Ok(Resolved { config, provenance: prov })
}

/// Defaults < file at `path` < overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Resolved, ConfigError> {
    match path {
        None => resolve_text(None, overrides),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError::Io { path: p.display().to_string(), message: e.to_string() })?;
            resolve_text(Some((&text, &p.display().to_string())), overrides)
        }
    }
}
