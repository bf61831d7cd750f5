//! Stage-0 pretraining and post-training loops.

mod data;
mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{DataConfig, DataStream, SceneSource, StageStream};
pub use optim::{clip_grads, ema_ratio_at, ema_update, lr_at, AdamParams, AdamW, Schedule};

use crate::model::{
    check_compatible, load_checkpoint_meta, save_checkpoint_meta, Expert, GroupKind, ModelConfig, ModelError,
    ModelState, ParamLayout,
};
use crate::objectives::{
    batch_means, loss_language, loss_total, sample_loss, LossBreakdown, ObjectiveError, SampleLosses, TermScales,
    UnoLossConfig,
};
use crate::packing::{pack_caption_with, MaskToggles, PackConfig, PackedSample};
use crate::seed;
use crate::worldgen::{caption_scene, sample_scene};

pub const METRICS_HEADER: &str = "step,l_total,l_mse,l_lang,l_vis,lr,grad_norm,wall_ms";
pub const GATE_THRESHOLD: f64 = 0.2;
/// Samples per gradient accumulation buffer; fixed so results do not depend
/// on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step}; sample seeds {seeds:?}")]
    NonFinite { step: usize, seeds: Vec<u64> },
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("stage-0 checkpoint {path} has not passed the sufficiency gate (caption CE {ce}, needs <= {threshold}); run `pretrain` until it does")]
    GateNotPassed { path: String, ce: String, threshold: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Uno,
    Sft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Uno => "uno",
            Stage::Sft => "sft",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_ratio: f64,
    /// Use `min(ratio, (1+k)/(10+k))` at update k.
    pub ema_warmup: bool,
    pub timestep_shift: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Let the understanding expert train during post-training.
    pub unfreeze_und: bool,
    /// Extra groups frozen on top of the stage default.
    pub extra_frozen: Vec<String>,
    /// Weight of the caption loss during stage 0.
    pub pretrain_caption_weight: f64,
    pub seed: u64,
    /// Save `ckpt-<step>` every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// When false the `wall_ms` column is written as 0 so logs compare byte-for-byte.
    pub log_wall_time: bool,
    /// Worker threads (0: `UNO_LAB_THREADS` or all cores).
    pub threads: usize,
    pub loss: UnoLossConfig,
    pub toggles: MaskToggles,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Uno,
            steps: 5000,
            batch_size: 32,
            peak_lr: 1e-4,
            schedule: Schedule::Cosine,
            warmup_steps: 100,
            weight_decay: 0.0,
            grad_clip: 1.0,
            ema_ratio: 0.9999,
            ema_warmup: true,
            timestep_shift: 4.0,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            unfreeze_und: false,
            extra_frozen: Vec::new(),
            pretrain_caption_weight: 1.0,
            seed: 0,
            checkpoint_every: 0,
            log_wall_time: true,
            threads: 0,
            loss: UnoLossConfig::default(),
            toggles: MaskToggles::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 || self.steps <= self.warmup_steps {
            return bad(format!("steps ({}) must exceed warmup_steps ({})", self.steps, self.warmup_steps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if !(self.ema_ratio > 0.0 && self.ema_ratio < 1.0) {
            return bad(format!("ema_ratio must lie in (0,1), got {}", self.ema_ratio));
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.timestep_shift > 0.0) {
            return bad("peak_lr and weight_decay must be >= 0, timestep_shift > 0".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0,1) and eps > 0".into());
        }
        self.loss.validate().map_err(TrainError::Config)
    }

    /// Loss scales per term for this stage.
    pub fn term_weights(&self) -> TermScales {
        match self.stage {
            Stage::Pretrain => TermScales { flow: 1.0, language: self.pretrain_caption_weight, vision: 0.0 },
            Stage::Uno => {
                let w = self.loss.weights();
                TermScales { flow: w.flow, language: w.language, vision: w.vision }
            }
            Stage::Sft => TermScales { flow: 1.0, language: 0.0, vision: 0.0 },
        }
    }

    pub fn pack_config(&self, model: &ModelConfig) -> PackConfig {
        PackConfig {
            num_metaqueries: model.num_metaqueries,
            max_seq_len: model.max_seq_len,
            timestep_shift: self.timestep_shift,
            augment: self.augment,
        }
    }
}

/// Names of frozen parameter groups.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub frozen: Vec<String>,
}

impl FreezeSpec {
    pub fn none() -> Self {
        FreezeSpec::default()
    }

    pub fn all(layout: &ParamLayout) -> Self {
        FreezeSpec { frozen: layout.groups.iter().map(|g| g.name.clone()).collect() }
    }

    /// Post-training default: only the generation expert (layers, input
    /// projection, timestep embedding), the velocity head and the metaquery
    /// table train. With `unfreeze_und` the understanding layers, the
    /// token/position/segment embeddings and the LM head train as well; the
    /// image encoder that defines the vision targets stays frozen.
    pub fn post_training(layout: &ParamLayout, unfreeze_und: bool) -> Self {
        let frozen = layout
            .groups
            .iter()
            .filter(|g| {
                let trainable = match g.kind {
                    GroupKind::Layer { expert: Expert::Gen, .. }
                    | GroupKind::TimeEmbedding
                    | GroupKind::GenInput
                    | GroupKind::VelocityHead
                    | GroupKind::Metaquery => true,
                    GroupKind::UndEncoder => false,
                    _ => unfreeze_und,
                };
                !trainable
            })
            .map(|g| g.name.clone())
            .collect();
        FreezeSpec { frozen }
    }

    pub fn for_stage(cfg: &TrainConfig, layout: &ParamLayout) -> Self {
        let mut spec = match cfg.stage {
            Stage::Pretrain => FreezeSpec::none(),
            Stage::Uno | Stage::Sft => FreezeSpec::post_training(layout, cfg.unfreeze_und),
        };
        for g in &cfg.extra_frozen {
            if !spec.frozen.contains(g) {
                spec.frozen.push(g.clone());
            }
        }
        spec
    }

    /// Per-group frozen flags.
    pub fn resolve(&self, layout: &ParamLayout) -> Result<Vec<bool>, TrainError> {
        let mut flags = vec![false; layout.groups.len()];
        for name in &self.frozen {
            let g = layout.group_by_name(name).ok_or_else(|| TrainError::UnknownGroup(name.clone()))?;
            flags[g] = true;
        }
        Ok(flags)
    }
}

/// Zeroes the gradients of every frozen group.
pub fn apply_freeze(grads: &mut [Array2<f64>], layout: &ParamLayout, spec: &FreezeSpec) -> Result<(), TrainError> {
    let flags = spec.resolve(layout)?;
    for (t, info) in layout.tensors.iter().enumerate() {
        if flags[info.group] {
            grads[t].fill(0.0);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_total: f64,
    pub l_mse: f64,
    pub l_language: f64,
    pub l_vision: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.l_total, self.l_mse, self.l_language, self.l_vision, self.lr, self.grad_norm, self.wall_ms
        )
    }
}

/// Run directory: `config.json`, `metrics.csv`, `ckpt-<step>/`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, snapshot: &serde_json::Value) -> Result<Self, TrainError> {
        fs::create_dir_all(path)?;
        let text = serde_json::to_string_pretty(snapshot).map_err(|e| TrainError::Io(e.to_string()))?;
        crate::io::write_atomic(&path.join("config.json"), text.as_bytes())?;
        let mut f = fs::File::create(path.join("metrics.csv"))?;
        writeln!(f, "{METRICS_HEADER}")?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.path.join(format!("ckpt-{step}"))
    }

    fn append(&self, m: &StepMetrics) -> Result<(), TrainError> {
        let mut f = fs::OpenOptions::new().append(true).open(self.path.join("metrics.csv"))?;
        writeln!(f, "{}", m.csv_row())?;
        Ok(())
    }
}

pub fn thread_count(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::env::var("UNO_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Per-sample scales turning term weights into batch means over the samples
/// that carry each term.
pub fn batch_scales(samples: &[PackedSample], weights: &TermScales) -> TermScales {
    let count = |f: fn(&PackedSample) -> bool| samples.iter().filter(|s| f(s)).count().max(1) as f64;
    let n_flow = count(|s| s.velocity_target.is_some());
    let n_lang = count(|s| !s.caption_targets.is_empty());
    let n_vis = count(|s| s.target_patches.is_some() && s.layout.find(crate::packing::SegmentKind::Metaquery).is_some());
    TermScales { flow: weights.flow / n_flow, language: weights.language / n_lang, vision: weights.vision / n_vis }
}

/// Mean-reduced batch gradient and per-sample losses. Terms are averaged over
/// the samples that carry them.
pub fn batch_gradient(
    state: &ModelState,
    samples: &[PackedSample],
    weights: &TermScales,
) -> Result<(Vec<Array2<f64>>, Vec<SampleLosses>), TrainError> {
    let scales = batch_scales(samples, weights);
    let chunks: Vec<Result<(Vec<Array2<f64>>, Vec<SampleLosses>), ObjectiveError>> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = state.layout.zeros();
            let mut losses = Vec::with_capacity(chunk.len());
            for s in chunk {
                losses.push(sample_loss(&state.cfg, &state.layout, &state.params, s, &scales, Some(&mut g))?);
            }
            Ok((g, losses))
        })
        .collect();
    let mut total: Option<Vec<Array2<f64>>> = None;
    let mut losses = Vec::with_capacity(samples.len());
    for c in chunks {
        let (g, l) = c?;
        losses.extend(l);
        match &mut total {
            None => total = Some(g),
            Some(t) => crate::objectives::axpy(t, &g, 1.0),
        }
    }
    Ok((total.unwrap_or_else(|| state.layout.zeros()), losses))
}

fn breakdown(cfg: &TrainConfig, losses: &[SampleLosses]) -> Result<LossBreakdown, ObjectiveError> {
    let (l_mse, l_lang, l_vis) = batch_means(losses);
    match cfg.stage {
        Stage::Uno => loss_total(l_mse, l_lang, l_vis, &cfg.loss),
        Stage::Sft => loss_total(l_mse, 0.0, 0.0, &UnoLossConfig::sft()),
        Stage::Pretrain => {
            let mut b = loss_total(l_mse, l_lang, 0.0, &UnoLossConfig::sft())?;
            b.l_language = l_lang;
            b.l_total = l_mse + cfg.pretrain_caption_weight * l_lang;
            Ok(b)
        }
    }
}

/// Runs `cfg.steps` optimizer steps on `state`, in place.
pub fn train(
    state: &mut ModelState,
    cfg: &TrainConfig,
    data: &dyn DataStream,
    run: Option<&RunDir>,
) -> Result<Vec<StepMetrics>, TrainError> {
    train_observed(state, cfg, data, run, &mut |_, _| Ok(()))
}

/// As [`train`], calling `observe` after every step with the updated state.
pub fn train_observed(
    state: &mut ModelState,
    cfg: &TrainConfig,
    data: &dyn DataStream,
    run: Option<&RunDir>,
    observe: &mut dyn FnMut(&ModelState, &StepMetrics) -> Result<(), TrainError>,
) -> Result<Vec<StepMetrics>, TrainError> {
    cfg.validate()?;
    let spec = FreezeSpec::for_stage(cfg, &state.layout);
    state.frozen = spec.resolve(&state.layout)?;
    let skip: Vec<bool> = (0..state.params.len()).map(|t| state.tensor_frozen(t)).collect();
    let hp = AdamParams { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay };
    let mut opt = AdamW::new(hp, &state.params);
    let weights = cfg.term_weights();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(cfg.threads))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let start = Instant::now();
        let samples = data.batch(step, cfg.batch_size)?;
        let (mut grads, losses) = pool.install(|| batch_gradient(state, &samples, &weights))?;
        let finite = losses.iter().all(|l| [l.flow, l.language, l.vision].iter().flatten().all(|v| v.is_finite()));
        if !finite {
            let seeds = samples
                .iter()
                .zip(&losses)
                .filter(|(_, l)| [l.flow, l.language, l.vision].iter().flatten().any(|v| !v.is_finite()))
                .map(|(s, _)| s.seed)
                .collect();
            return Err(TrainError::NonFinite { step, seeds });
        }
        let b = breakdown(cfg, &losses)?;
        for (t, g) in grads.iter_mut().enumerate() {
            if skip[t] {
                g.fill(0.0);
            }
        }
        let grad_norm = clip_grads(&mut grads, cfg.grad_clip);
        let lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps, cfg.steps, cfg.schedule);
        opt.step(&mut state.params, &grads, lr, &skip);
        crate::model::quantize_params(&mut state.params, state.cfg.precision);
        let ratio = ema_ratio_at(cfg.ema_ratio, step, cfg.ema_warmup);
        for t in 0..state.params.len() {
            if !skip[t] {
                ema_update(&mut state.ema[t], &state.params[t], ratio);
            }
        }
        crate::model::quantize_params(&mut state.ema, state.cfg.precision);
        let wall_ms = if cfg.log_wall_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        let m = StepMetrics {
            step,
            l_total: b.l_total,
            l_mse: b.l_mse,
            l_language: b.l_language,
            l_vision: b.l_vision,
            lr,
            grad_norm,
            wall_ms,
        };
        if let Some(r) = run {
            r.append(&m)?;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                save_checkpoint_meta(state, &stage_meta(cfg, step), &r.checkpoint_path(step))?;
            }
        }
        observe(state, &m)?;
        log.push(m);
    }
    if let Some(r) = run {
        save_checkpoint_meta(state, &stage_meta(cfg, cfg.steps), &r.checkpoint_path(cfg.steps))?;
    }
    Ok(log)
}

fn stage_meta(cfg: &TrainConfig, step: usize) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("stage".into(), serde_json::json!(cfg.stage.name()));
    m.insert("step".into(), serde_json::json!(step));
    m.insert("seed".into(), serde_json::json!(cfg.seed));
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub caption_ce: f64,
    pub threshold: f64,
    pub passed: bool,
    pub scenes: usize,
}

/// Mean caption cross-entropy on canonical captions of held-out scenes.
pub fn sufficiency_gate(state: &ModelState, scenes: usize, seed_value: u64, max_objects: usize) -> Result<GateReport, TrainError> {
    let pack = PackConfig { num_metaqueries: state.cfg.num_metaqueries, max_seq_len: state.cfg.max_seq_len, ..PackConfig::default() };
    let mut total = 0.0;
    for i in 0..scenes {
        let s = seed::eval_seed(seed::derive(seed::derive_str(seed_value, "gate"), i as u64));
        let scene = sample_scene(s, max_objects).map_err(|e| TrainError::Data(e.to_string()))?;
        let caption = caption_scene(&scene, 0).map_err(|e| TrainError::Data(e.to_string()))?;
        let sample = pack_caption_with(&scene, &caption, s, &pack).map_err(|e| TrainError::Data(e.to_string()))?;
        let (out, _) = crate::model::forward(state, &sample)?;
        let targets: Vec<u32> = sample.caption_targets.iter().map(|&(_, t)| t).collect();
        total += loss_language(&out.caption_logits, &targets)?;
    }
    let caption_ce = total / scenes.max(1) as f64;
    Ok(GateReport { caption_ce, threshold: GATE_THRESHOLD, passed: caption_ce <= GATE_THRESHOLD, scenes })
}

/// Stamps a stage-0 checkpoint with its gate result.
pub fn save_pretrained(state: &ModelState, gate: &GateReport, path: &Path) -> Result<(), TrainError> {
    let mut meta = BTreeMap::new();
    meta.insert("stage".into(), serde_json::json!("pretrain"));
    meta.insert("gate_caption_ce".into(), serde_json::json!(gate.caption_ce));
    meta.insert("gate_passed".into(), serde_json::json!(gate.passed));
    save_checkpoint_meta(state, &meta, path)?;
    Ok(())
}

/// Loads a stage-0 checkpoint for post-training; refuses checkpoints that have
/// not passed the gate and checks shapes against `expected`.
pub fn load_pretrained(path: &Path, expected: &ModelConfig) -> Result<ModelState, TrainError> {
    let (state, meta) = load_checkpoint_meta(path)?;
    let passed = meta.get("gate_passed").and_then(|v| v.as_bool()).unwrap_or(false);
    if !passed {
        let ce = meta.get("gate_caption_ce").map_or("not measured".to_string(), |v| v.to_string());
        return Err(TrainError::GateNotPassed { path: path.display().to_string(), ce, threshold: GATE_THRESHOLD });
    }
    check_compatible(&state, expected)?;
    let mut state = state;
    state.frozen = vec![false; state.layout.groups.len()];
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Precision};

    fn tiny_model() -> ModelState {
        let mut cfg = ModelConfig::tiny();
        cfg.num_metaqueries = 4;
        cfg.max_seq_len = 128;
        cfg.precision = Precision::F32;
        init_model(&cfg, 5).unwrap()
    }

    fn stream(stage: Stage, model: &ModelConfig, cfg: &TrainConfig) -> StageStream {
        StageStream {
            stage,
            source: SceneSource::Synthetic { max_objects: 2 },
            data: DataConfig::default(),
            pack: cfg.pack_config(model),
            toggles: cfg.toggles,
            seed: cfg.seed,
        }
    }

    fn short(stage: Stage) -> TrainConfig {
        TrainConfig { stage, steps: 6, batch_size: 5, warmup_steps: 2, peak_lr: 1e-2, seed: 9, ..TrainConfig::default() }
    }

    #[test]
    fn default_post_training_freeze() {
        let st = init_model(&ModelConfig::default(), 1).unwrap();
        let spec = FreezeSpec::post_training(&st.layout, false);
        let flags = spec.resolve(&st.layout).unwrap();
        for (g, info) in st.layout.groups.iter().enumerate() {
            let expect_train = info.name.contains(".gen.")
                || ["gen.time_embed", "gen.input", "head.velocity", "metaquery"].contains(&info.name.as_str());
            assert_eq!(!flags[g], expect_train, "{}", info.name);
        }
        let open = FreezeSpec::post_training(&st.layout, true).resolve(&st.layout).unwrap();
        let und = st.group_id("layer0.und.qkv").unwrap();
        assert!(!open[und]);
        assert!(open[st.group_id("und.encoder").unwrap()]);
        let bad = FreezeSpec { frozen: vec!["layer9.gen.qkv".into()] };
        assert!(matches!(bad.resolve(&st.layout), Err(TrainError::UnknownGroup(_))));
    }

    #[test]
    fn apply_freeze_zeroes_only_frozen() {
        let st = init_model(&ModelConfig::tiny(), 1).unwrap();
        let mut g: Vec<Array2<f64>> = st.layout.tensors.iter().map(|t| Array2::ones(t.shape)).collect();
        apply_freeze(&mut g, &st.layout, &FreezeSpec::post_training(&st.layout, false)).unwrap();
        let qkv = st.index().layers[0][1].wqkv;
        assert!(g[qkv].iter().all(|&v| v == 1.0));
        assert!(g[st.index().lm_head].iter().all(|&v| v == 0.0));
        apply_freeze(&mut g, &st.layout, &FreezeSpec::all(&st.layout)).unwrap();
        assert!(g.iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn all_frozen_means_no_motion() {
        let mut st = tiny_model();
        let before = st.clone();
        let cfg = TrainConfig { extra_frozen: FreezeSpec::all(&st.layout).frozen, ..short(Stage::Uno) };
        let data = stream(Stage::Uno, &st.cfg, &cfg);
        train(&mut st, &cfg, &data, None).unwrap();
        assert_eq!(st.params, before.params);
        assert_eq!(st.ema, before.ema);
    }

    #[test]
    fn zero_lambda_uno_matches_sft_bitwise() {
        let base = tiny_model();
        let uno_cfg = TrainConfig {
            loss: UnoLossConfig { lambda1: 0.0, lambda2: 0.0, ..UnoLossConfig::default() },
            ..short(Stage::Uno)
        };
        let sft_cfg = short(Stage::Sft);
        let mut a = base.clone();
        let mut b = base.clone();
        train(&mut a, &uno_cfg, &stream(Stage::Uno, &base.cfg, &uno_cfg), None).unwrap();
        train(&mut b, &sft_cfg, &stream(Stage::Sft, &base.cfg, &sft_cfg), None).unwrap();
        assert_ne!(a.params, base.params);
        assert_eq!(a.params, b.params);
        assert_eq!(a.ema, b.ema);
    }

    #[test]
    fn replay_is_bitwise_and_thread_independent() {
        let dir = tempfile::tempdir().unwrap();
        let run = |threads: usize, name: &str| {
            let mut st = tiny_model();
            let cfg = TrainConfig { threads, log_wall_time: false, ..short(Stage::Pretrain) };
            let rd = RunDir::create(&dir.path().join(name), &serde_json::json!({"seed": 9})).unwrap();
            let data = stream(Stage::Pretrain, &st.cfg, &cfg);
            train(&mut st, &cfg, &data, Some(&rd)).unwrap();
            (fs::read(rd.path.join("metrics.csv")).unwrap(), fs::read(rd.checkpoint_path(6).join("weights.bin")).unwrap())
        };
        let a = run(1, "a");
        let b = run(1, "b");
        let c = run(3, "c");
        assert_eq!(a, b);
        assert_eq!(a, c);
        let text = String::from_utf8(a.0).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn gate_refuses_unstamped_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let st = tiny_model();
        let p = dir.path().join("raw");
        crate::model::save_checkpoint(&st, &p).unwrap();
        assert!(matches!(load_pretrained(&p, &st.cfg), Err(TrainError::GateNotPassed { .. })));
        let gate = GateReport { caption_ce: 0.1, threshold: GATE_THRESHOLD, passed: true, scenes: 1 };
        save_pretrained(&st, &gate, &p).unwrap();
        assert!(load_pretrained(&p, &st.cfg).is_ok());
        let other = ModelConfig { num_metaqueries: 2, ..st.cfg.clone() };
        let err = load_pretrained(&p, &other).unwrap_err();
        assert!(err.to_string().contains("metaquery"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { steps: 100, warmup_steps: 100, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { ema_ratio: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { grad_clip: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
