//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use uno_core::diagnostics::{self, finite_diff_check, grad_cosine_report, latent_pca_view, leakage_probe, noised_view_sample, write_json};
use uno_core::evalsuite::{self, eval_compositional, eval_edit, run_ablation, write_reports, Sampler};
use uno_core::io;
use uno_core::model::{init_model, load_checkpoint_for, ModelState, Precision};
use uno_core::objectives::TermScales;
use uno_core::packing::{pack_t2i_uno, sample_prompt};
use uno_core::seed;
use uno_core::trainer::{
    load_pretrained, save_pretrained, sufficiency_gate, train, DataStream, RunDir, Stage, StageStream, StepMetrics,
};
use uno_core::worldgen::{
    decode_pixels, decode_probe, render_scene, sample_edit, sample_scene, tokenize, vocab::write_vocab_file, write_manifest,
    Latent, ManifestRecord, PixelImage, Scene,
};

use crate::config::{ConfigError, Resolved};

const PREVIEW_SCALE: usize = 8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{message}")]
    Runtime { kind: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Runtime { .. } => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Runtime { kind, .. } => kind,
        }
    }

    /// Single-line JSON for standard error.
    pub fn json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() }).to_string()
    }
}

macro_rules! runtime_from {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime { kind: $kind, message: e.to_string() }
            }
        })*
    };
}

runtime_from! {
    uno_core::trainer::TrainError => "train",
    uno_core::model::ModelError => "model",
    uno_core::evalsuite::EvalError => "eval",
    uno_core::diagnostics::DiagError => "diagnose",
    uno_core::worldgen::WorldError => "world",
    uno_core::packing::PackError => "pack",
    std::io::Error => "io",
}

fn io_err(message: String) -> CliError {
    CliError::Runtime { kind: "io", message }
}

/// Creates `dir` and writes the resolved config beside the artifacts:
/// `config.toml` reproduces the run, `provenance.json` says where each value came from.
pub fn write_snapshot(dir: &Path, resolved: &Resolved) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    io::write_atomic(&dir.join("config.toml"), resolved.config.to_toml().as_bytes())?;
    let prov = serde_json::to_string_pretty(&resolved.provenance).map_err(|e| io_err(e.to_string()))?;
    io::write_atomic(&dir.join("provenance.json"), prov.as_bytes())?;
    Ok(())
}

fn write_pretty<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    Ok(write_json(value, path)?)
}

fn write_image(img: &PixelImage, path: &Path) -> Result<(), CliError> {
    let side = uno_core::worldgen::image::IMAGE_SIZE;
    let big = io::upscale_rgb(&img.to_rgb8(), side, side, PREVIEW_SCALE);
    let px = (side * PREVIEW_SCALE) as u32;
    io::write_png_rgb(path, px, px, &big).map_err(io_err)
}

#[derive(Serialize)]
struct DataSummary {
    scenes: usize,
    edits: usize,
    seed: u64,
    max_objects: usize,
    previews: usize,
}

pub fn gen_data(resolved: &Resolved, out: &Path, scenes: usize, edits: usize, seed_value: u64, previews: usize) -> Result<(), CliError> {
    write_snapshot(out, resolved)?;
    let max_objects = resolved.config.data.max_objects;
    let mut records = Vec::with_capacity(scenes + edits);
    for i in 0..scenes {
        let s = seed::train_seed(seed::derive(seed::derive_str(seed_value, "gen-scene"), i as u64));
        records.push(ManifestRecord::Scene { seed: s, scene: sample_scene(s, max_objects)? });
    }
    for i in 0..edits {
        let s = seed::train_seed(seed::derive(seed::derive_str(seed_value, "gen-edit"), i as u64));
        let mut scene = sample_scene(s, max_objects)?;
        if scene.objects().len() == uno_core::worldgen::scene::NUM_CELLS {
            scene = Scene::empty();
        }
        records.push(ManifestRecord::Edit { seed: s, edit: sample_edit(&scene, seed::derive_str(s, "edit"))? });
    }
    write_manifest(&out.join("manifest.jsonl"), &records)?;
    write_vocab_file(&out.join("vocab.txt"))?;
    let dir = out.join("previews");
    fs::create_dir_all(&dir)?;
    let shown = records.iter().take(previews).enumerate();
    for (i, r) in shown {
        match r {
            ManifestRecord::Scene { scene, .. } => write_image(&render_scene(scene), &dir.join(format!("{i:04}-scene.png")))?,
            ManifestRecord::Edit { edit, .. } => {
                write_image(&render_scene(&edit.source), &dir.join(format!("{i:04}-source.png")))?;
                write_image(&render_scene(&edit.target), &dir.join(format!("{i:04}-target.png")))?;
            }
        }
    }
    let summary = DataSummary { scenes, edits, seed: seed_value, max_objects, previews: previews.min(records.len()) };
    write_pretty(&summary, &out.join("summary.json"))?;
    println!("wrote {} records to {}", records.len(), out.join("manifest.jsonl").display());
    Ok(())
}

fn run_dir(out: &Path, resolved: &Resolved, stage: Stage) -> Result<RunDir, CliError> {
    let mut snap = resolved.snapshot();
    snap["stage"] = serde_json::json!(stage.name());
    let rd = RunDir::create(out, &snap)?;
    write_snapshot(out, resolved)?;
    Ok(rd)
}

fn summarize(log: &[StepMetrics]) {
    if let Some(m) = log.last() {
        println!(
            "step {} l_total {:.4} l_mse {:.4} l_lang {:.4} l_vis {:.4}",
            m.step, m.l_total, m.l_mse, m.l_language, m.l_vision
        );
    }
}

pub const PRETRAINED_FILE: &str = "pretrained.ckpt";

/// Stage-0 training followed by the sufficiency gate.
pub fn pretrain(resolved: &Resolved, out: &Path) -> Result<(), CliError> {
    let c = &resolved.config;
    let cfg = c.pretrain_config();
    let rd = run_dir(out, resolved, Stage::Pretrain)?;
    let mut state = init_model(&c.model, c.pretrain.init_seed)?;
    let stream = StageStream::for_config(&cfg, &c.model, &c.data)?;
    let log = train(&mut state, &cfg, &stream, Some(&rd))?;
    summarize(&log);
    let gate = sufficiency_gate(&state, c.pretrain.gate_scenes, cfg.seed, c.data.max_objects)?;
    write_pretty(&gate, &out.join("gate.json"))?;
    save_pretrained(&state, &gate, &out.join(PRETRAINED_FILE))?;
    println!("gate caption CE {:.4} (threshold {}): {}", gate.caption_ce, gate.threshold, if gate.passed { "passed" } else { "failed" });
    if !gate.passed {
        return Err(CliError::Runtime {
            kind: "gate",
            message: format!("caption CE {:.4} above {}; extend pretrain.steps", gate.caption_ce, gate.threshold),
        });
    }
    Ok(())
}

fn load_init(resolved: &Resolved, init: &Path) -> Result<ModelState, CliError> {
    let c = &resolved.config;
    let state = load_pretrained(init, &c.model)?;
    Ok(state)
}

/// Post-training from a gated stage-0 checkpoint; the final checkpoint is `ckpt-<steps>`.
pub fn post_train(resolved: &Resolved, out: &Path, init: &Path, stage: Stage) -> Result<PathBuf, CliError> {
    let c = &resolved.config;
    let mut state = load_init(resolved, init)?;
    let cfg = c.train_config(stage);
    let rd = run_dir(out, resolved, stage)?;
    let stream = StageStream::for_config(&cfg, &c.model, &c.data)?;
    let log = train(&mut state, &cfg, &stream, Some(&rd))?;
    summarize(&log);
    Ok(rd.checkpoint_path(cfg.steps))
}

fn load_model(resolved: &Resolved, path: &Path) -> Result<ModelState, CliError> {
    Ok(load_checkpoint_for(path, &resolved.config.model)?)
}

pub fn eval(resolved: &Resolved, out: &Path, checkpoint: &Path, edit: bool) -> Result<(), CliError> {
    let c = &resolved.config;
    write_snapshot(out, resolved)?;
    let state = load_model(resolved, checkpoint)?;
    let sampler = Sampler { state: &state, steps: c.eval.sampler_steps, use_ema: c.eval.use_ema };
    let mut reports = Vec::with_capacity(c.eval.seeds.len());
    for &s in &c.eval.seeds {
        let r = if edit {
            eval_edit(&sampler, c.eval.samples, s, c.data.max_objects)?
        } else {
            eval_compositional(&sampler, c.eval.samples, s, c.data.max_objects)?
        };
        println!("{}", r.csv_row());
        reports.push(r);
    }
    let stem = if edit { "edit" } else { "compositional" };
    write_reports(&reports, out, stem)?;
    Ok(())
}

#[derive(Serialize)]
struct LeakageSummary {
    #[serde(flatten)]
    result: diagnostics::LeakageResult,
    mean_same: f64,
    mean_para: f64,
}

/// Gradient cosines, the latent PCA view and finite differences on
/// `checkpoint`; the leakage probe as well when a stage-0 `init` is given.
pub fn diagnose(resolved: &Resolved, out: &Path, checkpoint: &Path, init: Option<&Path>) -> Result<(), CliError> {
    let c = &resolved.config;
    let d = &c.diagnose;
    write_snapshot(out, resolved)?;
    let state = load_model(resolved, checkpoint)?;
    let cfg = c.train_config(Stage::Uno);
    let stream = StageStream::for_config(&cfg, &c.model, &c.data)?;
    let batch = stream.batch(1, d.batch_size)?;

    let cos = grad_cosine_report(&state, &batch, &cfg.loss)?;
    write_pretty(&cos, &out.join("grad_cosine.json"))?;
    let shown: Vec<String> = cos.layers.iter().map(|c| c.map_or("null".into(), |v| format!("{v:.4}"))).collect();
    println!("grad cosine per layer: [{}]", shown.join(", "));

    let s = seed::eval_seed(seed::derive_str(cfg.seed, "pca"));
    let scene = sample_scene(s, c.data.max_objects)?;
    let prompt = sample_prompt(&scene, seed::derive_str(s, "prompt"));
    let sample = noised_view_sample(&scene, &prompt, d.pca_t, s, c.model.max_seq_len)?;
    let view = latent_pca_view(&state, &sample, d.pca_layer.unwrap_or(c.model.n_layers / 2))?;
    view.write(&out.join("pca.png"), &out.join("pca.csv"))?;

    let mut wide = state.clone();
    wide.cfg.precision = Precision::F64;
    let fd_batch: Vec<_> = batch.iter().take(2).cloned().collect();
    let w = cfg.loss.weights();
    let fd = finite_diff_check(&wide, &fd_batch, &TermScales { flow: w.flow, language: w.language, vision: w.vision }, d.fd_per_group, d.fd_step, cfg.seed)?;
    write_pretty(&fd, &out.join("finite_diff.json"))?;
    println!("finite differences: max relative error {:.2e} in {}", fd.max_rel_error, fd.worst_group);

    if let Some(init) = init {
        let base = load_init(resolved, init)?;
        let r = leakage_probe(&base, &c.leakage_config(), &c.data, &d.leakage_seeds)?;
        println!("leakage: caption loss same {:.4} vs paraphrase {:.4}", r.mean_same(), r.mean_para());
        let summary = LeakageSummary { mean_same: r.mean_same(), mean_para: r.mean_para(), result: r };
        write_pretty(&summary, &out.join("leakage.json"))?;
    }
    Ok(())
}

pub fn ablate(resolved: &Resolved, out: &Path, init: &Path) -> Result<(), CliError> {
    let c = &resolved.config;
    write_snapshot(out, resolved)?;
    let base = load_init(resolved, init)?;
    let path = out.join("ablation.csv");
    let rows = run_ablation(&base, &c.train_config(Stage::Uno), &c.data, &c.ablate, &path)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct Visualized {
    prompt: String,
    scene: Scene,
    generated: Option<Scene>,
    unknown_cells: Option<Vec<u8>>,
}

/// Attention mask of a joint-layout sample, the rendered scene and, with a
/// checkpoint, the generated image for the same prompt.
pub fn visualize(resolved: &Resolved, out: &Path, scene_seed: u64, prompt: Option<&str>, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let c = &resolved.config;
    write_snapshot(out, resolved)?;
    let s = seed::eval_seed(scene_seed);
    let scene = sample_scene(s, c.data.max_objects)?;
    let prompt = match prompt {
        Some(p) => tokenize(p)?,
        None => sample_prompt(&scene, seed::derive_str(s, "prompt")),
    };
    let cfg = c.train_config(Stage::Uno);
    let sample = pack_t2i_uno(&prompt, &scene, s, &cfg.pack_config(&c.model), &cfg.toggles)?;
    sample.mask.dump(&sample.layout, &out.join("mask.txt"), &out.join("mask.png"))?;
    write_image(&render_scene(&scene), &out.join("scene.png"))?;
    let mut report = Visualized { prompt: uno_core::worldgen::detokenize(&prompt)?, scene, generated: None, unknown_cells: None };
    if let Some(ck) = checkpoint {
        let state = load_model(resolved, ck)?;
        let latent: Latent = evalsuite::generate(&state, &prompt, c.eval.sampler_steps, s, c.eval.use_ema)?;
        write_image(&decode_pixels(&latent), &out.join("generated.png"))?;
        let reading = decode_probe(&latent);
        report.unknown_cells = Some(reading.unknown_cells());
        report.generated = Some(reading.scene());
    }
    write_pretty(&report, &out.join("visualize.json"))?;
    println!("prompt: {}", report.prompt);
    Ok(())
}
