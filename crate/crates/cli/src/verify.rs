//! Self-check suite behind `uno-lab verify`.

use std::fs;
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;

use uno_core::diagnostics::{cosine, finite_diff_check, grad_cosine_report, grad_cosine_with};
use uno_core::model::{init_model, route_expert, Expert, GroupKind, ModelConfig, ModelState, Precision};
use uno_core::objectives::{loss_language, loss_total, loss_vision, sample_loss, TermScales, UnoLossConfig};
use uno_core::packing::{build_mask, mask_oracle, pack_edit_uno, pack_t2i_uno, sample_prompt, MaskToggles, PackConfig, PackedSample, SegmentKind, SegmentLayout};
use uno_core::seed;
use uno_core::trainer::{train, DataConfig, RunDir, StageStream, TrainConfig};
use uno_core::worldgen::{sample_edit, sample_scene};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub id: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{} {verdict} {}: {} ({:.1}s)", self.id, self.name, self.detail, self.seconds)
    }
}

type Outcome = Result<String, String>;

fn timed(id: &'static str, name: &'static str, f: fn() -> Outcome) -> Check {
    let start = Instant::now();
    let r = f();
    let seconds = start.elapsed().as_secs_f64();
    match r {
        Ok(detail) => Check { id, name, passed: true, detail, seconds },
        Err(detail) => Check { id, name, passed: false, detail, seconds },
    }
}

pub const CHECKS: [(&str, &str, fn() -> Outcome); 7] = [
    ("A1", "mask oracle", mask_oracle_fuzz),
    ("A2", "freeze soundness", freeze_soundness),
    ("A3", "gradient routing", gradient_routing),
    ("A4", "finite differences", finite_differences),
    ("A8", "determinism", determinism),
    ("A9", "loss algebra", loss_algebra),
    ("A10", "gradient cosine", gradient_cosine),
];

/// Runs every check, or only those whose id is in `only`.
pub fn run(only: &[String], mut report: impl FnMut(&Check)) -> Vec<Check> {
    CHECKS
        .iter()
        .filter(|(id, _, _)| only.is_empty() || only.iter().any(|o| o.eq_ignore_ascii_case(id)))
        .map(|&(id, name, f)| {
            let c = timed(id, name, f);
            report(&c);
            c
        })
        .collect()
}

fn small_model(seed_value: u64, precision: Precision) -> ModelState {
    let cfg = ModelConfig { n_layers: 2, num_metaqueries: 4, max_seq_len: 128, precision, ..ModelConfig::tiny() };
    let mut st = init_model(&cfg, seed_value).expect("tiny config is valid");
    st.jitter(seed::derive_str(seed_value, "jitter"), 0.3);
    st
}

fn pack(st: &ModelState) -> PackConfig {
    PackConfig { num_metaqueries: st.cfg.num_metaqueries, max_seq_len: st.cfg.max_seq_len, ..PackConfig::default() }
}

fn t2i(st: &ModelState, s: u64) -> PackedSample {
    let scene = sample_scene(s, 3).expect("valid max_objects");
    let prompt = sample_prompt(&scene, seed::derive_str(s, "prompt"));
    pack_t2i_uno(&prompt, &scene, s, &pack(st), &MaskToggles::default()).expect("fits the sequence budget")
}

fn edit(st: &ModelState, s: u64) -> PackedSample {
    let scene = sample_scene(s, 2).expect("valid max_objects");
    let pair = sample_edit(&scene, seed::derive_str(s, "edit")).expect("room for an edit");
    pack_edit_uno(&pair, s, &pack(st), &MaskToggles::default()).expect("fits the sequence budget")
}

fn gradient(st: &ModelState, batch: &[PackedSample], scales: &TermScales) -> Result<Vec<Array2<f64>>, String> {
    let mut g = st.layout.zeros();
    for s in batch {
        sample_loss(&st.cfg, &st.layout, &st.params, s, scales, Some(&mut g)).map_err(|e| e.to_string())?;
    }
    Ok(g)
}

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn mask_oracle_fuzz() -> Outcome {
    let toggles = MaskToggles::all();
    for i in 0..1000u64 {
        let layout = SegmentLayout::fuzz(seed::derive_str(i, "verify-mask"), 12);
        for t in &toggles {
            if build_mask(&layout, t) != mask_oracle(&layout, t) {
                return Err(format!("layout {i} differs under {t:?}"));
            }
        }
    }
    Ok(format!("1000 layouts x {} toggle sets agree", toggles.len()))
}

pub fn freeze_soundness() -> Outcome {
    let mcfg = ModelConfig::default();
    let before = init_model(&mcfg, 11).map_err(|e| e.to_string())?;
    let mut after = before.clone();
    let cfg = TrainConfig { steps: 200, batch_size: 4, warmup_steps: 10, peak_lr: 1e-3, seed: 3, ..TrainConfig::default() };
    let stream = StageStream::for_config(&cfg, &mcfg, &DataConfig::default()).map_err(|e| e.to_string())?;
    train(&mut after, &cfg, &stream, None).map_err(|e| e.to_string())?;
    let (mut frozen, mut moved) = (0, 0);
    for (g, info) in after.layout.groups.iter().enumerate() {
        let same = after.groups_bitwise_equal(&before, g);
        let must_move = matches!(info.kind, GroupKind::Metaquery | GroupKind::Layer { expert: Expert::Gen, .. });
        if after.group_is_frozen(g) {
            if !same {
                return Err(format!("frozen group {} changed", info.name));
            }
            frozen += 1;
        } else if must_move {
            if same {
                return Err(format!("trainable group {} did not move", info.name));
            }
            moved += 1;
        }
    }
    Ok(format!("{frozen} frozen groups bitwise unchanged, {moved} metaquery/gen groups moved after 200 steps"))
}

/// Copy of `s` whose supervision caption cannot attend to generation-expert tokens.
fn sever_caption(s: &PackedSample) -> PackedSample {
    let mut out = s.clone();
    let kinds = s.layout.position_kinds();
    for q in 0..kinds.len() {
        if kinds[q] != SegmentKind::SupCaption {
            continue;
        }
        for k in 0..kinds.len() {
            if route_expert(kinds[k]) == Expert::Gen {
                out.mask.set(q, k, false);
            }
        }
    }
    out
}

pub fn gradient_routing() -> Outcome {
    let st = small_model(5, Precision::F64);
    let batch = vec![t2i(&st, 31), t2i(&st, 32), edit(&st, 33)];
    let lang = TermScales { flow: 0.0, language: 0.1, vision: 0.0 };
    let g = gradient(&st, &batch, &lang)?;
    let qkv: Vec<usize> = st.index().layers.iter().map(|l| l[Expert::Gen.index()].wqkv).collect();
    let norms: Vec<f64> = qkv.iter().map(|&t| norm(&g[t])).collect();
    if let Some(l) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(format!("no caption gradient reaches gen QKV at layer {l}"));
    }
    let severed: Vec<PackedSample> = batch.iter().map(sever_caption).collect();
    let gs = gradient(&st, &severed, &lang)?;
    if let Some(l) = qkv.iter().position(|&t| gs[t].iter().any(|&v| v != 0.0)) {
        return Err(format!("severed caption still reaches gen QKV at layer {l}"));
    }
    let off = UnoLossConfig { lambda1: 0.0, ..UnoLossConfig::default() }.weights();
    let g0 = gradient(&st, &batch, &TermScales { flow: 0.0, language: off.language, vision: 0.0 })?;
    if let Some(l) = qkv.iter().position(|&t| g0[t].iter().any(|&v| v != 0.0)) {
        return Err(format!("lambda1 = 0 still reaches gen QKV at layer {l}"));
    }
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!("min layer norm {min:.3e}; severed and lambda1=0 gradients exactly 0"))
}

pub fn finite_differences() -> Outcome {
    let mut cfg = ModelConfig { num_metaqueries: 4, max_seq_len: 128, ..ModelConfig::tiny() };
    cfg.precision = Precision::F64;
    let mut st = init_model(&cfg, 7).map_err(|e| e.to_string())?;
    st.jitter(8, 0.3);
    let batch = vec![t2i(&st, 41), edit(&st, 42)];
    let w = UnoLossConfig::default().weights();
    let r = finite_diff_check(&st, &batch, &TermScales { flow: w.flow, language: w.language, vision: w.vision }, 20, 1e-4, 9)
        .map_err(|e| e.to_string())?;
    let detail = format!("max relative error {:.2e} in {} over {} groups x 20", r.max_rel_error, r.worst_group, r.groups.len());
    if r.max_rel_error <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn determinism() -> Outcome {
    let mcfg = ModelConfig::default();
    let cfg = TrainConfig { steps: 20, batch_size: 4, warmup_steps: 2, checkpoint_every: 10, log_wall_time: false, seed: 5, ..TrainConfig::default() };
    let data = DataConfig::default();
    let dir = scratch_dir()?;
    let result = (|| {
        let mut outputs = Vec::new();
        for run in ["a", "b"] {
            let mut st = init_model(&mcfg, 2).map_err(|e| e.to_string())?;
            let rd = RunDir::create(&dir.join(run), &serde_json::json!({ "seed": cfg.seed })).map_err(|e| e.to_string())?;
            let stream = StageStream::for_config(&cfg, &mcfg, &data).map_err(|e| e.to_string())?;
            train(&mut st, &cfg, &stream, Some(&rd)).map_err(|e| e.to_string())?;
            outputs.push(read_tree(&rd.path)?);
        }
        if outputs[0] != outputs[1] {
            return Err("repeated runs differ".to_string());
        }
        let bytes: usize = outputs[0].iter().map(|(_, b)| b.len()).sum();
        Ok(format!("{} files bitwise equal ({bytes} bytes, metrics and 2 checkpoints)", outputs[0].len()))
    })();
    let _ = fs::remove_dir_all(&dir);
    result
}

/// Every file under `root` as (relative path, bytes), sorted.
fn read_tree(root: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).map_err(|e| e.to_string())?.display().to_string();
                out.push((rel, fs::read(&p).map_err(|e| e.to_string())?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn scratch_dir() -> Result<std::path::PathBuf, String> {
    let base = std::env::temp_dir().join(format!("uno-lab-verify-{}", std::process::id()));
    fs::create_dir_all(&base).map_err(|e| e.to_string())?;
    Ok(base)
}

pub fn loss_algebra() -> Outcome {
    use rand::Rng;
    let mut rng = seed::rng(17);
    for i in 0..200 {
        let (n, d) = (rng.random_range(1..20), rng.random_range(1..40));
        let scale = 10f64.powf(rng.random_range(-6.0..6.0));
        let h = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0) * scale);
        let v = if i % 2 == 0 { -&h * rng.random_range(0.1..3.0) } else { Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)) };
        let l = loss_vision(&h, &v).map_err(|e| e.to_string())?;
        if !(-1.0..=1.0).contains(&l) {
            return Err(format!("loss_vision {l} outside [-1, 1]"));
        }
    }
    let ce = loss_language(&Array2::zeros((7, 64)), &[0, 5, 9, 12, 40, 63, 2]).map_err(|e| e.to_string())?;
    let ce_err = (ce - 64f64.ln()).abs();
    if ce_err > 1e-6 {
        return Err(format!("uniform cross-entropy {ce} differs from ln 64 by {ce_err:.2e}"));
    }
    let st = small_model(6, Precision::F64);
    let batch = vec![t2i(&st, 51), edit(&st, 52)];
    let parts = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)].map(|(f, l, v)| gradient(&st, &batch, &TermScales { flow: f, language: l, vision: v }));
    let [gf, gl, gv] = parts;
    let (gf, gl, gv) = (gf?, gl?, gv?);
    let mut worst: f64 = 0.0;
    for (l1, l2) in [(0.1, 0.2), (0.0, 0.5), (1.0, 0.0)] {
        let b = loss_total(0.7, 1.3, -0.4, &UnoLossConfig { lambda1: l1, lambda2: l2, ..UnoLossConfig::default() }).map_err(|e| e.to_string())?;
        worst = worst.max((b.l_total - (0.7 + l1 * 1.3 + l2 * -0.4)).abs());
        let g = gradient(&st, &batch, &TermScales { flow: 1.0, language: l1, vision: l2 })?;
        for t in 0..g.len() {
            let combo = &gf[t] + &(&gl[t] * l1) + &(&gv[t] * l2);
            worst = worst.max((&g[t] - &combo).iter().fold(0.0, |m: f64, x| m.max(x.abs())));
        }
    }
    if worst > 1e-10 {
        return Err(format!("linearity residual {worst:.2e}"));
    }
    Ok(format!("vision loss bounded on 200 draws; |CE - ln 64| = {ce_err:.1e}; linearity residual {worst:.1e}"))
}

pub fn gradient_cosine() -> Outcome {
    let st = small_model(9, Precision::F64);
    let batch: Vec<PackedSample> = (0..4).map(|i| if i == 3 { edit(&st, 60 + i) } else { t2i(&st, 60 + i) }).collect();
    let flow = TermScales { flow: 1.0, language: 0.0, vision: 0.0 };
    for (l, c) in grad_cosine_with(&st, &batch, &flow, &flow).map_err(|e| e.to_string())?.iter().enumerate() {
        match c {
            Some(c) if (c - 1.0).abs() <= 1e-9 => {}
            other => return Err(format!("self-similarity at layer {l} is {other:?}")),
        }
    }
    let (a, b) = ([0.3f64, -1.7], [2.2f64, 0.9]);
    let expected = (a[0] * b[0] + a[1] * b[1]) / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt());
    let got = cosine(&a, &b).ok_or("two-parameter cosine undefined")?;
    if (got - expected).abs() > 1e-10 {
        return Err(format!("two-parameter cosine {got} vs {expected}"));
    }
    let base = grad_cosine_report(&st, &batch, &UnoLossConfig::default()).map_err(|e| e.to_string())?;
    let mut drift: f64 = 0.0;
    for c in [0.5, 2.0] {
        let loss = UnoLossConfig { lambda1: 0.1 * c, lambda2: 0.2 * c, ..UnoLossConfig::default() };
        let r = grad_cosine_report(&st, &batch, &loss).map_err(|e| e.to_string())?;
        for (x, y) in r.layers.iter().zip(&base.layers) {
            match (x, y) {
                (Some(x), Some(y)) => drift = drift.max((x - y).abs()),
                _ => return Err("cosine undefined on a layer".into()),
            }
        }
    }
    if drift > 1e-9 {
        return Err(format!("lambda rescaling moved a cosine by {drift:.2e}"));
    }
    Ok(format!("self cosine 1 on {} layers; 2-param oracle err {:.1e}; scale drift {drift:.1e}", base.layers.len(), (got - expected).abs()))
}

