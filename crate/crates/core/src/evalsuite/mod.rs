//! Flow-matching sampler, probe-scored benchmarks and the ablation runner.

mod ablation;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablation::{run_ablation, AblationCell, AblationGrid, AblationRow, ABLATION_HEADER, ABLATION_SCHEMA};

use crate::model::{forward_with, ModelError, ModelState};
use crate::packing::{pack_inference, sample_prompt, standard_normal, PackError};
use crate::seed;
use crate::trainer::TrainError;
use crate::worldgen::image::{GEN_TOKENS, GEN_TOKEN_DIM, LATENT_LEN};
use crate::worldgen::{
    cell_support, decode_probe, nearest_object, render_scene, sample_edit, sample_scene, CellReading, EditCommand,
    EditOp, Latent, PixelImage, Scene, TokenSeq, WorldError,
};

pub const DEFAULT_SAMPLER_STEPS: usize = 32;
pub const MIN_EVAL_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation request: {0}")]
    Config(String),
    #[error("non-finite latent during integration at t={t}")]
    NonFinite { t: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e.to_string())
    }
}

/// Euler integration of `dx/dt = u(x, t)` from t=1 down to t=0 on a uniform
/// grid of `steps` intervals.
pub fn integrate<F>(x1: Array2<f64>, steps: usize, mut velocity: F) -> Result<Array2<f64>, EvalError>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>, EvalError>,
{
    if steps == 0 {
        return Err(EvalError::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for k in (1..=steps).rev() {
        let t = k as f64 * dt;
        let u = velocity(&x, t)?;
        x.scaled_add(-dt, &u);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite { t });
        }
    }
    Ok(x)
}

/// Anything that can produce latents for prompts and edits.
pub trait Generator: Sync {
    fn generate(&self, prompt: &TokenSeq, seed: u64) -> Result<Latent, EvalError>;
    fn edit(&self, source: &Scene, instruction: &TokenSeq, seed: u64) -> Result<Latent, EvalError>;
}

/// Model-backed generator. Conditioning uses `[cond_text | gen_image]` for
/// generation and `[instruction | und_image | gen_image]` for editing.
#[derive(Clone, Copy, Debug)]
pub struct Sampler<'a> {
    pub state: &'a ModelState,
    pub steps: usize,
    pub use_ema: bool,
}

impl<'a> Sampler<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        Sampler { state, steps: DEFAULT_SAMPLER_STEPS, use_ema: true }
    }

    fn run(&self, prompt: &TokenSeq, source: Option<&PixelImage>, seed_value: u64) -> Result<Latent, EvalError> {
        let x1 = standard_normal(GEN_TOKENS, GEN_TOKEN_DIM, seed::derive_str(seed_value, "sample-noise"));
        let params = self.state.weights(self.use_ema);
        let x0 = integrate(x1, self.steps, |x, t| {
            let s = pack_inference(prompt, source, x, t, self.state.cfg.max_seq_len)?;
            let (out, _) = forward_with(&self.state.cfg, &self.state.layout, params, &s)?;
            out.velocity.ok_or_else(|| EvalError::Config("model produced no velocity".into()))
        })?;
        Ok(Latent::from_tokens(&x0)?)
    }
}

impl Generator for Sampler<'_> {
    fn generate(&self, prompt: &TokenSeq, seed_value: u64) -> Result<Latent, EvalError> {
        self.run(prompt, None, seed_value)
    }

    fn edit(&self, source: &Scene, instruction: &TokenSeq, seed_value: u64) -> Result<Latent, EvalError> {
        self.run(instruction, Some(&render_scene(source)), seed_value)
    }
}

pub fn generate(
    state: &ModelState,
    prompt: &TokenSeq,
    steps: usize,
    seed_value: u64,
    use_ema: bool,
) -> Result<Latent, EvalError> {
    Sampler { state, steps, use_ema }.generate(prompt, seed_value)
}

pub fn edit(
    state: &ModelState,
    source: &Scene,
    instruction: &TokenSeq,
    steps: usize,
    seed_value: u64,
    use_ema: bool,
) -> Result<Latent, EvalError> {
    Sampler { state, steps, use_ema }.edit(source, instruction, seed_value)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Score {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
        self.accuracy = self.correct as f64 / self.total as f64;
    }

    fn merge(&mut self, other: &Score) {
        self.total += other.total;
        self.correct += other.correct;
        self.accuracy = if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 };
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Compositional,
    Edit,
}

/// Probe-scored benchmark result. Color and shape are forced-choice readings
/// at each prompted object's cell; position asks that the cell reads as an
/// object; count compares the number of object cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: EvalKind,
    pub seed: u64,
    pub samples: usize,
    pub color: Score,
    pub shape: Score,
    pub position: Score,
    pub count: Score,
    pub exact_match: Score,
    pub edit_ops: BTreeMap<String, Score>,
    pub edit: Score,
    /// Mean squared latent error outside the edited cells' support.
    pub background_mse: Option<f64>,
    /// Cells the probe could not classify, over all samples.
    pub unknown_cells: usize,
    pub sample_seeds: Vec<u64>,
}

pub const REPORT_CSV_HEADER: &str = "kind,seed,samples,color,shape,position,count,exact_match,edit_recolor,edit_move,edit_add,edit_remove,edit,background_mse,unknown_cells";

impl EvalReport {
    fn empty(kind: EvalKind, seed_value: u64) -> Self {
        EvalReport {
            kind,
            seed: seed_value,
            samples: 0,
            color: Score::default(),
            shape: Score::default(),
            position: Score::default(),
            count: Score::default(),
            exact_match: Score::default(),
            edit_ops: BTreeMap::new(),
            edit: Score::default(),
            background_mse: None,
            unknown_cells: 0,
            sample_seeds: Vec::new(),
        }
    }

    pub fn csv_row(&self) -> String {
        let acc = |s: &Score| if s.total == 0 { String::new() } else { s.accuracy.to_string() };
        let op = |o: EditOp| self.edit_ops.get(o.name()).map_or(String::new(), acc);
        let kind = match self.kind {
            EvalKind::Compositional => "compositional",
            EvalKind::Edit => "edit",
        };
        format!(
            "{kind},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.samples,
            acc(&self.color),
            acc(&self.shape),
            acc(&self.position),
            acc(&self.count),
            acc(&self.exact_match),
            op(EditOp::Recolor),
            op(EditOp::Move),
            op(EditOp::Add),
            op(EditOp::Remove),
            acc(&self.edit),
            self.background_mse.map_or(String::new(), |v| v.to_string()),
            self.unknown_cells
        )
    }
}

/// Writes `<stem>.json` (array of reports) and `<stem>.csv` (one row each).
pub fn write_reports(reports: &[EvalReport], dir: &Path, stem: &str) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| EvalError::Io(e.to_string()))?;
    crate::io::write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())?;
    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    for r in reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    crate::io::write_atomic(&dir.join(format!("{stem}.csv")), csv.as_bytes())?;
    Ok(())
}

fn check_n(n: usize) -> Result<(), EvalError> {
    if n < MIN_EVAL_SAMPLES {
        return Err(EvalError::Config(format!("need at least {MIN_EVAL_SAMPLES} samples, got {n}")));
    }
    Ok(())
}

fn sample_seeds(seed_value: u64, tag: &str, n: usize) -> Vec<u64> {
    let base = seed::derive_str(seed_value, tag);
    (0..n).map(|i| seed::eval_seed(seed::derive(base, i as u64))).collect()
}

struct CompositionalOutcome {
    color: Score,
    shape: Score,
    position: Score,
    count: bool,
    exact: bool,
    unknown: usize,
}

fn score_scene(latent: &Latent, target: &Scene) -> CompositionalOutcome {
    let reading = decode_probe(latent);
    let (mut color, mut shape, mut position) = (Score::default(), Score::default(), Score::default());
    for o in target.objects() {
        let (s, c) = nearest_object(latent, o.cell);
        color.add(c == o.color);
        shape.add(s == o.shape);
        position.add(matches!(reading.cells[o.cell as usize], CellReading::Object { .. }));
    }
    let objects = reading.cells.iter().filter(|c| matches!(c, CellReading::Object { .. })).count();
    let unknown = reading.unknown_cells().len();
    CompositionalOutcome {
        color,
        shape,
        position,
        count: objects == target.len(),
        exact: unknown == 0 && reading.scene() == *target,
        unknown,
    }
}

/// Text-to-image adherence on `n` fresh prompts drawn from the evaluation seed range.
pub fn eval_compositional_with(
    generator: &dyn Generator,
    n: usize,
    seed_value: u64,
    max_objects: usize,
) -> Result<EvalReport, EvalError> {
    check_n(n)?;
    let seeds = sample_seeds(seed_value, "compositional", n);
    let outcomes: Vec<Result<CompositionalOutcome, EvalError>> = seeds
        .par_iter()
        .map(|&s| {
            let scene = sample_scene(seed::derive_str(s, "scene"), max_objects)?;
            let prompt = sample_prompt(&scene, seed::derive_str(s, "prompt"));
            let latent = generator.generate(&prompt, s)?;
            Ok(score_scene(&latent, &scene))
        })
        .collect();
    let mut r = EvalReport::empty(EvalKind::Compositional, seed_value);
    for o in outcomes {
        let o = o?;
        r.color.merge(&o.color);
        r.shape.merge(&o.shape);
        r.position.merge(&o.position);
        r.count.add(o.count);
        r.exact_match.add(o.exact);
        r.unknown_cells += o.unknown;
        r.samples += 1;
    }
    r.sample_seeds = seeds;
    Ok(r)
}

pub fn eval_compositional(
    sampler: &Sampler,
    n: usize,
    seed_value: u64,
    max_objects: usize,
) -> Result<EvalReport, EvalError> {
    eval_compositional_with(sampler, n, seed_value, max_objects)
}

/// Whether the probe reading shows the commanded change.
pub fn edit_applied(latent: &Latent, command: &EditCommand) -> bool {
    let reading = decode_probe(latent);
    let at = |cell: u8| reading.cells[cell as usize];
    let obj = |shape, color| CellReading::Object { shape, color };
    match *command {
        EditCommand::Recolor { subject, to } => at(subject.cell) == obj(subject.shape, to),
        EditCommand::Move { subject, to } => {
            at(to) == obj(subject.shape, subject.color) && at(subject.cell) == CellReading::Empty
        }
        EditCommand::Add { object } => at(object.cell) == obj(object.shape, object.color),
        EditCommand::Remove { subject } => at(subject.cell) == CellReading::Empty,
    }
}

/// Mean squared error against `target` over latent entries outside the
/// support of `touched` cells.
pub fn background_mse(latent: &Latent, target: &Latent, touched: &[u8]) -> f64 {
    let mut inside = vec![false; LATENT_LEN];
    for &c in touched {
        for i in cell_support(c) {
            inside[i] = true;
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in (0..LATENT_LEN).filter(|&i| !inside[i]) {
        let d = latent.code[i] - target.code[i];
        sum += d * d;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Edit accuracy per operation and background preservation on `n` edit pairs.
pub fn eval_edit_with(
    generator: &dyn Generator,
    n: usize,
    seed_value: u64,
    max_objects: usize,
) -> Result<EvalReport, EvalError> {
    check_n(n)?;
    let seeds = sample_seeds(seed_value, "edit", n);
    let outcomes: Vec<Result<(EditOp, bool, f64, usize), EvalError>> = seeds
        .par_iter()
        .map(|&s| {
            let scene = sample_scene(seed::derive_str(s, "scene"), max_objects)?;
            let pair = sample_edit(&scene, seed::derive_str(s, "edit"))?;
            let latent = generator.edit(&pair.source, &pair.instruction, s)?;
            let target = crate::worldgen::scene_latent(&pair.target);
            let ok = edit_applied(&latent, &pair.command);
            let bg = background_mse(&latent, &target, &pair.command.touched_cells());
            Ok((pair.op, ok, bg, decode_probe(&latent).unknown_cells().len()))
        })
        .collect();
    let mut r = EvalReport::empty(EvalKind::Edit, seed_value);
    for op in EditOp::ALL {
        r.edit_ops.insert(op.name().to_string(), Score::default());
    }
    let mut bg_sum = 0.0;
    for o in outcomes {
        let (op, ok, bg, unknown) = o?;
        r.edit_ops.get_mut(op.name()).expect("all ops present").add(ok);
        r.edit.add(ok);
        bg_sum += bg;
        r.unknown_cells += unknown;
        r.samples += 1;
    }
    r.background_mse = Some(bg_sum / n as f64);
    r.sample_seeds = seeds;
    Ok(r)
}

pub fn eval_edit(sampler: &Sampler, n: usize, seed_value: u64, max_objects: usize) -> Result<EvalReport, EvalError> {
    eval_edit_with(sampler, n, seed_value, max_objects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::worldgen::{parse_caption, parse_instruction, scene_latent};

    struct Oracle;

    impl Generator for Oracle {
        fn generate(&self, prompt: &TokenSeq, _: u64) -> Result<Latent, EvalError> {
            Ok(scene_latent(&parse_caption(prompt)?))
        }

        fn edit(&self, source: &Scene, instruction: &TokenSeq, _: u64) -> Result<Latent, EvalError> {
            Ok(scene_latent(&parse_instruction(instruction)?.apply(source)?))
        }
    }

    struct Identity;

    impl Generator for Identity {
        fn generate(&self, _: &TokenSeq, _: u64) -> Result<Latent, EvalError> {
            Ok(Latent::zeros())
        }

        fn edit(&self, source: &Scene, _: &TokenSeq, _: u64) -> Result<Latent, EvalError> {
            Ok(scene_latent(source))
        }
    }

    #[test]
    fn single_datum_field_lands_on_the_datum() {
        let x0 = standard_normal(16, 16, 3);
        let eps = standard_normal(16, 16, 4);
        let field = |x: &Array2<f64>, t: f64| Ok((x - &x0) / t);
        let constant = |_: &Array2<f64>, _: f64| Ok(&eps - &x0);
        let one = integrate(eps.clone(), 1, field).unwrap();
        for steps in [1, 2, 7, 64] {
            let out = integrate(eps.clone(), steps, field).unwrap();
            assert!((&out - &x0).iter().all(|d| d.abs() < 1e-12), "steps {steps}");
            assert!((&out - &one).iter().all(|d| d.abs() < 1e-12));
            let out = integrate(eps.clone(), steps, constant).unwrap();
            assert!((&out - &x0).iter().all(|d| d.abs() < 1e-12));
        }
        assert!(integrate(eps.clone(), 0, field).is_err());
        let blowup = integrate(eps, 4, |x: &Array2<f64>, _| Ok(x.mapv(|_| f64::NAN)));
        assert!(matches!(blowup, Err(EvalError::NonFinite { .. })));
    }

    #[test]
    fn oracle_generator_scores_perfectly() {
        let r = eval_compositional_with(&Oracle, 100, 1, 3).unwrap();
        for s in [&r.color, &r.shape, &r.position, &r.count, &r.exact_match] {
            assert_eq!(s.accuracy, 1.0);
        }
        assert!(r.color.total >= 100);
        assert_eq!(r.unknown_cells, 0);
        assert!(r.sample_seeds.iter().all(|&s| seed::is_eval_seed(s)));
        assert_eq!(r, eval_compositional_with(&Oracle, 100, 1, 3).unwrap());
        assert!(eval_compositional_with(&Oracle, 99, 1, 3).is_err());
    }

    #[test]
    fn edit_oracles() {
        let good = eval_edit_with(&Oracle, 120, 2, 3).unwrap();
        assert_eq!(good.edit.accuracy, 1.0);
        assert_eq!(good.background_mse, Some(0.0));
        let idle = eval_edit_with(&Identity, 120, 2, 3).unwrap();
        for op in ["recolor", "move", "add", "remove"] {
            assert_eq!(idle.edit_ops[op].accuracy, 0.0, "{op}");
            assert!(idle.edit_ops[op].total > 0);
        }
        assert_eq!(idle.background_mse, Some(0.0));
        assert_eq!(idle, eval_edit_with(&Identity, 120, 2, 3).unwrap());
    }

    #[test]
    fn model_sampler_is_deterministic_and_accepts_empty_prompts() {
        let mut state = init_model(&ModelConfig::tiny(), 3).unwrap();
        state.jitter(1, 0.05);
        let scene = sample_scene(5, 2).unwrap();
        let prompt = crate::worldgen::caption_scene(&scene, 0).unwrap();
        let a = generate(&state, &prompt, 3, 9, true).unwrap();
        assert_eq!(a, generate(&state, &prompt, 3, 9, true).unwrap());
        assert_ne!(a, generate(&state, &prompt, 3, 10, true).unwrap());
        let empty = TokenSeq { ids: vec![] };
        edit(&state, &scene, &empty, 2, 1, false).unwrap();
        generate(&state, &empty, 2, 1, true).unwrap();
    }

    #[test]
    fn ema_flag_selects_the_weight_set() {
        let mut state = init_model(&ModelConfig::tiny(), 4).unwrap();
        state.jitter(2, 0.05);
        let prompt = crate::worldgen::caption_scene(&sample_scene(6, 2).unwrap(), 0).unwrap();
        let raw = generate(&state, &prompt, 3, 1, false).unwrap();
        assert_eq!(raw, generate(&state, &prompt, 3, 1, true).unwrap());
        for p in state.params.iter_mut() {
            p.mapv_inplace(|v| v * 1.5);
        }
        assert_ne!(raw, generate(&state, &prompt, 3, 1, false).unwrap());
        assert_eq!(raw, generate(&state, &prompt, 3, 1, true).unwrap());
    }

    #[test]
    fn report_csv_has_one_field_per_column() {
        let r = eval_edit_with(&Oracle, 100, 0, 2).unwrap();
        assert_eq!(r.csv_row().split(',').count(), REPORT_CSV_HEADER.split(',').count());
        let dir = tempfile::tempdir().unwrap();
        write_reports(&[r.clone()], dir.path(), "edit").unwrap();
        let back: Vec<EvalReport> =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("edit.json")).unwrap()).unwrap();
        assert_eq!(back[0], r);
    }
}
