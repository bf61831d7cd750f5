//! Grid runner: post-trains every cell from one stage-0 state and scores it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{eval_compositional, EvalError, Sampler};
use crate::model::ModelState;
use crate::packing::{IntraRule, MaskToggles};
use crate::seed;
use crate::trainer::{train, DataConfig, SceneSource, Stage, StageStream, StepMetrics, TrainConfig};

pub const ABLATION_SCHEMA: &str = "uno-ablation/1";
pub const ABLATION_HEADER: &str = "schema,cell,config_hash,seed,lambda1,lambda2,augment,mask_condition_prompt,metaquery_order,sup_blocks_see_source,num_metaqueries,unfreeze_und,steps,l_mse,l_language,l_vision,color,shape,position,count,exact_match";

/// Axes of the grid; cells are the cartesian product, each run once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub augment: Vec<bool>,
    pub mask_condition_prompt: Vec<bool>,
    pub metaquery_order: Vec<IntraRule>,
    pub sup_blocks_see_source: Vec<bool>,
    pub num_metaqueries: Vec<usize>,
    pub unfreeze_und: Vec<bool>,
    pub seeds: Vec<u64>,
    pub eval_samples: usize,
    pub eval_steps: usize,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            lambda1: vec![0.1],
            lambda2: vec![0.2],
            augment: vec![true],
            mask_condition_prompt: vec![true],
            metaquery_order: vec![IntraRule::Causal],
            sup_blocks_see_source: vec![false],
            num_metaqueries: vec![16],
            unfreeze_und: vec![false],
            seeds: vec![0, 1, 2],
            eval_samples: super::MIN_EVAL_SAMPLES,
            eval_steps: super::DEFAULT_SAMPLER_STEPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub augment: bool,
    pub toggles: MaskToggles,
    pub num_metaqueries: usize,
    pub unfreeze_und: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: usize,
    pub config_hash: String,
    pub seed: u64,
    pub spec: AblationCell,
    pub steps: usize,
    pub l_mse: f64,
    pub l_language: f64,
    pub l_vision: f64,
    pub color: f64,
    pub shape: f64,
    pub position: f64,
    pub count: f64,
    pub exact_match: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let c = &self.spec;
        let order = match c.toggles.metaquery_order {
            IntraRule::Causal => "causal",
            IntraRule::Bidirectional => "bidirectional",
        };
        format!(
            "{ABLATION_SCHEMA},{},{},{},{},{},{},{},{order},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cell,
            self.config_hash,
            self.seed,
            c.lambda1,
            c.lambda2,
            c.augment,
            c.toggles.mask_condition_prompt,
            c.toggles.sup_blocks_see_source,
            c.num_metaqueries,
            c.unfreeze_und,
            self.steps,
            self.l_mse,
            self.l_language,
            self.l_vision,
            self.color,
            self.shape,
            self.position,
            self.count,
            self.exact_match
        )
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<(), EvalError> {
        let axes = [
            self.lambda1.len(),
            self.lambda2.len(),
            self.augment.len(),
            self.mask_condition_prompt.len(),
            self.metaquery_order.len(),
            self.sup_blocks_see_source.len(),
            self.num_metaqueries.len(),
            self.unfreeze_und.len(),
            self.seeds.len(),
        ];
        if axes.contains(&0) {
            return Err(EvalError::Config("every ablation axis needs at least one value".into()));
        }
        if self.lambda1.iter().chain(&self.lambda2).any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(EvalError::Config("ablation lambdas must be finite and >= 0".into()));
        }
        super::check_n(self.eval_samples)?;
        if self.eval_steps == 0 {
            return Err(EvalError::Config("eval_steps must be positive".into()));
        }
        Ok(())
    }

    /// Cartesian product in axis order, first axis slowest.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &lambda1 in &self.lambda1 {
            for &lambda2 in &self.lambda2 {
                for &augment in &self.augment {
                    for &mask_condition_prompt in &self.mask_condition_prompt {
                        for &metaquery_order in &self.metaquery_order {
                            for &sup_blocks_see_source in &self.sup_blocks_see_source {
                                for &num_metaqueries in &self.num_metaqueries {
                                    for &unfreeze_und in &self.unfreeze_und {
                                        out.push(AblationCell {
                                            lambda1,
                                            lambda2,
                                            augment,
                                            toggles: MaskToggles {
                                                mask_condition_prompt,
                                                metaquery_order,
                                                sup_blocks_see_source,
                                            },
                                            num_metaqueries,
                                            unfreeze_und,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Post-training config of one cell on top of `base`.
pub fn cell_config(base: &TrainConfig, cell: &AblationCell, seed_value: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.stage = Stage::Uno;
    cfg.loss.lambda1 = cell.lambda1;
    cfg.loss.lambda2 = cell.lambda2;
    cfg.augment = cell.augment;
    cfg.toggles = cell.toggles;
    cfg.unfreeze_und = cell.unfreeze_und;
    cfg.seed = seed_value;
    cfg
}

/// Mean of the final 10% of logged steps (at least one).
fn tail_mean(log: &[StepMetrics], f: fn(&StepMetrics) -> f64) -> f64 {
    let k = (log.len() / 10).max(1).min(log.len());
    let tail = &log[log.len() - k..];
    tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
}

/// Trains and evaluates every cell x seed from `base_state`, appending one CSV
/// row per run to `out_csv` as it completes, so a failure leaves the finished
/// rows on disk.
pub fn run_ablation(
    base_state: &ModelState,
    base: &TrainConfig,
    data: &DataConfig,
    grid: &AblationGrid,
    out_csv: &Path,
) -> Result<Vec<AblationRow>, EvalError> {
    grid.validate()?;
    if let Some(dir) = out_csv.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(out_csv)?;
    writeln!(file, "{ABLATION_HEADER}")?;
    let source = SceneSource::from_config(data)?;
    let mut rows = Vec::new();
    for (ci, cell) in grid.cells().iter().enumerate() {
        for &s in &grid.seeds {
            let mut state = base_state.with_metaqueries(cell.num_metaqueries, seed::derive_str(s, "metaquery-init"))?;
            let cfg = cell_config(base, cell, s);
            let hashed = serde_json::json!({ "model": state.cfg, "train": cell_config(base, cell, 0), "data": data });
            let config_hash = format!("{:016x}", seed::derive_str(0, &hashed.to_string()));
            let stream = StageStream {
                stage: Stage::Uno,
                source: source.clone(),
                data: data.clone(),
                pack: cfg.pack_config(&state.cfg),
                toggles: cfg.toggles,
                seed: cfg.seed,
            };
            let log = train(&mut state, &cfg, &stream, None)?;
            let sampler = Sampler { state: &state, steps: grid.eval_steps, use_ema: true };
            let report = eval_compositional(&sampler, grid.eval_samples, s, data.max_objects)?;
            let row = AblationRow {
                cell: ci,
                config_hash,
                seed: s,
                spec: *cell,
                steps: cfg.steps,
                l_mse: tail_mean(&log, |m| m.l_mse),
                l_language: tail_mean(&log, |m| m.l_language),
                l_vision: tail_mean(&log, |m| m.l_vision),
                color: report.color.accuracy,
                shape: report.shape.accuracy,
                position: report.position.accuracy,
                count: report.count.accuracy,
                exact_match: report.exact_match.accuracy,
            };
            writeln!(file, "{}", row.csv_row())?;
            file.flush()?;
            rows.push(row);
        }
    }
    Ok(rows)
}
