//! Caption-leakage probe: identical-prompt versus paraphrase supervision.

use serde::{Deserialize, Serialize};

use super::DiagError;
use crate::model::ModelState;
use crate::trainer::{train, DataConfig, SceneSource, Stage, StageStream, StepMetrics, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageResult {
    pub budget: usize,
    pub seeds: Vec<u64>,
    /// Converged caption loss per seed when the caption repeats the prompt.
    pub loss_same: Vec<f64>,
    /// Converged caption loss per seed under paraphrase supervision.
    pub loss_para: Vec<f64>,
}

impl LeakageResult {
    pub fn mean_same(&self) -> f64 {
        self.loss_same.iter().sum::<f64>() / self.loss_same.len().max(1) as f64
    }

    pub fn mean_para(&self) -> f64 {
        self.loss_para.iter().sum::<f64>() / self.loss_para.len().max(1) as f64
    }
}

/// Mean caption loss over the final 10% of steps.
pub fn converged_caption_loss(log: &[StepMetrics]) -> f64 {
    let k = (log.len() / 10).max(1).min(log.len());
    log[log.len() - k..].iter().map(|m| m.l_language).sum::<f64>() / k.max(1) as f64
}

fn run(base: &ModelState, train_cfg: &TrainConfig, data: &DataConfig, augment: bool, seed_value: u64) -> Result<f64, DiagError> {
    let mut state = base.clone();
    let cfg = TrainConfig { stage: Stage::Uno, augment, seed: seed_value, ..train_cfg.clone() };
    let stream = StageStream {
        stage: Stage::Uno,
        source: SceneSource::from_config(data)?,
        data: data.clone(),
        pack: cfg.pack_config(&state.cfg),
        toggles: cfg.toggles,
        seed: seed_value,
    };
    let log = train(&mut state, &cfg, &stream, None)?;
    Ok(converged_caption_loss(&log))
}

/// Two post-training runs per seed from `base`, differing only in the
/// augmentation flag; `train_cfg.steps` is the budget.
pub fn leakage_probe(
    base: &ModelState,
    train_cfg: &TrainConfig,
    data: &DataConfig,
    seeds: &[u64],
) -> Result<LeakageResult, DiagError> {
    if seeds.is_empty() {
        return Err(DiagError::Config("leakage probe needs at least one seed".into()));
    }
    let mut loss_same = Vec::with_capacity(seeds.len());
    let mut loss_para = Vec::with_capacity(seeds.len());
    for &s in seeds {
        loss_same.push(run(base, train_cfg, data, false, s)?);
        loss_para.push(run(base, train_cfg, data, true, s)?);
    }
    Ok(LeakageResult { budget: train_cfg.steps, seeds: seeds.to_vec(), loss_same, loss_para })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, Precision};

    #[test]
    fn equal_flags_give_bitwise_equal_losses() {
        let mut mcfg = ModelConfig::tiny();
        mcfg.num_metaqueries = 4;
        mcfg.max_seq_len = 128;
        mcfg.precision = Precision::F32;
        let st = init_model(&mcfg, 1).unwrap();
        let cfg = TrainConfig { steps: 4, warmup_steps: 1, batch_size: 4, ..TrainConfig::default() };
        let data = DataConfig { max_objects: 2, ..DataConfig::default() };
        let a = run(&st, &cfg, &data, false, 3).unwrap();
        let b = run(&st, &cfg, &data, false, 3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let r = leakage_probe(&st, &cfg, &data, &[3]).unwrap();
        assert_eq!(r.loss_same[0].to_bits(), a.to_bits());
        assert!(r.loss_para[0].is_finite() && r.loss_para[0] >= 0.0);
        assert!(leakage_probe(&st, &cfg, &data, &[]).is_err());
    }

    #[test]
    fn tail_mean_uses_final_tenth() {
        let log: Vec<StepMetrics> = (1..=20)
            .map(|i| StepMetrics { step: i, l_total: 0.0, l_mse: 0.0, l_language: i as f64, l_vision: 0.0, lr: 0.0, grad_norm: 0.0, wall_ms: 0.0 })
            .collect();
        assert_eq!(converged_caption_loss(&log), 19.5);
        assert_eq!(converged_caption_loss(&log[..3]), 3.0);
    }
}
