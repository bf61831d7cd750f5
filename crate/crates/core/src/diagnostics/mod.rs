//! Executable analyses: per-layer gradient cosine, noised-latent PCA views,
//! the caption-leakage probe and a finite-difference gradient validator.

mod leakage;
mod pca;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use leakage::{leakage_probe, LeakageResult};
pub use pca::{latent_pca_view, noised_view_sample, pca, Pca, PcaView, PCA_CSV_HEADER};

use crate::model::{Expert, GroupKind, ModelError, ModelState, Precision};
use crate::objectives::{sample_loss_with_targets, ObjectiveError, TermScales, UnoLossConfig};
use crate::packing::{PackedSample, SegmentKind};
use crate::seed;
use crate::trainer::{batch_gradient, batch_scales, TrainError};

/// Gradient norms below this count as zero in cosine reports.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;
/// Denominator floor of the finite-difference relative error.
pub const FD_REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("invalid diagnostic request: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pack(#[from] crate::packing::PackError),
    #[error(transparent)]
    World(#[from] crate::worldgen::WorldError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for DiagError {
    fn from(e: std::io::Error) -> Self {
        DiagError::Io(e.to_string())
    }
}

/// Cosine of two equally long vectors given as slices of tensors; `None`
/// when either norm is below [`COSINE_NORM_FLOOR`].
pub fn cosine<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.into_iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-layer cosine between two gradients restricted to the generation
/// expert's parameter groups of each layer.
pub fn layer_cosines(state: &ModelState, g_und: &[Array2<f64>], g_gen: &[Array2<f64>]) -> Vec<Option<f64>> {
    (0..state.cfg.n_layers)
        .map(|l| {
            let tensors: Vec<usize> = state
                .layout
                .groups
                .iter()
                .filter(|g| matches!(g.kind, GroupKind::Layer { layer, expert: Expert::Gen, .. } if layer == l))
                .flat_map(|g| g.tensors.iter().copied())
                .collect();
            let a = tensors.iter().flat_map(|&t| g_und[t].iter());
            let b = tensors.iter().flat_map(|&t| g_gen[t].iter());
            cosine(a, b)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// `cos(g_und, g_gen)` per layer; `None` when either norm vanishes.
    pub layers: Vec<Option<f64>>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub samples: usize,
    pub seeds: Vec<u64>,
}

/// Cosines between the gradients of two weightings of the same batch.
pub fn grad_cosine_with(
    state: &ModelState,
    batch: &[PackedSample],
    und: &TermScales,
    gen: &TermScales,
) -> Result<Vec<Option<f64>>, DiagError> {
    let (g_und, _) = batch_gradient(state, batch, und)?;
    let (g_gen, _) = batch_gradient(state, batch, gen)?;
    Ok(layer_cosines(state, &g_und, &g_gen))
}

/// `g_und = grad(l1 L_language + l2 L_vision)` against `g_gen = grad L_mse`.
pub fn grad_cosine_report(state: &ModelState, batch: &[PackedSample], loss: &UnoLossConfig) -> Result<GradReport, DiagError> {
    let uno = batch.iter().any(|s| {
        s.layout.find(SegmentKind::GenImage).is_some()
            && (s.layout.find(SegmentKind::Metaquery).is_some() || s.layout.find(SegmentKind::SupCaption).is_some())
    });
    if !uno {
        return Err(DiagError::Config("gradient cosine needs a batch in the joint layout".into()));
    }
    let w = loss.weights();
    let und = TermScales { flow: 0.0, language: w.language, vision: w.vision };
    let gen = TermScales { flow: 1.0, language: 0.0, vision: 0.0 };
    Ok(GradReport {
        layers: grad_cosine_with(state, batch, &und, &gen)?,
        lambda1: loss.lambda1,
        lambda2: loss.lambda2,
        samples: batch.len(),
        seeds: batch.iter().map(|s| s.seed).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdGroupResult {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub h: f64,
    pub max_rel_error: f64,
    pub worst_group: String,
    pub groups: Vec<FdGroupResult>,
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference<E>(mut f: impl FnMut(f64) -> Result<f64, E>, x: f64, h: f64) -> Result<f64, E> {
    let up = f(x + h)?;
    let down = f(x - h)?;
    Ok((up - down) / (2.0 * h))
}

/// Batch objective with vision targets held at `state.params`.
fn batch_objective(state: &ModelState, params: &[Array2<f64>], batch: &[PackedSample], scales: &TermScales) -> Result<f64, DiagError> {
    let mut total = 0.0;
    for s in batch {
        let l = sample_loss_with_targets(&state.cfg, &state.layout, params, &state.params, s, scales, None)?;
        total += scales.flow * l.flow.unwrap_or(0.0)
            + scales.language * l.language.unwrap_or(0.0)
            + scales.vision * l.vision.unwrap_or(0.0);
    }
    Ok(total)
}

/// Central differences on `k` randomly drawn scalars of every parameter group
/// against the analytic gradient of the weighted batch loss. Relative error
/// is `|a - n| / max(|a|, |n|, FD_REL_FLOOR)`.
pub fn finite_diff_check(
    state: &ModelState,
    batch: &[PackedSample],
    weights: &TermScales,
    k: usize,
    h: f64,
    seed_value: u64,
) -> Result<FdReport, DiagError> {
    use rand::Rng;
    if state.cfg.precision != Precision::F64 {
        return Err(DiagError::Config("finite differences need 64-bit mode".into()));
    }
    if !(1e-6..=1e-3).contains(&h) {
        return Err(DiagError::Config(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let (analytic, _) = batch_gradient(state, batch, weights)?;
    let scales = batch_scales(batch, weights);
    let mut groups = Vec::new();
    for (gi, group) in state.layout.groups.iter().enumerate() {
        let mut rng = seed::rng_for(seed::derive(seed_value, gi as u64), "fd");
        let sizes: Vec<usize> = group.tensors.iter().map(|&t| state.params[t].len()).collect();
        let total: usize = sizes.iter().sum();
        let picks: Vec<(usize, usize)> = (0..k)
            .map(|_| {
                let mut r = rng.random_range(0..total);
                let mut j = 0;
                while r >= sizes[j] {
                    r -= sizes[j];
                    j += 1;
                }
                (group.tensors[j], r)
            })
            .collect();
        let results: Vec<Result<(f64, f64), DiagError>> = picks
            .par_iter()
            .map(|&(t, flat)| {
                let (rows, cols) = state.params[t].dim();
                let idx = (flat / cols, flat % cols);
                debug_assert!(idx.0 < rows);
                let mut p = state.params.clone();
                let base = p[t][idx];
                let numeric = central_difference(
                    |v| {
                        p[t][idx] = v;
                        batch_objective(state, &p, batch, &scales)
                    },
                    base,
                    h,
                )?;
                let a = analytic[t][idx];
                Ok(((a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_REL_FLOOR), a.abs()))
            })
            .collect();
        let mut res = FdGroupResult { group: group.name.clone(), checked: 0, max_rel_error: 0.0, max_abs_grad: 0.0 };
        for r in results {
            let (rel, a) = r?;
            res.checked += 1;
            res.max_rel_error = res.max_rel_error.max(rel);
            res.max_abs_grad = res.max_abs_grad.max(a);
        }
        groups.push(res);
    }
    let worst = groups
        .iter()
        .fold(None::<&FdGroupResult>, |acc, g| match acc {
            Some(b) if b.max_rel_error >= g.max_rel_error => Some(b),
            _ => Some(g),
        })
        .ok_or_else(|| DiagError::Config("model has no parameter groups".into()))?;
    let (max_rel_error, worst_group) = (worst.max_rel_error, worst.group.clone());
    Ok(FdReport { h, max_rel_error, worst_group, groups })
}

/// Writes any serializable report as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: &std::path::Path) -> Result<(), DiagError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DiagError::Io(e.to_string()))?;
    crate::io::write_atomic(path, text.as_bytes())?;
    Ok(())
}
