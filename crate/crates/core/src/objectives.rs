//! Flow-matching, caption and metaquery-alignment losses and their combination.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{backward_into, forward_with, vision_targets, ModelConfig, ModelError, OutputGrads, ParamLayout};
use crate::packing::PackedSample;
use crate::worldgen::vocab::PAD;

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("sample has no generation tokens")]
    EmptyGeneration,
    #[error("no supervised caption positions")]
    NoSupervisedPositions,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {term} loss")]
    NonFinite { term: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnoLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub enable_language: bool,
    pub enable_vision: bool,
}

impl Default for UnoLossConfig {
    fn default() -> Self {
        UnoLossConfig { lambda1: 0.1, lambda2: 0.2, enable_language: true, enable_vision: true }
    }
}

impl UnoLossConfig {
    /// Plain flow matching: both supervision terms off.
    pub fn sft() -> Self {
        UnoLossConfig { lambda1: 0.0, lambda2: 0.0, enable_language: false, enable_vision: false }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return Err(format!("lambda1 and lambda2 must be finite and >= 0, got {} and {}", self.lambda1, self.lambda2));
        }
        Ok(())
    }

    /// Effective weights on (flow, language, vision), zero for disabled terms.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            flow: 1.0,
            language: if self.enable_language { self.lambda1 } else { 0.0 },
            vision: if self.enable_vision { self.lambda2 } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub flow: f64,
    pub language: f64,
    pub vision: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_language: f64,
    pub l_vision: f64,
    pub l_total: f64,
}

/// Mean squared error over all generation tokens and channels.
pub fn loss_flow(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64, ObjectiveError> {
    loss_flow_grad(pred, target).map(|(l, _)| l)
}

pub fn loss_flow_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>), ObjectiveError> {
    if pred.is_empty() {
        return Err(ObjectiveError::EmptyGeneration);
    }
    if pred.dim() != target.dim() {
        return Err(ObjectiveError::Shape(format!("velocity {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let diff = pred - target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// Mean next-token cross-entropy; rows whose target is `<pad>` are skipped.
pub fn loss_language(logits: &Array2<f64>, targets: &[u32]) -> Result<f64, ObjectiveError> {
    loss_language_grad(logits, targets).map(|(l, _)| l)
}

pub fn loss_language_grad(logits: &Array2<f64>, targets: &[u32]) -> Result<(f64, Array2<f64>), ObjectiveError> {
    if logits.nrows() != targets.len() {
        return Err(ObjectiveError::Shape(format!("{} logit rows for {} targets", logits.nrows(), targets.len())));
    }
    let v = logits.ncols();
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(ObjectiveError::Shape(format!("target id {bad} outside vocabulary of {v}")));
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(ObjectiveError::NoSupervisedPositions);
    }
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[t as usize];
        let mut g = grad.row_mut(i);
        for j in 0..v {
            g[j] = (row[j] - lse).exp() / count as f64;
        }
        g[t as usize] -= 1.0 / count as f64;
    }
    Ok((total / count as f64, grad))
}

/// `-(1/N) sum_j cos(v_j, h_j[..k])` with `k = v.ncols()`; norms are
/// stabilized as `sqrt(|x|^2 + eps^2)`. The value is clamped to [-1, 1]
/// against rounding on (anti)parallel pairs.
pub fn loss_vision(h: &Array2<f64>, v: &Array2<f64>) -> Result<f64, ObjectiveError> {
    loss_vision_grad(h, v).map(|(l, _)| l)
}

pub fn loss_vision_grad(h: &Array2<f64>, v: &Array2<f64>) -> Result<(f64, Array2<f64>), ObjectiveError> {
    let (n, k) = v.dim();
    if n == 0 || h.nrows() != n || h.ncols() < k {
        return Err(ObjectiveError::Shape(format!("states {:?} vs targets {:?}", h.dim(), v.dim())));
    }
    let mut grad = Array2::zeros(h.dim());
    let mut total = 0.0;
    for j in 0..n {
        let hj = h.row(j);
        let hj = hj.slice(ndarray::s![..k]);
        let vj = v.row(j);
        let nh = (hj.dot(&hj) + COSINE_EPS * COSINE_EPS).sqrt();
        let nv = (vj.dot(&vj) + COSINE_EPS * COSINE_EPS).sqrt();
        let dot = hj.dot(&vj);
        let cos = dot / (nh * nv);
        total += cos;
        let mut g = grad.row_mut(j);
        for c in 0..k {
            g[c] = -(vj[c] / (nh * nv) - cos * hj[c] / (nh * nh)) / n as f64;
        }
    }
    Ok(((-total / n as f64).clamp(-1.0, 1.0), grad))
}

/// Combines component losses; disabled terms are reported and counted as 0.
pub fn loss_total(l_mse: f64, l_language: f64, l_vision: f64, cfg: &UnoLossConfig) -> Result<LossBreakdown, ObjectiveError> {
    for (v, term) in [(l_mse, "flow"), (l_language, "language"), (l_vision, "vision")] {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite { term });
        }
    }
    let w = cfg.weights();
    let l_language = if cfg.enable_language { l_language } else { 0.0 };
    let l_vision = if cfg.enable_vision { l_vision } else { 0.0 };
    Ok(LossBreakdown { l_mse, l_language, l_vision, l_total: w.flow * l_mse + w.language * l_language + w.vision * l_vision })
}

/// Per-sample loss values; `None` where the sample carries no such term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleLosses {
    pub flow: Option<f64>,
    pub language: Option<f64>,
    pub vision: Option<f64>,
}

/// Which terms to evaluate and their gradient scale for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermScales {
    pub flow: f64,
    pub language: f64,
    pub vision: f64,
}

/// Forward one sample, evaluate every term it carries, and (when `grads` is
/// given) accumulate the gradient of `sum scale_term * L_term` into it. A term
/// with scale 0 gets no upstream gradient, so its path contributes nothing.
pub fn sample_loss(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    params: &[Array2<f64>],
    sample: &PackedSample,
    scales: &TermScales,
    grads: Option<&mut [Array2<f64>]>,
) -> Result<SampleLosses, ObjectiveError> {
    sample_loss_with_targets(cfg, layout, params, params, sample, scales, grads)
}

/// As [`sample_loss`], with vision targets taken from `target_params`, so a
/// perturbation of `params` leaves the targets untouched.
pub fn sample_loss_with_targets(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    params: &[Array2<f64>],
    target_params: &[Array2<f64>],
    sample: &PackedSample,
    scales: &TermScales,
    grads: Option<&mut [Array2<f64>]>,
) -> Result<SampleLosses, ObjectiveError> {
    let (out, tape) = forward_with(cfg, layout, params, sample)?;
    let mut losses = SampleLosses::default();
    let mut og = OutputGrads::default();
    if let (Some(pred), Some(u)) = (&out.velocity, &sample.velocity_target) {
        let (l, g) = loss_flow_grad(pred, u)?;
        losses.flow = Some(l);
        if scales.flow != 0.0 {
            og.velocity = Some(g * scales.flow);
        }
    }
    if !sample.caption_targets.is_empty() {
        let targets: Vec<u32> = sample.caption_targets.iter().map(|&(_, t)| t).collect();
        let (l, g) = loss_language_grad(&out.caption_logits, &targets)?;
        losses.language = Some(l);
        if scales.language != 0.0 {
            og.caption_logits = Some(g * scales.language);
        }
    }
    if let (Some(h), Some(patches)) = (&out.metaquery_states, &sample.target_patches) {
        let v = vision_targets(target_params, &layout.index, patches, h.nrows());
        let (l, g) = loss_vision_grad(h, &v)?;
        losses.vision = Some(l);
        if scales.vision != 0.0 {
            og.metaquery_states = Some(g * scales.vision);
        }
    }
    let any = og.velocity.is_some() || og.caption_logits.is_some() || og.metaquery_states.is_some();
    if let (Some(g), true) = (grads, any) {
        backward_into(cfg, layout, params, &tape, &og, g);
    }
    Ok(losses)
}

/// Batch statistics: each component is the mean over the samples carrying it.
pub fn batch_counts(losses: &[SampleLosses]) -> (usize, usize, usize) {
    let c = |f: fn(&SampleLosses) -> Option<f64>| losses.iter().filter(|l| f(l).is_some()).count();
    (c(|l| l.flow), c(|l| l.language), c(|l| l.vision))
}

pub fn batch_means(losses: &[SampleLosses]) -> (f64, f64, f64) {
    let mean = |f: fn(&SampleLosses) -> Option<f64>| {
        let v: Vec<f64> = losses.iter().filter_map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (mean(|l| l.flow), mean(|l| l.language), mean(|l| l.vision))
}

/// Adds `b * scale` into `a`.
pub fn axpy(a: &mut [Array2<f64>], b: &[Array2<f64>], scale: f64) {
    for (x, y) in a.iter_mut().zip(b) {
        x.scaled_add(scale, y);
    }
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Row-wise softmax probabilities, used by evaluation.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Precision};
    use crate::packing::{pack_t2i_uno, sample_prompt, MaskToggles, PackConfig};
    use crate::worldgen::sample_scene;
    use ndarray::array;

    #[test]
    fn flow_examples() {
        let u = array![[1.0, -2.0], [0.5, 3.0], [0.0, 1.0]];
        assert_eq!(loss_flow(&u, &u).unwrap(), 0.0);
        assert!((loss_flow(&(&u + 1.0), &u).unwrap() - 1.0).abs() < 1e-15);
        let pred = array![[1.5, -2.0], [0.0, 2.0], [1.0, 1.0]];
        // squared diffs: 0.25, 0, 0.25, 1, 1, 0 -> 2.5 / 6
        assert!((loss_flow(&pred, &u).unwrap() - 2.5 / 6.0).abs() < 1e-12);
        assert!(matches!(loss_flow(&Array2::zeros((0, 16)), &Array2::zeros((0, 16))), Err(ObjectiveError::EmptyGeneration)));
    }

    #[test]
    fn language_examples() {
        let uniform = Array2::zeros((3, 64));
        assert!((loss_language(&uniform, &[5, 9, 2]).unwrap() - 64f64.ln()).abs() < 1e-12);
        let mut peaked = Array2::zeros((2, 64));
        peaked[[0, 5]] = 80.0;
        peaked[[1, 9]] = 80.0;
        assert!(loss_language(&peaked, &[5, 9]).unwrap() < 1e-30);
        // 2 tokens, 3-word vocabulary
        let l = array![[1.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let e = std::f64::consts::E;
        let ce0 = -(e * e / (e + e * e + 1.0)).ln();
        let ce1 = -(e * e * e / (2.0 + e * e * e)).ln();
        assert!((loss_language(&l, &[1, 2]).unwrap() - (ce0 + ce1) / 2.0).abs() < 1e-10);
        let padded = array![[1.0, 2.0, 0.0], [0.0, 0.0, 3.0], [9.0, 0.0, 0.0]];
        assert!((loss_language(&padded, &[1, 2, PAD]).unwrap() - (ce0 + ce1) / 2.0).abs() < 1e-10);
        assert!(matches!(loss_language(&Array2::zeros((1, 64)), &[PAD]), Err(ObjectiveError::NoSupervisedPositions)));
    }

    #[test]
    fn vision_examples() {
        let v = array![[1.0, 2.0], [-3.0, 0.5]];
        let h = array![[2.0, 4.0, 7.0], [-6.0, 1.0, -1.0]];
        assert!((loss_vision(&h, &v).unwrap() + 1.0).abs() < 1e-12);
        let perp = array![[-2.0, 1.0, 5.0], [0.5, 3.0, 0.0]];
        assert!(loss_vision(&perp, &v).unwrap().abs() < 1e-12);
        let neg = array![[-1.0, -2.0, 0.0], [3.0, -0.5, 0.0]];
        assert!((loss_vision(&neg, &v).unwrap() - 1.0).abs() < 1e-12);
        let zero = Array2::zeros((2, 3));
        assert_eq!(loss_vision(&zero, &v).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        let b = loss_total(1.0, 2.0, -0.5, &UnoLossConfig::default()).unwrap();
        assert!((b.l_total - 1.1).abs() < 1e-12);
        let z = UnoLossConfig { lambda1: 0.0, lambda2: 0.0, ..UnoLossConfig::default() };
        assert_eq!(loss_total(0.7, 2.0, -0.5, &z).unwrap().l_total, 0.7);
        let off = loss_total(0.7, 2.0, -0.5, &UnoLossConfig::sft()).unwrap();
        assert_eq!((off.l_language, off.l_vision, off.l_total), (0.0, 0.0, 0.7));
        assert!(matches!(loss_total(f64::NAN, 0.0, 0.0, &z), Err(ObjectiveError::NonFinite { term: "flow" })));
        for (l1, l2) in [(0.1, 0.2), (1.0, 0.0), (0.3, 2.5)] {
            let c = UnoLossConfig { lambda1: l1, lambda2: l2, ..UnoLossConfig::default() };
            let b = loss_total(0.4, 1.5, -0.25, &c).unwrap();
            assert!((b.l_total - (0.4 + l1 * 1.5 - l2 * 0.25)).abs() < 1e-12);
        }
    }

    fn head_fd<F: Fn(&Array2<f64>) -> f64>(x: &Array2<f64>, g: &Array2<f64>, f: F) {
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let h = 1e-6;
                let mut a = x.clone();
                a[[i, j]] += h;
                let mut b = x.clone();
                b[[i, j]] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-7, "({i},{j}) fd {fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn head_gradients_match_differences() {
        let mut rng = crate::seed::rng(3);
        use rand::Rng;
        let mut rand = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let (p, u) = (rand(4, 3), rand(4, 3));
        head_fd(&p, &loss_flow_grad(&p, &u).unwrap().1, |x| loss_flow(x, &u).unwrap());
        let logits = rand(3, 5);
        let t = [2, PAD, 4];
        head_fd(&logits, &loss_language_grad(&logits, &t).unwrap().1, |x| loss_language(x, &t).unwrap());
        let (h, v) = (rand(3, 6), rand(3, 4));
        head_fd(&h, &loss_vision_grad(&h, &v).unwrap().1, |x| loss_vision(x, &v).unwrap());
    }

    #[test]
    fn total_gradient_is_the_weighted_sum() {
        let mut cfg = ModelConfig::tiny();
        cfg.n_layers = 2;
        cfg.precision = Precision::F64;
        let mut st = init_model(&cfg, 8).unwrap();
        st.jitter(9, 0.3);
        let scene = sample_scene(4, 2).unwrap();
        let pc = PackConfig { num_metaqueries: 2, max_seq_len: 64, ..PackConfig::default() };
        let s = pack_t2i_uno(&sample_prompt(&scene, 4), &scene, 4, &pc, &MaskToggles::default()).unwrap();
        let run = |f, l, v| {
            let mut g = st.layout.zeros();
            sample_loss(&cfg, &st.layout, &st.params, &s, &TermScales { flow: f, language: l, vision: v }, Some(&mut g)).unwrap();
            g
        };
        let total = run(1.0, 0.1, 0.2);
        let mut sum = run(1.0, 0.0, 0.0);
        axpy(&mut sum, &run(0.0, 1.0, 0.0), 0.1);
        axpy(&mut sum, &run(0.0, 0.0, 1.0), 0.2);
        for (a, b) in total.iter().zip(&sum) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // central differences on the combined objective
        let g = total;
        let value = |params: &[Array2<f64>]| {
            let l = sample_loss(&cfg, &st.layout, params, &s, &TermScales { flow: 1.0, language: 0.1, vision: 0.2 }, None).unwrap();
            l.flow.unwrap() + 0.1 * l.language.unwrap() + 0.2 * l.vision.unwrap()
        };
        let gen_qkv = st.index().layers[1][1].wqkv;
        let lm = st.index().lm_head;
        for &(t, r, c) in &[(gen_qkv, 1, 3), (lm, 2, 7), (st.index().metaquery, 1, 2), (st.index().tok_emb, 12, 1)] {
            let h = 1e-5;
            let mut p = st.params.clone();
            p[t][[r, c]] += h;
            let up = value(&p);
            p[t][[r, c]] -= 2.0 * h;
            let fd = (up - value(&p)) / (2.0 * h);
            assert!((fd - g[t][[r, c]]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", g[t][[r, c]]);
        }
    }

    #[test]
    fn zero_language_weight_severs_lm_head() {
        let mut st = init_model(&ModelConfig::tiny(), 2).unwrap();
        st.jitter(3, 0.2);
        let scene = sample_scene(5, 2).unwrap();
        let pc = PackConfig { num_metaqueries: 2, max_seq_len: 64, ..PackConfig::default() };
        let s = pack_t2i_uno(&sample_prompt(&scene, 5), &scene, 5, &pc, &MaskToggles::default()).unwrap();
        let mut g = st.layout.zeros();
        sample_loss(&st.cfg, &st.layout, &st.params, &s, &TermScales { flow: 1.0, language: 0.0, vision: 0.2 }, Some(&mut g)).unwrap();
        assert!(g[st.index().lm_head].iter().all(|&v| v == 0.0));
        assert!(g[st.index().tok_emb].iter().any(|&v| v != 0.0));
    }
}
