//! PCA of generation-token hidden states, rendered as a 4x4 RGB grid.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::DiagError;
use crate::model::{forward, ModelState};
use crate::packing::{noise_latent, pack_inference, PackedSample, SegmentKind};
use crate::seed;
use crate::worldgen::{scene_latent, Scene, TokenSeq};

pub const PCA_CSV_HEADER: &str = "token,row,col,pc1,pc2,pc3";
const GRAY: u8 = 128;
const PNG_SCALE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k x d`, one unit component per row; each row's largest-magnitude
    /// entry is positive.
    pub components: Array2<f64>,
    /// All covariance eigenvalues, descending, clamped at 0.
    pub variances: Vec<f64>,
    /// `n x k` projections of the centered points.
    pub scores: Array2<f64>,
}

impl Pca {
    /// Mean squared norm of the rank-k reconstruction residual.
    pub fn reconstruction_error(&self, points: &Array2<f64>) -> f64 {
        let n = points.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let mut r: Vec<f64> = points.row(i).iter().zip(&self.mean).map(|(x, m)| x - m).collect();
            for (c, comp) in self.components.axis_iter(Axis(0)).enumerate() {
                let s = self.scores[[i, c]];
                for (rj, cj) in r.iter_mut().zip(comp.iter()) {
                    *rj -= s * cj;
                }
            }
            total += r.iter().map(|v| v * v).sum::<f64>();
        }
        total / n as f64
    }
}

/// Principal components of the rows of `points` (covariance with divisor n-1).
pub fn pca(points: &Array2<f64>, k: usize) -> Result<Pca, DiagError> {
    let (n, d) = points.dim();
    if n < 3 {
        return Err(DiagError::Config(format!("PCA needs at least 3 points, got {n}")));
    }
    if k > d {
        return Err(DiagError::Config(format!("cannot take {k} components of {d}-dimensional points")));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.column(j).sum() / n as f64).collect();
    let centered = Array2::from_shape_fn((n, d), |(i, j)| points[[i, j]] - mean[j]);
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let variances = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut components = Array2::zeros((k, d));
    for (c, &i) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(i);
        let lead = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[c, j]] = sign * v[j];
        }
    }
    let scores = centered.dot(&components.t());
    Ok(Pca { mean, components, variances, scores })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaView {
    pub t: f64,
    pub layer: usize,
    /// 16 x 3 scores in raster token order.
    pub scores: Vec<[f64; 3]>,
    /// 4x4 RGB pixels, row-major.
    pub rgb: Vec<u8>,
    pub variances: [f64; 3],
}

impl PcaView {
    pub fn csv(&self) -> String {
        let side = (self.scores.len() as f64).sqrt() as usize;
        let mut out = String::from(PCA_CSV_HEADER);
        out.push('\n');
        for (i, s) in self.scores.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{},{},{}\n", i / side, i % side, s[0], s[1], s[2]));
        }
        out
    }

    pub fn write(&self, png: &Path, csv: &Path) -> Result<(), DiagError> {
        let side = (self.scores.len() as f64).sqrt() as usize;
        let big = crate::io::upscale_rgb(&self.rgb, side, side, PNG_SCALE);
        let px = (side * PNG_SCALE) as u32;
        crate::io::write_png_rgb(png, px, px, &big).map_err(DiagError::Io)?;
        crate::io::write_atomic(csv, self.csv().as_bytes())?;
        Ok(())
    }
}

/// Min-max maps each score column to 0..=255; constant columns become gray.
fn to_rgb(scores: &Array2<f64>) -> Vec<u8> {
    let mut rgb = vec![GRAY; scores.nrows() * 3];
    for c in 0..scores.ncols().min(3) {
        let col = scores.column(c);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            continue;
        }
        for (i, v) in col.iter().enumerate() {
            rgb[3 * i + c] = ((v - lo) / (hi - lo) * 255.0).round() as u8;
        }
    }
    rgb
}

/// Inference-layout sample whose generation tokens are the scene latent noised to `t`.
pub fn noised_view_sample(
    scene: &Scene,
    prompt: &TokenSeq,
    t: f64,
    seed_value: u64,
    max_seq_len: usize,
) -> Result<PackedSample, DiagError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(DiagError::Config(format!("t must lie in (0,1), got {t}")));
    }
    let x0 = scene_latent(scene).to_tokens();
    let (xt, _) = noise_latent(&x0, t, seed::derive_str(seed_value, "pca-noise"));
    Ok(pack_inference(prompt, None, &xt, t, max_seq_len)?)
}

/// PCA over the generation tokens' hidden states after `layer` blocks
/// (0 = embeddings).
pub fn latent_pca_view(state: &ModelState, sample: &PackedSample, layer: usize) -> Result<PcaView, DiagError> {
    if layer > state.cfg.n_layers {
        return Err(DiagError::Config(format!("layer {layer} outside 0..={}", state.cfg.n_layers)));
    }
    let seg = sample
        .layout
        .find(SegmentKind::GenImage)
        .ok_or_else(|| DiagError::Config("sample has no generation tokens".into()))?;
    let (out, _) = forward(state, sample)?;
    let rows: Vec<usize> = seg.range().collect();
    let points = out.hidden[layer].select(Axis(0), &rows);
    let p = pca(&points, 3)?;
    Ok(PcaView {
        t: sample.t(),
        layer,
        scores: p.scores.axis_iter(Axis(0)).map(|r| [r[0], r[1], r[2]]).collect(),
        rgb: to_rgb(&p.scores),
        variances: [p.variances[0], p.variances[1], p.variances[2]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::worldgen::{caption_scene, sample_scene};

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Array2<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[[i, j]].powi(2)).sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[[k, p]], a[[k, q]]);
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn matches_independent_eigensolver() {
        use rand::Rng;
        let mut rng = seed::rng(4);
        let n = 16;
        let points = Array2::from_shape_fn((n, 8), |(_, j)| rng.random_range(-1.0..1.0) * (8 - j) as f64);
        let p = pca(&points, 3).unwrap();
        let mean = points.mean_axis(Axis(0)).unwrap();
        let c = &points - &mean;
        let ev = jacobi_eigenvalues(c.t().dot(&c) / (n - 1) as f64);
        for (a, b) in p.variances.iter().zip(&ev) {
            assert!((a - b.max(0.0)).abs() < 1e-8);
        }
        assert!(p.variances.windows(2).all(|w| w[0] >= w[1]));
        let expected: f64 = ev[3..].iter().sum::<f64>() * (n - 1) as f64 / n as f64;
        assert!((p.reconstruction_error(&points) - expected).abs() < 1e-8);
        for row in p.components.axis_iter(Axis(0)) {
            let lead = row.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
            assert!((row.dot(&row) - 1.0).abs() < 1e-10);
        }
        let flipped = pca(&(-&points), 3).unwrap();
        assert!((flipped.components - &p.components).iter().all(|d| d.abs() < 1e-9));
        assert!(pca(&points.slice(ndarray::s![..2, ..]).to_owned(), 2).is_err());
    }

    #[test]
    fn identical_states_render_gray() {
        let p = pca(&Array2::from_elem((16, 5), 0.7), 3).unwrap();
        assert!(to_rgb(&p.scores).iter().all(|&v| v == GRAY));
    }

    #[test]
    fn view_from_model() {
        let mut st = init_model(&ModelConfig::tiny(), 3).unwrap();
        st.jitter(1, 0.1);
        let scene = sample_scene(2, 3).unwrap();
        let s = noised_view_sample(&scene, &caption_scene(&scene, 0).unwrap(), 0.8, 1, st.cfg.max_seq_len).unwrap();
        let v = latent_pca_view(&st, &s, 1).unwrap();
        assert_eq!(v.scores.len(), 16);
        let csv = v.csv();
        assert_eq!(csv.lines().count(), 17);
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 6));
        assert!(latent_pca_view(&st, &s, 2).is_err());
        assert!(noised_view_sample(&scene, &TokenSeq::default(), 1.0, 1, 64).is_err());
        let dir = tempfile::tempdir().unwrap();
        v.write(&dir.path().join("v.png"), &dir.path().join("v.csv")).unwrap();
        assert!(dir.path().join("v.png").exists());
    }
}
