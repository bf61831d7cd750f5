//! Two-expert transformer backbone with shared joint attention.
//!
//! Every position carries its own expert (understanding or generation) and
//! uses that expert's norms, projections and feed-forward weights, while all
//! positions meet in one attention over the packed sequence. Caption and
//! metaquery positions therefore read keys and values computed by the
//! generation expert, which is the path understanding losses take back into it.

pub mod checkpoint;
pub mod forward;
pub mod params;

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{check_compatible, load_checkpoint, load_checkpoint_for, load_checkpoint_meta, save_checkpoint, save_checkpoint_meta};
pub use forward::{backward, backward_into, forward, forward_with, sample_vision_targets, ForwardOutputs, OutputGrads, Tape};
pub use params::{param_count, quantize as quantize_params, GroupInfo, GroupKind, LayerRole, ParamIndex, ParamLayout, TensorInfo};

use crate::packing::{image_patches, SegmentKind, UND_PATCHES};
use crate::worldgen::PixelImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint group `{group}` missing")]
    MissingGroup { group: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expert {
    Und,
    Gen,
}

impl Expert {
    pub const ALL: [Expert; 2] = [Expert::Und, Expert::Gen];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Expert::Und => "und",
            Expert::Gen => "gen",
        }
    }
}

/// Only generation-image tokens run through the generation expert.
pub fn route_expert(kind: SegmentKind) -> Expert {
    match kind {
        SegmentKind::GenImage => Expert::Gen,
        SegmentKind::CondText | SegmentKind::UndImage | SegmentKind::SupCaption | SegmentKind::Metaquery => {
            Expert::Und
        }
    }
}

/// Routes by segment-kind name; unknown names are an error.
pub fn route_expert_by_name(kind: &str) -> Result<Expert, ModelError> {
    SegmentKind::parse(kind).map(route_expert).map_err(|e| ModelError::Config(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are held at single precision (rounded after every update).
    F32,
    /// Full double precision, for gradient and oracle checks.
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub d_und_feature: usize,
    pub num_metaqueries: usize,
    pub max_seq_len: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_hidden: 256,
            vocab: crate::worldgen::vocab::VOCAB_SIZE,
            d_und_feature: 32,
            num_metaqueries: 16,
            max_seq_len: 128,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// One layer, width 4: small enough for brute-force and finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 8,
            d_und_feature: 4,
            num_metaqueries: 2,
            max_seq_len: 64,
            precision: Precision::F64,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.num_metaqueries == 0 {
            return err("num_metaqueries must be at least 1".into());
        }
        if self.d_und_feature > self.d_model {
            return err("d_und_feature must not exceed d_model".into());
        }
        if self.vocab != crate::worldgen::vocab::VOCAB_SIZE {
            return err(format!("vocab must be {}", crate::worldgen::vocab::VOCAB_SIZE));
        }
        if self.n_layers == 0 || self.ffn_hidden == 0 || self.max_seq_len == 0 {
            return err("n_layers, ffn_hidden and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameters, EMA shadow and per-group freeze flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub layout: Arc<ParamLayout>,
    pub params: Vec<Array2<f64>>,
    pub ema: Vec<Array2<f64>>,
    /// Indexed by group.
    pub frozen: Vec<bool>,
}

pub fn init_model(cfg: &ModelConfig, seed_value: u64) -> Result<ModelState, ModelError> {
    cfg.validate()?;
    let layout = Arc::new(ParamLayout::new(cfg));
    let params = params::init_tensors(cfg, &layout, seed_value);
    let ema = params.clone();
    let frozen = vec![false; layout.groups.len()];
    Ok(ModelState { cfg: cfg.clone(), layout, params, ema, frozen })
}

impl ModelState {
    pub fn index(&self) -> &ParamIndex {
        &self.layout.index
    }

    pub fn weights(&self, use_ema: bool) -> &[Array2<f64>] {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }

    pub fn group_id(&self, name: &str) -> Option<usize> {
        self.layout.group_by_name(name)
    }

    pub fn group_is_frozen(&self, group: usize) -> bool {
        self.frozen[group]
    }

    pub fn tensor_frozen(&self, tensor: usize) -> bool {
        self.frozen[self.layout.tensors[tensor].group]
    }

    /// Sum of absolute parameter differences over the given groups.
    pub fn group_abs_diff(&self, other: &ModelState, group: usize) -> f64 {
        self.layout.groups[group]
            .tensors
            .iter()
            .map(|&t| (&self.params[t] - &other.params[t]).mapv(f64::abs).sum())
            .sum()
    }

    pub fn groups_bitwise_equal(&self, other: &ModelState, group: usize) -> bool {
        self.layout.groups[group].tensors.iter().all(|&t| {
            self.params[t].iter().zip(other.params[t].iter()).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    /// Copy with a metaquery table of `n` rows. Every other tensor is kept; the
    /// table is re-initialized from `seed_value` when `n` differs.
    pub fn with_metaqueries(&self, n: usize, seed_value: u64) -> Result<ModelState, ModelError> {
        if n == self.cfg.num_metaqueries {
            return Ok(self.clone());
        }
        let cfg = ModelConfig { num_metaqueries: n, ..self.cfg.clone() };
        let mut out = init_model(&cfg, seed_value)?;
        let mq = out.layout.index.metaquery;
        for t in 0..out.params.len() {
            if t != mq {
                out.params[t] = self.params[t].clone();
                out.ema[t] = self.ema[t].clone();
            }
        }
        out.frozen = self.frozen.clone();
        Ok(out)
    }

    /// Adds uniform noise of the given scale to every parameter (and the shadow).
    /// Used to move a freshly initialized model off its zero-initialized branches.
    pub fn jitter(&mut self, seed_value: u64, scale: f64) {
        use rand::Rng;
        let mut rng = crate::seed::rng_for(seed_value, "jitter");
        for t in &mut self.params {
            t.mapv_inplace(|v| v + rng.random_range(-scale..scale));
        }
        params::quantize(&mut self.params, self.cfg.precision);
        self.ema = self.params.clone();
    }
}

/// Understanding-encoder outputs for an image: backbone-ready tokens and the
/// dense features used as vision targets.
#[derive(Clone, Debug, PartialEq)]
pub struct UndImageEncoding {
    /// `16 x d_model` tokens entering the understanding expert.
    pub tokens: Array2<f64>,
    /// `16 x d_und_feature` patch features, raster order (patch (r, c) at `4r + c`).
    pub features: Array2<f64>,
}

pub fn und_features(params: &[Array2<f64>], index: &ParamIndex, patches: &Array2<f64>) -> Array2<f64> {
    patches.dot(&params[index.und_patch_w]) + &params[index.und_patch_b].row(0)
}

pub fn encode_und_image(img: &PixelImage, state: &ModelState) -> UndImageEncoding {
    let idx = state.index();
    let features = und_features(&state.params, idx, &image_patches(img));
    let tokens = features.dot(&state.params[idx.und_in_w]);
    UndImageEncoding { tokens, features }
}

/// Vision targets for `n` metaqueries from the 16 patch features: identity for
/// n = 16, contiguous average pooling for fewer, nearest repetition for more.
pub fn pool_targets(features: &Array2<f64>, n: usize) -> Array2<f64> {
    let p = features.nrows();
    let mut out = Array2::zeros((n, features.ncols()));
    for j in 0..n {
        if n >= p {
            out.row_mut(j).assign(&features.row(j * p / n));
        } else {
            let (lo, hi) = (j * p / n, (j + 1) * p / n);
            let mut acc = out.row_mut(j);
            for r in lo..hi {
                acc += &features.row(r);
            }
            acc /= (hi - lo) as f64;
        }
    }
    out
}

/// Vision targets `v_j` for a sample's clean target image; never differentiated.
pub fn vision_targets(
    params: &[Array2<f64>],
    index: &ParamIndex,
    target_patches: &Array2<f64>,
    num_metaqueries: usize,
) -> Array2<f64> {
    debug_assert_eq!(target_patches.nrows(), UND_PATCHES);
    pool_targets(&und_features(params, index, target_patches), num_metaqueries)
}
