//! Parameter layout, grouping and initialization.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Expert, ModelConfig, Precision};
use crate::packing::{UND_PATCH_DIM};
use crate::seed;
use crate::worldgen::image::GEN_TOKEN_DIM;

pub const TIME_FREQ_DIM: usize = 32;
pub const NUM_SEGMENT_KINDS: usize = 5;

/// Role of a per-layer, per-expert parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Norm1,
    Qkv,
    AttnOut,
    Norm2,
    Ffn,
}

impl LayerRole {
    pub const ALL: [LayerRole; 5] =
        [LayerRole::Norm1, LayerRole::Qkv, LayerRole::AttnOut, LayerRole::Norm2, LayerRole::Ffn];

    pub fn name(self) -> &'static str {
        match self {
            LayerRole::Norm1 => "norm1",
            LayerRole::Qkv => "qkv",
            LayerRole::AttnOut => "attn_out",
            LayerRole::Norm2 => "norm2",
            LayerRole::Ffn => "ffn",
        }
    }
}

/// What a parameter group is, for freeze specs and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    Layer { layer: usize, expert: Expert, role: LayerRole },
    TokenEmbedding,
    PositionEmbedding,
    SegmentEmbedding,
    TimeEmbedding,
    GenInput,
    UndEncoder,
    UndImageInput,
    LmHead,
    VelocityHead,
    Metaquery,
}

impl GroupKind {
    pub fn name(&self) -> String {
        match self {
            GroupKind::Layer { layer, expert, role } => format!("layer{layer}.{}.{}", expert.name(), role.name()),
            GroupKind::TokenEmbedding => "embed.token".into(),
            GroupKind::PositionEmbedding => "embed.position".into(),
            GroupKind::SegmentEmbedding => "embed.segment".into(),
            GroupKind::TimeEmbedding => "gen.time_embed".into(),
            GroupKind::GenInput => "gen.input".into(),
            GroupKind::UndEncoder => "und.encoder".into(),
            GroupKind::UndImageInput => "und.image_in".into(),
            GroupKind::LmHead => "head.lm".into(),
            GroupKind::VelocityHead => "head.velocity".into(),
            GroupKind::Metaquery => "metaquery".into(),
        }
    }

    /// Expert that owns the group, if any. Shared embeddings and the metaquery table have none.
    pub fn expert(&self) -> Option<Expert> {
        match self {
            GroupKind::Layer { expert, .. } => Some(*expert),
            GroupKind::TokenEmbedding | GroupKind::UndEncoder | GroupKind::UndImageInput | GroupKind::LmHead => {
                Some(Expert::Und)
            }
            GroupKind::TimeEmbedding | GroupKind::GenInput | GroupKind::VelocityHead => Some(Expert::Gen),
            GroupKind::PositionEmbedding | GroupKind::SegmentEmbedding | GroupKind::Metaquery => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub group: usize,
    pub shape: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub kind: GroupKind,
    pub name: String,
    pub tensors: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIdx {
    pub norm1: usize,
    pub wqkv: usize,
    pub wo: usize,
    pub norm2: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// Tensor indices by role.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamIndex {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub seg_emb: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub gen_in_w: usize,
    pub gen_in_b: usize,
    pub und_patch_w: usize,
    pub und_patch_b: usize,
    pub und_in_w: usize,
    pub lm_norm: usize,
    pub lm_head: usize,
    pub vel_norm: usize,
    pub vel_head: usize,
    pub metaquery: usize,
    /// `layers[l][expert.index()]`
    pub layers: Vec<[LayerIdx; 2]>,
}

/// Static description of every tensor and group for a config.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorInfo>,
    pub groups: Vec<GroupInfo>,
    pub index: ParamIndex,
}

struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    groups: Vec<GroupInfo>,
}

impl LayoutBuilder {
    fn group(&mut self, kind: GroupKind) -> usize {
        self.groups.push(GroupInfo { name: kind.name(), kind, tensors: Vec::new() });
        self.groups.len() - 1
    }

    fn tensor(&mut self, group: usize, name: &str, shape: (usize, usize)) -> usize {
        let full = format!("{}.{name}", self.groups[group].name);
        self.tensors.push(TensorInfo { name: full, group, shape });
        let id = self.tensors.len() - 1;
        self.groups[group].tensors.push(id);
        id
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = LayoutBuilder { tensors: Vec::new(), groups: Vec::new() };

        let g = b.group(GroupKind::TokenEmbedding);
        let tok_emb = b.tensor(g, "weight", (cfg.vocab, d));
        let g = b.group(GroupKind::PositionEmbedding);
        let pos_emb = b.tensor(g, "weight", (cfg.max_seq_len, d));
        let g = b.group(GroupKind::SegmentEmbedding);
        let seg_emb = b.tensor(g, "weight", (NUM_SEGMENT_KINDS, d));

        let g = b.group(GroupKind::TimeEmbedding);
        let time_w1 = b.tensor(g, "w1", (TIME_FREQ_DIM, d));
        let time_b1 = b.tensor(g, "b1", (1, d));
        let time_w2 = b.tensor(g, "w2", (d, d));
        let time_b2 = b.tensor(g, "b2", (1, d));

        let g = b.group(GroupKind::GenInput);
        let gen_in_w = b.tensor(g, "weight", (GEN_TOKEN_DIM, d));
        let gen_in_b = b.tensor(g, "bias", (1, d));

        let g = b.group(GroupKind::UndEncoder);
        let und_patch_w = b.tensor(g, "weight", (UND_PATCH_DIM, cfg.d_und_feature));
        let und_patch_b = b.tensor(g, "bias", (1, cfg.d_und_feature));
        let g = b.group(GroupKind::UndImageInput);
        let und_in_w = b.tensor(g, "weight", (cfg.d_und_feature, d));

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let mut pair = [LayerIdx { norm1: 0, wqkv: 0, wo: 0, norm2: 0, w_up: 0, w_down: 0 }; 2];
            for expert in Expert::ALL {
                let grp = |b: &mut LayoutBuilder, role| b.group(GroupKind::Layer { layer, expert, role });
                let g = grp(&mut b, LayerRole::Norm1);
                let norm1 = b.tensor(g, "gain", (1, d));
                let g = grp(&mut b, LayerRole::Qkv);
                let wqkv = b.tensor(g, "weight", (d, 3 * d));
                let g = grp(&mut b, LayerRole::AttnOut);
                let wo = b.tensor(g, "weight", (d, d));
                let g = grp(&mut b, LayerRole::Norm2);
                let norm2 = b.tensor(g, "gain", (1, d));
                let g = grp(&mut b, LayerRole::Ffn);
                let w_up = b.tensor(g, "up", (d, cfg.ffn_hidden));
                let w_down = b.tensor(g, "down", (cfg.ffn_hidden, d));
                pair[expert.index()] = LayerIdx { norm1, wqkv, wo, norm2, w_up, w_down };
            }
            layers.push(pair);
        }

        let g = b.group(GroupKind::LmHead);
        let lm_norm = b.tensor(g, "norm", (1, d));
        let lm_head = b.tensor(g, "weight", (d, cfg.vocab));
        let g = b.group(GroupKind::VelocityHead);
        let vel_norm = b.tensor(g, "norm", (1, d));
        let vel_head = b.tensor(g, "weight", (d, GEN_TOKEN_DIM));
        let g = b.group(GroupKind::Metaquery);
        let metaquery = b.tensor(g, "embedding", (cfg.num_metaqueries, d));

        ParamLayout {
            tensors: b.tensors,
            groups: b.groups,
            index: ParamIndex {
                tok_emb,
                pos_emb,
                seg_emb,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                gen_in_w,
                gen_in_b,
                und_patch_w,
                und_patch_b,
                und_in_w,
                lm_norm,
                lm_head,
                vel_norm,
                vel_head,
                metaquery,
                layers,
            },
        }
    }

    pub fn group_by_name(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.0 * t.shape.1).sum()
    }

    pub fn zeros(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| Array2::zeros(t.shape)).collect()
    }
}

/// Closed-form parameter count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let per_layer_expert = 2 * d + 3 * d * d + d * d + 2 * d * cfg.ffn_hidden;
    2 * cfg.n_layers * per_layer_expert
        + cfg.vocab * d
        + cfg.max_seq_len * d
        + NUM_SEGMENT_KINDS * d
        + (TIME_FREQ_DIM * d + d + d * d + d)
        + (GEN_TOKEN_DIM * d + d)
        + (UND_PATCH_DIM * cfg.d_und_feature + cfg.d_und_feature)
        + cfg.d_und_feature * d
        + (d + d * cfg.vocab)
        + (d + d * GEN_TOKEN_DIM)
        + cfg.num_metaqueries * d
}

/// Rounds every value to the nearest `f32` when the config asks for 32-bit storage.
pub fn quantize(tensors: &mut [Array2<f64>], precision: Precision) {
    if precision == Precision::F32 {
        for t in tensors {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

pub(super) fn init_tensors(cfg: &ModelConfig, layout: &ParamLayout, seed_value: u64) -> Vec<Array2<f64>> {
    let mut out = layout.zeros();
    let idx = &layout.index;
    let d = cfg.d_model as f64;
    let mut zero_init = vec![false; layout.tensors.len()];
    let mut ones = vec![false; layout.tensors.len()];
    for pair in &idx.layers {
        for l in pair {
            zero_init[l.wo] = true;
            zero_init[l.w_down] = true;
            ones[l.norm1] = true;
            ones[l.norm2] = true;
        }
    }
    for i in [idx.time_b1, idx.time_b2, idx.gen_in_b, idx.und_patch_b] {
        zero_init[i] = true;
    }
    ones[idx.lm_norm] = true;
    ones[idx.vel_norm] = true;
    let embeddings = [idx.tok_emb, idx.pos_emb, idx.seg_emb, idx.metaquery];

    for (i, info) in layout.tensors.iter().enumerate() {
        if zero_init[i] {
            continue;
        }
        if ones[i] {
            out[i].fill(1.0);
            continue;
        }
        let bound = if embeddings.contains(&i) {
            (3.0 / d).sqrt()
        } else {
            (3.0 / info.shape.0 as f64).sqrt()
        };
        let mut rng = seed::rng(seed::derive_str(seed_value, &info.name));
        out[i].mapv_inplace(|_| rng.random_range(-bound..bound));
    }
    quantize(&mut out, cfg.precision);
    out
}
