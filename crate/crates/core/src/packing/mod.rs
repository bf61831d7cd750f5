//! Packed training sequences: layouts, attention masks, flow-matching noising.

pub mod layout;
pub mod mask;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layout::{IntraRule, Segment, SegmentKind, SegmentLayout};
pub use mask::{build_mask, mask_oracle, AttnMask, MaskToggles};

use crate::seed;
use crate::worldgen::image::{GEN_TOKENS, GEN_TOKEN_DIM, IMAGE_SIZE};
use crate::worldgen::vocab::{BOS, EOS, PAD};
use crate::worldgen::{
    caption_scene, paraphrase_caption, render_scene, scene_latent, EditPair, PixelImage, Scene, TokenSeq,
};

pub const UND_PATCH: usize = 4;
pub const UND_PATCHES: usize = (IMAGE_SIZE / UND_PATCH) * (IMAGE_SIZE / UND_PATCH);
pub const UND_PATCH_DIM: usize = 3 * UND_PATCH * UND_PATCH;

pub const T_MIN: f64 = 1e-4;
pub const T_MAX: f64 = 1.0 - 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackError {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackConfig {
    pub num_metaqueries: usize,
    pub max_seq_len: usize,
    pub timestep_shift: f64,
    /// Supervise with a paraphrase instead of the conditioning prompt.
    pub augment: bool,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig { num_metaqueries: 16, max_seq_len: 128, timestep_shift: 4.0, augment: true }
    }
}

/// One training (or inference) sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedSample {
    pub layout: SegmentLayout,
    pub toggles: MaskToggles,
    pub mask: AttnMask,
    /// Token id per position; PAD outside text segments.
    pub token_ids: Vec<u32>,
    /// Raster-ordered 4x4 pixel patches of the source image (und_image segment).
    pub und_patches: Option<Array2<f64>>,
    /// Noised latent tokens x_t (gen_image segment).
    pub gen_tokens: Option<Array2<f64>>,
    /// Clean latent tokens x0.
    pub clean_tokens: Option<Array2<f64>>,
    /// Velocity target u* = eps - x0.
    pub velocity_target: Option<Array2<f64>>,
    /// (position, next token) pairs for the supervision caption.
    pub caption_targets: Vec<(usize, u32)>,
    /// Patches of the clean target image; the frozen encoder turns them into vision targets.
    pub target_patches: Option<Array2<f64>>,
    pub seed: u64,
}

impl PackedSample {
    pub fn len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t(&self) -> f64 {
        self.layout.t
    }

    pub fn mask_matches_oracle(&self) -> bool {
        self.mask == mask_oracle(&self.layout, &self.toggles)
    }
}

/// Raster-ordered 4x4 patches; patch (r, c) is row `4r + c`, features (channel, dy, dx).
pub fn image_patches(img: &PixelImage) -> Array2<f64> {
    let per_side = IMAGE_SIZE / UND_PATCH;
    let mut out = Array2::zeros((UND_PATCHES, UND_PATCH_DIM));
    for r in 0..per_side {
        for c in 0..per_side {
            for ch in 0..3 {
                for dy in 0..UND_PATCH {
                    for dx in 0..UND_PATCH {
                        out[[r * per_side + c, ch * 16 + dy * UND_PATCH + dx]] =
                            img.get(ch, r * UND_PATCH + dy, c * UND_PATCH + dx);
                    }
                }
            }
        }
    }
    out
}

/// `t = s u / (1 + (s - 1) u)`, clamped away from 0 and 1. `t = 1` is pure noise.
pub fn shift_timestep(u: f64, shift: f64) -> f64 {
    (shift * u / (1.0 + (shift - 1.0) * u)).clamp(T_MIN, T_MAX)
}

/// Closed-form CDF of the shifted timestep for uniform `u`.
pub fn shifted_cdf(t: f64, shift: f64) -> f64 {
    t / (shift - (shift - 1.0) * t)
}

pub fn sample_timestep(seed_value: u64, shift: f64) -> Result<f64, PackError> {
    if !(shift > 0.0) {
        return Err(PackError::Layout(format!("timestep shift must be positive, got {shift}")));
    }
    let u: f64 = seed::rng_for(seed_value, "timestep").random();
    Ok(shift_timestep(u, shift))
}

pub fn standard_normal(rows: usize, cols: usize, seed_value: u64) -> Array2<f64> {
    let mut rng = seed::rng_for(seed_value, "normal");
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// `x_t = (1 - t) x0 + t eps` and `u* = eps - x0`.
pub fn noise_with(x0: &Array2<f64>, eps: &Array2<f64>, t: f64) -> (Array2<f64>, Array2<f64>) {
    let xt = x0 * (1.0 - t) + eps * t;
    let u = eps - x0;
    (xt, u)
}

/// Noises latent tokens at time `t` with a seeded standard normal draw.
pub fn noise_latent(x0: &Array2<f64>, t: f64, seed_value: u64) -> (Array2<f64>, Array2<f64>) {
    let eps = standard_normal(x0.nrows(), x0.ncols(), seed_value);
    noise_with(x0, &eps, t)
}

/// Caption style mix used for stage-0 captioning: half canonical, the rest
/// split across the other caption templates and paraphrases.
pub fn pretrain_caption_text(scene: &Scene, seed_value: u64) -> TokenSeq {
    let mut rng = seed::rng_for(seed_value, "caption-style");
    let r: f64 = rng.random();
    if r < 0.5 {
        caption_scene(scene, 0).expect("template 0 exists")
    } else if r < 0.6 {
        caption_scene(scene, 1).expect("template 1 exists")
    } else if r < 0.7 {
        caption_scene(scene, 2).expect("template 2 exists")
    } else {
        paraphrase_caption(scene, seed::derive_str(seed_value, "caption-para"))
    }
}

/// A conditioning prompt drawn uniformly from the caption template bank.
pub fn sample_prompt(scene: &Scene, seed_value: u64) -> TokenSeq {
    let template = seed::rng_for(seed_value, "prompt").random_range(0..crate::worldgen::text::NUM_CAPTION_TEMPLATES);
    caption_scene(scene, template).expect("template in range")
}

struct Builder {
    parts: Vec<(SegmentKind, usize)>,
    token_ids: Vec<u32>,
    caption_targets: Vec<(usize, u32)>,
}

impl Builder {
    fn new() -> Self {
        Builder { parts: Vec::new(), token_ids: Vec::new(), caption_targets: Vec::new() }
    }

    fn pos(&self) -> usize {
        self.token_ids.len()
    }

    fn text(&mut self, kind: SegmentKind, ids: &[u32]) {
        self.parts.push((kind, ids.len()));
        self.token_ids.extend_from_slice(ids);
    }

    /// `[BOS, ids..., EOS]` with next-token targets at every position but the last.
    fn caption(&mut self, ids: &[u32]) {
        let start = self.pos();
        let mut seq = Vec::with_capacity(ids.len() + 2);
        seq.push(BOS);
        seq.extend_from_slice(ids);
        seq.push(EOS);
        for i in 0..seq.len() - 1 {
            self.caption_targets.push((start + i, seq[i + 1]));
        }
        self.text(SegmentKind::SupCaption, &seq);
    }

    fn filler(&mut self, kind: SegmentKind, len: usize) {
        self.parts.push((kind, len));
        self.token_ids.extend(std::iter::repeat_n(PAD, len));
    }

    fn finish(
        self,
        t: f64,
        toggles: MaskToggles,
        max_seq_len: usize,
        seed_value: u64,
    ) -> Result<PackedSample, PackError> {
        if self.token_ids.len() > max_seq_len {
            return Err(PackError::TooLong { len: self.token_ids.len(), max: max_seq_len });
        }
        let layout = SegmentLayout::from_lengths(&self.parts, toggles.metaquery_order, t)?;
        let mask = build_mask(&layout, &toggles);
        Ok(PackedSample {
            layout,
            toggles,
            mask,
            token_ids: self.token_ids,
            und_patches: None,
            gen_tokens: None,
            clean_tokens: None,
            velocity_target: None,
            caption_targets: self.caption_targets,
            target_patches: None,
            seed: seed_value,
        })
    }
}

struct Noised {
    t: f64,
    x0: Array2<f64>,
    xt: Array2<f64>,
    u: Array2<f64>,
}

fn noised_scene(scene: &Scene, seed_value: u64, shift: f64) -> Result<Noised, PackError> {
    let t = sample_timestep(seed::derive_str(seed_value, "t"), shift)?;
    let x0 = scene_latent(scene).to_tokens();
    let (xt, u) = noise_latent(&x0, t, seed::derive_str(seed_value, "eps"));
    Ok(Noised { t, x0, xt, u })
}

fn attach_gen(sample: &mut PackedSample, n: Noised) {
    sample.gen_tokens = Some(n.xt);
    sample.clean_tokens = Some(n.x0);
    sample.velocity_target = Some(n.u);
}

/// `[cond_text | gen_image(noised) | sup_caption | metaquery x N]`.
pub fn pack_t2i_uno(
    prompt: &TokenSeq,
    scene: &Scene,
    seed_value: u64,
    cfg: &PackConfig,
    toggles: &MaskToggles,
) -> Result<PackedSample, PackError> {
    let noised = noised_scene(scene, seed_value, cfg.timestep_shift)?;
    let sup = if cfg.augment {
        paraphrase_caption(scene, seed::derive_str(seed_value, "para"))
    } else {
        prompt.clone()
    };
    let mut b = Builder::new();
    b.text(SegmentKind::CondText, &prompt.ids);
    b.filler(SegmentKind::GenImage, GEN_TOKENS);
    b.caption(&sup.ids);
    b.filler(SegmentKind::Metaquery, cfg.num_metaqueries);
    let mut s = b.finish(noised.t, *toggles, cfg.max_seq_len, seed_value)?;
    attach_gen(&mut s, noised);
    s.target_patches = Some(image_patches(&render_scene(scene)));
    Ok(s)
}

/// `[instruction | und_image(source) | gen_image(noised target) | sup_caption | metaquery x N]`.
pub fn pack_edit_uno(
    pair: &EditPair,
    seed_value: u64,
    cfg: &PackConfig,
    toggles: &MaskToggles,
) -> Result<PackedSample, PackError> {
    let noised = noised_scene(&pair.target, seed_value, cfg.timestep_shift)?;
    let sup = if cfg.augment {
        paraphrase_caption(&pair.target, seed::derive_str(seed_value, "para"))
    } else {
        caption_scene(&pair.target, 0).expect("template 0 exists")
    };
    let mut b = Builder::new();
    b.text(SegmentKind::CondText, &pair.instruction.ids);
    b.filler(SegmentKind::UndImage, UND_PATCHES);
    b.filler(SegmentKind::GenImage, GEN_TOKENS);
    b.caption(&sup.ids);
    b.filler(SegmentKind::Metaquery, cfg.num_metaqueries);
    let mut s = b.finish(noised.t, *toggles, cfg.max_seq_len, seed_value)?;
    attach_gen(&mut s, noised);
    s.und_patches = Some(image_patches(&render_scene(&pair.source)));
    s.target_patches = Some(image_patches(&render_scene(&pair.target)));
    Ok(s)
}

/// Stage-0 captioning: `[und_image | caption]`, the caption reading the image.
pub fn pack_pretrain_caption(scene: &Scene, seed_value: u64, cfg: &PackConfig) -> Result<PackedSample, PackError> {
    let caption = pretrain_caption_text(scene, seed_value);
    pack_caption_with(scene, &caption, seed_value, cfg)
}

/// Captioning sample with an explicit caption.
pub fn pack_caption_with(
    scene: &Scene,
    caption: &TokenSeq,
    seed_value: u64,
    cfg: &PackConfig,
) -> Result<PackedSample, PackError> {
    let toggles = MaskToggles { sup_blocks_see_source: true, ..MaskToggles::default() };
    let mut b = Builder::new();
    b.filler(SegmentKind::UndImage, UND_PATCHES);
    b.caption(&caption.ids);
    let mut s = b.finish(0.5, toggles, cfg.max_seq_len, seed_value)?;
    s.und_patches = Some(image_patches(&render_scene(scene)));
    Ok(s)
}

/// Stage-0 generation: `[cond_text | gen_image(noised)]`.
pub fn pack_pretrain_t2i(
    prompt: &TokenSeq,
    scene: &Scene,
    seed_value: u64,
    cfg: &PackConfig,
) -> Result<PackedSample, PackError> {
    let noised = noised_scene(scene, seed_value, cfg.timestep_shift)?;
    let mut b = Builder::new();
    b.text(SegmentKind::CondText, &prompt.ids);
    b.filler(SegmentKind::GenImage, GEN_TOKENS);
    let mut s = b.finish(noised.t, MaskToggles::default(), cfg.max_seq_len, seed_value)?;
    attach_gen(&mut s, noised);
    Ok(s)
}

/// Stage-0 editing: `[instruction | und_image(source) | gen_image(noised target)]`.
pub fn pack_pretrain_edit(pair: &EditPair, seed_value: u64, cfg: &PackConfig) -> Result<PackedSample, PackError> {
    let noised = noised_scene(&pair.target, seed_value, cfg.timestep_shift)?;
    let mut b = Builder::new();
    b.text(SegmentKind::CondText, &pair.instruction.ids);
    b.filler(SegmentKind::UndImage, UND_PATCHES);
    b.filler(SegmentKind::GenImage, GEN_TOKENS);
    let mut s = b.finish(noised.t, MaskToggles::default(), cfg.max_seq_len, seed_value)?;
    attach_gen(&mut s, noised);
    s.und_patches = Some(image_patches(&render_scene(&pair.source)));
    Ok(s)
}

/// Inference layout `[cond_text | (und_image) | gen_image]` around the current `x_t`;
/// an empty prompt drops the text segment.
pub fn pack_inference(
    prompt: &TokenSeq,
    source: Option<&PixelImage>,
    xt: &Array2<f64>,
    t: f64,
    max_seq_len: usize,
) -> Result<PackedSample, PackError> {
    if xt.dim() != (GEN_TOKENS, GEN_TOKEN_DIM) {
        return Err(PackError::Layout(format!("expected {GEN_TOKENS}x{GEN_TOKEN_DIM} latent tokens")));
    }
    let mut b = Builder::new();
    if !prompt.is_empty() {
        b.text(SegmentKind::CondText, &prompt.ids);
    }
    if source.is_some() {
        b.filler(SegmentKind::UndImage, UND_PATCHES);
    }
    b.filler(SegmentKind::GenImage, GEN_TOKENS);
    let mut s = b.finish(t, MaskToggles::default(), max_seq_len, 0)?;
    s.gen_tokens = Some(xt.clone());
    s.und_patches = source.map(image_patches);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{sample_edit, sample_scene};

    fn cfg() -> PackConfig {
        PackConfig::default()
    }

    #[test]
    fn shift_examples() {
        assert!((shift_timestep(0.3, 1.0) - 0.3).abs() < 1e-15);
        assert!((shift_timestep(0.5, 4.0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shifted_median_and_ks_distance() {
        let n = 100_000;
        let mut ts: Vec<f64> = (0..n).map(|i| sample_timestep(i as u64, 4.0).unwrap()).collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ts[n / 2];
        assert!((median - 0.8).abs() < 0.01, "median {median}");
        let ks = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let f = shifted_cdf(t, 4.0);
                (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn noising_algebra() {
        let x0 = standard_normal(16, 16, 1);
        let eps = standard_normal(16, 16, 2);
        for t in [0.0, 0.2, 0.7, 1.0] {
            let (xt, u) = noise_with(&x0, &eps, t);
            let back_eps = &xt + &(&u * (1.0 - t));
            let back_x0 = &xt - &(&u * t);
            assert!((&back_eps - &eps).iter().all(|d| d.abs() < 1e-12));
            assert!((&back_x0 - &x0).iter().all(|d| d.abs() < 1e-12));
        }
        let (xt0, _) = noise_with(&x0, &eps, 0.0);
        assert_eq!(xt0, x0);
        let (xt1, _) = noise_with(&x0, &eps, 1.0);
        assert_eq!(xt1, eps);
    }

    #[test]
    fn t2i_layout_lengths() {
        let scene = sample_scene(3, 3).unwrap();
        let prompt = sample_prompt(&scene, 3);
        let s = pack_t2i_uno(&prompt, &scene, 3, &cfg(), &MaskToggles::default()).unwrap();
        let para = paraphrase_caption(&scene, seed::derive_str(3, "para"));
        let lens: Vec<usize> = s.layout.segments().iter().map(|s| s.len).collect();
        assert_eq!(lens, vec![prompt.len(), 16, para.len() + 2, 16]);
        assert!(s.mask_matches_oracle());
        // targets: first target is the first post-BOS token
        let cap = s.layout.find(SegmentKind::SupCaption).unwrap();
        assert_eq!(s.caption_targets[0], (cap.start, para.ids[0]));
        assert_eq!(s.caption_targets.last().unwrap().1, EOS);
    }

    #[test]
    fn no_augmentation_supervises_with_prompt() {
        let scene = sample_scene(5, 2).unwrap();
        let prompt = sample_prompt(&scene, 5);
        let c = PackConfig { augment: false, ..cfg() };
        let s = pack_t2i_uno(&prompt, &scene, 5, &c, &MaskToggles::default()).unwrap();
        let cap = s.layout.find(SegmentKind::SupCaption).unwrap();
        assert_eq!(&s.token_ids[cap.start + 1..cap.end() - 1], &prompt.ids[..]);
    }

    #[test]
    fn edit_layout_rules() {
        let scene = sample_scene(8, 3).unwrap();
        let pair = sample_edit(&scene, 8).unwrap();
        let s = pack_edit_uno(&pair, 8, &cfg(), &MaskToggles::default()).unwrap();
        let und = *s.layout.find(SegmentKind::UndImage).unwrap();
        let cap = *s.layout.find(SegmentKind::SupCaption).unwrap();
        let cond = *s.layout.find(SegmentKind::CondText).unwrap();
        for q in cap.range() {
            assert!(und.range().all(|k| !s.mask.get(q, k)));
        }
        for q in und.range() {
            assert!(cond.range().all(|k| s.mask.get(q, k)));
        }
        assert!(s.mask_matches_oracle());
    }

    #[test]
    fn pretrain_layouts() {
        let scene = sample_scene(2, 3).unwrap();
        let cap = pack_pretrain_caption(&scene, 2, &cfg()).unwrap();
        assert!(cap.layout.find(SegmentKind::Metaquery).is_none());
        let c = cap.layout.find(SegmentKind::SupCaption).unwrap();
        assert_eq!(cap.caption_targets[0].0, c.start);
        assert_eq!(cap.caption_targets[0].1, cap.token_ids[c.start + 1]);

        let prompt = sample_prompt(&scene, 2);
        let pre = pack_pretrain_t2i(&prompt, &scene, 2, &cfg()).unwrap();
        let uno = pack_t2i_uno(&prompt, &scene, 2, &cfg(), &MaskToggles::default()).unwrap();
        assert_eq!(pre.mask, uno.mask.leading(pre.len()));
        assert_eq!(pre.gen_tokens, uno.gen_tokens);
        assert_eq!(pre.t(), uno.t());
    }

    #[test]
    fn too_long_is_rejected() {
        let scene = sample_scene(2, 3).unwrap();
        let prompt = sample_prompt(&scene, 2);
        let c = PackConfig { max_seq_len: 20, ..cfg() };
        assert!(matches!(
            pack_t2i_uno(&prompt, &scene, 2, &c, &MaskToggles::default()),
            Err(PackError::TooLong { .. })
        ));
    }
}
