//! Forward pass and hand-written reverse pass.
//!
//! Positions are processed in an internal order with all understanding-expert
//! rows first and generation-expert rows after, so each expert's projections
//! run as one matrix product over a contiguous block. The attention mask is
//! permuted to match; outputs are reported in the sample's original order.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};

use super::params::{ParamIndex, ParamLayout, TIME_FREQ_DIM};
use super::{route_expert, vision_targets, Expert, ModelConfig, ModelError, ModelState};
use crate::packing::{PackedSample, SegmentKind, UND_PATCHES};
use crate::worldgen::image::{GEN_TOKENS, GEN_TOKEN_DIM};

pub const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// One row per entry of `sample.caption_targets`.
    pub caption_logits: Array2<f64>,
    /// `16 x 16` velocity prediction over generation tokens.
    pub velocity: Option<Array2<f64>>,
    /// `N x d_model` normalized metaquery output states.
    pub metaquery_states: Option<Array2<f64>>,
    /// Residual stream before the first layer and after each layer, original order.
    pub hidden: Vec<Array2<f64>>,
}

/// Upstream gradients for each output head.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub caption_logits: Option<Array2<f64>>,
    pub velocity: Option<Array2<f64>>,
    pub metaquery_states: Option<Array2<f64>>,
}

struct LayerTape {
    x_in: Array2<f64>,
    r1: Array1<f64>,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    x_mid: Array2<f64>,
    r2: Array1<f64>,
    h2: Array2<f64>,
    up: Array2<f64>,
    th: Array2<f64>,
    act: Array2<f64>,
}

struct HeadTape {
    rows: Vec<usize>,
    x: Array2<f64>,
    r: Array1<f64>,
    h: Array2<f64>,
}

/// Activations retained for the reverse pass.
pub struct Tape {
    perm: Vec<usize>,
    n_und: usize,
    kinds: Vec<SegmentKind>,
    locals: Vec<usize>,
    tokens: Vec<u32>,
    und_image: Option<(Array2<f64>, Array2<f64>)>,
    gen_input: Option<Array2<f64>>,
    time: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
    layers: Vec<LayerTape>,
    caption: Option<HeadTape>,
    velocity: Option<HeadTape>,
    metaquery: Option<HeadTape>,
}

fn sinusoid(t: f64) -> Array2<f64> {
    let half = TIME_FREQ_DIM / 2;
    let mut s = Array2::zeros((1, TIME_FREQ_DIM));
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        s[[0, k]] = arg.sin();
        s[[0, half + k]] = arg.cos();
    }
    s
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let sg = 1.0 / (1.0 + (-x).exp());
    sg * (1.0 + x * (1.0 - sg))
}

fn fast_tanh(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

/// Inner tanh of the GELU approximation.
fn gelu_tanh(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + 0.044715 * x * x * x))
}

fn gelu_grad(x: f64, th: f64) -> f64 {
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn rms_rows(x: ArrayView2<f64>, gain: &Array2<f64>, mut h: ArrayViewMut2<f64>, r: &mut [f64]) {
    let d = x.ncols() as f64;
    for (i, row) in x.rows().into_iter().enumerate() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let rr = (ms + NORM_EPS).sqrt();
        r[i] = rr;
        for (j, v) in row.iter().enumerate() {
            h[[i, j]] = gain[[0, j]] * v / rr;
        }
    }
}

fn rms_rows_back(
    x: ArrayView2<f64>,
    r: &[f64],
    dh: ArrayView2<f64>,
    gain: &Array2<f64>,
    dgain: &mut Array2<f64>,
    mut dx: ArrayViewMut2<f64>,
) {
    let d = x.ncols();
    for i in 0..x.nrows() {
        let rr = r[i];
        let mut dot = 0.0;
        for j in 0..d {
            let g = dh[[i, j]];
            dgain[[0, j]] += g * x[[i, j]] / rr;
            dot += gain[[0, j]] * g * x[[i, j]];
        }
        let coef = dot / (d as f64 * rr * rr * rr);
        for j in 0..d {
            dx[[i, j]] += gain[[0, j]] * dh[[i, j]] / rr - x[[i, j]] * coef;
        }
    }
}

/// RMS norm with per-expert gains over the split row blocks.
fn split_rms(x: &Array2<f64>, n_und: usize, gains: [&Array2<f64>; 2]) -> (Array2<f64>, Array1<f64>) {
    let n = x.nrows();
    let mut h = Array2::zeros(x.dim());
    let mut r = Array1::zeros(n);
    let rs = r.as_slice_mut().expect("contiguous");
    let (ru, rg) = rs.split_at_mut(n_und);
    rms_rows(x.slice(s![..n_und, ..]), gains[0], h.slice_mut(s![..n_und, ..]), ru);
    rms_rows(x.slice(s![n_und.., ..]), gains[1], h.slice_mut(s![n_und.., ..]), rg);
    (h, r)
}

fn split_rms_back(
    x: &Array2<f64>,
    r: &Array1<f64>,
    dh: &Array2<f64>,
    n_und: usize,
    gains: [&Array2<f64>; 2],
    dgains: [&mut Array2<f64>; 2],
    dx: &mut Array2<f64>,
) {
    let rs = r.as_slice().expect("contiguous");
    let [du, dg] = dgains;
    rms_rows_back(
        x.slice(s![..n_und, ..]),
        &rs[..n_und],
        dh.slice(s![..n_und, ..]),
        gains[0],
        du,
        dx.slice_mut(s![..n_und, ..]),
    );
    rms_rows_back(
        x.slice(s![n_und.., ..]),
        &rs[n_und..],
        dh.slice(s![n_und.., ..]),
        gains[1],
        dg,
        dx.slice_mut(s![n_und.., ..]),
    );
}

fn split_linear(x: &Array2<f64>, n_und: usize, w: [&Array2<f64>; 2]) -> Array2<f64> {
    let mut y = Array2::zeros((x.nrows(), w[0].ncols()));
    if n_und > 0 {
        general_mat_mul(1.0, &x.slice(s![..n_und, ..]), w[0], 0.0, &mut y.slice_mut(s![..n_und, ..]));
    }
    if n_und < x.nrows() {
        general_mat_mul(1.0, &x.slice(s![n_und.., ..]), w[1], 0.0, &mut y.slice_mut(s![n_und.., ..]));
    }
    y
}

/// Accumulates weight gradients and returns the input gradient.
fn split_linear_back(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    n_und: usize,
    w: [&Array2<f64>; 2],
    dw: [&mut Array2<f64>; 2],
) -> Array2<f64> {
    let n = x.nrows();
    let mut dx = Array2::zeros(x.dim());
    let [dwu, dwg] = dw;
    if n_und > 0 {
        let (xu, dyu) = (x.slice(s![..n_und, ..]), dy.slice(s![..n_und, ..]));
        general_mat_mul(1.0, &xu.t(), &dyu, 1.0, dwu);
        general_mat_mul(1.0, &dyu, &w[0].t(), 0.0, &mut dx.slice_mut(s![..n_und, ..]));
    }
    if n_und < n {
        let (xg, dyg) = (x.slice(s![n_und.., ..]), dy.slice(s![n_und.., ..]));
        general_mat_mul(1.0, &xg.t(), &dyg, 1.0, dwg);
        general_mat_mul(1.0, &dyg, &w[1].t(), 0.0, &mut dx.slice_mut(s![n_und.., ..]));
    }
    dx
}

/// Two distinct mutable borrows from the gradient list.
fn pair_mut(v: &mut [Array2<f64>], a: usize, b: usize) -> [&mut Array2<f64>; 2] {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        [&mut lo[a], &mut hi[0]]
    } else {
        let (lo, hi) = v.split_at_mut(a);
        [&mut hi[0], &mut lo[b]]
    }
}

fn gather(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

fn head_forward(x: &Array2<f64>, rows: Vec<usize>, gain: &Array2<f64>) -> HeadTape {
    let xs = gather(x, &rows);
    let mut h = Array2::zeros(xs.dim());
    let mut r = vec![0.0; rows.len()];
    rms_rows(xs.view(), gain, h.view_mut(), &mut r);
    HeadTape { rows, x: xs, r: Array1::from(r), h }
}

fn validate(cfg: &ModelConfig, sample: &PackedSample) -> Result<(), ModelError> {
    let n = sample.len();
    let shape = |m: String| Err(ModelError::Shape(m));
    if n > cfg.max_seq_len {
        return shape(format!("sequence length {n} exceeds max_seq_len {}", cfg.max_seq_len));
    }
    if sample.token_ids.len() != n || sample.mask.len() != n {
        return shape("token ids or mask do not match the layout length".into());
    }
    let mut seen = [false; 5];
    for seg in sample.layout.segments() {
        if std::mem::replace(&mut seen[seg.kind.index()], true) {
            return shape(format!("more than one {} segment", seg.kind.name()));
        }
        match seg.kind {
            SegmentKind::GenImage => {
                let ok = seg.len == GEN_TOKENS
                    && sample.gen_tokens.as_ref().is_some_and(|g| g.dim() == (GEN_TOKENS, GEN_TOKEN_DIM));
                if !ok {
                    return shape("gen_image segment needs 16 latent tokens of width 16".into());
                }
            }
            SegmentKind::UndImage => {
                if seg.len != UND_PATCHES || sample.und_patches.is_none() {
                    return shape("und_image segment needs 16 image patches".into());
                }
            }
            SegmentKind::Metaquery => {
                if seg.len > cfg.num_metaqueries {
                    return shape(format!(
                        "{} metaquery positions but the table holds {}",
                        seg.len, cfg.num_metaqueries
                    ));
                }
            }
            SegmentKind::CondText | SegmentKind::SupCaption => {
                if sample.token_ids[seg.range()].iter().any(|&t| t as usize >= cfg.vocab) {
                    return shape("token id outside the vocabulary".into());
                }
            }
        }
    }
    for &(p, t) in &sample.caption_targets {
        let kind = sample.layout.position_kinds().get(p).copied();
        if kind != Some(SegmentKind::SupCaption) || t as usize >= cfg.vocab {
            return shape(format!("caption target at position {p} is not inside a caption segment"));
        }
    }
    Ok(())
}

pub fn forward(state: &ModelState, sample: &PackedSample) -> Result<(ForwardOutputs, Tape), ModelError> {
    forward_with(&state.cfg, &state.layout, &state.params, sample)
}

pub fn forward_with(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    p: &[Array2<f64>],
    sample: &PackedSample,
) -> Result<(ForwardOutputs, Tape), ModelError> {
    validate(cfg, sample)?;
    let idx: &ParamIndex = &layout.index;
    let n = sample.len();
    let d = cfg.d_model;
    let orig_kinds = sample.layout.position_kinds();
    let orig_locals = sample.layout.local_positions();

    let mut perm: Vec<usize> = (0..n).filter(|&i| route_expert(orig_kinds[i]) == Expert::Und).collect();
    let n_und = perm.len();
    perm.extend((0..n).filter(|&i| route_expert(orig_kinds[i]) == Expert::Gen));
    let mut inv = vec![0; n];
    for (r, &o) in perm.iter().enumerate() {
        inv[o] = r;
    }
    let kinds: Vec<SegmentKind> = perm.iter().map(|&o| orig_kinds[o]).collect();
    let locals: Vec<usize> = perm.iter().map(|&o| orig_locals[o]).collect();
    let tokens: Vec<u32> = perm.iter().map(|&o| sample.token_ids[o]).collect();
    let mut mask = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            mask[r * n + c] = sample.mask.get(perm[r], perm[c]);
        }
    }

    // Input embeddings.
    let und_image = sample.und_patches.as_ref().filter(|_| sample.layout.find(SegmentKind::UndImage).is_some()).map(|patches| {
        let feats = super::und_features(p, idx, patches);
        (patches.clone(), feats)
    });
    let und_tokens = und_image.as_ref().map(|(_, f)| f.dot(&p[idx.und_in_w]));
    let has_gen = sample.layout.find(SegmentKind::GenImage).is_some();
    let (gen_input, time, gen_tokens) = if has_gen {
        let xt = sample.gen_tokens.as_ref().expect("validated").clone();
        let s_t = sinusoid(sample.t());
        let h1 = s_t.dot(&p[idx.time_w1]) + &p[idx.time_b1];
        let a1 = h1.mapv(silu);
        let temb = a1.dot(&p[idx.time_w2]) + &p[idx.time_b2];
        let g = xt.dot(&p[idx.gen_in_w]) + &p[idx.gen_in_b] + &temb;
        (Some(xt), Some((s_t, h1, a1)), Some(g))
    } else {
        (None, None, None)
    };

    let mut x = Array2::zeros((n, d));
    for r in 0..n {
        let mut row = x.row_mut(r);
        row.assign(&p[idx.pos_emb].row(locals[r]));
        row += &p[idx.seg_emb].row(kinds[r].index());
        match kinds[r] {
            SegmentKind::CondText | SegmentKind::SupCaption => row += &p[idx.tok_emb].row(tokens[r] as usize),
            SegmentKind::UndImage => row += &und_tokens.as_ref().expect("validated").row(locals[r]),
            SegmentKind::GenImage => row += &gen_tokens.as_ref().expect("validated").row(locals[r]),
            SegmentKind::Metaquery => row += &p[idx.metaquery].row(locals[r]),
        }
    }

    let mut hidden_internal = vec![x.clone()];
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for lp in &idx.layers {
        let [u, g] = lp;
        let x_in = x;
        let (h1, r1) = split_rms(&x_in, n_und, [&p[u.norm1], &p[g.norm1]]);
        let qkv = split_linear(&h1, n_und, [&p[u.wqkv], &p[g.wqkv]]);
        let mut attn = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = qkv.slice(s![.., hd * dh..(hd + 1) * dh]);
            let k = qkv.slice(s![.., d + hd * dh..d + (hd + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + hd * dh..2 * d + (hd + 1) * dh]);
            let mut sc = q.dot(&k.t());
            for r in 0..n {
                let row = &mut sc.row_mut(r);
                let mrow = &mask[r * n..(r + 1) * n];
                let mut mx = f64::NEG_INFINITY;
                for c in 0..n {
                    if mrow[c] {
                        mx = mx.max(row[c] * scale);
                    }
                }
                let mut sum = 0.0;
                for c in 0..n {
                    if mrow[c] {
                        let e = (row[c] * scale - mx).exp();
                        row[c] = e;
                        sum += e;
                    } else {
                        row[c] = 0.0;
                    }
                }
                if sum > 0.0 {
                    for c in 0..n {
                        row[c] /= sum;
                    }
                }
            }
            general_mat_mul(1.0, &sc, &v, 0.0, &mut attn.slice_mut(s![.., hd * dh..(hd + 1) * dh]));
            probs.push(sc);
        }
        let x_mid = &x_in + &split_linear(&attn, n_und, [&p[u.wo], &p[g.wo]]);
        let (h2, r2) = split_rms(&x_mid, n_und, [&p[u.norm2], &p[g.norm2]]);
        let up = split_linear(&h2, n_und, [&p[u.w_up], &p[g.w_up]]);
        let th = up.mapv(gelu_tanh);
        let act = ndarray::Zip::from(&up).and(&th).map_collect(|&x, &t| 0.5 * x * (1.0 + t));
        x = &x_mid + &split_linear(&act, n_und, [&p[u.w_down], &p[g.w_down]]);
        hidden_internal.push(x.clone());
        layers.push(LayerTape { x_in, r1, h1, qkv, probs, attn, x_mid, r2, h2, up, th, act });
    }

    // Output heads.
    let caption = if sample.caption_targets.is_empty() {
        None
    } else {
        let rows = sample.caption_targets.iter().map(|&(pos, _)| inv[pos]).collect();
        Some(head_forward(&x, rows, &p[idx.lm_norm]))
    };
    let caption_logits = caption
        .as_ref()
        .map(|h| h.h.dot(&p[idx.lm_head]))
        .unwrap_or_else(|| Array2::zeros((0, cfg.vocab)));

    let velocity_tape = has_gen.then(|| head_forward(&x, (n_und..n).collect(), &p[idx.vel_norm]));
    let velocity = velocity_tape.as_ref().map(|h| h.h.dot(&p[idx.vel_head]));

    let metaquery = sample.layout.find(SegmentKind::Metaquery).map(|seg| {
        let rows = seg.range().map(|o| inv[o]).collect();
        head_forward(&x, rows, &p[idx.lm_norm])
    });
    let metaquery_states = metaquery.as_ref().map(|h| h.h.clone());

    let hidden = hidden_internal.iter().map(|h| h.select(Axis(0), &inv)).collect();
    let outputs = ForwardOutputs { caption_logits, velocity, metaquery_states, hidden };
    let tape = Tape {
        perm,
        n_und,
        kinds,
        locals,
        tokens,
        und_image,
        gen_input,
        time,
        layers,
        caption,
        velocity: velocity_tape,
        metaquery,
    };
    Ok((outputs, tape))
}

fn head_backward(
    tape: &HeadTape,
    dh: &Array2<f64>,
    gain: &Array2<f64>,
    dgain: &mut Array2<f64>,
    dx: &mut Array2<f64>,
) {
    let mut dxs = Array2::zeros(tape.x.dim());
    rms_rows_back(tape.x.view(), tape.r.as_slice().expect("contiguous"), dh.view(), gain, dgain, dxs.view_mut());
    for (i, &r) in tape.rows.iter().enumerate() {
        let mut row = dx.row_mut(r);
        row += &dxs.row(i);
    }
}

/// Reverse pass: gradients of `<grads, outputs>` with respect to every tensor.
pub fn backward(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    p: &[Array2<f64>],
    tape: &Tape,
    grads: &OutputGrads,
) -> Vec<Array2<f64>> {
    let mut gr = layout.zeros();
    backward_into(cfg, layout, p, tape, grads, &mut gr);
    gr
}

/// Like [`backward`], accumulating into an existing gradient buffer.
pub fn backward_into(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    p: &[Array2<f64>],
    tape: &Tape,
    grads: &OutputGrads,
    gr: &mut [Array2<f64>],
) {
    let idx = &layout.index;
    let n = tape.perm.len();
    let d = cfg.d_model;
    let n_und = tape.n_und;
    let mut dx = Array2::<f64>::zeros((n, d));

    if let (Some(h), Some(dl)) = (&tape.caption, &grads.caption_logits) {
        general_mat_mul(1.0, &h.h.t(), dl, 1.0, &mut gr[idx.lm_head]);
        let dh = dl.dot(&p[idx.lm_head].t());
        head_backward(h, &dh, &p[idx.lm_norm], &mut gr[idx.lm_norm], &mut dx);
    }
    if let (Some(h), Some(dv)) = (&tape.velocity, &grads.velocity) {
        general_mat_mul(1.0, &h.h.t(), dv, 1.0, &mut gr[idx.vel_head]);
        let dh = dv.dot(&p[idx.vel_head].t());
        head_backward(h, &dh, &p[idx.vel_norm], &mut gr[idx.vel_norm], &mut dx);
    }
    if let (Some(h), Some(dm)) = (&tape.metaquery, &grads.metaquery_states) {
        head_backward(h, dm, &p[idx.lm_norm], &mut gr[idx.lm_norm], &mut dx);
    }

    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for (lp, lt) in idx.layers.iter().zip(&tape.layers).rev() {
        let [u, g] = lp;
        // feed-forward branch
        let d_act = split_linear_back(&lt.act, &dx, n_und, [&p[u.w_down], &p[g.w_down]], pair_mut(gr, u.w_down, g.w_down));
        let mut d_up = d_act;
        ndarray::Zip::from(&mut d_up).and(&lt.up).and(&lt.th).for_each(|g, &x, &t| *g *= gelu_grad(x, t));
        let d_h2 = split_linear_back(&lt.h2, &d_up, n_und, [&p[u.w_up], &p[g.w_up]], pair_mut(gr, u.w_up, g.w_up));
        let mut d_mid = dx;
        split_rms_back(
            &lt.x_mid,
            &lt.r2,
            &d_h2,
            n_und,
            [&p[u.norm2], &p[g.norm2]],
            pair_mut(gr, u.norm2, g.norm2),
            &mut d_mid,
        );
        // attention branch
        let d_attn = split_linear_back(&lt.attn, &d_mid, n_und, [&p[u.wo], &p[g.wo]], pair_mut(gr, u.wo, g.wo));
        let mut d_qkv = Array2::<f64>::zeros((n, 3 * d));
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let q = lt.qkv.slice(s![.., cols.clone()]);
            let k = lt.qkv.slice(s![.., d + cols.start..d + cols.end]);
            let v = lt.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
            let pr = &lt.probs[hd];
            let d_o = d_attn.slice(s![.., cols.clone()]);
            // dV = P^T dO
            general_mat_mul(1.0, &pr.t(), &d_o, 0.0, &mut d_qkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]));
            let mut d_s = d_o.dot(&v.t());
            for r in 0..n {
                let prow = pr.row(r);
                let mut drow = d_s.row_mut(r);
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for c in 0..n {
                    drow[c] = prow[c] * (drow[c] - dot) * scale;
                }
            }
            general_mat_mul(1.0, &d_s, &k, 0.0, &mut d_qkv.slice_mut(s![.., cols.clone()]));
            general_mat_mul(1.0, &d_s.t(), &q, 0.0, &mut d_qkv.slice_mut(s![.., d + cols.start..d + cols.end]));
        }
        let d_h1 = split_linear_back(&lt.h1, &d_qkv, n_und, [&p[u.wqkv], &p[g.wqkv]], pair_mut(gr, u.wqkv, g.wqkv));
        split_rms_back(
            &lt.x_in,
            &lt.r1,
            &d_h1,
            n_und,
            [&p[u.norm1], &p[g.norm1]],
            pair_mut(gr, u.norm1, g.norm1),
            &mut d_mid,
        );
        dx = d_mid;
    }

    // Input embeddings.
    let mut d_und_tok: Option<Array2<f64>> = tape.und_image.as_ref().map(|_| Array2::zeros((UND_PATCHES, d)));
    let mut d_gen: Option<Array2<f64>> = tape.gen_input.as_ref().map(|_| Array2::zeros((GEN_TOKENS, d)));
    for r in 0..n {
        let row = dx.row(r);
        let mut pe = gr[idx.pos_emb].row_mut(tape.locals[r]);
        pe += &row;
        let mut se = gr[idx.seg_emb].row_mut(tape.kinds[r].index());
        se += &row;
        match tape.kinds[r] {
            SegmentKind::CondText | SegmentKind::SupCaption => {
                let mut te = gr[idx.tok_emb].row_mut(tape.tokens[r] as usize);
                te += &row;
            }
            SegmentKind::UndImage => {
                let mut t = d_und_tok.as_mut().expect("und rows imply und tape").row_mut(tape.locals[r]);
                t += &row;
            }
            SegmentKind::GenImage => {
                let mut t = d_gen.as_mut().expect("gen rows imply gen tape").row_mut(tape.locals[r]);
                t += &row;
            }
            SegmentKind::Metaquery => {
                let mut m = gr[idx.metaquery].row_mut(tape.locals[r]);
                m += &row;
            }
        }
    }
    if let (Some((patches, feats)), Some(du)) = (&tape.und_image, &d_und_tok) {
        general_mat_mul(1.0, &feats.t(), du, 1.0, &mut gr[idx.und_in_w]);
        let d_feat = du.dot(&p[idx.und_in_w].t());
        general_mat_mul(1.0, &patches.t(), &d_feat, 1.0, &mut gr[idx.und_patch_w]);
        let mut b = gr[idx.und_patch_b].row_mut(0);
        b += &d_feat.sum_axis(Axis(0));
    }
    if let (Some(xt), Some(dg), Some((s_t, h1, a1))) = (&tape.gen_input, &d_gen, &tape.time) {
        general_mat_mul(1.0, &xt.t(), dg, 1.0, &mut gr[idx.gen_in_w]);
        let d_temb = dg.sum_axis(Axis(0)).insert_axis(Axis(0));
        {
            let mut b = gr[idx.gen_in_b].row_mut(0);
            b += &d_temb.row(0);
        }
        general_mat_mul(1.0, &a1.t(), &d_temb, 1.0, &mut gr[idx.time_w2]);
        {
            let mut b = gr[idx.time_b2].row_mut(0);
            b += &d_temb.row(0);
        }
        let d_a1 = d_temb.dot(&p[idx.time_w2].t());
        let d_h1 = &d_a1 * &h1.mapv(silu_grad);
        general_mat_mul(1.0, &s_t.t(), &d_h1, 1.0, &mut gr[idx.time_w1]);
        let mut b = gr[idx.time_b1].row_mut(0);
        b += &d_h1.row(0);
    }
}

/// Vision targets computed with the state's current encoder.
pub fn sample_vision_targets(state: &ModelState, sample: &PackedSample) -> Option<Array2<f64>> {
    let n = sample.layout.find(SegmentKind::Metaquery)?.len;
    let patches = sample.target_patches.as_ref()?;
    Some(vision_targets(&state.params, state.index(), patches, n))
}
