//! Rendering, the fixed latent codec, and the template probe.

use std::sync::OnceLock;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::scene::{sample_scene, Color, Object, Scene, Shape, NUM_CELLS};
use super::WorldError;

pub const IMAGE_SIZE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
pub const CELL_PIXELS: usize = 5;
pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = 8;
pub const LATENT_LEN: usize = LATENT_CHANNELS * LATENT_SIZE * LATENT_SIZE;
/// Generation tokens per image (4x4 grid of 2x2 latent patches).
pub const GEN_TOKENS: usize = 16;
pub const GEN_TOKEN_DIM: usize = LATENT_CHANNELS * 4;

const STATS_SCENES: u64 = 4096;

/// 3 x 16 x 16 image, channel-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage {
    pub pixels: Vec<f64>,
}

impl PixelImage {
    pub fn white() -> Self {
        PixelImage { pixels: vec![1.0; IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE] }
    }

    #[inline]
    pub fn idx(c: usize, y: usize, x: usize) -> usize {
        (c * IMAGE_SIZE + y) * IMAGE_SIZE + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[Self::idx(c, y, x)]
    }

    /// Interleaved 8-bit RGB, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                for c in 0..3 {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }
}

/// 4 x 8 x 8 normalized latent code, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub code: Vec<f64>,
}

impl Latent {
    pub fn zeros() -> Self {
        Latent { code: vec![0.0; LATENT_LEN] }
    }

    #[inline]
    pub fn idx(c: usize, y: usize, x: usize) -> usize {
        (c * LATENT_SIZE + y) * LATENT_SIZE + x
    }

    /// Patchifies into 16 tokens of dimension 16. Token `4r + c` covers latent
    /// rows `2r..2r+2` and columns `2c..2c+2`; within a token the layout is
    /// (channel, dy, dx).
    pub fn to_tokens(&self) -> Array2<f64> {
        let mut t = Array2::zeros((GEN_TOKENS, GEN_TOKEN_DIM));
        for r in 0..4 {
            for c in 0..4 {
                for ch in 0..LATENT_CHANNELS {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            t[[4 * r + c, ch * 4 + dy * 2 + dx]] =
                                self.code[Self::idx(ch, 2 * r + dy, 2 * c + dx)];
                        }
                    }
                }
            }
        }
        t
    }

    pub fn from_tokens(tokens: &Array2<f64>) -> Result<Self, WorldError> {
        if tokens.dim() != (GEN_TOKENS, GEN_TOKEN_DIM) {
            return Err(WorldError::Shape(format!(
                "expected {GEN_TOKENS}x{GEN_TOKEN_DIM} tokens, got {:?}",
                tokens.dim()
            )));
        }
        let mut code = vec![0.0; LATENT_LEN];
        for r in 0..4 {
            for c in 0..4 {
                for ch in 0..LATENT_CHANNELS {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            code[Self::idx(ch, 2 * r + dy, 2 * c + dx)] =
                                tokens[[4 * r + c, ch * 4 + dy * 2 + dx]];
                        }
                    }
                }
            }
        }
        Ok(Latent { code })
    }

    pub fn mse(&self, other: &Latent) -> f64 {
        self.code
            .iter()
            .zip(&other.code)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / LATENT_LEN as f64
    }
}

fn shape_mask(shape: Shape, y: usize, x: usize) -> bool {
    match shape {
        Shape::Square => true,
        // Ring: disc without corners, hollow 3x3 interior.
        Shape::Circle => {
            let corner = (y == 0 || y == 4) && (x == 0 || x == 4);
            let interior = (1..=3).contains(&y) && (1..=3).contains(&x);
            !corner && !interior
        }
        Shape::Triangle => match y {
            0 => x == 2,
            1 | 2 => (1..=3).contains(&x),
            _ => true,
        },
    }
}

/// Paints each object with its pure color into its 5x5 cell block; the rest
/// of the canvas is white.
pub fn render_scene(scene: &Scene) -> PixelImage {
    let mut img = PixelImage::white();
    for o in scene.objects() {
        paint_object(&mut img, o);
    }
    img
}

fn paint_object(img: &mut PixelImage, o: &Object) {
    let (row, col) = (o.cell as usize / 3, o.cell as usize % 3);
    let rgb = o.color.rgb();
    for y in 0..CELL_PIXELS {
        for x in 0..CELL_PIXELS {
            if shape_mask(o.shape, y, x) {
                let (py, px) = (row * CELL_PIXELS + y, col * CELL_PIXELS + x);
                for (c, v) in rgb.iter().enumerate() {
                    img.pixels[PixelImage::idx(c, py, px)] = *v;
                }
            }
        }
    }
}

/// Orthonormal-column channel map RGB -> 4 latent channels (columns 1..4 of
/// the normalized 4x4 Hadamard matrix).
const CHANNEL_MAP: [[f64; 3]; 4] = [
    [0.5, 0.5, 0.5],
    [-0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5],
    [-0.5, -0.5, 0.5],
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecStats {
    pub mean: [f64; LATENT_CHANNELS],
    pub std: [f64; LATENT_CHANNELS],
}

fn raw_encode(img: &PixelImage) -> Vec<f64> {
    let mut z = vec![0.0; LATENT_LEN];
    for y in 0..LATENT_SIZE {
        for x in 0..LATENT_SIZE {
            let mut pooled = [0.0; 3];
            for (c, p) in pooled.iter_mut().enumerate() {
                *p = (img.get(c, 2 * y, 2 * x)
                    + img.get(c, 2 * y, 2 * x + 1)
                    + img.get(c, 2 * y + 1, 2 * x)
                    + img.get(c, 2 * y + 1, 2 * x + 1))
                    * 0.25;
            }
            for (k, row) in CHANNEL_MAP.iter().enumerate() {
                z[Latent::idx(k, y, x)] = row[0] * pooled[0] + row[1] * pooled[1] + row[2] * pooled[2];
            }
        }
    }
    z
}

/// Per-channel affine normalization measured once over a fixed scene corpus.
pub fn codec_stats() -> &'static CodecStats {
    static STATS: OnceLock<CodecStats> = OnceLock::new();
    STATS.get_or_init(|| {
        let mut sum = [0.0; LATENT_CHANNELS];
        let mut sq = [0.0; LATENT_CHANNELS];
        let per = (LATENT_SIZE * LATENT_SIZE) as f64;
        for s in 0..STATS_SCENES {
            let scene = sample_scene(s ^ 0x5EED_C0DE, 3).expect("valid max_objects");
            let z = raw_encode(&render_scene(&scene));
            for k in 0..LATENT_CHANNELS {
                for v in &z[k * LATENT_SIZE * LATENT_SIZE..(k + 1) * LATENT_SIZE * LATENT_SIZE] {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
        }
        let n = STATS_SCENES as f64 * per;
        let mut mean = [0.0; LATENT_CHANNELS];
        let mut std = [0.0; LATENT_CHANNELS];
        for k in 0..LATENT_CHANNELS {
            mean[k] = sum[k] / n;
            std[k] = (sq[k] / n - mean[k] * mean[k]).max(1e-12).sqrt();
        }
        CodecStats { mean, std }
    })
}

pub fn encode_latent(img: &PixelImage) -> Latent {
    let stats = codec_stats();
    let mut code = raw_encode(img);
    for k in 0..LATENT_CHANNELS {
        for v in &mut code[k * LATENT_SIZE * LATENT_SIZE..(k + 1) * LATENT_SIZE * LATENT_SIZE] {
            *v = (*v - stats.mean[k]) / stats.std[k];
        }
    }
    Latent { code }
}

/// Least-squares inverse of the codec, upsampled back to 16x16 (for viewing).
pub fn decode_pixels(latent: &Latent) -> PixelImage {
    let stats = codec_stats();
    let mut img = PixelImage::white();
    for y in 0..LATENT_SIZE {
        for x in 0..LATENT_SIZE {
            let z: Vec<f64> = (0..LATENT_CHANNELS)
                .map(|k| latent.code[Latent::idx(k, y, x)] * stats.std[k] + stats.mean[k])
                .collect();
            for c in 0..3 {
                let v: f64 = (0..LATENT_CHANNELS).map(|k| CHANNEL_MAP[k][c] * z[k]).sum();
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    img.pixels[PixelImage::idx(c, 2 * y + dy, 2 * x + dx)] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

pub fn scene_latent(scene: &Scene) -> Latent {
    encode_latent(&render_scene(scene))
}

/// Latent rows/columns whose 2x2 pixel block lies entirely inside a cell row/column.
fn core_range(a: usize) -> std::ops::RangeInclusive<usize> {
    let lo = (CELL_PIXELS * a).div_ceil(2);
    let hi = (CELL_PIXELS * a + CELL_PIXELS - 2) / 2;
    lo..=hi
}

/// Latent rows/columns whose pixel block touches a cell row/column.
fn touch_range(a: usize) -> std::ops::RangeInclusive<usize> {
    let lo = CELL_PIXELS * a / 2;
    let hi = (CELL_PIXELS * a + CELL_PIXELS - 1) / 2;
    lo..=hi
}

/// Latent code indices fully determined by the cell's pixels.
pub fn cell_core(cell: u8) -> Vec<usize> {
    let (a, b) = (cell as usize / 3, cell as usize % 3);
    let mut out = Vec::new();
    for k in 0..LATENT_CHANNELS {
        for y in core_range(a) {
            for x in core_range(b) {
                out.push(Latent::idx(k, y, x));
            }
        }
    }
    out
}

/// Latent code indices influenced by any pixel of the cell.
pub fn cell_support(cell: u8) -> Vec<usize> {
    let (a, b) = (cell as usize / 3, cell as usize % 3);
    let mut out = Vec::new();
    for k in 0..LATENT_CHANNELS {
        for y in touch_range(a) {
            for x in touch_range(b) {
                out.push(Latent::idx(k, y, x));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellReading {
    Empty,
    Object { shape: Shape, color: Color },
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeReading {
    pub cells: [CellReading; NUM_CELLS],
}

impl ProbeReading {
    /// Scene of recognized objects; unknown cells are dropped.
    pub fn scene(&self) -> Scene {
        let objects = self
            .cells
            .iter()
            .enumerate()
            .filter_map(|(cell, r)| match *r {
                CellReading::Object { shape, color } => Some(Object { shape, color, cell: cell as u8 }),
                _ => None,
            })
            .collect();
        Scene::new(objects).expect("one object per cell")
    }

    pub fn unknown_cells(&self) -> Vec<u8> {
        (0..NUM_CELLS as u8)
            .filter(|&c| self.cells[c as usize] == CellReading::Unknown)
            .collect()
    }

    pub fn has_unknown(&self) -> bool {
        self.cells.contains(&CellReading::Unknown)
    }
}

struct ProbeTemplates {
    /// `cores[cell][kind]`, kind 0 = empty, 1 + kind_index otherwise.
    cores: Vec<Vec<Vec<f64>>>,
    tau: f64,
}

fn kind_of(k: usize) -> CellReading {
    if k == 0 {
        CellReading::Empty
    } else {
        let i = k - 1;
        CellReading::Object { shape: Shape::ALL[i / 4], color: Color::ALL[i % 4] }
    }
}

fn templates() -> &'static ProbeTemplates {
    static T: OnceLock<ProbeTemplates> = OnceLock::new();
    T.get_or_init(|| {
        let empty = scene_latent(&Scene::empty());
        let mut cores = Vec::with_capacity(NUM_CELLS);
        let mut min_dist = f64::INFINITY;
        for cell in 0..NUM_CELLS as u8 {
            let idx = cell_core(cell);
            let mut per_kind = vec![idx.iter().map(|&i| empty.code[i]).collect::<Vec<_>>()];
            for shape in Shape::ALL {
                for color in Color::ALL {
                    let scene = Scene::new(vec![Object { shape, color, cell }]).expect("valid");
                    let z = scene_latent(&scene);
                    per_kind.push(idx.iter().map(|&i| z.code[i]).collect());
                }
            }
            for a in 0..per_kind.len() {
                for b in a + 1..per_kind.len() {
                    min_dist = min_dist.min(dist(&per_kind[a], &per_kind[b]));
                }
            }
            cores.push(per_kind);
        }
        ProbeTemplates { cores, tau: 0.5 * min_dist }
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Probe acceptance radius: half the minimum pairwise template distance.
pub fn probe_threshold() -> f64 {
    templates().tau
}

/// Classifies every cell by its nearest template over the cell's core latent
/// entries; readings farther than the threshold come back `Unknown`.
pub fn decode_probe(latent: &Latent) -> ProbeReading {
    let t = templates();
    let mut cells = [CellReading::Empty; NUM_CELLS];
    for (cell, reading) in cells.iter_mut().enumerate() {
        let idx = cell_core(cell as u8);
        let v: Vec<f64> = idx.iter().map(|&i| latent.code[i]).collect();
        let (best, d) = t.cores[cell]
            .iter()
            .enumerate()
            .map(|(k, tpl)| (k, dist(&v, tpl)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        *reading = if d > t.tau { CellReading::Unknown } else { kind_of(best) };
    }
    ProbeReading { cells }
}

/// Forced-choice reading of one cell: the nearest object template, ignoring
/// the empty template and the acceptance radius.
pub fn nearest_object(latent: &Latent, cell: u8) -> (Shape, Color) {
    let t = templates();
    let v: Vec<f64> = cell_core(cell).iter().map(|&i| latent.code[i]).collect();
    let best = (1..t.cores[cell as usize].len())
        .map(|k| (k, dist(&v, &t.cores[cell as usize][k])))
        .fold((1, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
        .0;
    match kind_of(best) {
        CellReading::Object { shape, color } => (shape, color),
        _ => unreachable!("object templates only"),
    }
}
