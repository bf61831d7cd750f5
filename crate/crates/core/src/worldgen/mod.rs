//! Procedural micro-world: scenes, rendering, latent codec, captions, edits.

pub mod edit;
pub mod image;
pub mod scene;
pub mod text;
pub mod vocab;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use edit::{parse_instruction, sample_edit, EditCommand, EditOp, EditPair};
pub use image::{
    cell_core, cell_support, decode_pixels, decode_probe, encode_latent, nearest_object, probe_threshold, render_scene,
    scene_latent, CellReading, Latent, PixelImage, ProbeReading,
};
pub use scene::{sample_scene, Color, Object, Scene, Shape};
pub use text::{caption_scene, paraphrase_caption, parse_caption, token_overlap};
pub use vocab::{detokenize, tokenize, TokenSeq};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("token id {0} outside the vocabulary")]
    UnknownId(u32),
    #[error("cannot parse `{0}`")]
    Parse(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io: {0}")]
    Io(String),
}

/// One line of a dataset manifest. Latents are regenerated on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestRecord {
    Scene { seed: u64, scene: Scene },
    Edit { seed: u64, edit: EditPair },
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), WorldError> {
    let io = |e: std::io::Error| WorldError::Io(e.to_string());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| WorldError::Io(e.to_string()))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, WorldError> {
    let io = |e: std::io::Error| WorldError::Io(e.to_string());
    let f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| WorldError::Parse(format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
