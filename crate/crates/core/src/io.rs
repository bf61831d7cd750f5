//! Small file-format helpers shared by the pipeline.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, data: &[u8]) -> Result<(), String> {
    let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| e.to_string())?;
    writer.write_image_data(data).map_err(|e| e.to_string())
}

pub fn write_png_gray(path: &Path, w: u32, h: u32, data: &[u8]) -> Result<(), String> {
    write_png(path, w, h, png::ColorType::Grayscale, data)
}

/// Interleaved 8-bit RGB.
pub fn write_png_rgb(path: &Path, w: u32, h: u32, data: &[u8]) -> Result<(), String> {
    write_png(path, w, h, png::ColorType::Rgb, data)
}

/// Nearest-neighbour upscale of an interleaved RGB buffer.
pub fn upscale_rgb(data: &[u8], w: usize, h: usize, scale: usize) -> Vec<u8> {
    let mut out = vec![0u8; w * h * scale * scale * 3];
    for y in 0..h * scale {
        for x in 0..w * scale {
            let src = ((y / scale) * w + x / scale) * 3;
            let dst = (y * w * scale + x) * 3;
            out[dst..dst + 3].copy_from_slice(&data[src..src + 3]);
        }
    }
    out
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(tmp, path)
}
