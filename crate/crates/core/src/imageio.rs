//! Raw little-endian f32 grids with JSON sidecars, and 8-bit PNG encoding.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Sidecar describing a raw grid file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub endianness: String,
}

impl GridSidecar {
    pub fn f32(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            dtype: "f32".into(),
            endianness: "little".into(),
        }
    }
}

pub fn encode_f32_grid(img: &Array2<f32>) -> Vec<u8> {
    img.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32_grid(bytes: &[u8], height: usize, width: usize) -> Result<Array2<f32>> {
    if bytes.len() != height * width * 4 {
        return Err(invalid(format!(
            "grid has {} bytes, expected {} for {height}x{width} f32",
            bytes.len(),
            height * width * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((height, width), data).expect("length checked"))
}

pub fn write_f32_grid(path: &Path, img: &Array2<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_f32_grid(img)).map_err(|e| Error::io(path, e))
}

pub fn read_f32_grid(path: &Path, height: usize, width: usize) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32_grid(&bytes, height, width)
}

/// Writes `<path>` plus `<path>.json` sidecar.
pub fn write_f32_grid_with_sidecar(path: &Path, img: &Array2<f32>) -> Result<()> {
    write_f32_grid(path, img)?;
    let (h, w) = img.dim();
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&GridSidecar::f32(h, w))?)
        .map_err(|e| Error::io(&side, e))
}

pub fn read_f32_grid_with_sidecar(path: &Path) -> Result<Array2<f32>> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: GridSidecar = serde_json::from_slice(&text)?;
    if meta.dtype != "f32" || meta.endianness != "little" {
        return Err(invalid(format!(
            "unsupported grid encoding {}/{}",
            meta.dtype, meta.endianness
        )));
    }
    read_f32_grid(path, meta.height, meta.width)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(data).expect("in-memory png data");
    }
    out
}

/// 8-bit grayscale PNG after a window/level mapping `[level - window/2, level + window/2] → [0, 255]`.
pub fn gray_png(img: &Array2<f32>, window: f32, level: f32) -> Vec<u8> {
    let (h, w) = img.dim();
    let lo = level - window / 2.0;
    let data: Vec<u8> = img
        .iter()
        .map(|&v| (((v - lo) / window).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode_png(w, h, png::ColorType::Grayscale, &data)
}

/// Jet-like color map on `[0, 1]`.
pub fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f32| ((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Color-mapped RGBA PNG whose alpha follows the value, for overlay use.
pub fn heatmap_png(heat: &Array2<f32>, max_alpha: f32) -> Vec<u8> {
    let (h, w) = heat.dim();
    let mut data = Vec::with_capacity(h * w * 4);
    for &v in heat.iter() {
        let [r, g, b] = colormap(v);
        data.extend_from_slice(&[
            r,
            g,
            b,
            (v.clamp(0.0, 1.0) * max_alpha * 255.0).round() as u8,
        ]);
    }
    encode_png(w, h, png::ColorType::Rgba, &data)
}

/// Opaque color-mapped RGB preview.
pub fn heatmap_preview_png(heat: &Array2<f32>) -> Vec<u8> {
    let (h, w) = heat.dim();
    let data: Vec<u8> = heat.iter().flat_map(|&v| colormap(v)).collect();
    encode_png(w, h, png::ColorType::Rgb, &data)
}
