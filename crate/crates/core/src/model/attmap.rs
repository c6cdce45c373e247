//! Rendering attention weights as images and raw CSV.

use std::fs;
use std::path::{Path, PathBuf};

use super::AttentionMaps;
use crate::dataio::GrayImage;
use crate::error::{Result, SimicError};

/// Nearest-neighbour resize of a row-major `gh × gw` grid to `oh × ow`.
pub fn upsample_nearest(grid: &[f64], gh: usize, gw: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let gy = y * gh / oh;
        for x in 0..ow {
            out.push(grid[gy * gw + x * gw / ow]);
        }
    }
    out
}

/// Linear min-max rescale to `[0, 255]`; a constant map becomes mid-gray.
pub fn rescale_to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes one `<stem>_head<i>.pgm` per head, upsampled to the input size,
/// and `<stem>.csv` with the raw weights. Returns the written paths.
pub fn export_attention_map(
    maps: &AttentionMaps,
    input_size: (usize, usize),
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let (ih, iw) = input_size;
    let mut written = Vec::with_capacity(maps.heads + 1);
    for h in 0..maps.heads {
        let up = upsample_nearest(maps.head(h), maps.grid_h, maps.grid_w, ih, iw);
        let img = GrayImage::new(iw, ih, rescale_to_gray(&up))?;
        let path = dir.join(format!("{stem}_head{h}.pgm"));
        img.write(&path)?;
        written.push(path);
    }
    let mut csv = String::from("head,row,col,weight\n");
    for h in 0..maps.heads {
        for (i, w) in maps.head(h).iter().enumerate() {
            csv.push_str(&format!("{},{},{},{:?}\n", h, i / maps.grid_w, i % maps.grid_w, w));
        }
    }
    let path = dir.join(format!("{stem}.csv"));
    fs::write(&path, csv).map_err(|e| SimicError::io(&path, e))?;
    written.push(path);
    Ok(written)
}
