use std::path::Path;

use image::{GenericImageView, GrayImage, RgbImage};

use super::{read_gray, read_rgb, save_gray, save_rgb, SamplePair};
use crate::error::{Error, Result};

/// Top-left corners `(row, col, y, x)` of the aligned tiles, row-major.
/// Trailing pixels that do not fill a whole tile are dropped.
pub fn tile_grid(height: usize, width: usize, tile: usize, stride: usize) -> Result<Vec<(usize, usize, usize, usize)>> {
    if tile == 0 || stride == 0 {
        return Err(Error::Config("tile size and stride must be positive".into()));
    }
    if tile > height.min(width) {
        return Err(Error::Config(format!(
            "tile size {tile} exceeds image extent {height}x{width}"
        )));
    }
    let rows = (height - tile) / stride + 1;
    let cols = (width - tile) / stride + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((r, c, r * stride, c * stride));
        }
    }
    Ok(out)
}

pub type TilePieces = (String, RgbImage, RgbImage, GrayImage);

/// Cuts three aligned rasters into tiles suffixed `_r{row}_c{col}`.
pub fn tile_images(
    id: &str,
    a: &RgbImage,
    b: &RgbImage,
    mask: &GrayImage,
    tile: usize,
    stride: usize,
) -> Result<Vec<TilePieces>> {
    if a.dimensions() != b.dimensions() || a.dimensions() != mask.dimensions() {
        return Err(Error::Data(format!(
            "sample {id}: raster extents differ ({:?}, {:?}, {:?})",
            a.dimensions(),
            b.dimensions(),
            mask.dimensions()
        )));
    }
    let (w, h) = a.dimensions();
    let t = tile as u32;
    tile_grid(h as usize, w as usize, tile, stride)?
        .into_iter()
        .map(|(r, c, y, x)| {
            let (x, y) = (x as u32, y as u32);
            Ok((
                format!("{id}_r{r}_c{c}"),
                a.view(x, y, t, t).to_image(),
                b.view(x, y, t, t).to_image(),
                mask.view(x, y, t, t).to_image(),
            ))
        })
        .collect()
}

/// Tiles a resolved pair into `out_dir/{a,b,mask}/<tile id>.png`; the
/// returned entries are relative to `out_dir`.
pub fn tile(pair: &SamplePair, tile_size: usize, stride: usize, out_dir: &Path) -> Result<Vec<SamplePair>> {
    let a = read_rgb(&pair.image_a)?;
    let b = read_rgb(&pair.image_b)?;
    let m = read_gray(&pair.mask)?;
    super::mask_from_gray(&m).map_err(|e| Error::Data(format!("sample {}: {e}", pair.id)))?;
    let mut out = Vec::new();
    for (id, ta, tb, tm) in tile_images(&pair.id, &a, &b, &m, tile_size, stride)? {
        let entry = SamplePair {
            image_a: Path::new("a").join(format!("{id}.png")),
            image_b: Path::new("b").join(format!("{id}.png")),
            mask: Path::new("mask").join(format!("{id}.png")),
            id,
        };
        save_rgb(&ta, &out_dir.join(&entry.image_a))?;
        save_rgb(&tb, &out_dir.join(&entry.image_b))?;
        save_gray(&tm, &out_dir.join(&entry.mask))?;
        out.push(entry);
    }
    Ok(out)
}
