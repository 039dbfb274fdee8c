//! Binary PGM (P5) and PPM (P6) writers for kernel mosaics and panels.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", width, height)?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), 3 * width * height);
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", width, height)?;
    f.write_all(rgb)?;
    Ok(())
}

/// Min-max normalize a 2-D tensor slice to 8-bit gray. A constant input maps
/// to mid-gray.
pub fn to_gray8<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let data = t.data();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in data {
        lo = lo.min(v.to_f64());
        hi = hi.max(v.to_f64());
    }
    if !(hi > lo) {
        return vec![128; data.len()];
    }
    data.iter()
        .map(|&v| (((v.to_f64() - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Tile equally sized gray images into a mosaic with 1-pixel separators.
pub fn tile_mosaic(tiles: &[Vec<u8>], tile_w: usize, tile_h: usize, columns: usize) -> (usize, usize, Vec<u8>) {
    let columns = columns.max(1);
    let rows = tiles.len().div_ceil(columns);
    let width = columns * tile_w + columns - 1;
    let height = rows * tile_h + rows - 1;
    let mut out = vec![255u8; width * height];
    for (i, tile) in tiles.iter().enumerate() {
        let (r, c) = (i / columns, i % columns);
        let (y0, x0) = (r * (tile_h + 1), c * (tile_w + 1));
        for y in 0..tile_h {
            let dst = (y0 + y) * width + x0;
            out[dst..dst + tile_w].copy_from_slice(&tile[y * tile_w..(y + 1) * tile_w]);
        }
    }
    (width, height, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_normalization() {
        let t = Tensor::<f32>::from_vec(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(to_gray8(&t), vec![0, 128, 255]);
        let flat = Tensor::<f32>::full(vec![4], 3.0);
        assert_eq!(to_gray8(&flat), vec![128; 4]);
    }

    #[test]
    fn mosaic_dimensions() {
        let tiles = vec![vec![0u8; 4]; 3];
        let (w, h, data) = tile_mosaic(&tiles, 2, 2, 2);
        assert_eq!((w, h), (5, 5));
        assert_eq!(data.len(), 25);
    }
}
