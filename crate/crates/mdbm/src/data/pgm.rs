//! Binary PGM/PPM image dumps (no imaging dependency, bit-exact output).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Binary P5 graymap.
pub fn write_pgm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::layout(format!(
            "write_pgm: {} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Binary P6 pixmap (RGB interleaved).
pub fn write_ppm(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::layout(format!(
            "write_ppm: {} bytes for {width}x{height} rgb",
            rgb.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

/// Tile same-sized grayscale images into one PGM grid with 1px separators.
pub fn write_pgm_grid(
    path: &Path,
    images: &[Vec<u8>],
    width: usize,
    height: usize,
    columns: usize,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::layout("write_pgm_grid: no images".to_string()));
    }
    let cols = columns.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let gw = cols * (width + 1) - 1;
    let gh = rows * (height + 1) - 1;
    let mut grid = vec![64u8; gw * gh];
    for (i, img) in images.iter().enumerate() {
        if img.len() != width * height {
            return Err(Error::layout(format!(
                "write_pgm_grid: image {i} has {} pixels, expected {}",
                img.len(),
                width * height
            )));
        }
        let (r, c) = (i / cols, i % cols);
        let (oy, ox) = (r * (height + 1), c * (width + 1));
        for y in 0..height {
            for x in 0..width {
                grid[(oy + y) * gw + ox + x] = img[y * width + x];
            }
        }
    }
    write_pgm(path, &grid, gw, gh)
}
