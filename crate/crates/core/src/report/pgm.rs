//! Plain (P2) PGM image-grid output: no codec dependency, viewable
//! everywhere.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::ImageGrid;

const SEPARATOR_GRAY: u8 = 128;

/// Render a grid as plain PGM: tiles in row-major order, 1-pixel gray
/// separators between tiles, values in [0, 1] scaled to 0..255.
pub fn write_pgm_grid(grid: &ImageGrid, path: &Path) -> Result<()> {
    std::fs::write(path, render_pgm(grid)?)?;
    Ok(())
}

pub fn render_pgm(grid: &ImageGrid) -> Result<String> {
    let side = grid.side;
    if grid.images.len() != grid.rows * grid.cols {
        return Err(Error::InvalidArgument(format!(
            "{} images for a {}x{} grid",
            grid.images.len(),
            grid.rows,
            grid.cols
        )));
    }
    for img in &grid.images {
        if img.len() != side * side {
            return Err(Error::InvalidArgument(format!(
                "image has {} pixels, expected {}",
                img.len(),
                side * side
            )));
        }
        if img.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("pixel value outside [0, 1]".into()));
        }
    }

    let height = grid.rows * side + grid.rows.saturating_sub(1);
    let width = grid.cols * side + grid.cols.saturating_sub(1);
    let mut canvas = vec![SEPARATOR_GRAY; height * width];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let img = &grid.images[r * grid.cols + c];
            let top = r * (side + 1);
            let left = c * (side + 1);
            for y in 0..side {
                for x in 0..side {
                    canvas[(top + y) * width + left + x] =
                        (img[y * side + x] * 255.0).round() as u8;
                }
            }
        }
    }

    let mut out = String::new();
    writeln!(out, "P2").expect("string write");
    writeln!(out, "{width} {height}").expect("string write");
    writeln!(out, "255").expect("string write");
    for row in canvas.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).expect("string write");
    }
    Ok(out)
}
