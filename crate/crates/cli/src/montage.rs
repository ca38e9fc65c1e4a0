//! Slice-grid figures: one row per anatomical plane, one column per volume.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use image::{GrayImage, Luma};
use volsynth::volume_io::NiftiImage;

/// Planes in row order: axial (fixed L), coronal (fixed W), sagittal (fixed H).
pub const PLANES: [&str; 3] = ["axial", "coronal", "sagittal"];

const GAP: u32 = 2;

/// Central slice of the first channel of `img` in `plane`, as rows of
/// values, oriented so that the first index runs down the image.
fn central_slice(img: &NiftiImage, plane: usize) -> Vec<Vec<f64>> {
    let [h, w, l, c] = img.dims;
    let at = |i: usize, j: usize, k: usize| img.data[((i * w + j) * l + k) * c];
    match plane {
        0 => (0..h).map(|i| (0..w).map(|j| at(i, j, l / 2)).collect()).collect(),
        1 => (0..l).rev().map(|k| (0..h).map(|i| at(i, w / 2, k)).collect()).collect(),
        _ => (0..l).rev().map(|k| (0..w).map(|j| at(h / 2, j, k)).collect()).collect(),
    }
}

/// Render volumes side by side. Each volume is min-max scaled on its own;
/// slices are enlarged by nearest-neighbour `scale` with axial voxel
/// spacing taken into account along the depth axis.
pub fn render(images: &[NiftiImage], scale: u32) -> Result<GrayImage> {
    ensure!(!images.is_empty(), "montage needs at least one volume");
    ensure!(scale >= 1, "scale must be >= 1");
    let mut cells: Vec<Vec<(Vec<Vec<u8>>, u32)>> = vec![Vec::new(); 3];
    for img in images {
        let (lo, hi) = img
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let depth_stretch = ((img.spacing[2] / img.spacing[0]).round() as u32).max(1);
        for (p, row) in cells.iter_mut().enumerate() {
            let s = central_slice(img, p);
            let px = s
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
                        .collect()
                })
                .collect();
            row.push((px, if p == 0 { 1 } else { depth_stretch }));
        }
    }
    let cell_w = |c: &(Vec<Vec<u8>>, u32)| c.0[0].len() as u32 * scale;
    let cell_h = |c: &(Vec<Vec<u8>>, u32)| c.0.len() as u32 * scale * c.1;
    let col_w: Vec<u32> = (0..images.len())
        .map(|j| cells.iter().map(|r| cell_w(&r[j])).max().unwrap_or(0))
        .collect();
    let row_h: Vec<u32> = cells
        .iter()
        .map(|r| r.iter().map(cell_h).max().unwrap_or(0))
        .collect();
    let width = col_w.iter().sum::<u32>() + GAP * (images.len() as u32 - 1);
    let height = row_h.iter().sum::<u32>() + GAP * 2;
    let mut out = GrayImage::from_pixel(width, height, Luma([0]));
    let mut y0 = 0;
    for (p, row) in cells.iter().enumerate() {
        let mut x0 = 0;
        for (j, (px, stretch)) in row.iter().enumerate() {
            let sy = scale * stretch;
            for (r, line) in px.iter().enumerate() {
                for (c, &v) in line.iter().enumerate() {
                    for dy in 0..sy {
                        for dx in 0..scale {
                            out.put_pixel(x0 + c as u32 * scale + dx, y0 + r as u32 * sy + dy, Luma([v]));
                        }
                    }
                }
            }
            x0 += col_w[j] + GAP;
        }
        y0 += row_h[p] + GAP;
    }
    Ok(out)
}

pub fn write_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use volsynth::volume_io::NiftiDtype;

    fn cube(dims: [usize; 4], f: impl Fn(usize, usize, usize) -> f64) -> NiftiImage {
        let [h, w, l, _] = dims;
        let mut data = Vec::new();
        for i in 0..h {
            for j in 0..w {
                for k in 0..l {
                    data.push(f(i, j, k));
                }
            }
        }
        NiftiImage { dims, spacing: [1.0, 1.0, 2.0], dtype: NiftiDtype::F32, data }
    }

    #[test]
    fn grid_size_follows_planes_and_columns() {
        let a = cube([8, 6, 4, 1], |i, _, _| i as f64);
        let img = render(&[a.clone(), a], 2).unwrap();
        // Widest cell per column: axial/sagittal 6 or coronal 8 wide, times 2.
        assert_eq!(img.width(), 16 * 2 + GAP);
        // Rows: axial 8, coronal and sagittal 4 slices stretched by spacing 2.
        assert_eq!(img.height(), (8 + 8 + 8) * 2 + 2 * GAP);
    }

    #[test]
    fn intensities_are_rescaled() {
        let a = cube([4, 4, 2, 1], |i, _, _| 10.0 + i as f64);
        let img = render(&[a], 1).unwrap();
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(0, 3)[0], 255);
    }
}
