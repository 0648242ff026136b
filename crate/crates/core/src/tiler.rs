//! Overlapping patch geometry, extraction and overlap-averaged fusion, plus
//! the bicubic upsampler used to bring the low-resolution reference to the
//! target grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Axis, Error, Result};
use crate::grid::LatentGrid;

/// Axis-aligned patch rectangle in grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }
}

/// Window/stride tiling of a grid. `rects` are enumerated row-major by
/// `(top, left)`; that order is the canonical fusion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub rects: Vec<Rect>,
}

impl PatchLayout {
    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn patches_per_axis(&self) -> (usize, usize) {
        (
            (self.grid_h - self.win_h) / self.stride_h + 1,
            (self.grid_w - self.win_w) / self.stride_w + 1,
        )
    }

    /// Number of rectangles covering each cell, row-major.
    pub fn cover_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.grid_h * self.grid_w];
        for r in &self.rects {
            for row in r.top..r.top + r.height {
                for c in &mut counts[row * self.grid_w + r.left..row * self.grid_w + r.left + r.width]
                {
                    *c += 1;
                }
            }
        }
        counts
    }
}

fn check_axis(axis: Axis, grid: usize, win: usize, stride: usize) -> Result<()> {
    if win == 0 || win > grid {
        return Err(Error::Geometry {
            axis,
            message: format!("window {win} must be in 1..={grid}"),
        });
    }
    if stride == 0 {
        return Err(Error::Geometry {
            axis,
            message: "stride must be at least 1".into(),
        });
    }
    if (grid - win) % stride != 0 {
        let hint = suggest_stride(grid, win, stride)
            .map(|s| format!("; nearest valid stride is {s}"))
            .unwrap_or_default();
        return Err(Error::Geometry {
            axis,
            message: format!(
                "grid {grid} minus window {win} is not divisible by stride {stride}{hint}"
            ),
        });
    }
    Ok(())
}

/// Closest stride `s >= 1` with `(grid - win) % s == 0`, preferring the
/// smaller one on ties. `None` if the window does not fit.
pub fn suggest_stride(grid: usize, win: usize, stride: usize) -> Option<usize> {
    if win == 0 || win > grid {
        return None;
    }
    let span = grid - win;
    if span == 0 {
        return Some(stride.max(1));
    }
    (1..=span)
        .filter(|s| span % s == 0)
        .min_by_key(|&s| (s.abs_diff(stride), s))
}

/// Tiles a `grid_h x grid_w` grid with `win` windows every `stride` cells.
/// The span `grid - win` must be an exact multiple of the stride on both axes.
pub fn plan_patches(
    grid_h: usize,
    grid_w: usize,
    win_h: usize,
    win_w: usize,
    stride_h: usize,
    stride_w: usize,
) -> Result<PatchLayout> {
    check_axis(Axis::Height, grid_h, win_h, stride_h)?;
    check_axis(Axis::Width, grid_w, win_w, stride_w)?;
    let ny = (grid_h - win_h) / stride_h + 1;
    let nx = (grid_w - win_w) / stride_w + 1;
    let rects = (0..ny)
        .flat_map(|i| (0..nx).map(move |j| (i, j)))
        .map(|(i, j)| Rect {
            top: i * stride_h,
            left: j * stride_w,
            height: win_h,
            width: win_w,
        })
        .collect();
    Ok(PatchLayout {
        grid_h,
        grid_w,
        win_h,
        win_w,
        stride_h,
        stride_w,
        rects,
    })
}

pub fn extract_patch(g: &LatentGrid, rect: Rect) -> Result<LatentGrid> {
    if rect.height == 0
        || rect.width == 0
        || rect.top + rect.height > g.height()
        || rect.left + rect.width > g.width()
    {
        return Err(invalid(format!(
            "patch {rect:?} outside grid {}x{}",
            g.height(),
            g.width()
        )));
    }
    let c = g.channels();
    let mut data = Vec::with_capacity(rect.height * rect.width * c);
    for row in rect.top..rect.top + rect.height {
        let start = g.offset(row, rect.left, 0);
        data.extend_from_slice(&g.data()[start..start + rect.width * c]);
    }
    LatentGrid::from_vec(rect.height, rect.width, c, data)
}

/// Averages overlapping patches back onto the full grid. Contributions are
/// folded in canonical rect order, so the result is bit-reproducible.
pub fn fuse_patches(patches: &[LatentGrid], layout: &PatchLayout) -> Result<LatentGrid> {
    if patches.len() != layout.len() {
        return Err(invalid(format!(
            "fuse_patches: {} patches for a layout of {}",
            patches.len(),
            layout.len()
        )));
    }
    let channels = patches.first().map(|p| p.channels()).unwrap_or(1);
    for (i, p) in patches.iter().enumerate() {
        if p.height() != layout.win_h || p.width() != layout.win_w || p.channels() != channels {
            return Err(invalid(format!(
                "fuse_patches: patch {i} is {:?}, expected {}x{}x{channels}",
                p.shape(),
                layout.win_h,
                layout.win_w
            )));
        }
    }
    let counts = layout.cover_counts();
    if let Some(cell) = counts.iter().position(|&n| n == 0) {
        return Err(invalid(format!(
            "fuse_patches: cell ({}, {}) is not covered",
            cell / layout.grid_w,
            cell % layout.grid_w
        )));
    }
    // Running mean in canonical order: after the k-th covering patch a cell
    // holds the average of the first k contributions. Identical contributions
    // therefore reproduce their value exactly.
    let mut acc = LatentGrid::zeros(layout.grid_h, layout.grid_w, channels);
    let mut seen = vec![0u32; counts.len()];
    for (p, r) in patches.iter().zip(&layout.rects) {
        for dr in 0..r.height {
            for dc in 0..r.width {
                let cell = (r.top + dr) * layout.grid_w + r.left + dc;
                seen[cell] += 1;
                let k = seen[cell] as f64;
                let dst = cell * channels;
                let src = p.offset(dr, dc, 0);
                for ch in 0..channels {
                    let mean = &mut acc.data_mut()[dst + ch];
                    let v = p.data()[src + ch];
                    if seen[cell] == 1 {
                        *mean = v;
                    } else {
                        *mean += (v - *mean) / k;
                    }
                }
            }
        }
    }
    Ok(acc)
}

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn keys_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for every output position along one axis, with
/// half-pixel centers and clamp-to-edge indexing.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let offset = k as i64 - 1;
                let i = (base as i64 + offset).clamp(0, in_len as i64 - 1);
                idx[k] = i as usize;
                w[k] = keys_kernel(frac - offset as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic upsampling to `out_h x out_w`. Downscaling is rejected.
pub fn bicubic_upsample(g: &LatentGrid, out_h: usize, out_w: usize) -> Result<LatentGrid> {
    let (h, w, c) = g.shape();
    if out_h < h || out_w < w {
        return Err(invalid(format!(
            "bicubic_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);

    // Horizontal pass: h x out_w.
    let mut mid = LatentGrid::zeros(h, out_w, c);
    for r in 0..h {
        for (oc, (idx, wt)) in cols.iter().enumerate() {
            for ch in 0..c {
                let v = (0..4).map(|k| wt[k] * g.get(r, idx[k], ch)).sum();
                mid.set(r, oc, ch, v);
            }
        }
    }
    let mut out = LatentGrid::zeros(out_h, out_w, c);
    for (or, (idx, wt)) in rows.iter().enumerate() {
        for oc in 0..out_w {
            for ch in 0..c {
                let v = (0..4).map(|k| wt[k] * mid.get(idx[k], oc, ch)).sum();
                out.set(or, oc, ch, v);
            }
        }
    }
    Ok(out)
}
