//! 2D DFT over grid channels, Gaussian low-pass masks, and low-frequency
//! component swapping.
//!
//! Spectra use the unshifted layout: DC sits at `(0, 0)` and frequency
//! distances are wrap-aware, so no fftshift copies are ever made.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{invalid, Error, Result};
use crate::grid::LatentGrid;

/// Largest imaginary part tolerated when collapsing an inverse transform back
/// to real values, relative to `max(1, peak real magnitude)`.
pub const IMAG_RESIDUE_TOL: f64 = 1e-9;

/// Complex `height x width x channels` grid, row-major, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<Complex64>,
}

impl SpectralGrid {
    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid("spectral grid dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(invalid(format!(
                "spectral grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(invalid("non-finite spectral value"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, ch: usize) -> Complex64 {
        self.data[(u * self.width + v) * self.channels + ch]
    }

    fn plane(&self, ch: usize) -> Vec<Complex64> {
        self.data
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    fn set_plane(&mut self, ch: usize, plane: &[Complex64]) {
        for (dst, &src) in self.data.iter_mut().skip(ch).step_by(self.channels).zip(plane) {
            *dst = src;
        }
    }
}

/// Real-valued frequency weights in `[0, 1]`, laid out like a single channel
/// of a [`SpectralGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FrequencyMask {
    /// Builds a mask from `f(u, v)`. Values must lie in `[0, 1]`, the layout
    /// must be conjugate-symmetric and the DC weight must be 1.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("mask dimensions must be positive"));
        }
        let values: Vec<f64> = (0..height)
            .flat_map(|u| (0..width).map(move |v| (u, v)))
            .map(|(u, v)| f(u, v))
            .collect();
        let mask = Self {
            height,
            width,
            values,
        };
        if let Some(i) = mask.values.iter().position(|m| !(0.0..=1.0).contains(m)) {
            return Err(invalid(format!(
                "mask value {} at ({}, {}) outside [0, 1]",
                mask.values[i],
                i / width,
                i % width
            )));
        }
        for u in 0..height {
            for v in 0..width {
                let (cu, cv) = ((height - u) % height, (width - v) % width);
                if mask.get(u, v) != mask.get(cu, cv) {
                    return Err(invalid(format!(
                        "mask is not conjugate-symmetric at ({u}, {v})"
                    )));
                }
            }
        }
        if mask.get(0, 0) != 1.0 {
            return Err(invalid("mask DC weight must be 1"));
        }
        Ok(mask)
    }

    pub fn constant_one(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.width + v]
    }
}

/// Wrap-aware radial frequency of bin `(u, v)`, normalized so the Nyquist
/// corner `(H/2, W/2)` of an even-sized grid sits at exactly 1.
pub fn normalized_distance(u: usize, v: usize, height: usize, width: usize) -> f64 {
    let fu = u.min(height - u) as f64 / height as f64;
    let fv = v.min(width - v) as f64 / width as f64;
    (fu * fu + fv * fv).sqrt() * std::f64::consts::SQRT_2
}

/// `G[u, v] = exp(-D(u, v)^2 / (2 * d0^2))` with `D` from
/// [`normalized_distance`]. An infinite `d0` yields the all-ones mask.
pub fn gaussian_lowpass_mask(height: usize, width: usize, d0: f64) -> Result<FrequencyMask> {
    if !(d0 > 0.0) {
        return Err(invalid(format!("cutoff D0 must be positive, got {d0}")));
    }
    if height == 0 || width == 0 {
        return Err(invalid("mask dimensions must be positive"));
    }
    let two_d0_sq = 2.0 * d0 * d0;
    let values = (0..height)
        .flat_map(|u| (0..width).map(move |v| (u, v)))
        .map(|(u, v)| {
            let d = normalized_distance(u, v, height, width);
            (-(d * d) / two_d0_sq).exp()
        })
        .collect();
    Ok(FrequencyMask {
        height,
        width,
        values,
    })
}

thread_local! {
    // Planners cache their plans; one per thread keeps them lock-free.
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform_plane(
    plane: &mut [Complex64],
    height: usize,
    width: usize,
    direction: FftDirection,
) {
    PLANNER.with(|p| transform_plane_with(&mut p.borrow_mut(), plane, height, width, direction))
}

fn transform_plane_with(
    planner: &mut FftPlanner<f64>,
    plane: &mut [Complex64],
    height: usize,
    width: usize,
    direction: FftDirection,
) {
    // Rows are contiguous: one call covers all of them.
    planner.plan_fft(width, direction).process(plane);

    let mut cols = vec![Complex64::default(); plane.len()];
    for r in 0..height {
        for c in 0..width {
            cols[c * height + r] = plane[r * width + c];
        }
    }
    planner.plan_fft(height, direction).process(&mut cols);
    for c in 0..width {
        for r in 0..height {
            plane[r * width + c] = cols[c * height + r];
        }
    }
}

/// Unnormalized forward DFT of each channel.
pub fn fft2d(g: &LatentGrid) -> SpectralGrid {
    let (h, w, channels) = g.shape();
    let mut out = SpectralGrid {
        height: h,
        width: w,
        channels,
        data: vec![Complex64::default(); h * w * channels],
    };
    for ch in 0..channels {
        let mut plane: Vec<Complex64> = g
            .channel_plane(ch)
            .into_iter()
            .map(|re| Complex64::new(re, 0.0))
            .collect();
        transform_plane(&mut plane, h, w, FftDirection::Forward);
        out.set_plane(ch, &plane);
    }
    out
}

/// Inverse DFT scaled by `1 / (H * W)`, returned as complex values.
pub fn ifft2d_complex(f: &SpectralGrid) -> SpectralGrid {
    let (h, w) = (f.height, f.width);
    let scale = 1.0 / (h * w) as f64;
    let mut out = f.clone();
    for ch in 0..f.channels {
        let mut plane = f.plane(ch);
        transform_plane(&mut plane, h, w, FftDirection::Inverse);
        for z in &mut plane {
            *z *= scale;
        }
        out.set_plane(ch, &plane);
    }
    out
}

/// Largest imaginary magnitude left after the inverse transform.
pub fn imaginary_residue(f: &SpectralGrid) -> f64 {
    ifft2d_complex(f)
        .data
        .iter()
        .map(|z| z.im.abs())
        .fold(0.0, f64::max)
}

/// Inverse DFT collapsed to real values. Fails if the input was not
/// (numerically) conjugate-symmetric.
pub fn ifft2d(f: &SpectralGrid) -> Result<LatentGrid> {
    let spatial = ifft2d_complex(f);
    let peak = spatial.data.iter().map(|z| z.re.abs()).fold(1.0, f64::max);
    let residue = spatial.data.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if residue > IMAG_RESIDUE_TOL * peak {
        return Err(Error::NumericalConsistency(format!(
            "inverse transform left imaginary residue {residue:e} (peak {peak:e})"
        )));
    }
    LatentGrid::from_vec(
        f.height,
        f.width,
        f.channels,
        spatial.data.into_iter().map(|z| z.re).collect(),
    )
}

/// Per bin and channel: `low * G + high * (1 - G)`.
pub fn blend_spectra(
    high_source: &SpectralGrid,
    low_source: &SpectralGrid,
    mask: &FrequencyMask,
) -> Result<SpectralGrid> {
    let same = high_source.height == low_source.height
        && high_source.width == low_source.width
        && high_source.channels == low_source.channels;
    if !same || mask.height != high_source.height || mask.width != high_source.width {
        return Err(invalid(format!(
            "blend shape mismatch: {}x{}x{} / {}x{}x{} / mask {}x{}",
            high_source.height,
            high_source.width,
            high_source.channels,
            low_source.height,
            low_source.width,
            low_source.channels,
            mask.height,
            mask.width
        )));
    }
    let c = high_source.channels;
    let data = high_source
        .data
        .iter()
        .zip(&low_source.data)
        .enumerate()
        .map(|(i, (&hi, &lo))| {
            let g = mask.values[i / c];
            lo * g + hi * (1.0 - g)
        })
        .collect();
    Ok(SpectralGrid {
        data,
        ..high_source.clone()
    })
}

/// Replaces the low-frequency content of `z0t` with that of `reference`,
/// weighted by `mask`.
pub fn swap_low_frequency(
    z0t: &LatentGrid,
    reference: &LatentGrid,
    mask: &FrequencyMask,
) -> Result<LatentGrid> {
    z0t.ensure_same_shape(reference, "swap_low_frequency")?;
    if mask.height != z0t.height() || mask.width != z0t.width() {
        return Err(invalid(format!(
            "swap_low_frequency: mask {}x{} does not match grid {}x{}",
            mask.height,
            mask.width,
            z0t.height(),
            z0t.width()
        )));
    }
    let blended = blend_spectra(&fft2d(z0t), &fft2d(reference), mask)?;
    ifft2d(&blended)
}
