//! Noise predictors. [`AnalyticGaussianDenoiser`] is the Bayes-optimal
//! epsilon-predictor for i.i.d. Gaussian data and serves as ground truth;
//! [`ToyConditionedDenoiser`] adds a seeded cross-attention correction so the
//! conditioning path is exercised end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::attention::{attend, AttentionWeights};
use crate::conditioning::ConditionBundle;
use crate::error::{invalid, Result};
use crate::grid::LatentGrid;
use crate::matrix::Matrix;
use crate::schedule::NoiseSchedule;

/// An epsilon-prediction network: maps `(z_t, t, condition)` to a noise
/// estimate of the same shape. Implementations must be deterministic.
pub trait Denoiser: Send + Sync {
    fn predict(
        &self,
        z_t: &LatentGrid,
        t: usize,
        cond: Option<&ConditionBundle>,
        schedule: &NoiseSchedule,
    ) -> Result<LatentGrid>;
}

/// Data model `z0 ~ N(mean[ch], std^2)`, independent per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDataModel {
    mean: Vec<f64>,
    std: f64,
}

impl GaussianDataModel {
    /// `mean` holds one value per channel, or a single value shared by all.
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        if mean.is_empty() || mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid("data model mean must be non-empty and finite"));
        }
        if !(std >= 0.0 && std.is_finite()) {
            return Err(invalid(format!("data model std must be >= 0, got {std}")));
        }
        Ok(Self { mean, std })
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn mean(&self, ch: usize) -> f64 {
        if self.mean.len() == 1 {
            self.mean[0]
        } else {
            self.mean[ch]
        }
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if self.mean.len() != 1 && self.mean.len() != channels {
            return Err(invalid(format!(
                "data model has {} channel means, grid has {channels} channels",
                self.mean.len()
            )));
        }
        Ok(())
    }

    /// `E[z0 | z_t] = m + sqrt(abar) s^2 / (abar s^2 + 1 - abar) * (z_t - sqrt(abar) m)`.
    pub fn posterior_mean(&self, z_t: &LatentGrid, t: usize, s: &NoiseSchedule) -> Result<LatentGrid> {
        s.check_step(t)?;
        self.check_channels(z_t.channels())?;
        let abar = s.alpha_bar(t);
        let sa = abar.sqrt();
        let var = self.std * self.std;
        let gain = sa * var / (abar * var + 1.0 - abar);
        let c = z_t.channels();
        let mut out = z_t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let m = self.mean(i % c);
            *v = m + gain * (*v - sa * m);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianDenoiser {
    pub model: GaussianDataModel,
}

pub fn analytic_gaussian_denoiser(model: GaussianDataModel) -> AnalyticGaussianDenoiser {
    AnalyticGaussianDenoiser { model }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn predict(
        &self,
        z_t: &LatentGrid,
        t: usize,
        _cond: Option<&ConditionBundle>,
        s: &NoiseSchedule,
    ) -> Result<LatentGrid> {
        let abar = s.alpha_bar(t);
        let noise_scale = (1.0 - abar).sqrt();
        if noise_scale == 0.0 {
            return Ok(LatentGrid::zeros(z_t.height(), z_t.width(), z_t.channels()));
        }
        let x0 = self.model.posterior_mean(z_t, t, s)?;
        let sa = abar.sqrt();
        Ok(z_t.zip_map(&x0, |z, e| (z - sa * e) / noise_scale))
    }
}

/// Shape parameters of [`ToyConditionedDenoiser`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyDims {
    pub channels: usize,
    pub d_head: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Queries are taken from a `query_side x query_side` area pooling of
    /// the input.
    pub query_side: usize,
    /// Amplitude of the attention correction.
    pub gain: f64,
}

/// Analytic Gaussian base prediction plus a bounded correction computed by
/// one decoupled cross-attention over pooled patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConditionedDenoiser {
    base: AnalyticGaussianDenoiser,
    weights: AttentionWeights,
    w_out: Matrix,
    dims: ToyDims,
}

pub fn toy_conditioned_denoiser(
    seed: u64,
    dims: ToyDims,
    base: GaussianDataModel,
) -> Result<ToyConditionedDenoiser> {
    if dims.channels == 0 || dims.query_side == 0 {
        return Err(invalid("toy denoiser needs channels >= 1 and query_side >= 1"));
    }
    if !dims.gain.is_finite() {
        return Err(invalid("toy denoiser gain must be finite"));
    }
    base.check_channels(dims.channels)?;
    let d_model = dims.channels + 2;
    let weights = AttentionWeights::seeded(seed, d_model, dims.d_head, dims.text_dim, dims.image_dim)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6f75_7470_7574);
    let scale = (3.0 / dims.d_head as f64).sqrt();
    let w_out = Matrix::from_fn(dims.d_head, dims.channels, |_, _| rng.gen_range(-1.0..1.0) * scale);
    Ok(ToyConditionedDenoiser {
        base: analytic_gaussian_denoiser(base),
        weights,
        w_out,
        dims,
    })
}

impl ToyConditionedDenoiser {
    pub fn weights(&self) -> &AttentionWeights {
        &self.weights
    }

    pub fn dims(&self) -> ToyDims {
        self.dims
    }

    fn bin(i: usize, side: usize, len: usize) -> std::ops::Range<usize> {
        let start = (i * len / side).min(len - 1);
        let end = ((i + 1) * len).div_ceil(side).clamp(start + 1, len);
        start..end
    }

    /// Pooled channel means plus the bin center in `[-1, 1]^2`, one row per
    /// query bin.
    fn queries(&self, z: &LatentGrid) -> Matrix {
        let q = self.dims.query_side;
        let (h, w, c) = z.shape();
        let mut x = Matrix::zeros(q * q, c + 2);
        for by in 0..q {
            for bx in 0..q {
                let row = by * q + bx;
                let (rows, cols) = (Self::bin(by, q, h), Self::bin(bx, q, w));
                let count = (rows.len() * cols.len()) as f64;
                for ch in 0..c {
                    let sum: f64 = rows
                        .clone()
                        .flat_map(|r| cols.clone().map(move |col| (r, col)))
                        .map(|(r, col)| z.get(r, col, ch))
                        .sum();
                    x.set(row, ch, sum / count);
                }
                x.set(row, c, (by as f64 + 0.5) / q as f64 * 2.0 - 1.0);
                x.set(row, c + 1, (bx as f64 + 0.5) / q as f64 * 2.0 - 1.0);
            }
        }
        x
    }
}

impl Denoiser for ToyConditionedDenoiser {
    fn predict(
        &self,
        z_t: &LatentGrid,
        t: usize,
        cond: Option<&ConditionBundle>,
        s: &NoiseSchedule,
    ) -> Result<LatentGrid> {
        let cond = cond.ok_or_else(|| invalid("toy conditioned denoiser requires a condition bundle"))?;
        if z_t.channels() != self.dims.channels {
            return Err(invalid(format!(
                "toy denoiser built for {} channels, got {}",
                self.dims.channels,
                z_t.channels()
            )));
        }
        let mut eps = self.base.predict(z_t, t, None, s)?;
        let attended = attend(&self.queries(z_t), cond, &self.weights)?;
        let correction = attended.matmul(&self.w_out)?;
        let q = self.dims.query_side;
        let (h, w, c) = z_t.shape();
        for by in 0..q {
            for bx in 0..q {
                let row = by * q + bx;
                for r in Self::bin(by, q, h) {
                    for col in Self::bin(bx, q, w) {
                        for ch in 0..c {
                            let i = eps.offset(r, col, ch);
                            eps.data_mut()[i] += self.dims.gain * correction.get(row, ch).tanh();
                        }
                    }
                }
            }
        }
        Ok(eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{embed_text_stub, encode_image_prompt_stub, ImageEmbedding};
    use crate::schedule::{make_linear_schedule, predict_x0};
    use rand_distr::{Distribution, StandardNormal};

    fn random_grid(seed: u64, h: usize, w: usize, c: usize) -> LatentGrid {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        LatentGrid::from_fn(h, w, c, |_, _, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn point_mass_data() {
        let s = make_linear_schedule(100, 1e-3, 0.05).unwrap();
        let d = analytic_gaussian_denoiser(GaussianDataModel::new(vec![0.3, -0.2], 0.0).unwrap());
        let z = random_grid(1, 3, 3, 2);
        let t = 40;
        let eps = d.predict(&z, t, None, &s).unwrap();
        let (sa, sn) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
        for r in 0..3 {
            for c in 0..3 {
                for ch in 0..2 {
                    let m = [0.3, -0.2][ch];
                    assert_eq!(eps.get(r, c, ch), (z.get(r, c, ch) - sa * m) / sn);
                }
            }
        }
        let at_mean = LatentGrid::from_fn(2, 2, 2, |_, _, ch| sa * [0.3, -0.2][ch]);
        let eps = d.predict(&at_mean, t, None, &s).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predicted_x0_is_posterior_mean() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let model = GaussianDataModel::new(vec![0.5], 0.3).unwrap();
        let d = analytic_gaussian_denoiser(model.clone());
        let z = random_grid(2, 4, 4, 3);
        for t in [1, 10, 500, 1000] {
            let eps = d.predict(&z, t, None, &s).unwrap();
            let x0 = predict_x0(&z, &eps, t, &s).unwrap();
            let want = model.posterior_mean(&z, t, &s).unwrap();
            assert!(x0.max_abs_diff(&want) < 1e-10, "t={t}");
        }
    }

    #[test]
    fn monte_carlo_regression_mid_schedule() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let d = analytic_gaussian_denoiser(GaussianDataModel::new(vec![0.0], 1.0).unwrap());
        let t = 500;
        let (sa, sn) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let n = 100_000;
        let mut zs = Vec::with_capacity(n);
        let mut es = Vec::with_capacity(n);
        for _ in 0..n {
            let z0: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            zs.push(sa * z0 + sn * e);
            es.push(e);
        }
        let grid = LatentGrid::from_vec(1, n, 1, zs.clone()).unwrap();
        let pred = d.predict(&grid, t, None, &s).unwrap();
        let bins = 16;
        for b in 0..bins {
            let lo = -2.0 + 4.0 * b as f64 / bins as f64;
            let hi = lo + 4.0 / bins as f64;
            let idx: Vec<usize> = (0..n).filter(|&i| zs[i] >= lo && zs[i] < hi).collect();
            let k = idx.len() as f64;
            let mean_e = idx.iter().map(|&i| es[i]).sum::<f64>() / k;
            let var_e = idx.iter().map(|&i| (es[i] - mean_e).powi(2)).sum::<f64>() / (k - 1.0);
            let mean_pred = idx.iter().map(|&i| pred.data()[i]).sum::<f64>() / k;
            let se = (var_e / k).sqrt();
            assert!((mean_e - mean_pred).abs() < 3.0 * se, "bin {b}");
        }
    }

    fn toy() -> ToyConditionedDenoiser {
        let dims = ToyDims {
            channels: 3,
            d_head: 8,
            text_dim: 12,
            image_dim: 10,
            query_side: 4,
            gain: 0.1,
        };
        toy_conditioned_denoiser(5, dims, GaussianDataModel::new(vec![0.5], 0.25).unwrap()).unwrap()
    }

    fn bundle(caption: &str, patch: &LatentGrid, lambda: f64) -> ConditionBundle {
        ConditionBundle::new(
            embed_text_stub(caption, 6, 12, 1).unwrap(),
            encode_image_prompt_stub(patch, 4, 10, 1).unwrap(),
            lambda,
        )
        .unwrap()
    }

    #[test]
    fn toy_is_deterministic_and_conditioned() {
        let s = make_linear_schedule(50, 1e-3, 0.05).unwrap();
        let d = toy();
        let z = random_grid(3, 8, 8, 3);
        let b = bundle("a stone wall with moss", &z, 0.8);
        let a = d.predict(&z, 20, Some(&b), &s).unwrap();
        assert_eq!(a, d.predict(&z, 20, Some(&b), &s).unwrap());
        assert_eq!(a.shape(), z.shape());
        let other = bundle("a stone wall with ivy", &z, 0.8);
        assert!(a.max_abs_diff(&d.predict(&z, 20, Some(&other), &s).unwrap()) > 0.0);
        assert!(d.predict(&z, 20, None, &s).is_err());
    }

    #[test]
    fn toy_ignores_image_prompt_at_lambda_zero() {
        let s = make_linear_schedule(50, 1e-3, 0.05).unwrap();
        let d = toy();
        let z = random_grid(4, 8, 8, 3);
        let b1 = bundle("sky", &z, 0.0);
        let mut b2 = b1.clone();
        b2.image = ImageEmbedding(Matrix::from_fn(4, 10, |r, c| (r + c) as f64));
        assert_eq!(
            d.predict(&z, 7, Some(&b1), &s).unwrap(),
            d.predict(&z, 7, Some(&b2), &s).unwrap()
        );
        let b3 = b2.with_lambda(0.8).unwrap();
        assert_ne!(
            d.predict(&z, 7, Some(&b1), &s).unwrap(),
            d.predict(&z, 7, Some(&b3), &s).unwrap()
        );
    }
}
