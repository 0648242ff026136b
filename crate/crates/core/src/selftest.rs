//! Quick invariant checks runnable from the command line.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::attention::{attend, attention_terms, AttentionWeights};
use crate::conditioning::{embed_text_stub, encode_image_prompt_stub, ConditionBundle};
use crate::grid::LatentGrid;
use crate::matrix::Matrix;
use crate::noise::NoiseKey;
use crate::schedule::{forward_diffuse, make_linear_schedule, posterior_step, predict_x0};
use crate::spectral::{fft2d, gaussian_lowpass_mask, ifft2d, swap_low_frequency, FrequencyMask};
use crate::tiler::{extract_patch, fuse_patches, plan_patches};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> crate::Result<(bool, String)>) -> CheckOutcome {
    match f() {
        Ok((passed, detail)) => CheckOutcome {
            name,
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        check("fft matches direct DFT", || {
            let g = NoiseKey::new(1, 0, 0).normal_grid(8, 8, 1);
            let f = fft2d(&g);
            let mut worst = 0.0f64;
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = Complex64::default();
                    for r in 0..8 {
                        for c in 0..8 {
                            let phase = -2.0 * PI * ((u * r + v * c) as f64 / 8.0);
                            acc += Complex64::from_polar(g.get(r, c, 0), phase);
                        }
                    }
                    worst = worst.max((acc - f.get(u, v, 0)).norm());
                }
            }
            Ok((worst < 1e-9, format!("max error {worst:.2e}")))
        }),
        check("fft roundtrip", || {
            let g = NoiseKey::new(2, 0, 0).normal_grid(12, 10, 3);
            let err = ifft2d(&fft2d(&g))?.max_abs_diff(&g);
            Ok((err < 1e-10, format!("max error {err:.2e}")))
        }),
        check("low-frequency swap pins DC and full-mask limit", || {
            let a = NoiseKey::new(3, 0, 0).normal_grid(16, 16, 2);
            let b = NoiseKey::new(3, 0, 1).normal_grid(16, 16, 2);
            let out = swap_low_frequency(&a, &b, &gaussian_lowpass_mask(16, 16, 0.8)?)?;
            let dc = out
                .channel_means()
                .iter()
                .zip(b.channel_means())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let full = swap_low_frequency(&a, &b, &FrequencyMask::constant_one(16, 16))?.max_abs_diff(&b);
            Ok((dc < 1e-10 && full < 1e-10, format!("dc {dc:.2e}, full {full:.2e}")))
        }),
        check("fuse of extracted patches is identity", || {
            let layout = plan_patches(24, 24, 12, 12, 6, 6)?;
            let g = NoiseKey::new(4, 0, 0).normal_grid(24, 24, 3);
            let patches = layout
                .rects
                .iter()
                .map(|&r| extract_patch(&g, r))
                .collect::<crate::Result<Vec<_>>>()?;
            let exact = fuse_patches(&patches, &layout)? == g;
            Ok((exact, format!("{} patches", layout.len())))
        }),
        check("schedule identities", || {
            let s = make_linear_schedule(1000, 1e-4, 0.02)?;
            let z0 = NoiseKey::new(5, 0, 0).normal_grid(6, 6, 1);
            let eps = NoiseKey::new(5, 0, 1).normal_grid(6, 6, 1);
            let mut worst = 0.0f64;
            for t in [1, 500, 1000] {
                let back = predict_x0(&forward_diffuse(&z0, t, &eps, &s)?, &eps, t, &s)?;
                worst = worst.max(back.max_abs_diff(&z0));
            }
            let t1 = posterior_step(&eps, &z0, 1, &eps, &s)? == z0;
            Ok((worst < 1e-10 && t1, format!("roundtrip {worst:.2e}, t=1 exact {t1}")))
        }),
        check("attention with lambda 0 is text-only", || {
            let w = AttentionWeights::seeded(6, 5, 4, 8, 8)?;
            let patch = LatentGrid::filled(8, 8, 1, 0.25);
            let bundle = ConditionBundle::new(
                embed_text_stub("check", 3, 8, 0)?,
                encode_image_prompt_stub(&patch, 2, 8, 0)?,
                0.0,
            )?;
            let x = Matrix::from_fn(4, 5, |r, c| (r as f64 - c as f64) * 0.3);
            let same = attend(&x, &bundle, &w)? == attention_terms(&x, &bundle, &w)?.text;
            Ok((same, String::new()))
        }),
    ]
}
