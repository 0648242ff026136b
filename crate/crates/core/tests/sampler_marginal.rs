use resmaster_core::denoiser::{analytic_gaussian_denoiser, GaussianDataModel};
use resmaster_core::pipeline::{generate_low_res, PipelineConfig};

const MEAN: f64 = 0.5;
const STD: f64 = 0.1;

/// Variance of the sampler's output, propagated exactly through the linear
/// Gaussian reverse chain built from the raw linear betas.
fn predicted_variance(train_steps: usize, steps: usize) -> f64 {
    let mut abar = vec![1.0];
    for i in 0..train_steps {
        let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / (train_steps - 1) as f64;
        abar.push(abar[i] * (1.0 - beta));
    }
    let kept: Vec<f64> = (0..=steps)
        .map(|k| abar[((k * train_steps) as f64 / steps as f64).round() as usize])
        .collect();
    let s2 = STD * STD;
    let mut var = 1.0;
    for k in (1..=steps).rev() {
        let (a, prev) = (kept[k], kept[k - 1]);
        let gain = a.sqrt() * s2 / (a * s2 + 1.0 - a);
        let (c0, ct, noise) = if k == 1 {
            (1.0, 0.0, 0.0)
        } else {
            let beta = 1.0 - a / prev;
            (
                prev.sqrt() * beta / (1.0 - a),
                (1.0 - beta).sqrt() * (1.0 - prev) / (1.0 - a),
                beta * (1.0 - prev) / (1.0 - a),
            )
        };
        let coef = c0 * gain + ct;
        var = coef * coef * var + noise;
    }
    var
}

fn sample_stats(steps: usize, seed: u64) -> (f64, f64) {
    let cfg = PipelineConfig {
        steps,
        seed,
        ..PipelineConfig::default()
    };
    let d = analytic_gaussian_denoiser(GaussianDataModel::new(vec![MEAN], STD).unwrap());
    let out = generate_low_res(&d, None, (100, 100, 1), &cfg).unwrap();
    let n = out.data().len() as f64;
    let mean = out.data().iter().sum::<f64>() / n;
    let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn full_chain_reproduces_data_marginal() {
    let (mean, var) = sample_stats(1000, 11);
    let predicted = predicted_variance(1000, 1000);
    assert!((mean - MEAN).abs() < 4.0 * STD / 100.0, "mean {mean}");
    assert!((var - STD * STD).abs() < 0.1 * STD * STD, "variance {var}");
    assert!((var / predicted - 1.0).abs() < 0.06, "variance {var} vs {predicted}");
}

#[test]
fn respaced_chain_matches_propagated_variance() {
    for steps in [50, 200] {
        let (mean, var) = sample_stats(steps, 23);
        let predicted = predicted_variance(1000, steps);
        assert!((mean - MEAN).abs() < 4.0 * STD / 100.0, "{steps} steps: mean {mean}");
        assert!(
            (var / predicted - 1.0).abs() < 0.06,
            "{steps} steps: variance {var} vs propagated {predicted}"
        );
    }
}
