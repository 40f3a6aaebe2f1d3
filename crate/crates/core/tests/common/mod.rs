//! Synthetic data shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sonuts_core::HydroSample;

/// Plausible Southern Ocean bottle rows (all inputs present, no labels).
pub fn synthetic_samples(n: usize, seed: u64) -> Vec<HydroSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut s = HydroSample::new(i as u64, rng.random_range(-78.0..-46.0), rng.random_range(-180.0..180.0));
            s.pressure = Some(rng.random_range(5.0..4000.0));
            s.temperature = Some(rng.random_range(-1.8..12.0));
            s.salinity = Some(rng.random_range(33.8..34.8));
            s.oxygen = Some(rng.random_range(180.0..360.0));
            s.nitrate = Some(rng.random_range(5.0..35.0));
            s
        })
        .collect()
}

/// Attaches `f(sample) + noise_sd * N(0,1)` as both labels.
pub fn label_with(samples: &mut [HydroSample], seed: u64, noise_sd: f64, f: impl Fn(&HydroSample) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for s in samples.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        let y = f(s) + noise_sd * e;
        s.phosphate = Some(y);
        s.silicate = Some(y);
    }
}

/// Nonlinear target used by the NN-vs-linear checks.
pub fn nonlinear_target(s: &HydroSample) -> f64 {
    2.0 + (0.35 * s.temperature.unwrap()).sin() + 0.02 * s.nitrate.unwrap()
}

use sonuts_core::nn::{init_mlp, MlpConfig, MlpModel};

/// Random model, batch and frozen mask for gradient checks. Resamples until
/// every hidden pre-activation is at least `margin` away from the ReLU kink.
pub fn gradient_instance(seed: u64, linear: bool, margin: f64) -> (MlpModel, Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = if linear {
        MlpConfig::linear(7)
    } else {
        let p = [0.0, 0.2, 0.5][rng.random_range(0..3)];
        MlpConfig {
            hidden_units: rng.random_range(1..=64),
            dropout_p: p,
            ..MlpConfig::default()
        }
    };
    loop {
        let mut model = init_mlp(cfg, rng.random()).unwrap();
        for (_, b) in model.params.blocks_mut() {
            for v in b.iter_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let batch = rng.random_range(1..=16);
        let x: Vec<f64> = (0..batch * 7).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..batch).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        if !linear {
            let mut z = vec![0.0; cfg.hidden_units];
            let far = x.chunks(7).all(|xb| {
                z.copy_from_slice(&model.params.b1);
                for (i, xi) in xb.iter().enumerate() {
                    for (j, zj) in z.iter_mut().enumerate() {
                        *zj += xi * model.params.w1[i * cfg.hidden_units + j];
                    }
                }
                z.iter().all(|v| v.abs() > margin)
            });
            if !far {
                continue;
            }
        }
        let masks = model.sample_masks(batch, &mut rng);
        return (model, x, y, masks);
    }
}

/// Ordinary least squares `[w; b]` via nalgebra's SVD.
pub fn least_squares(x: &[f64], y: &[f64], d: usize) -> Vec<f64> {
    let n = y.len();
    let a = nalgebra::DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i * d + j] } else { 1.0 });
    let b = nalgebra::DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-14).unwrap();
    sol.iter().copied().collect()
}

use sonuts_core::features::{build_feature_matrix, prepare, Prepared, SplitSpec};

/// Synthetic rows labelled by `f`, projected, split and standardized.
pub fn prepared_synthetic(n: usize, seed: u64, noise_sd: f64, f: impl Fn(&HydroSample) -> f64) -> Prepared {
    let mut s = synthetic_samples(n, seed);
    label_with(&mut s, seed, noise_sd, f);
    let raw = build_feature_matrix(&s).unwrap();
    prepare(&raw, &SplitSpec { seed, ..SplitSpec::default() }).unwrap()
}
