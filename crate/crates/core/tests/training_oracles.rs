mod common;

use common::prepared_synthetic;
use sonuts_core::features::{SplitSpec, Target};
use sonuts_core::nn::MlpConfig;
use sonuts_core::par::Exec;
use sonuts_core::training::{cross_validate_train_with, train_linear_baseline, TrainOptions};

fn temperature_std(t: f64) -> f64 {
    (t - 5.1) / 3.98
}

/// Without dropout the network fits `sin` of one input to the noise floor.
#[test]
fn sine_of_one_input_reaches_noise_floor() {
    let sd = 0.01;
    let data = prepared_synthetic(4000, 11, sd, |s| temperature_std(s.temperature.unwrap()).sin());
    let cfg = MlpConfig {
        dropout_p: 0.0,
        ..MlpConfig::default()
    };
    let opts = TrainOptions {
        batch_size: 32,
        max_epochs: 600,
        patience: 50,
        ..TrainOptions::default()
    };
    let spec = SplitSpec { seed: 11, ..SplitSpec::default() };
    let (_, rep) = cross_validate_train_with(&data, Target::Phosphate, cfg, &opts, &spec, Exec::Parallel).unwrap();
    assert!(rep.test_mse <= 3.0 * sd * sd, "test mse {}", rep.test_mse);
}

#[test]
fn linear_baseline_recovers_affine_target() {
    let data = prepared_synthetic(1000, 5, 0.0, |s| {
        1.0 + 0.01 * s.pressure.unwrap() - 0.2 * s.temperature.unwrap() + 0.05 * s.oxygen.unwrap()
    });
    let opts = TrainOptions {
        lr: 0.05,
        batch_size: usize::MAX,
        max_epochs: 3000,
        patience: 100_000,
    };
    let spec = SplitSpec { seed: 5, ..SplitSpec::default() };
    let (m, rep) = train_linear_baseline(&data, Target::Silicate, &opts, &spec).unwrap();
    assert!(rep.test_mse < 1e-6, "{}", rep.test_mse);
    assert!(m.config.is_linear());
    assert_eq!(rep.val_mse.len(), 10);
}

#[test]
fn cv_is_reproducible() {
    let data = prepared_synthetic(600, 2, 0.05, common::nonlinear_target);
    let opts = TrainOptions {
        max_epochs: 5,
        ..TrainOptions::default()
    };
    let spec = SplitSpec { seed: 2, ..SplitSpec::default() };
    let run = |exec| cross_validate_train_with(&data, Target::Phosphate, MlpConfig::default(), &opts, &spec, exec).unwrap();
    let (m1, r1) = run(Exec::Parallel);
    let (m2, r2) = run(Exec::Sequential);
    assert_eq!(m1, m2);
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    let min = r1.val_mse.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(r1.selected_val_mse, min);
    assert_eq!(r1.val_mse.iter().position(|&v| v == min), Some(r1.selected_fold));
}
