//! Monte-Carlo dropout prediction.

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::MlpModel;
use crate::par::Exec;
use crate::rng::substream;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MC_SAMPLES: usize = 100;
/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Per-row predictive summary. `ci_*` is the normal-approximation interval
/// `mean ± 1.96·std`; `pct_*` are the empirical 2.5/97.5 percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub pct_2_5: f64,
    pub pct_97_5: f64,
    pub n_samples: usize,
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Mean, population std and intervals. The samples are sorted first, so the
/// result does not depend on their order.
pub fn summarize_interval(samples: &[f64]) -> Result<UncertaintySummary> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples(samples.len()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let (lo, hi) = (s[0], s[s.len() - 1]);
    // shifted by the minimum: exact when all samples are equal
    let mean = (lo + s.iter().map(|v| v - lo).sum::<f64>() / n).clamp(lo, hi);
    let std = (s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    Ok(UncertaintySummary {
        mean,
        std,
        ci_low: mean - Z_95 * std,
        ci_high: mean + Z_95 * std,
        pct_2_5: percentile_sorted(&s, 0.025),
        pct_97_5: percentile_sorted(&s, 0.975),
        n_samples: s.len(),
    })
}

/// Raw MC draws for one input row. The stream depends only on
/// (`seed`, `row_id`), and a longer run extends a shorter one.
pub fn mc_samples(model: &MlpModel, x: &[f64], row_id: u64, n_samples: usize, seed: u64) -> Vec<f64> {
    let mut h = vec![0.0; model.config.hidden_units.max(1)];
    model.hidden(x, &mut h);
    if !model.has_dropout() {
        return vec![model.output_from_hidden(&h, None); n_samples];
    }
    let mut rng = substream(seed, "mc", row_id);
    let mut mask = vec![0.0; model.config.hidden_units];
    (0..n_samples)
        .map(|_| {
            model.fill_mask(&mut mask, &mut rng);
            model.output_from_hidden(&h, Some(&mask))
        })
        .collect()
}

/// `n_samples` masked forward passes per row of a standardized matrix.
pub fn mc_dropout_predict(
    model: &MlpModel,
    rows: &FeatureMatrix,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<UncertaintySummary>> {
    mc_dropout_predict_with(model, &rows.values, &rows.row_ids, n_samples, seed, Exec::default())
}

/// Row-parallel core of [`mc_dropout_predict`] over a flat `n x input_dim`
/// buffer.
pub fn mc_dropout_predict_with(
    model: &MlpModel,
    x: &[f64],
    row_ids: &[u64],
    n_samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<UncertaintySummary>> {
    if n_samples < 2 {
        return Err(Error::BadSampleCount(n_samples));
    }
    let d = model.input_dim();
    if x.len() != row_ids.len() * d {
        return Err(Error::ShapeMismatch {
            expected: row_ids.len() * d,
            got: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input element {i}")));
    }
    exec.map(row_ids.len(), |i| {
        let draws = mc_samples(model, &x[i * d..(i + 1) * d], row_ids[i], n_samples, seed);
        summarize_interval(&draws)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_mlp, MlpConfig};

    #[test]
    fn constant_samples() {
        let s = summarize_interval(&[0.3; 7]).unwrap();
        assert_eq!((s.mean, s.std, s.ci_low, s.ci_high), (0.3, 0.0, 0.3, 0.3));
    }

    #[test]
    fn two_point_interval() {
        let s = summarize_interval(&[-1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std), (0.0, 1.0));
        assert_eq!((s.ci_low, s.ci_high), (-1.96, 1.96));
        assert_eq!(s.n_samples, 2);
    }

    #[test]
    fn too_few() {
        assert!(matches!(summarize_interval(&[1.0]), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn percentiles_interpolate() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        let s = summarize_interval(&v).unwrap();
        assert!((s.pct_2_5 - 2.5).abs() < 1e-12 && (s.pct_97_5 - 97.5).abs() < 1e-12);
    }

    #[test]
    fn no_dropout_means_zero_std() {
        let cfg = MlpConfig {
            dropout_p: 0.0,
            ..MlpConfig::default()
        };
        let m = init_mlp(cfg, 1).unwrap();
        let x: Vec<f64> = (0..70).map(|i| (i as f64 * 0.1).sin()).collect();
        let ids: Vec<u64> = (0..10).collect();
        let out = mc_dropout_predict_with(&m, &x, &ids, 100, 5, Exec::Sequential).unwrap();
        let eval = m.predict(&x).unwrap();
        for (s, e) in out.iter().zip(eval) {
            assert_eq!(s.std, 0.0);
            assert_eq!(s.mean, e);
        }
    }

    #[test]
    fn bad_sample_count() {
        let m = init_mlp(MlpConfig::default(), 1).unwrap();
        assert!(matches!(
            mc_dropout_predict_with(&m, &[0.0; 7], &[0], 1, 0, Exec::Sequential),
            Err(Error::BadSampleCount(1))
        ));
    }

    #[test]
    fn mean_within_sample_range() {
        let m = init_mlp(MlpConfig::default(), 2).unwrap();
        let x = [0.4, -0.3, 1.2, 0.0, -1.0, 0.5, 2.0];
        let draws = mc_samples(&m, &x, 7, 100, 3);
        let s = summarize_interval(&draws).unwrap();
        let lo = draws.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= s.mean && s.mean <= hi);
        assert!(s.ci_low <= s.mean && s.mean <= s.ci_high);
    }
}
