//! Cross-validated training and model selection.
//!
//! Each of the k folds trains a fresh model on the fold complement with
//! early stopping on the fold's validation MSE. The fold model with the
//! lowest validation MSE (lowest index on ties) is selected as is, without
//! retraining, and scored once on the held-out test rows.

use crate::error::{Error, Result};
use crate::features::{kfold_split, FeatureMatrix, Prepared, SplitSpec, Target, N_FEATURES};
use crate::nn::{grad_step, init_mlp, loss_mse, Adam, MlpConfig, MlpModel};
use crate::par::Exec;
use crate::rng::{derive_indexed, substream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::BadConfig("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub target: Target,
    pub model_kind: String,
    pub seed: u64,
    pub k: usize,
    pub val_mse: Vec<f64>,
    pub epochs_run: Vec<usize>,
    pub selected_fold: usize,
    pub selected_val_mse: f64,
    pub test_mse: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub config: MlpConfig,
    pub options: TrainOptions,
    /// Not serialized, so that report files are reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Rows as a contiguous `n x 7` buffer plus their `target` labels.
fn gather(m: &FeatureMatrix, rows: &[usize], target: Target) -> Result<(Vec<f64>, Vec<f64>)> {
    let labels = m.labels(target);
    let mut x = Vec::with_capacity(rows.len() * N_FEATURES);
    let mut y = Vec::with_capacity(rows.len());
    for &i in rows {
        x.extend_from_slice(m.row(i));
        y.push(labels[i].ok_or(Error::NoLabel(target.name()))?);
    }
    Ok((x, y))
}

/// Eval-mode MSE of `model` on `rows`, in label units squared.
pub fn evaluate_mse(model: &MlpModel, m: &FeatureMatrix, rows: &[usize], target: Target) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptySubset);
    }
    let (x, y) = gather(m, rows, target)?;
    loss_mse(&model.predict(&x)?, &y)
}

struct FoldResult {
    model: MlpModel,
    val_mse: f64,
    epochs: usize,
}

/// Trains one model with mini-batch Adam and early stopping; returns the
/// parameters from the best validation epoch.
pub fn train_with_early_stopping(
    mut model: MlpModel,
    train: (&[f64], &[f64]),
    val: (&[f64], &[f64]),
    opts: &TrainOptions,
    seed: u64,
    stream: u64,
) -> Result<(MlpModel, f64, usize)> {
    let (xt, yt) = train;
    let (xv, yv) = val;
    let n = yt.len();
    if n == 0 {
        return Err(Error::EmptySubset);
    }
    // Labels stay in physical units, so start the output bias at the label
    // mean instead of 0.
    let label_mean = yt.iter().sum::<f64>() / n as f64;
    if model.config.is_linear() {
        model.params.b1[0] = label_mean;
    } else {
        model.params.b2[0] = label_mean;
    }
    let mut rng = substream(seed, "train", stream);
    let mut opt = Adam::new(&model.config, opts.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let bs = opts.batch_size.min(n);
    let mut bx = Vec::with_capacity(bs * N_FEATURES);
    let mut by = Vec::with_capacity(bs);
    let mut best = (model.params.clone(), f64::INFINITY);
    let mut since_best = 0;
    let mut epochs = 0;
    for _ in 0..opts.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&xt[i * N_FEATURES..(i + 1) * N_FEATURES]);
                by.push(yt[i]);
            }
            grad_step(&mut model, &bx, &by, &mut opt, &mut rng)?;
        }
        let v = loss_mse(&model.predict(xv)?, yv)?;
        if v < best.1 {
            best = (model.params.clone(), v);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }
    model.params = best.0;
    Ok((model, best.1, epochs))
}

/// k-fold CV on the labelled training rows, then a single test evaluation.
pub fn cross_validate_train(
    data: &Prepared,
    target: Target,
    config: MlpConfig,
    opts: &TrainOptions,
    spec: &SplitSpec,
) -> Result<(MlpModel, CvReport)> {
    cross_validate_train_with(data, target, config, opts, spec, Exec::default())
}

pub fn cross_validate_train_with(
    data: &Prepared,
    target: Target,
    config: MlpConfig,
    opts: &TrainOptions,
    spec: &SplitSpec,
    exec: Exec,
) -> Result<(MlpModel, CvReport)> {
    let started = Instant::now();
    spec.validate()?;
    config.validate()?;
    opts.validate()?;
    if config.input_dim != N_FEATURES {
        return Err(Error::ShapeMismatch {
            expected: N_FEATURES,
            got: config.input_dim,
        });
    }
    let m = &data.matrix;
    let train_rows = m.labelled(&data.partition.train, target);
    let test_rows = m.labelled(&data.partition.test, target);
    if train_rows.is_empty() {
        return Err(Error::NoLabel(target.name()));
    }
    if test_rows.is_empty() {
        return Err(Error::EmptySubset);
    }
    let folds = kfold_split(&train_rows, spec.k, spec.seed)?;

    let results: Vec<Result<FoldResult>> = exec.map(folds.len(), |f| {
        let fold = &folds[f];
        let (xt, yt) = gather(m, &fold.train, target)?;
        let (xv, yv) = gather(m, &fold.val, target)?;
        let model = init_mlp(config, derive_indexed(spec.seed, "init", f as u64))?;
        let (model, val_mse, epochs) =
            train_with_early_stopping(model, (&xt, &yt), (&xv, &yv), opts, spec.seed, f as u64)?;
        Ok(FoldResult { model, val_mse, epochs })
    });
    let results: Vec<FoldResult> = results.into_iter().collect::<Result<_>>()?;

    let val_mse: Vec<f64> = results.iter().map(|r| r.val_mse).collect();
    let selected = val_mse
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v < val_mse[best] { i } else { best });
    let model = results[selected].model.clone();
    let test_mse = evaluate_mse(&model, m, &test_rows, target)?;
    let report = CvReport {
        target,
        model_kind: if config.is_linear() { "linear" } else { "nn" }.to_string(),
        seed: spec.seed,
        k: spec.k,
        epochs_run: results.iter().map(|r| r.epochs).collect(),
        selected_fold: selected,
        selected_val_mse: val_mse[selected],
        val_mse,
        test_mse,
        n_train: train_rows.len(),
        n_test: test_rows.len(),
        config,
        options: *opts,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Same protocol with the single-layer linear model.
pub fn train_linear_baseline(
    data: &Prepared,
    target: Target,
    opts: &TrainOptions,
    spec: &SplitSpec,
) -> Result<(MlpModel, CvReport)> {
    cross_validate_train(data, target, MlpConfig::linear(N_FEATURES), opts, spec)
}
