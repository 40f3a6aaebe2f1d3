//! Southern Ocean nutrient regression.
//!
//! Trains dropout-regularized feed-forward regressors that predict phosphate
//! and silicate from position, pressure, temperature, salinity, oxygen and
//! nitrate, and applies them to external tables with Monte-Carlo dropout
//! uncertainty.
//!
//! Pipeline:
//!
//! 1. [`hydro`]: parse bottle tables, QC-flag and regional filtering.
//! 2. [`projection`]: positions to EPSG:3031 (Antarctic Polar Stereographic).
//! 3. [`features`]: 7-column input matrix, train/test split, standardization
//!    fitted on training rows only, k-fold partitions.
//! 4. [`nn`] and [`training`]: hand-written MLP with backprop and Adam,
//!    k-fold model selection, linear baseline.
//! 5. [`uncertainty`] and [`external`]: MC-dropout prediction, gridded maps
//!    and reference-minus-prediction differences.
//!
//! Row-parallel work (MC dropout, fold training, standardization, grid
//! keying) uses rayon behind the default `parallel` feature; see [`par`].
//! Every result is independent of the thread schedule.

pub mod artifact;
pub mod error;
pub mod external;
pub mod features;
pub mod hydro;
pub mod nn;
pub mod par;
pub mod projection;
pub mod rng;
pub mod training;
pub mod uncertainty;

pub use artifact::{Provenance, TrainedModel};
pub use error::{Error, Result};
pub use external::{
    diff_grids, grid_bin_mean, predict_external_table, ApplyDefaults, CellSize, ExternalRow,
    GridField, SourceTag,
};
pub use features::{
    apply_standardizer, build_feature_matrix, fit_standardizer, kfold_split, prepare,
    split_train_test, FeatureMatrix, Prepared, SplitSpec, Standardizer, Target,
};
pub use hydro::{apply_qc_filter, filter_southern_ocean, parse_hydro_table, ColumnMap, HydroSample, QcPolicy};
pub use nn::{gradient_check, grad_step, init_mlp, loss_mse, Activation, ForwardMode, MlpConfig, MlpModel};
pub use par::Exec;
pub use projection::{inverse_aps, project_aps, ProjectedPoint};
pub use training::{cross_validate_train, evaluate_mse, train_linear_baseline, CvReport, TrainOptions};
pub use uncertainty::{mc_dropout_predict, summarize_interval, UncertaintySummary};
