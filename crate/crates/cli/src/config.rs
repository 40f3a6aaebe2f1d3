//! Run configuration: TOML file plus command-line overrides.

use serde::{Deserialize, Serialize};
use sonuts_core::features::checksum;
use sonuts_core::{ApplyDefaults, CellSize, ColumnMap, MlpConfig, QcPolicy, SourceTag, TrainOptions};
use std::path::{Path, PathBuf};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    /// Column names of the training (bottle) table.
    pub schema: ColumnMap,
    /// Column names of external tables passed to `predict --input`.
    pub external_schema: ColumnMap,
    pub qc: QcPolicy,
    pub lat_cut: f64,
    pub split: SplitParams,
    pub model: ModelParams,
    pub train: TrainOptions,
    pub predict: PredictParams,
    pub grid: CellSize,
    pub paths: Paths,
    /// Hash fixed by [`RunConfig::pin`].
    #[serde(skip)]
    pub pinned_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub test_fraction: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub hidden_units: usize,
    pub dropout_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictParams {
    pub n_samples: usize,
    pub surface_pressure: f64,
    /// Column holding `esm`/`argo` per row; otherwise `default_source`.
    pub source_column: Option<String>,
    pub default_source: SourceTag,
}

/// File locations. Not part of the config hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub external: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let apply = ApplyDefaults::default();
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            schema: ColumnMap::default(),
            external_schema: ColumnMap::plain(),
            qc: QcPolicy::default(),
            lat_cut: apply.lat_cut,
            split: SplitParams::default(),
            model: ModelParams::default(),
            train: TrainOptions::default(),
            predict: PredictParams::default(),
            grid: CellSize::default(),
            paths: Paths::default(),
            pinned_hash: None,
        }
    }
}

impl Default for SplitParams {
    fn default() -> Self {
        let s = sonuts_core::SplitSpec::default();
        SplitParams {
            test_fraction: s.test_fraction,
            k: s.k,
        }
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        let c = MlpConfig::default();
        ModelParams {
            hidden_units: c.hidden_units,
            dropout_p: c.dropout_p,
        }
    }
}

impl Default for PredictParams {
    fn default() -> Self {
        PredictParams {
            n_samples: sonuts_core::uncertainty::DEFAULT_MC_SAMPLES,
            surface_pressure: ApplyDefaults::default().surface_pressure,
            source_column: None,
            default_source: SourceTag::Esm,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("--config {}: {e}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| format!("--config {}: {e}", path.display()))?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(format!(
                "--config {}: unsupported format_version {} (expected {CONFIG_FORMAT_VERSION})",
                path.display(),
                cfg.format_version
            ));
        }
        Ok(cfg)
    }

    pub fn split_spec(&self) -> sonuts_core::SplitSpec {
        sonuts_core::SplitSpec {
            test_fraction: self.split.test_fraction,
            k: self.split.k,
            seed: self.seed,
        }
    }

    pub fn nn_config(&self) -> MlpConfig {
        MlpConfig {
            hidden_units: self.model.hidden_units,
            dropout_p: self.model.dropout_p,
            ..MlpConfig::default()
        }
    }

    pub fn apply_defaults(&self) -> ApplyDefaults {
        ApplyDefaults {
            surface_pressure: self.predict.surface_pressure,
            lat_cut: self.lat_cut,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Checks every parameter; returns the first problem found.
    pub fn validate(&self) -> Result<(), String> {
        self.split_spec().validate().map_err(|e| e.to_string())?;
        if self.model.hidden_units == 0 {
            return Err("model.hidden_units must be positive (the linear baseline is trained separately)".into());
        }
        self.nn_config().validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.qc.validate().map_err(|e| e.to_string())?;
        if !(self.lat_cut > -90.0 && self.lat_cut < 0.0) {
            return Err(format!("lat_cut must lie in (-90, 0), got {}", self.lat_cut));
        }
        if self.predict.n_samples < 2 {
            return Err(format!("predict.n_samples must be at least 2, got {}", self.predict.n_samples));
        }
        if !(self.predict.surface_pressure >= 0.0) {
            return Err("predict.surface_pressure must be non-negative".into());
        }
        if !(self.grid.lat > 0.0 && self.grid.lon > 0.0) {
            return Err(format!("grid cell must be positive, got {} x {}", self.grid.lat, self.grid.lon));
        }
        Ok(())
    }

    /// SHA-256 over the parameters, with paths excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        checksum(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Fixes the stamped hash at the current parameters, so that later
    /// per-subcommand overrides do not change it.
    pub fn pin(&mut self) {
        self.pinned_hash = Some(self.hash());
    }

    pub fn provenance(&self) -> sonuts_core::Provenance {
        sonuts_core::Provenance {
            seed: self.seed,
            config_hash: self.pinned_hash.clone().unwrap_or_else(|| self.hash()),
        }
    }
}
