//! Model files and provenance stamps.

use crate::error::{Error, Result};
use crate::features::{feature_layout_hash, Standardizer, Target};
use crate::nn::MlpModel;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Seed and configuration hash stamped into every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    /// `# seed=<u64> config_hash=<hex>` header line for delimited tables.
    pub fn comment_line(&self) -> String {
        format!("# seed={} config_hash={}", self.seed, self.config_hash)
    }

    pub fn parse_comment_line(line: &str) -> Option<Provenance> {
        let rest = line.strip_prefix("# ")?;
        let mut seed = None;
        let mut hash = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=')? {
                ("seed", v) => seed = v.parse().ok(),
                ("config_hash", v) => hash = Some(v.to_string()),
                _ => {}
            }
        }
        Some(Provenance {
            seed: seed?,
            config_hash: hash?,
        })
    }
}

/// A trained regressor as persisted on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub target: Target,
    pub kind: String,
    pub layout_hash: String,
    pub standardizer_hash: String,
    pub provenance: Provenance,
    pub model: MlpModel,
}

impl TrainedModel {
    pub fn new(model: MlpModel, target: Target, standardizer: &Standardizer, provenance: Provenance) -> Self {
        TrainedModel {
            format_version: MODEL_FORMAT_VERSION,
            target,
            kind: if model.config.is_linear() { "linear" } else { "nn" }.to_string(),
            layout_hash: feature_layout_hash(),
            standardizer_hash: standardizer.hash(),
            provenance,
            model,
        }
    }

    pub fn check_standardizer(&self, s: &Standardizer) -> Result<()> {
        let got = s.hash();
        if got != self.standardizer_hash {
            return Err(Error::StandardizerMismatch {
                expected: self.standardizer_hash.clone(),
                got,
            });
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut sink, self)?;
        sink.write_all(b"\n")?;
        Ok(())
    }

    /// Parses and validates shapes, finiteness and the feature layout.
    pub fn load<R: Read>(source: R) -> Result<TrainedModel> {
        let m: TrainedModel = serde_json::from_reader(source)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        let layout = feature_layout_hash();
        if m.layout_hash != layout {
            return Err(Error::FeatureLayoutMismatch {
                expected: layout,
                got: m.layout_hash,
            });
        }
        m.model.validate()?;
        Ok(m)
    }
}
