use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Network};
use crate::architecture::NetworkSpec;
use crate::tensor::io::{load_tensor, save_tensor, TensorIoError};
use crate::tensor::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnEntry {
    pub name: String,
    pub updates: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_hash: String,
    pub seed: u64,
    pub epoch: u64,
    pub params: Vec<String>,
    pub batch_norms: Vec<BnEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| {
        ModelError::Io(TensorIoError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl<T: Scalar> Network<T> {
    /// Writes one tensor file pair per parameter and running statistic, the
    /// spec, and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, t) in &self.params {
            save_tensor(dir, name, t)?;
        }
        for (name, s) in &self.bn_stats {
            save_tensor(dir, &format!("{name}.running_mean"), &s.mean)?;
            save_tensor(dir, &format!("{name}.running_var"), &s.var)?;
        }
        let manifest = Manifest {
            spec_hash: self.spec_hash.clone(),
            seed: self.seed,
            epoch: self.epoch,
            params: self.params.keys().cloned().collect(),
            batch_norms: self
                .bn_stats
                .iter()
                .map(|(name, s)| BnEntry {
                    name: name.clone(),
                    updates: s.updates,
                })
                .collect(),
        };
        let spec_path = dir.join(SPEC_FILE);
        fs::write(&spec_path, self.spec.to_json_pretty()).map_err(io(&spec_path))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(io(&path))
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest, ModelError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        serde_json::from_str(&text)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// The spec stored alongside a checkpoint.
    pub fn read_spec(dir: &Path) -> Result<NetworkSpec, ModelError> {
        Ok(NetworkSpec::from_file(&dir.join(SPEC_FILE))?)
    }

    /// Restores a checkpoint written for `spec`. Refuses when the stored
    /// spec hash differs.
    pub fn load(dir: &Path, spec: &NetworkSpec) -> Result<Self, ModelError> {
        let manifest = Self::read_manifest(dir)?;
        let expected = spec.hash();
        if manifest.spec_hash != expected {
            return Err(ModelError::HashMismatch {
                expected,
                found: manifest.spec_hash,
            });
        }
        let mut net = Network::compile(spec, manifest.seed)?;
        let mut listed: Vec<&str> = manifest.params.iter().map(String::as_str).collect();
        let mut known: Vec<&str> = net.params.keys().map(String::as_str).collect();
        listed.sort_unstable();
        known.sort_unstable();
        if listed != known {
            return Err(ModelError::Checkpoint(
                "parameter names do not match the spec".into(),
            ));
        }
        for name in &manifest.params {
            let t = load_tensor(dir, name)?;
            net.set_param(name, t)?;
        }
        for entry in &manifest.batch_norms {
            let mean = load_tensor(dir, &format!("{}.running_mean", entry.name))?;
            let var = load_tensor(dir, &format!("{}.running_var", entry.name))?;
            let stats = net.bn_stats.get_mut(&entry.name).ok_or_else(|| {
                ModelError::Checkpoint(format!("unknown batch norm {}", entry.name))
            })?;
            stats.mean.expect_same_shape(&mean, "load")?;
            stats.var.expect_same_shape(&var, "load")?;
            stats.mean = mean;
            stats.var = var;
            stats.updates = entry.updates;
        }
        net.epoch = manifest.epoch;
        Ok(net)
    }
}
