//! JSON run configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::curves::{PruningMode, Task};
use crate::dataset::SubgroupSpec;
use crate::embed::ProviderConfig;
use crate::error::{Error, Result};
use crate::perturb::{PerturbationKind, PerturbationSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub image_dir: PathBuf,
    pub identity_file: PathBuf,
    pub attr_file: PathBuf,
}

/// One ladder; bounds default to the kind's full valid range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationEntry {
    pub kind: PerturbationKind,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

impl PerturbationEntry {
    pub fn spec(&self, seed: u64) -> PerturbationSpec {
        let (lo, hi) = self.kind.valid_range();
        PerturbationSpec {
            kind: self.kind,
            n: self.n,
            lower: self.lower.unwrap_or(lo),
            upper: self.upper.unwrap_or(hi),
            seed,
        }
    }
}

fn default_alpha() -> f64 {
    0.01
}

fn default_workers() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetPaths,
    pub task: Task,
    pub provider: ProviderConfig,
    pub perturbations: Vec<PerturbationEntry>,
    #[serde(default)]
    pub subgroups: Vec<SubgroupSpec>,
    /// Self-matching threshold; absent means FAR-calibrated at δ=0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub pruning: PruningMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset.image_dir);
        resolve(base, &mut self.dataset.identity_file);
        resolve(base, &mut self.dataset.attr_file);
        resolve(base, &mut self.out);
        if let Some(p) = &mut self.provider.path {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(Error::Config(format!("threshold must be finite, got {t}")));
            }
        }
        self.pruning.check_task(self.task)?;
        if self.perturbations.is_empty() {
            return Err(Error::Config("no perturbations configured".into()));
        }
        let mut kinds = BTreeSet::new();
        for p in &self.perturbations {
            if !kinds.insert(p.kind) {
                return Err(Error::Config(format!("perturbation {} listed twice", p.kind)));
            }
            p.spec(self.seed).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let mut groups = BTreeSet::new();
        for s in &self.subgroups {
            if !groups.insert((s.attribute.clone(), s.value)) {
                return Err(Error::Config(format!("subgroup {} listed twice", s.label())));
            }
        }
        if self.subgroups.is_empty() && self.task == Task::Verification {
            return Err(Error::Config("verification needs at least one subgroup".into()));
        }
        self.provider.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn perturbation_specs(&self) -> Vec<PerturbationSpec> {
        self.perturbations.iter().map(|p| p.spec(self.seed)).collect()
    }

    /// The configuration as recorded in manifests: everything that affects
    /// results, without the execution-only `workers` and `out` settings.
    pub fn audit_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("workers");
        obj.remove("out");
        v
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.audit_value().to_string().as_bytes()))
    }
}
