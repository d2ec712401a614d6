use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use memtangle_core::model::{Method, TrainConfig};
use memtangle_core::{Error, GenConfig, Result};

/// Reads a JSON config file into `T`.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config {
        field: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Settings shared by the three analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub lambda: f64,
    pub max_k: usize,
    /// Test anchors for the ridge analysis.
    pub m: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            lambda: 1.0,
            max_k: 9,
            m: 200,
            seed: 1,
        }
    }
}

/// The method / alpha / seed grid and the decoding split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    /// Contrastive weights tried for the disentangled method.
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Test windows per split.
    pub m: usize,
    /// Validation windows carved from train; defaults to `m`.
    pub validation_m: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            methods: vec![Method::Straightforward, Method::Disentangled],
            alphas: vec![0.0, 0.01, 0.1],
            seeds: vec![1, 2, 3, 4, 5],
            m: 500,
            validation_m: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validation_size(&self) -> usize {
        self.validation_m.unwrap_or(self.m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config(
                "experiment.methods",
                "at least one method is required",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config(
                "experiment.seeds",
                "at least one seed is required",
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::config(
                "experiment.seeds",
                format!("seed {s} is listed twice"),
            ));
        }
        if self.methods.contains(&Method::Disentangled) && self.alphas.is_empty() {
            return Err(Error::config(
                "experiment.alphas",
                "the disentangled method needs at least one alpha",
            ));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::config(
                "experiment.alphas",
                format!("alpha {a} must be finite and >= 0"),
            ));
        }
        if self.m == 0 {
            return Err(Error::config("experiment.m", "must be positive"));
        }
        Ok(())
    }

    /// `(method, alpha)` pairs in run order; the straightforward method
    /// has no contrastive term and runs once.
    pub fn variants(&self) -> Vec<(Method, Option<f64>)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            match m {
                Method::Straightforward => out.push((m, None)),
                Method::Disentangled => out.extend(self.alphas.iter().map(|&a| (m, Some(a)))),
            }
        }
        out
    }
}

/// Everything `memtangle pipeline` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub generate: GenConfig,
    pub analysis: AnalysisConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.generate.validate()?;
        self.train.validate()?;
        self.experiment.validate()
    }
}

/// Parallel seed-job cap from `MEMTANGLE_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("MEMTANGLE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(
                "MEMTANGLE_THREADS",
                format!("expected a positive integer, got {v:?}"),
            )),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_run_sf_once() {
        let v = ExperimentConfig::default().variants();
        assert_eq!(v.len(), 4);
        assert_eq!(v[0], (Method::Straightforward, None));
        assert_eq!(v[3], (Method::Disentangled, Some(0.1)));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<PipelineConfig>(r#"{"experiment": {"seedz": [1]}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("seedz"));
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let cfg = ExperimentConfig {
            seeds: vec![1, 2, 1],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
