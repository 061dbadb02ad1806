//! Experiment configuration: a JSON file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::failure::{Category, Failure};

/// Subsample size when `--sample` is absent.
pub const DEFAULT_SAMPLE: usize = 1000;

/// Every setting any command reads. Absent fields take command defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub counterfact: Option<PathBuf>,
    pub field_paths: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
    pub encodings: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub sample: Option<usize>,
    pub prefix: Option<String>,
    pub analyses: Option<String>,
    pub projection: Option<String>,
    pub heads: Option<String>,
    pub per_token: Option<bool>,
    pub attention_maps: Option<bool>,
    pub rank_groups: Option<String>,
    pub max_capture_mb: Option<usize>,
    pub alpha: Option<f32>,
    pub grid: Option<Vec<f32>>,
    pub ablate: Option<String>,
    pub bins: Option<usize>,
}

macro_rules! overlay_fields {
    ($top:ident, $base:ident; $($f:ident),*) => {
        ExperimentConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `self` wins wherever it is set.
    pub fn overlay(self, base: ExperimentConfig) -> ExperimentConfig {
        let top = self;
        overlay_fields!(top, base;
            model, model_config, tokenizer, dataset, counterfact, field_paths, embeddings, spec,
            fixtures, encodings, out, workers, seed, n, sample, prefix, analyses, projection, heads,
            per_token, attention_maps, rank_groups, max_capture_mb, alpha, grid, ablate, bins)
    }

    /// Every referenced input path must exist before any work starts.
    pub fn check_paths(&self) -> Result<()> {
        let inputs = [
            ("--model", &self.model),
            ("--model-config", &self.model_config),
            ("--tokenizer", &self.tokenizer),
            ("--dataset", &self.dataset),
            ("--counterfact", &self.counterfact),
            ("--field-paths", &self.field_paths),
            ("--embeddings", &self.embeddings),
            ("--spec", &self.spec),
            ("--fixtures", &self.fixtures),
            ("--encodings", &self.encodings),
        ];
        for (flag, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Failure::new(Category::Input, format!("{flag} {} does not exist", p.display())).into());
                }
            }
        }
        Ok(())
    }

    /// Settings that determine results: everything except the output
    /// location and the worker count.
    pub fn result_relevant(&self) -> ExperimentConfig {
        ExperimentConfig { out: None, workers: None, ..self.clone() }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("compmech-out"))
    }

    pub fn require<'a, T>(&self, value: &'a Option<T>, flag: &str) -> Result<&'a T> {
        value.as_ref().ok_or_else(|| Failure::new(Category::Usage, format!("{flag} is required")).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file =
            ExperimentConfig { seed: Some(1), sample: Some(50), heads: Some("L0H0".into()), ..Default::default() };
        let flags = ExperimentConfig { seed: Some(7), ..Default::default() };
        let merged = flags.overlay(file);
        assert_eq!(merged.seed, Some(7));
        assert_eq!(merged.sample, Some(50));
        assert_eq!(merged.heads.as_deref(), Some("L0H0"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 3}"#).is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "grid": [2, 5]}"#).unwrap();
        assert_eq!(cfg.grid, Some(vec![2.0, 5.0]));
    }

    #[test]
    fn output_location_and_workers_do_not_affect_the_hash_input() {
        let a = ExperimentConfig { out: Some("a".into()), workers: Some(1), seed: Some(3), ..Default::default() };
        let b = ExperimentConfig { out: Some("b".into()), workers: Some(8), seed: Some(3), ..Default::default() };
        assert_eq!(a.result_relevant(), b.result_relevant());
    }
}
