//! Loading models, tokenizers and datasets named by the configuration.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use compmech_core::corpus::{read_dataset, Dataset};
use compmech_core::model::{load_model, parse_heads, HeadRef, ModelBundle, ModelConfig};
use compmech_core::tokenizer::Tokenizer;

use crate::config::{ExperimentConfig, DEFAULT_SAMPLE};
use crate::failure::{Category, Failure};

pub struct LoadedModel {
    pub bundle: ModelBundle,
    pub weights: PathBuf,
    pub dir: PathBuf,
}

/// Resolves `--model` (a directory or a weights file) and its config.json.
pub fn model(cfg: &ExperimentConfig) -> Result<LoadedModel> {
    let path = cfg.require(&cfg.model, "--model")?;
    let (weights, dir) = if path.is_dir() {
        (path.join("model.safetensors"), path.clone())
    } else {
        (path.clone(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    if !weights.exists() {
        return Err(Failure::new(Category::Input, format!("no weights at {}", weights.display())).into());
    }
    let config_path = cfg.model_config.clone().unwrap_or_else(|| dir.join("config.json"));
    if !config_path.exists() {
        return Err(Failure::new(
            Category::Input,
            format!("no model config at {}; pass --model-config", config_path.display()),
        )
        .into());
    }
    let text = std::fs::read_to_string(&config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let config = ModelConfig::from_json(&text).with_context(|| format!("parsing {}", config_path.display()))?;
    let bundle = load_model(&weights, &config).with_context(|| format!("loading {}", weights.display()))?;
    log::info!(
        "model: {} layers, {} heads, d_model {}, {} parameters",
        config.n_layers,
        config.n_heads,
        config.d_model,
        bundle.parameter_count()
    );
    Ok(LoadedModel { bundle, weights, dir })
}

/// `--tokenizer`, else vocab.json/merges.txt beside the model, else bundled GPT-2.
pub fn tokenizer(cfg: &ExperimentConfig, model: &LoadedModel) -> Result<Tokenizer> {
    let dir = cfg.tokenizer.clone().or_else(|| {
        let beside = model.dir.join("vocab.json").exists() && model.dir.join("merges.txt").exists();
        beside.then(|| model.dir.clone())
    });
    let tokenizer = match dir {
        Some(d) => Tokenizer::from_dir(&d).with_context(|| format!("loading tokenizer from {}", d.display()))?,
        None => Tokenizer::gpt2(),
    };
    Ok(tokenizer)
}

/// Fails when the tokenizer can emit ids the model cannot embed.
pub fn check_vocab(tokenizer: &Tokenizer, model: &LoadedModel) -> Result<()> {
    let vocab = model.bundle.config.vocab_size;
    if tokenizer.vocab_size() > vocab {
        return Err(Failure::new(
            Category::Schema,
            format!("tokenizer has {} tokens but the model vocabulary is {vocab}", tokenizer.vocab_size()),
        )
        .into());
    }
    Ok(())
}

/// Reads `--dataset` and applies `--sample`.
pub fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.require(&cfg.dataset, "--dataset")?;
    let full = read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    subsample(full, cfg)
}

pub fn subsample(full: Dataset, cfg: &ExperimentConfig) -> Result<Dataset> {
    let want = cfg.sample.unwrap_or(DEFAULT_SAMPLE);
    if want == 0 || want >= full.len() {
        return Ok(full);
    }
    let seed = cfg.seed.ok_or_else(|| {
        Failure::new(
            Category::Usage,
            format!("--seed is required to subsample {want} of {} instances (pass --sample 0 to use all)", full.len()),
        )
    })?;
    Ok(full.subsample(want, seed))
}

pub fn heads(list: &str, model: &ModelBundle) -> Result<Vec<HeadRef>> {
    let heads = parse_heads(list).map_err(|e| Failure::new(Category::Usage, e))?;
    let cfg = &model.config;
    if let Some(h) = heads.iter().find(|h| h.layer >= cfg.n_layers || h.head >= cfg.n_heads) {
        return Err(Failure::new(
            Category::Usage,
            format!("head {h} does not exist in a {}-layer, {}-head model", cfg.n_layers, cfg.n_heads),
        )
        .into());
    }
    Ok(heads)
}
