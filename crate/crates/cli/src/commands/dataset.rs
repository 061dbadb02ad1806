//! `dataset build`.

use std::collections::HashSet;

use anyhow::{Context, Result};
use compmech_core::corpus::{
    attach_similarity, filter_and_sample, parse_records, write_dataset, Dataset, Embeddings, FieldPaths, PromptStyle,
    SampleOptions, SimilarityReport,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::inputs;
use crate::manifest::{cached_file_hash, Run};

/// Instances drawn when `--n` is absent.
pub const DEFAULT_N: usize = 10_000;

#[derive(Serialize)]
struct BuildReport<'a> {
    provenance: &'a compmech_core::corpus::Provenance,
    similarity: Option<SimilarityReport>,
}

/// Attribute words of every instance, lowercased.
pub fn attribute_words(dataset: &Dataset) -> HashSet<String> {
    dataset
        .instances
        .iter()
        .flat_map(|i| [i.target_true.trim().to_lowercase(), i.target_new.trim().to_lowercase()])
        .collect()
}

pub fn load_embeddings(path: &std::path::Path, dataset: &Dataset) -> Result<Embeddings> {
    let keep = attribute_words(dataset);
    Embeddings::load(path, Some(&keep)).with_context(|| format!("loading embeddings {}", path.display()))
}

pub fn build(cfg: &ExperimentConfig) -> Result<()> {
    let source = cfg.require(&cfg.counterfact, "--counterfact")?.clone();
    let seed = *cfg.require(&cfg.seed, "--seed")?;
    let mut run = Run::start("dataset build", cfg)?;

    let paths = match &cfg.field_paths {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<FieldPaths>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FieldPaths::default(),
    };
    let records = run.stage("read records", || {
        let text = std::fs::read_to_string(&source).with_context(|| format!("reading {}", source.display()))?;
        parse_records(&text, &paths).with_context(|| format!("parsing {}", source.display()))
    })?;
    let model = run.stage("load model", || inputs::model(cfg))?;
    let tokenizer = inputs::tokenizer(cfg, &model)?;
    inputs::check_vocab(&tokenizer, &model)?;
    run.input("counterfact", &source)?;
    run.input("model", &model.weights)?;

    let mut opts = SampleOptions::new(cfg.n.unwrap_or(DEFAULT_N), seed);
    opts.style = PromptStyle { prefix: cfg.prefix.clone().unwrap_or_else(|| PromptStyle::default().prefix) };
    let mut dataset =
        run.stage("filter and sample", || Ok(filter_and_sample(&records, &model.bundle, &tokenizer, &opts)?))?;
    dataset.provenance.source_sha256 = Some(cached_file_hash(&source)?);

    let similarity = match &cfg.embeddings {
        Some(path) => {
            run.input("embeddings", path)?;
            let emb = run.stage("load embeddings", || load_embeddings(path, &dataset))?;
            let report = attach_similarity(&mut dataset, &emb);
            println!("similarity: {} scored, {} out of vocabulary", report.scored, report.out_of_vocabulary);
            Some(report)
        }
        None => None,
    };

    let out = run.out_dir().join("dataset.jsonl");
    write_dataset(&dataset, &out).with_context(|| format!("writing {}", out.display()))?;
    run.record("dataset.jsonl")?;
    run.write_json("build_report.json", &BuildReport { provenance: &dataset.provenance, similarity })?;

    let c = &dataset.provenance.counts;
    println!("records: {}", c.records);
    println!("dropped, target_true not one token: {}", c.multi_token_target_true);
    println!("dropped, target_new not one token: {}", c.multi_token_target_new);
    println!("dropped, identical targets: {}", c.identical_targets);
    println!("dropped, span alignment failed: {}", c.alignment_failed);
    println!("dropped, model not factual: {}", c.not_factual);
    println!("pool: {}", c.pool);
    println!("sampled: {} (seed {seed})", c.sampled);
    println!("wrote {}", out.display());
    run.finish()?;
    Ok(())
}
