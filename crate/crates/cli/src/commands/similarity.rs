//! `similarity`: factual win rate per equal-count similarity bin.

use anyhow::Result;
use compmech_core::corpus::{attach_similarity, similarity_bins};
use compmech_core::tracer::{fact_outcomes, WinRates};
use serde::Serialize;
use serde_json::json;

use crate::commands::dataset::load_embeddings;
use crate::config::ExperimentConfig;
use crate::failure::{Category, Failure};
use crate::inputs;
use crate::manifest::Run;
use crate::output::{csv_bytes, describe, RateOut};

pub const DEFAULT_BINS: usize = 10;

#[derive(Serialize)]
struct BinRow {
    bin: usize,
    lower: f32,
    upper: f32,
    count: usize,
    fact_successes: u64,
    fact_rate: String,
    ci95_low: String,
    ci95_high: String,
}

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let n_bins = cfg.bins.unwrap_or(DEFAULT_BINS);
    let mut run = Run::start("similarity", cfg)?;
    let model = run.stage("load model", || inputs::model(cfg))?;
    let mut dataset = run.stage("load dataset", || inputs::dataset(cfg))?;
    run.input("model", &model.weights)?;
    run.input("dataset", cfg.dataset.as_ref().expect("dataset checked"))?;

    if let Some(path) = &cfg.embeddings {
        run.input("embeddings", path)?;
        let emb = run.stage("load embeddings", || load_embeddings(path, &dataset))?;
        let r = attach_similarity(&mut dataset, &emb);
        println!("similarity: {} scored, {} out of vocabulary", r.scored, r.out_of_vocabulary);
    } else if dataset.instances.iter().all(|i| i.similarity.is_none()) {
        return Err(Failure::new(
            Category::Input,
            "dataset carries no similarity scores; pass --embeddings with a word-vector table",
        )
        .into());
    }

    let outcomes = run.stage("win rates", || Ok(fact_outcomes(&dataset, &model.bundle, None)?))?;
    let (bins, excluded) = similarity_bins(&dataset.instances, n_bins)?;
    let all = WinRates::from_outcomes(outcomes.iter().copied());
    let scored = WinRates::from_outcomes(
        dataset.instances.iter().zip(&outcomes).filter(|(i, _)| i.similarity.is_some()).map(|(_, &w)| w),
    );

    let mut rows = Vec::with_capacity(bins.len());
    let mut json_bins = Vec::with_capacity(bins.len());
    for b in &bins {
        let r = WinRates::from_outcomes(b.members.iter().map(|&i| outcomes[i])).fact;
        println!("bin {} [{:.4}, {:.4}]: fact win rate {}", b.index, b.lower, b.upper, describe(&r));
        rows.push(BinRow {
            bin: b.index,
            lower: b.lower,
            upper: b.upper,
            count: b.members.len(),
            fact_successes: r.successes,
            fact_rate: format!("{:.4}", r.rate),
            ci95_low: format!("{:.4}", r.ci_low),
            ci95_high: format!("{:.4}", r.ci_high),
        });
        json_bins.push(json!({ "bin": b.index, "lower": b.lower, "upper": b.upper, "fact": RateOut::from(r) }));
    }
    println!("baseline, all instances: {}", describe(&all.fact));
    println!("baseline, scored instances: {}", describe(&scored.fact));
    if excluded > 0 {
        println!("excluded (no similarity score): {excluded}");
    }

    run.write("similarity_bins.csv", &csv_bytes(rows)?)?;
    run.write_json(
        "similarity.json",
        &json!({
            "instances": dataset.len(),
            "scored": dataset.len() - excluded,
            "excluded": excluded,
            "baseline_all": RateOut::from(all.fact),
            "baseline_scored": RateOut::from(scored.fact),
            "bins": json_bins,
        }),
    )?;
    println!("wrote {}", run.out_dir().display());
    run.finish()?;
    Ok(())
}
