//! `intervene`: paired clean and edited win rates, plus an optional α grid.

use anyhow::{Context, Result};
use compmech_core::intervention::{grid_search_alpha, run_interventions, InterventionSpec, DEFAULT_ALPHAS};
use compmech_core::model::HeadRef;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::failure::{Category, Failure};
use crate::inputs;
use crate::manifest::Run;
use crate::output::{csv_bytes, describe, RateOut};

pub const DEFAULT_HEADS: &str = "L10H7,L11H10";

fn join(heads: &[HeadRef]) -> String {
    heads.iter().map(HeadRef::to_string).collect::<Vec<_>>().join(",")
}

fn read_specs(path: &std::path::Path) -> Result<Vec<InterventionSpec>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let specs =
        if value.is_array() { serde_json::from_value(value) } else { serde_json::from_value(value).map(|s| vec![s]) };
    specs.with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct ConditionRow {
    condition: String,
    trials: u64,
    clean_fact_successes: u64,
    clean_fact_rate: String,
    fact_successes: u64,
    fact_rate: String,
    ci95_low: String,
    ci95_high: String,
    cofa_rate: String,
    flipped_to_fact: u64,
    flipped_to_cofa: u64,
    identical_to_clean: bool,
}

#[derive(Serialize)]
struct GridCsvRow {
    alpha: f32,
    trials: u64,
    fact_successes: u64,
    fact_rate: String,
    ci95_low: String,
    ci95_high: String,
    best: bool,
}

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let mut run = Run::start("intervene", cfg)?;
    let model = run.stage("load model", || inputs::model(cfg))?;
    let dataset = run.stage("load dataset", || inputs::dataset(cfg))?;
    run.input("model", &model.weights)?;
    run.input("dataset", cfg.dataset.as_ref().expect("dataset checked"))?;
    let m = &model.bundle;
    let heads = inputs::heads(cfg.heads.as_deref().unwrap_or(DEFAULT_HEADS), m)?;

    let mut labelled: Vec<(String, InterventionSpec)> = Vec::new();
    if let Some(path) = &cfg.spec {
        run.input("spec", path)?;
        for (i, s) in read_specs(path)?.into_iter().enumerate() {
            labelled.push((format!("spec[{i}]"), s));
        }
    }
    if let Some(alpha) = cfg.alpha {
        labelled.push((format!("alpha={alpha} {}", join(&heads)), InterventionSpec::scale(&heads, alpha)));
    }
    if let Some(list) = &cfg.ablate {
        let ablated = inputs::heads(list, m)?;
        labelled.push((format!("ablate {}", join(&ablated)), InterventionSpec::ablate(&ablated)));
    }
    if labelled.is_empty() && cfg.grid.is_none() {
        return Err(Failure::new(Category::Usage, "nothing to do: pass --alpha, --ablate, --grid or --spec").into());
    }
    for (label, spec) in &labelled {
        spec.validate(&m.config).with_context(|| format!("condition {label}"))?;
    }

    println!("instances: {}", dataset.len());
    let mut report = json!({ "instances": dataset.len() });
    if !labelled.is_empty() {
        let specs: Vec<InterventionSpec> = labelled.iter().map(|(_, s)| s.clone()).collect();
        let reports = run.stage("interventions", || Ok(run_interventions(&dataset, m, &specs)?))?;
        let clean = reports[0].clean;
        println!("clean fact win rate: {}", describe(&clean.fact));
        report["clean"] = json!({ "fact": RateOut::from(clean.fact), "cofa": RateOut::from(clean.cofa) });
        let mut rows = Vec::new();
        let mut conditions = Vec::new();
        for ((label, spec), r) in labelled.iter().zip(&reports) {
            let verified = if r.identical_to_clean { " [no-op verified]" } else { "" };
            println!("{label}: fact win rate {}{verified}", describe(&r.edited.fact));
            rows.push(ConditionRow {
                condition: label.clone(),
                trials: r.edited.fact.trials,
                clean_fact_successes: r.clean.fact.successes,
                clean_fact_rate: format!("{:.4}", r.clean.fact.rate),
                fact_successes: r.edited.fact.successes,
                fact_rate: format!("{:.4}", r.edited.fact.rate),
                ci95_low: format!("{:.4}", r.edited.fact.ci_low),
                ci95_high: format!("{:.4}", r.edited.fact.ci_high),
                cofa_rate: format!("{:.4}", r.edited.cofa.rate),
                flipped_to_fact: r.flipped_to_fact,
                flipped_to_cofa: r.flipped_to_cofa,
                identical_to_clean: r.identical_to_clean,
            });
            conditions.push(json!({
                "condition": label,
                "spec": spec,
                "fact": RateOut::from(r.edited.fact),
                "cofa": RateOut::from(r.edited.cofa),
                "flipped_to_fact": r.flipped_to_fact,
                "flipped_to_cofa": r.flipped_to_cofa,
                "identical_to_clean": r.identical_to_clean,
                "no_op_verified": r.identical_to_clean,
            }));
        }
        run.write("interventions.csv", &csv_bytes(rows)?)?;
        report["conditions"] = json!(conditions);
    }

    if let Some(grid) = &cfg.grid {
        let candidates: Vec<f32> = if grid.is_empty() { DEFAULT_ALPHAS.to_vec() } else { grid.clone() };
        let result = run.stage("alpha grid", || Ok(grid_search_alpha(&dataset, m, &heads, &candidates)?))?;
        let rows = result.rows.iter().map(|r| GridCsvRow {
            alpha: r.alpha,
            trials: r.rates.fact.trials,
            fact_successes: r.rates.fact.successes,
            fact_rate: format!("{:.4}", r.rates.fact.rate),
            ci95_low: format!("{:.4}", r.rates.fact.ci_low),
            ci95_high: format!("{:.4}", r.rates.fact.ci_high),
            best: r.alpha == result.best_alpha,
        });
        run.write("grid.csv", &csv_bytes(rows)?)?;
        for r in &result.rows {
            println!("alpha {}: fact win rate {}", r.alpha, describe(&r.rates.fact));
        }
        println!("best alpha: {} ({})", result.best_alpha, describe(&result.best.fact));
        report["grid"] = json!({
            "heads": join(&result.heads),
            "best_alpha": result.best_alpha,
            "best": RateOut::from(result.best.fact),
            "rows": result.rows.iter().map(|r| json!({ "alpha": r.alpha, "fact": RateOut::from(r.rates.fact) })).collect::<Vec<_>>(),
        });
    }

    run.write_json("intervention.json", &report)?;
    println!("wrote {}", run.out_dir().display());
    run.finish()?;
    Ok(())
}
