//! `fixtures verify`: model logits and tokenizer encodings against reference files.

use anyhow::{Context, Result};
use compmech_core::model::{CaptureSpec, Scope};
use serde::Deserialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::failure::{Category, Failure};
use crate::inputs;
use crate::manifest::Run;

#[derive(Deserialize)]
struct ReferenceLogits {
    atol: f32,
    prompts: Vec<Vec<u32>>,
    final_logits: Vec<Vec<f32>>,
    #[serde(default)]
    all_position_logits_prompt: Option<usize>,
    #[serde(default)]
    all_position_logits: Option<Vec<Vec<f32>>>,
}

#[derive(Deserialize)]
struct ReferenceEncoding {
    text: String,
    ids: Vec<u32>,
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    if a.len() != b.len() {
        return f32::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, |m, d| if d.is_nan() { f32::INFINITY } else { m.max(d) })
}

pub fn verify(cfg: &ExperimentConfig) -> Result<()> {
    let mut run = Run::start("fixtures verify", cfg)?;
    let model = run.stage("load model", || inputs::model(cfg))?;
    run.input("model", &model.weights)?;
    let path = cfg.fixtures.clone().unwrap_or_else(|| model.dir.join("logits.json"));
    run.input("fixtures", &path)?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let reference: ReferenceLogits =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if reference.prompts.len() != reference.final_logits.len() {
        return Err(Failure::new(Category::Schema, "prompts and final_logits differ in length").into());
    }

    let m = &model.bundle;
    let mut failures = Vec::new();
    let mut per_prompt = Vec::new();
    run.stage("final logits", || {
        for (i, (prompt, want)) in reference.prompts.iter().zip(&reference.final_logits).enumerate() {
            let out = m.forward(prompt, &CaptureSpec::logits_last(), None)?;
            let diff = max_abs_diff(out.final_logits().expect("final logits captured"), want);
            println!("prompt {i} ({} tokens): max |diff| {diff:.3e}", prompt.len());
            if diff > reference.atol {
                failures.push(format!("prompt {i}: {diff:.3e} > {:.1e}", reference.atol));
            }
            per_prompt.push(json!({ "prompt": i, "tokens": prompt.len(), "max_abs_diff": diff }));
        }
        Ok(())
    })?;

    let mut all_position = None;
    if let (Some(idx), Some(rows)) = (reference.all_position_logits_prompt, &reference.all_position_logits) {
        let prompt = reference
            .prompts
            .get(idx)
            .ok_or_else(|| Failure::new(Category::Schema, format!("all_position_logits_prompt {idx} out of range")))?;
        let out = m.forward(prompt, &CaptureSpec { logits: Scope::All, ..Default::default() }, None)?;
        let diff = if rows.len() == prompt.len() {
            rows.iter().enumerate().map(|(p, want)| max_abs_diff(out.logits.row(p), want)).fold(0.0, f32::max)
        } else {
            f32::INFINITY
        };
        println!("all positions of prompt {idx}: max |diff| {diff:.3e}");
        if diff > reference.atol {
            failures.push(format!("all positions of prompt {idx}: {diff:.3e} > {:.1e}", reference.atol));
        }
        all_position = Some(diff);
    }

    let mut encodings = None;
    if let Some(enc_path) = &cfg.encodings {
        run.input("encodings", enc_path)?;
        let tokenizer = inputs::tokenizer(cfg, &model)?;
        let text = std::fs::read_to_string(enc_path).with_context(|| format!("reading {}", enc_path.display()))?;
        let cases: Vec<ReferenceEncoding> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", enc_path.display()))?;
        let mismatched: Vec<&str> =
            cases.iter().filter(|c| tokenizer.encode(&c.text) != c.ids).map(|c| c.text.as_str()).collect();
        println!("encodings: {}/{} match", cases.len() - mismatched.len(), cases.len());
        for t in &mismatched {
            failures.push(format!("encoding differs for {t:?}"));
        }
        encodings = Some(json!({ "cases": cases.len(), "mismatched": mismatched }));
    }

    run.write_json(
        "fixtures_report.json",
        &json!({
            "atol": reference.atol,
            "prompts": per_prompt,
            "all_position_max_abs_diff": all_position,
            "encodings": encodings,
            "passed": failures.is_empty(),
        }),
    )?;
    run.finish()?;
    if failures.is_empty() {
        println!("fixtures verified");
        Ok(())
    } else {
        Err(Failure::new(Category::Numeric, format!("fixture mismatch: {}", failures.join("; "))).into())
    }
}
