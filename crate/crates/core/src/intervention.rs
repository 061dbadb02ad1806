//! Attention-entry scaling, head ablation and the α grid search.
//!
//! An edit multiplies one post-softmax attention weight by α and leaves the
//! rest of the row alone, so rows may no longer sum to one. Runs resume from
//! the clean residual stream at the first edited layer, which is bitwise the
//! same as a full edited pass because earlier layers are untouched.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, PromptInstance};
use crate::model::{AttentionEdits, AttentionScale, CaptureSpec, HeadRef, ModelBundle, ModelConfig, ModelError};
use crate::tracer::WinRates;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("instance {0} has no attribute position")]
    MissingAttribute(String),
    #[error("invalid intervention: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, InterventionError>;

/// Heads in the 6.9B-parameter Pythia model whose last-to-attribute entries
/// are scaled in the reference experiments. Kept for documentation: that
/// architecture is not supported by this runtime.
pub const PYTHIA_6_9B_HEADS: [HeadRef; 3] =
    [HeadRef { layer: 17, head: 28 }, HeadRef { layer: 20, head: 18 }, HeadRef { layer: 21, head: 8 }];

/// Heads of GPT-2 small whose outputs suppress the counterfactual token most.
pub const GPT2_SMALL_HEADS: [HeadRef; 2] = [HeadRef { layer: 10, head: 7 }, HeadRef { layer: 11, head: 10 }];

/// Which attention entry an edit targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EditTarget {
    /// Row = last position `N`, column = the instance's attribute position.
    #[default]
    LastToAttribute,
    Explicit {
        row: usize,
        col: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadEdit {
    pub layer: usize,
    pub head: usize,
    #[serde(default)]
    pub target: EditTarget,
    pub alpha: f32,
}

/// Edits and ablations, resolved against each instance's positions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    #[serde(default)]
    pub edits: Vec<HeadEdit>,
    #[serde(default)]
    pub ablations: Vec<HeadRef>,
}

impl InterventionSpec {
    /// Scales the last-to-attribute entry of every head in `heads` by `alpha`.
    pub fn scale(heads: &[HeadRef], alpha: f32) -> Self {
        Self {
            edits: heads
                .iter()
                .map(|h| HeadEdit { layer: h.layer, head: h.head, target: EditTarget::LastToAttribute, alpha })
                .collect(),
            ablations: Vec::new(),
        }
    }

    pub fn ablate(heads: &[HeadRef]) -> Self {
        Self { edits: Vec::new(), ablations: heads.to_vec() }
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty() && self.ablations.is_empty()
    }

    /// Checks α values, head ranges and duplicates that do not depend on an instance.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let in_range = |layer: usize, head: usize| layer < config.n_layers && head < config.n_heads;
        for (i, e) in self.edits.iter().enumerate() {
            if !in_range(e.layer, e.head) {
                return Err(InterventionError::Invalid(format!(
                    "edit on unknown head {}",
                    HeadRef::new(e.layer, e.head)
                )));
            }
            if !(e.alpha.is_finite() && e.alpha > 0.0) {
                return Err(InterventionError::Invalid(format!("alpha must be positive and finite, got {}", e.alpha)));
            }
            if self.edits[..i].iter().any(|o| (o.layer, o.head, o.target) == (e.layer, e.head, e.target)) {
                return Err(InterventionError::Invalid(format!("duplicate edit on {}", HeadRef::new(e.layer, e.head))));
            }
        }
        if let Some(h) = self.ablations.iter().find(|h| !in_range(h.layer, h.head)) {
            return Err(InterventionError::Invalid(format!("ablation of unknown head {h}")));
        }
        Ok(())
    }

    /// Concrete edits for one instance.
    pub fn resolve(&self, inst: &PromptInstance, model: &ModelBundle) -> Result<AttentionEdits> {
        self.validate(&model.config)?;
        let mut scales = Vec::with_capacity(self.edits.len());
        for e in &self.edits {
            let (row, col) = match e.target {
                EditTarget::LastToAttribute => (
                    inst.last_position(),
                    inst.attribute_position().ok_or_else(|| InterventionError::MissingAttribute(inst.id.clone()))?,
                ),
                EditTarget::Explicit { row, col } => (row, col),
            };
            scales.push(AttentionScale { layer: e.layer, head: e.head, row, col, alpha: e.alpha });
        }
        let edits = AttentionEdits { scales, ablations: self.ablations.clone() };
        edits.validate(model, inst.tokens.len())?;
        Ok(edits)
    }
}

/// Clean and intervened win rates over the same instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub spec: InterventionSpec,
    pub clean: WinRates,
    pub edited: WinRates,
    /// Instances where `t_fact` lost before and wins after.
    pub flipped_to_fact: u64,
    pub flipped_to_cofa: u64,
    /// True when every final-position logit vector is bitwise identical to the clean run.
    pub identical_to_clean: bool,
}

struct InstanceOutcome {
    clean_fact_wins: bool,
    /// Per spec: (fact wins, logits identical to clean).
    edited: Vec<(bool, bool)>,
}

fn run_instance(model: &ModelBundle, inst: &PromptInstance, specs: &[InterventionSpec]) -> Result<InstanceOutcome> {
    let resolved: Vec<AttentionEdits> = specs.iter().map(|s| s.resolve(inst, model)).collect::<Result<_>>()?;
    let n_layers = model.config.n_layers;
    let need_residual = resolved.iter().any(|e| e.min_layer().is_some());
    let capture = CaptureSpec { residual: need_residual, ..CaptureSpec::logits_last() };
    let clean = model.forward(&inst.tokens, &capture, None)?;
    let clean_logits = clean.final_logits().expect("final logits captured");
    let wins = |logits: &[f32]| logits[inst.t_fact as usize] > logits[inst.t_cofa as usize];

    let mut edited = Vec::with_capacity(specs.len());
    for edits in &resolved {
        let start = edits.min_layer().unwrap_or(n_layers);
        let out = if start == n_layers {
            model.forward_from(n_layers, clean.trace.final_residual(), &CaptureSpec::logits_last(), Some(edits))?
        } else {
            let x = clean.trace.residual_layer(start).ok_or(ModelError::NotCaptured("residual stream"))?;
            model.forward_from(start, x, &CaptureSpec::logits_last(), Some(edits))?
        };
        let logits = out.final_logits().expect("final logits captured");
        let same = logits.iter().zip(clean_logits).all(|(a, b)| a.to_bits() == b.to_bits());
        edited.push((wins(logits), same));
    }
    Ok(InstanceOutcome { clean_fact_wins: wins(clean_logits), edited })
}

/// Runs every spec against one shared clean pass per instance.
pub fn run_interventions(
    dataset: &Dataset,
    model: &ModelBundle,
    specs: &[InterventionSpec],
) -> Result<Vec<InterventionReport>> {
    for s in specs {
        s.validate(&model.config)?;
    }
    let outcomes: Vec<InstanceOutcome> =
        dataset.instances.par_iter().map(|inst| run_instance(model, inst, specs)).collect::<Result<_>>()?;
    let clean = WinRates::from_outcomes(outcomes.iter().map(|o| o.clean_fact_wins));
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let (mut to_fact, mut to_cofa) = (0, 0);
            for o in &outcomes {
                match (o.clean_fact_wins, o.edited[i].0) {
                    (false, true) => to_fact += 1,
                    (true, false) => to_cofa += 1,
                    _ => {}
                }
            }
            InterventionReport {
                spec: spec.clone(),
                clean,
                edited: WinRates::from_outcomes(outcomes.iter().map(|o| o.edited[i].0)),
                flipped_to_fact: to_fact,
                flipped_to_cofa: to_cofa,
                identical_to_clean: outcomes.iter().all(|o| o.edited[i].1),
            }
        })
        .collect())
}

/// Scales the last-to-attribute attention entry of each head in `heads` by `alpha`.
pub fn apply_alpha(
    dataset: &Dataset,
    model: &ModelBundle,
    heads: &[HeadRef],
    alpha: f32,
) -> Result<InterventionReport> {
    let mut reports = run_interventions(dataset, model, &[InterventionSpec::scale(heads, alpha)])?;
    Ok(reports.remove(0))
}

/// Zeroes the outputs of `heads` at every position.
pub fn ablate_heads(dataset: &Dataset, model: &ModelBundle, heads: &[HeadRef]) -> Result<InterventionReport> {
    let mut reports = run_interventions(dataset, model, &[InterventionSpec::ablate(heads)])?;
    Ok(reports.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f32,
    pub rates: WinRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub heads: Vec<HeadRef>,
    pub instances: usize,
    pub clean: WinRates,
    /// One row per distinct candidate, ascending α.
    pub rows: Vec<GridRow>,
    /// Candidate with the highest factual win rate; ties go to the smaller α.
    pub best_alpha: f32,
    pub best: WinRates,
}

/// Default α candidates.
pub const DEFAULT_ALPHAS: [f32; 4] = [2.0, 5.0, 10.0, 100.0];

/// Evaluates [`apply_alpha`] for every candidate and keeps the best.
pub fn grid_search_alpha(
    dataset: &Dataset,
    model: &ModelBundle,
    heads: &[HeadRef],
    candidates: &[f32],
) -> Result<GridSearchResult> {
    let mut alphas = candidates.to_vec();
    if let Some(bad) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(InterventionError::Invalid(format!("alpha candidates must be positive and finite, got {bad}")));
    }
    alphas.sort_by(f32::total_cmp);
    alphas.dedup();
    if alphas.is_empty() {
        return Err(InterventionError::Invalid("no alpha candidates".into()));
    }
    let specs: Vec<InterventionSpec> = alphas.iter().map(|&a| InterventionSpec::scale(heads, a)).collect();
    let reports = run_interventions(dataset, model, &specs)?;
    let rows: Vec<GridRow> =
        alphas.iter().zip(&reports).map(|(&alpha, r)| GridRow { alpha, rates: r.edited }).collect();
    let mut best = rows[0];
    for r in &rows[1..] {
        if r.rates.fact.successes > best.rates.fact.successes {
            best = *r;
        }
    }
    Ok(GridSearchResult {
        heads: heads.to_vec(),
        instances: dataset.len(),
        clean: reports[0].clean,
        rows,
        best_alpha: best.alpha,
        best: best.rates,
    })
}

/// Causal attention entries (diagonal included) across all heads for a
/// prompt of `prompt_len` tokens.
pub fn count_attention_entries(config: &ModelConfig, prompt_len: usize) -> Result<u64> {
    if prompt_len == 0 {
        return Err(InterventionError::Invalid("prompt length must be at least 1".into()));
    }
    let t = prompt_len as u64 * (prompt_len as u64 + 1) / 2;
    Ok(config.n_layers as u64 * config.n_heads as u64 * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_entry_counts() {
        let gpt2 = ModelConfig::gpt2_small();
        assert_eq!(count_attention_entries(&gpt2, 21).unwrap(), 33_264);
        let tiny = ModelConfig { n_layers: 1, n_heads: 1, ..gpt2 };
        assert_eq!(count_attention_entries(&tiny, 1).unwrap(), 1);
        assert_eq!(count_attention_entries(&tiny, 2).unwrap(), 3);
        assert!(count_attention_entries(&tiny, 0).is_err());
    }

    #[test]
    fn spec_validation() {
        let cfg = ModelConfig::gpt2_small();
        assert!(InterventionSpec::scale(&GPT2_SMALL_HEADS, 5.0).validate(&cfg).is_ok());
        assert!(InterventionSpec::scale(&GPT2_SMALL_HEADS, 0.0).validate(&cfg).is_err());
        assert!(InterventionSpec::scale(&GPT2_SMALL_HEADS, f32::NAN).validate(&cfg).is_err());
        assert!(InterventionSpec::scale(&[HeadRef::new(12, 0)], 2.0).validate(&cfg).is_err());
        assert!(InterventionSpec::scale(&[HeadRef::new(3, 3), HeadRef::new(3, 3)], 2.0).validate(&cfg).is_err());
        assert!(InterventionSpec::ablate(&PYTHIA_6_9B_HEADS).validate(&cfg).is_err());
    }

    #[test]
    fn spec_json_defaults_target() {
        let spec: InterventionSpec =
            serde_json::from_str(r#"{"edits": [{"layer": 10, "head": 7, "alpha": 5.0}]}"#).unwrap();
        assert_eq!(spec.edits[0].target, EditTarget::LastToAttribute);
        assert!(spec.ablations.is_empty());
        let explicit: InterventionSpec = serde_json::from_str(
            r#"{"edits": [{"layer": 0, "head": 1, "alpha": 2.0, "target": {"kind": "explicit", "row": 4, "col": 2}}],
                "ablations": [{"layer": 1, "head": 0}]}"#,
        )
        .unwrap();
        assert_eq!(explicit.edits[0].target, EditTarget::Explicit { row: 4, col: 2 });
    }
}
