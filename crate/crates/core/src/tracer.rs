//! Logit inspection: the logit lens over the residual stream, attribution of
//! the `t_cofa` vs `t_fact` margin to blocks and heads, attention profiles of
//! the last position, rank curves, and win rates.
//!
//! Every analysis runs one forward pass per instance in parallel, collects
//! the per-instance results in dataset order, and folds them sequentially so
//! output does not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Group, PromptInstance};
use crate::intervention::{InterventionError, InterventionSpec};
use crate::model::{CaptureSpec, HeadRef, ModelBundle, ModelError, Scope, TraceRecord};
use crate::stats::{median, Rate, RunningStats, Summary};
use crate::tensor::{self, dot};
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("instance {instance}: no `{group}` position")]
    MissingGroup { instance: String, group: Group },
    #[error("head {0} does not exist in this model")]
    UnknownHead(HeadRef),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Intervention(#[from] InterventionError),
}

pub type Result<T> = std::result::Result<T, TraceError>;

/// How block and head outputs are mapped to vocabulary space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    /// `W_U · c`, with no final layernorm.
    #[default]
    Bare,
    /// `W_U · (γ ⊙ (c − mean(c)) / σ_N)`: the final layernorm linearised at
    /// the instance's final residual, whose scale `σ_N` is shared by every
    /// component. The bias `β` is not attributed to any component.
    FinalNorm,
}

impl std::str::FromStr for Projection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bare" => Ok(Projection::Bare),
            "final-norm" => Ok(Projection::FinalNorm),
            _ => Err(format!("unknown projection `{s}` (expected bare or final-norm)")),
        }
    }
}

/// Full-vocabulary logit lens `W_U · ln_f(x_pos^layer)`.
pub fn logit_lens(trace: &TraceRecord, model: &ModelBundle, pos: usize, layer: usize) -> Result<Vec<f32>> {
    let x = trace.residual(layer, pos)?;
    Ok(model.unembed(&model.final_norm(x)))
}

/// Logits of `t_fact` and `t_cofa` under the lens.
fn lens_pair(model: &ModelBundle, x: &[f32], inst: &PromptInstance) -> (f64, f64) {
    let h = model.final_norm(x);
    let u = model.unembed_rows();
    (f64::from(dot(u.row(inst.t_fact as usize), &h)), f64::from(dot(u.row(inst.t_cofa as usize), &h)))
}

fn fact_wins(logit_fact: f32, logit_cofa: f32) -> bool {
    logit_fact > logit_cofa
}

/// Maps a component output to its `Δ_cofa` under one projection.
struct Projector {
    /// `u_cofa − u_fact`, pre-multiplied by `γ / σ_N` for the final-norm convention.
    direction: Vec<f32>,
    centre: bool,
}

impl Projector {
    fn new(model: &ModelBundle, inst: &PromptInstance, kind: Projection, final_residual: &[f32]) -> Self {
        let u = model.unembed_rows();
        let diff: Vec<f32> =
            u.row(inst.t_cofa as usize).iter().zip(u.row(inst.t_fact as usize)).map(|(c, f)| c - f).collect();
        match kind {
            Projection::Bare => Self { direction: diff, centre: false },
            Projection::FinalNorm => {
                let mut scratch = final_residual.to_vec();
                let sigma = tensor::normalize_row(&mut scratch, model.config.layer_norm_eps);
                let direction = diff.iter().zip(&model.ln_f.gain).map(|(d, g)| d * g / sigma).collect();
                Self { direction, centre: true }
            }
        }
    }

    fn delta(&self, v: &[f32]) -> f64 {
        let mean = if self.centre { v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64 } else { 0.0 };
        self.direction.iter().zip(v).map(|(&d, &x)| f64::from(d) * (f64::from(x) - mean)).sum()
    }
}

fn representative(inst: &PromptInstance, g: Group) -> Result<usize> {
    inst.spans.representative(g).ok_or_else(|| TraceError::MissingGroup { instance: inst.id.clone(), group: g })
}

fn check_nonempty(dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        Err(TraceError::EmptyDataset)
    } else {
        Ok(())
    }
}

fn check_heads(model: &ModelBundle, heads: &[HeadRef]) -> Result<()> {
    match heads.iter().find(|h| h.layer >= model.config.n_layers || h.head >= model.config.n_heads) {
        Some(&h) => Err(TraceError::UnknownHead(h)),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------- lens map

/// Mean and variance of the two target logits at one layer and group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensCell {
    pub layer: usize,
    pub group: Group,
    pub fact: Summary,
    pub cofa: Summary,
}

/// Lens values at one token of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLens {
    pub instance: String,
    pub layer: usize,
    pub group: Group,
    pub position: usize,
    pub fact: f32,
    pub cofa: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitLensMap {
    /// Residual layers `0..=n_layers`, layer 0 being the embedding.
    pub n_layers: usize,
    /// `(n_layers + 1) × 7` cells, layer-major in [`Group::ALL`] order.
    pub cells: Vec<LensCell>,
    /// Every token of every span, when requested.
    pub per_token: Option<Vec<TokenLens>>,
}

impl LogitLensMap {
    pub fn cell(&self, layer: usize, group: Group) -> &LensCell {
        &self.cells[layer * Group::ALL.len() + group.index()]
    }

    /// Group with the largest mean logit of `t_cofa` (or `t_fact`) at `layer`.
    pub fn strongest_group(&self, layer: usize, cofa: bool) -> Group {
        let mut best = (Group::ALL[0], f64::NEG_INFINITY);
        for g in Group::ALL {
            let c = self.cell(layer, g);
            let s = if cofa { c.cofa } else { c.fact };
            if s.count > 0 && s.mean > best.1 {
                best = (g, s.mean);
            }
        }
        best.0
    }
}

/// Logit-lens values of `t_fact` and `t_cofa` per layer and position group,
/// each group represented by its last token.
pub fn layer_position_map(dataset: &Dataset, model: &ModelBundle, per_token: bool) -> Result<LogitLensMap> {
    check_nonempty(dataset)?;
    let n_layers = model.config.n_layers;
    let capture = CaptureSpec { residual: true, ..Default::default() };
    type Values = (Vec<Option<(f64, f64)>>, Vec<TokenLens>);
    let per_instance: Vec<Values> = dataset
        .instances
        .par_iter()
        .map(|inst| -> Result<Values> {
            let out = model.forward(&inst.tokens, &capture, None)?;
            let mut cells = Vec::with_capacity((n_layers + 1) * Group::ALL.len());
            let mut tokens = Vec::new();
            for layer in 0..=n_layers {
                for g in Group::ALL {
                    let value = match inst.spans.representative(g) {
                        Some(pos) => Some(lens_pair(model, out.trace.residual(layer, pos)?, inst)),
                        None => None,
                    };
                    cells.push(value);
                    if per_token {
                        for &pos in inst.spans.get(g) {
                            let (fact, cofa) = lens_pair(model, out.trace.residual(layer, pos)?, inst);
                            tokens.push(TokenLens {
                                instance: inst.id.clone(),
                                layer,
                                group: g,
                                position: pos,
                                fact: fact as f32,
                                cofa: cofa as f32,
                            });
                        }
                    }
                }
            }
            Ok((cells, tokens))
        })
        .collect::<Result<_>>()?;

    let n_cells = (n_layers + 1) * Group::ALL.len();
    let mut fact = vec![RunningStats::new(); n_cells];
    let mut cofa = vec![RunningStats::new(); n_cells];
    let mut all_tokens = per_token.then(Vec::new);
    for (cells, tokens) in per_instance {
        for (i, v) in cells.into_iter().enumerate() {
            if let Some((f, c)) = v {
                fact[i].push(f);
                cofa[i].push(c);
            }
        }
        if let Some(t) = all_tokens.as_mut() {
            t.extend(tokens);
        }
    }
    let cells = (0..n_cells)
        .map(|i| LensCell {
            layer: i / Group::ALL.len(),
            group: Group::ALL[i % Group::ALL.len()],
            fact: fact[i].summary(),
            cofa: cofa[i].summary(),
        })
        .collect();
    Ok(LogitLensMap { n_layers, cells, per_token: all_tokens })
}

// ------------------------------------------------------------- attribution

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockAttribution {
    pub layer: usize,
    pub attn: Summary,
    pub mlp: Summary,
    /// Contribution of the attention output bias `b_O`.
    pub attn_bias: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadAttribution {
    pub head: HeadRef,
    pub delta: Summary,
}

/// `Δ_cofa = logit(t_cofa) − logit(t_fact)` of each component's output at
/// the last position, aggregated over the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub projection: Projection,
    pub instances: usize,
    /// The embedding `x^0_N`.
    pub embedding: Summary,
    pub blocks: Vec<BlockAttribution>,
    /// Layer-major; empty unless heads were requested.
    pub heads: Vec<HeadAttribution>,
    /// Largest per-instance `|Σ_h Δ_h + Δ_bias − Δ_block|`.
    pub max_head_decomposition_error: f64,
    /// Per instance, the components' summed `Δ` minus the same projection
    /// applied to the final residual `x^L_N`.
    pub telescoping_error: Summary,
    pub max_telescoping_error: f64,
    /// Per instance, the model's actual final `Δ` minus the components' sum:
    /// the part due to the final layernorm (and its bias).
    pub final_norm_gap: Summary,
    /// The model's actual final `Δ`.
    pub final_delta: Summary,
}

impl AttributionRecord {
    pub fn head(&self, h: HeadRef) -> Option<&HeadAttribution> {
        self.heads.iter().find(|a| a.head == h)
    }

    /// Heads sorted by mean `Δ_cofa`, most negative first; ties by head order.
    pub fn heads_by_mean(&self) -> Vec<&HeadAttribution> {
        let mut v: Vec<&HeadAttribution> = self.heads.iter().collect();
        v.sort_by(|a, b| a.delta.mean.total_cmp(&b.delta.mean).then(a.head.cmp(&b.head)));
        v
    }

    pub fn most_negative(&self, n: usize) -> Vec<HeadRef> {
        self.heads_by_mean().into_iter().take(n).map(|a| a.head).collect()
    }

    pub fn most_positive(&self, n: usize) -> Vec<HeadRef> {
        self.heads_by_mean().into_iter().rev().take(n).map(|a| a.head).collect()
    }

    /// Sum of negative head means.
    pub fn total_negative(&self) -> f64 {
        self.heads.iter().map(|a| a.delta.mean.min(0.0)).sum()
    }

    /// Fraction of [`Self::total_negative`] carried by `heads`.
    pub fn negative_share(&self, heads: &[HeadRef]) -> f64 {
        let total = self.total_negative();
        let part: f64 = heads.iter().filter_map(|&h| self.head(h)).map(|a| a.delta.mean.min(0.0)).sum();
        if total == 0.0 {
            0.0
        } else {
            part / total
        }
    }

    /// Fraction of a layer's positive head mass carried by `heads` (all in that layer).
    pub fn layer_positive_share(&self, layer: usize, heads: &[HeadRef]) -> f64 {
        let total: f64 = self.heads.iter().filter(|a| a.head.layer == layer).map(|a| a.delta.mean.max(0.0)).sum();
        let part: f64 = heads
            .iter()
            .filter(|h| h.layer == layer)
            .filter_map(|&h| self.head(h))
            .map(|a| a.delta.mean.max(0.0))
            .sum();
        if total == 0.0 {
            0.0
        } else {
            part / total
        }
    }
}

struct InstanceAttribution {
    embedding: f64,
    attn: Vec<f64>,
    mlp: Vec<f64>,
    bias: Vec<f64>,
    heads: Vec<f64>,
    decomposition_error: f64,
    telescoping_error: f64,
    final_norm_gap: f64,
    final_delta: f64,
}

fn attribute_instance(
    model: &ModelBundle,
    inst: &PromptInstance,
    projection: Projection,
    with_heads: bool,
) -> Result<InstanceAttribution> {
    let cfg = &model.config;
    let capture = CaptureSpec {
        blocks: Scope::Last,
        heads: if with_heads { Scope::Last } else { Scope::Off },
        logits: Scope::Last,
        ..Default::default()
    };
    let out = model.forward(&inst.tokens, &capture, None)?;
    let n = inst.last_position();
    let x_final = out.trace.final_residual().row(n);
    let proj = Projector::new(model, inst, projection, x_final);
    let embedding = proj.delta(model.embed(&inst.tokens).row(n));

    let mut attn = Vec::with_capacity(cfg.n_layers);
    let mut mlp = Vec::with_capacity(cfg.n_layers);
    let mut bias = Vec::with_capacity(cfg.n_layers);
    let mut heads = Vec::new();
    let mut decomposition_error = 0.0f64;
    for l in 0..cfg.n_layers {
        let a = proj.delta(out.trace.attn_out(l, n)?);
        let b = proj.delta(&model.layers[l].attn.b_o);
        attn.push(a);
        mlp.push(proj.delta(out.trace.mlp_out(l, n)?));
        bias.push(b);
        if with_heads {
            let mut sum = b;
            for h in 0..cfg.n_heads {
                let d = proj.delta(out.trace.head_out(l, h, n)?);
                heads.push(d);
                sum += d;
            }
            decomposition_error = decomposition_error.max((sum - a).abs());
        }
    }
    let components = embedding + attn.iter().sum::<f64>() + mlp.iter().sum::<f64>();
    let logits = out.final_logits().expect("final logits captured");
    let final_delta = f64::from(logits[inst.t_cofa as usize]) - f64::from(logits[inst.t_fact as usize]);
    Ok(InstanceAttribution {
        embedding,
        attn,
        mlp,
        bias,
        heads,
        decomposition_error,
        telescoping_error: components - proj.delta(x_final),
        final_norm_gap: final_delta - components,
        final_delta,
    })
}

fn attribute(
    dataset: &Dataset,
    model: &ModelBundle,
    projection: Projection,
    with_heads: bool,
) -> Result<AttributionRecord> {
    check_nonempty(dataset)?;
    let cfg = &model.config;
    let per_instance: Vec<InstanceAttribution> = dataset
        .instances
        .par_iter()
        .map(|inst| attribute_instance(model, inst, projection, with_heads))
        .collect::<Result<_>>()?;

    let mut embedding = RunningStats::new();
    let mut attn = vec![RunningStats::new(); cfg.n_layers];
    let mut mlp = vec![RunningStats::new(); cfg.n_layers];
    let mut bias = vec![RunningStats::new(); cfg.n_layers];
    let mut heads = vec![RunningStats::new(); if with_heads { cfg.n_layers * cfg.n_heads } else { 0 }];
    let (mut tele, mut gap, mut fin) = (RunningStats::new(), RunningStats::new(), RunningStats::new());
    let (mut max_dec, mut max_tele) = (0.0f64, 0.0f64);
    for r in &per_instance {
        embedding.push(r.embedding);
        for l in 0..cfg.n_layers {
            attn[l].push(r.attn[l]);
            mlp[l].push(r.mlp[l]);
            bias[l].push(r.bias[l]);
        }
        for (s, &d) in heads.iter_mut().zip(&r.heads) {
            s.push(d);
        }
        max_dec = max_dec.max(r.decomposition_error);
        max_tele = max_tele.max(r.telescoping_error.abs());
        tele.push(r.telescoping_error);
        gap.push(r.final_norm_gap);
        fin.push(r.final_delta);
    }
    Ok(AttributionRecord {
        projection,
        instances: per_instance.len(),
        embedding: embedding.summary(),
        blocks: (0..cfg.n_layers)
            .map(|l| BlockAttribution {
                layer: l,
                attn: attn[l].summary(),
                mlp: mlp[l].summary(),
                attn_bias: bias[l].summary(),
            })
            .collect(),
        heads: heads
            .iter()
            .enumerate()
            .map(|(i, s)| HeadAttribution { head: HeadRef::new(i / cfg.n_heads, i % cfg.n_heads), delta: s.summary() })
            .collect(),
        max_head_decomposition_error: max_dec,
        telescoping_error: tele.summary(),
        max_telescoping_error: max_tele,
        final_norm_gap: gap.summary(),
        final_delta: fin.summary(),
    })
}

/// `Δ_cofa` of every attention and MLP block output at the last position.
pub fn block_attribution(dataset: &Dataset, model: &ModelBundle, projection: Projection) -> Result<AttributionRecord> {
    attribute(dataset, model, projection, false)
}

/// As [`block_attribution`], adding `Δ_cofa` of every head's output.
pub fn head_attribution(dataset: &Dataset, model: &ModelBundle, projection: Projection) -> Result<AttributionRecord> {
    attribute(dataset, model, projection, true)
}

// ------------------------------------------------------- attention profile

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub head: HeadRef,
    /// Attention mass from the last position to each group, in [`Group::ALL`] order.
    pub groups: Vec<(Group, Summary)>,
}

impl HeadProfile {
    /// Group receiving the largest mean attention.
    pub fn top_group(&self) -> Group {
        let mut best = self.groups[0];
        for &(g, s) in &self.groups[1..] {
            if s.mean > best.1.mean {
                best = (g, s);
            }
        }
        best.0
    }

    pub fn mean(&self, group: Group) -> f64 {
        self.groups[group.index()].1.mean
    }
}

/// Attention matrices of the selected heads for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub instance: String,
    pub heads: Vec<HeadRef>,
    /// `[heads × k × k]`.
    pub maps: tensor::Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttentionProfile {
    pub heads: Vec<HeadProfile>,
    /// Largest per-instance `|Σ_g mass_g − 1|` over the listed heads.
    pub max_partition_error: f64,
    pub maps: Option<Vec<AttentionMaps>>,
}

/// Mean attention from the last position to each group for `heads`,
/// optionally keeping the full matrices.
pub fn head_attention_profile(
    dataset: &Dataset,
    model: &ModelBundle,
    heads: &[HeadRef],
    full_maps: bool,
) -> Result<HeadAttentionProfile> {
    check_nonempty(dataset)?;
    check_heads(model, heads)?;
    let capture = CaptureSpec { attention: true, ..Default::default() };
    type Masses = (Vec<[f64; 7]>, Option<AttentionMaps>);
    let per_instance: Vec<Masses> = dataset
        .instances
        .par_iter()
        .map(|inst| -> Result<Masses> {
            let out = model.forward(&inst.tokens, &capture, None)?;
            let k = inst.tokens.len();
            let n = inst.last_position();
            let groups = inst.spans.group_of_positions(k);
            let mut masses = Vec::with_capacity(heads.len());
            let mut data = Vec::new();
            for h in heads {
                let a = out.trace.attention(h.layer, h.head)?;
                let mut m = [0.0f64; 7];
                for (j, g) in groups.iter().enumerate() {
                    if let Some(g) = g {
                        m[g.index()] += f64::from(a[n * k + j]);
                    }
                }
                masses.push(m);
                if full_maps {
                    data.extend_from_slice(a);
                }
            }
            let maps = full_maps.then(|| AttentionMaps {
                instance: inst.id.clone(),
                heads: heads.to_vec(),
                maps: tensor::Tensor::new(vec![heads.len(), k, k], data).expect("shape matches data"),
            });
            Ok((masses, maps))
        })
        .collect::<Result<_>>()?;

    let mut stats = vec![[RunningStats::new(); 7]; heads.len()];
    let mut max_err = 0.0f64;
    let mut maps = full_maps.then(Vec::new);
    for (masses, m) in per_instance {
        for (s, mass) in stats.iter_mut().zip(&masses) {
            for (acc, &v) in s.iter_mut().zip(mass) {
                acc.push(v);
            }
            max_err = max_err.max((mass.iter().sum::<f64>() - 1.0).abs());
        }
        if let (Some(all), Some(m)) = (maps.as_mut(), m) {
            all.push(m);
        }
    }
    Ok(HeadAttentionProfile {
        heads: heads
            .iter()
            .zip(stats)
            .map(|(&head, s)| HeadProfile {
                head,
                groups: Group::ALL.iter().map(|&g| (g, s[g.index()].summary())).collect(),
            })
            .collect(),
        max_partition_error: max_err,
        maps,
    })
}

// ------------------------------------------------------------- rank curves

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub layer: usize,
    pub fact_mean: f64,
    pub fact_median: f64,
    pub cofa_mean: f64,
    pub cofa_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCurves {
    pub group: Group,
    pub rows: Vec<RankRow>,
}

/// 1-based lens rank of `t_fact` and `t_cofa` at a group's representative
/// position, per layer.
pub fn rank_curves(dataset: &Dataset, model: &ModelBundle, group: Group) -> Result<RankCurves> {
    check_nonempty(dataset)?;
    let n_layers = model.config.n_layers;
    let capture = CaptureSpec { residual: true, ..Default::default() };
    let per_instance: Vec<Vec<(f64, f64)>> = dataset
        .instances
        .par_iter()
        .map(|inst| -> Result<Vec<(f64, f64)>> {
            let pos = representative(inst, group)?;
            let out = model.forward(&inst.tokens, &capture, None)?;
            (0..=n_layers)
                .map(|l| {
                    let logits = logit_lens(&out.trace, model, pos, l)?;
                    let rank =
                        |t: TokenId| tensor::rank_of(&logits, t as usize).map(|r| r as f64).map_err(ModelError::from);
                    Ok((rank(inst.t_fact)?, rank(inst.t_cofa)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let rows = (0..=n_layers)
        .map(|l| {
            let fact: Vec<f64> = per_instance.iter().map(|r| r[l].0).collect();
            let cofa: Vec<f64> = per_instance.iter().map(|r| r[l].1).collect();
            RankRow {
                layer: l,
                fact_mean: fact.iter().copied().collect::<RunningStats>().mean(),
                fact_median: median(&fact).unwrap_or(0.0),
                cofa_mean: cofa.iter().copied().collect::<RunningStats>().mean(),
                cofa_median: median(&cofa).unwrap_or(0.0),
            }
        })
        .collect();
    Ok(RankCurves { group, rows })
}

// --------------------------------------------------------------- win rates

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRates {
    pub fact: Rate,
    pub cofa: Rate,
}

impl WinRates {
    pub fn from_outcomes(fact_won: impl IntoIterator<Item = bool>) -> Self {
        let (mut wins, mut n) = (0u64, 0u64);
        for w in fact_won {
            n += 1;
            wins += u64::from(w);
        }
        Self { fact: Rate::new(wins, n), cofa: Rate::new(n - wins, n) }
    }
}

/// Final-position `(logit(t_fact), logit(t_cofa))` for one instance.
pub(crate) fn final_pair(
    model: &ModelBundle,
    inst: &PromptInstance,
    spec: Option<&InterventionSpec>,
) -> Result<(f32, f32)> {
    let edits = spec.map(|s| s.resolve(inst, model)).transpose()?;
    let out = model.forward(&inst.tokens, &CaptureSpec::logits_last(), edits.as_ref())?;
    let logits = out.final_logits().expect("final logits captured");
    Ok((logits[inst.t_fact as usize], logits[inst.t_cofa as usize]))
}

/// Share of instances whose final logit favours `t_fact` (strictly) or
/// `t_cofa` (ties included), optionally under an intervention.
pub fn win_rates(dataset: &Dataset, model: &ModelBundle, spec: Option<&InterventionSpec>) -> Result<WinRates> {
    Ok(WinRates::from_outcomes(fact_outcomes(dataset, model, spec)?))
}

/// Per instance, whether `t_fact` strictly beats `t_cofa` at the last position.
pub fn fact_outcomes(dataset: &Dataset, model: &ModelBundle, spec: Option<&InterventionSpec>) -> Result<Vec<bool>> {
    dataset.instances.par_iter().map(|inst| final_pair(model, inst, spec).map(|(f, c)| fact_wins(f, c))).collect()
}
