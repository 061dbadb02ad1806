//! Instrumented forward pass.
//!
//! Pre-layernorm GPT-2 wiring, per layer `l`:
//!
//! ```text
//! a^l = attn(ln1(x^{l-1}))
//! m^l = mlp(ln2(x^{l-1} + a^l))
//! x^l = x^{l-1} + a^l + m^l
//! ```
//!
//! The attention block output is assembled as `Σ_h a^{h,l} + b_O`, where the
//! per-head output `a^{h,l}` is the head's weighted values passed through its
//! row block of `W_O`. Attention edits scale single post-softmax entries
//! without renormalising the row; ablations drop a head's `a^{h,l}`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{HeadRef, ModelBundle, ModelError, Result};
use crate::tensor::{self, dot, gelu_in_place, layernorm, matmul, matmul_into, matmul_transposed, Tensor};
use crate::tokenizer::TokenId;

/// Which positions of a per-position activation to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Off,
    Last,
    All,
}

/// Selects what a forward pass records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CaptureSpec {
    /// Residual stream `x^l` at every position for `l = 0..=L`.
    pub residual: bool,
    /// Attention and MLP block outputs `a^l`, `m^l`.
    pub blocks: Scope,
    /// Per-head outputs `a^{h,l}`.
    pub heads: Scope,
    /// Post-softmax (and post-edit) attention matrices.
    pub attention: bool,
    /// Output logits.
    pub logits: Scope,
}

impl CaptureSpec {
    /// Final-position logits only.
    pub fn logits_last() -> Self {
        Self { logits: Scope::Last, ..Self::default() }
    }

    pub fn everything() -> Self {
        Self { residual: true, blocks: Scope::All, heads: Scope::All, attention: true, logits: Scope::All }
    }

    /// True if any trace field (not counting logits) is selected.
    pub fn records_trace(&self) -> bool {
        self.residual || self.blocks != Scope::Off || self.heads != Scope::Off || self.attention
    }

    /// Rough bytes needed for one trace of `k` tokens.
    pub fn trace_bytes(&self, cfg: &super::ModelConfig, k: usize) -> usize {
        let (l, h, d, v) = (cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.vocab_size);
        let rows = |s: Scope| match s {
            Scope::Off => 0,
            Scope::Last => 1,
            Scope::All => k,
        };
        let mut n = (l + 1) * k * d * usize::from(self.residual);
        n += 2 * l * rows(self.blocks) * d;
        n += l * h * rows(self.heads) * d;
        n += l * h * k * k * usize::from(self.attention);
        n += rows(self.logits) * v;
        n * 4
    }
}

/// One post-softmax attention entry to scale: `A[row][col] ← alpha · A[row][col]`
/// in head `head` of layer `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionScale {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub alpha: f32,
}

/// Concrete edits for one sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionEdits {
    pub scales: Vec<AttentionScale>,
    /// Heads whose output `a^{h,l}` is zeroed at every position.
    pub ablations: Vec<HeadRef>,
}

impl AttentionEdits {
    pub fn is_empty(&self) -> bool {
        self.scales.is_empty() && self.ablations.is_empty()
    }

    /// Lowest layer touched by any edit.
    pub fn min_layer(&self) -> Option<usize> {
        self.scales.iter().map(|s| s.layer).chain(self.ablations.iter().map(|h| h.layer)).min()
    }

    pub fn validate(&self, model: &ModelBundle, k: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.scales {
            model.check_head(HeadRef::new(s.layer, s.head))?;
            if s.row >= k {
                return Err(ModelError::InvalidEdit(format!("row {} outside sequence of {k}", s.row)));
            }
            if s.col >= s.row {
                return Err(ModelError::InvalidEdit(format!(
                    "column {} must be strictly before row {} (causal target)",
                    s.col, s.row
                )));
            }
            if !(s.alpha.is_finite() && s.alpha > 0.0) {
                return Err(ModelError::InvalidEdit(format!(
                    "alpha must be a positive finite number, got {}",
                    s.alpha
                )));
            }
            if !seen.insert((s.layer, s.head, s.row, s.col)) {
                return Err(ModelError::InvalidEdit(format!(
                    "duplicate edit at L{}H{} ({}, {})",
                    s.layer, s.head, s.row, s.col
                )));
            }
        }
        for &h in &self.ablations {
            model.check_head(h)?;
        }
        Ok(())
    }
}

/// Activations captured during one forward pass. Layer-indexed vectors hold
/// `None` for layers that were not computed (resumed runs) or not selected.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    n_tokens: usize,
    n_heads: usize,
    d_model: usize,
    /// `x^l`, `l = 0..=L`, each `[k × d]`.
    residual: Vec<Option<Tensor>>,
    block_scope: Scope,
    attn_out: Vec<Option<Tensor>>,
    mlp_out: Vec<Option<Tensor>>,
    head_scope: Scope,
    /// `[H × p × d]` per layer, `p` = captured positions.
    head_out: Vec<Option<Tensor>>,
    /// `[H × k × k]` per layer.
    attention: Vec<Option<Tensor>>,
    final_residual: Tensor,
}

impl TraceRecord {
    fn empty(n_layers: usize, n_heads: usize, d_model: usize, k: usize, capture: &CaptureSpec) -> Self {
        Self {
            n_tokens: k,
            n_heads,
            d_model,
            residual: vec![None; n_layers + 1],
            block_scope: capture.blocks,
            attn_out: vec![None; n_layers],
            mlp_out: vec![None; n_layers],
            head_scope: capture.heads,
            head_out: vec![None; n_layers],
            attention: vec![None; n_layers],
            final_residual: Tensor::zeros(vec![k, d_model]),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_layers(&self) -> usize {
        self.attn_out.len()
    }

    fn scoped_row(scope: Scope, k: usize, pos: usize) -> Option<usize> {
        match scope {
            Scope::All if pos < k => Some(pos),
            Scope::Last if pos + 1 == k => Some(0),
            _ => None,
        }
    }

    /// `x^layer` at `pos`; `layer` ranges over `0..=L` with 0 the embedding.
    pub fn residual(&self, layer: usize, pos: usize) -> Result<&[f32]> {
        match self.residual.get(layer).and_then(Option::as_ref) {
            Some(t) if pos < self.n_tokens => Ok(t.row(pos)),
            _ => Err(ModelError::NotCaptured("residual stream")),
        }
    }

    /// `x^layer` at every position, `[k × d]`.
    pub fn residual_layer(&self, layer: usize) -> Option<&Tensor> {
        self.residual.get(layer).and_then(Option::as_ref)
    }

    /// `x^L` at every position. Always recorded.
    pub fn final_residual(&self) -> &Tensor {
        &self.final_residual
    }

    pub fn attn_out(&self, layer: usize, pos: usize) -> Result<&[f32]> {
        let row = Self::scoped_row(self.block_scope, self.n_tokens, pos);
        match (self.attn_out.get(layer).and_then(Option::as_ref), row) {
            (Some(t), Some(r)) => Ok(t.row(r)),
            _ => Err(ModelError::NotCaptured("attention block output")),
        }
    }

    pub fn mlp_out(&self, layer: usize, pos: usize) -> Result<&[f32]> {
        let row = Self::scoped_row(self.block_scope, self.n_tokens, pos);
        match (self.mlp_out.get(layer).and_then(Option::as_ref), row) {
            (Some(t), Some(r)) => Ok(t.row(r)),
            _ => Err(ModelError::NotCaptured("MLP block output")),
        }
    }

    /// `a^{h,l}` at `pos`: the head's contribution before `b_O` is added.
    pub fn head_out(&self, layer: usize, head: usize, pos: usize) -> Result<&[f32]> {
        let rows = match self.head_scope {
            Scope::All => self.n_tokens,
            _ => 1,
        };
        let row = Self::scoped_row(self.head_scope, self.n_tokens, pos);
        match (self.head_out.get(layer).and_then(Option::as_ref), row) {
            (Some(t), Some(r)) if head < self.n_heads => Ok(t.row(head * rows + r)),
            _ => Err(ModelError::NotCaptured("per-head output")),
        }
    }

    /// Attention matrix `A^{hl}` as a row-major `[k × k]` slice.
    pub fn attention(&self, layer: usize, head: usize) -> Result<&[f32]> {
        let k = self.n_tokens;
        match self.attention.get(layer).and_then(Option::as_ref) {
            Some(t) if head < self.n_heads => Ok(&t.data()[head * k * k..(head + 1) * k * k]),
            _ => Err(ModelError::NotCaptured("attention pattern")),
        }
    }

    /// All heads of one layer as `[H × k × k]`.
    pub fn attention_layer(&self, layer: usize) -> Result<&Tensor> {
        self.attention.get(layer).and_then(Option::as_ref).ok_or(ModelError::NotCaptured("attention pattern"))
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[p × |V|]` with `p = k`, `1` or `0` per the capture's logit scope.
    pub logits: Tensor,
    pub trace: TraceRecord,
}

impl ForwardOutput {
    /// Logits at the final position, if captured.
    pub fn final_logits(&self) -> Option<&[f32]> {
        (self.logits.rows() > 0).then(|| self.logits.row(self.logits.rows() - 1))
    }
}

impl ModelBundle {
    /// Runs the full forward pass over `tokens`.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        capture: &CaptureSpec,
        edits: Option<&AttentionEdits>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let x = self.embed(tokens);
        self.run_from(tokens.len(), 0, x, capture, edits)
    }

    /// Resumes a forward pass at `start_layer` from the residual stream
    /// `x^{start_layer}` (`[k × d]`) of an earlier run over the same tokens.
    /// Edits may only touch layers `>= start_layer`.
    pub fn forward_from(
        &self,
        start_layer: usize,
        residual: &Tensor,
        capture: &CaptureSpec,
        edits: Option<&AttentionEdits>,
    ) -> Result<ForwardOutput> {
        let d = self.config.d_model;
        if start_layer > self.config.n_layers {
            return Err(ModelError::InvalidEdit(format!("start layer {start_layer} beyond {}", self.config.n_layers)));
        }
        let k = residual.rows();
        if residual.shape() != [k, d] || k == 0 || k > self.config.n_ctx {
            return Err(ModelError::SequenceLength { len: k, max: self.config.n_ctx });
        }
        if let Some(min) = edits.and_then(AttentionEdits::min_layer) {
            if min < start_layer {
                return Err(ModelError::InvalidEdit(format!(
                    "edit at layer {min} precedes resume layer {start_layer}"
                )));
            }
        }
        self.run_from(k, start_layer, residual.clone(), capture, edits)
    }

    /// Argmax of the final-position logits; ties go to the lowest id.
    pub fn greedy_next(&self, tokens: &[TokenId]) -> Result<TokenId> {
        let out = self.forward(tokens, &CaptureSpec::logits_last(), None)?;
        let logits = out.final_logits().expect("final logits captured");
        Ok(tensor::argmax(logits).expect("non-empty vocabulary") as TokenId)
    }

    /// `x^0 = W_E[t_i] + W_pos[i]`.
    pub fn embed(&self, tokens: &[TokenId]) -> Tensor {
        let d = self.config.d_model;
        let mut x = Tensor::zeros(vec![tokens.len(), d]);
        for (i, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            for ((o, e), p) in row.iter_mut().zip(self.w_e.row(t as usize)).zip(self.w_pos.row(i)) {
                *o = e + p;
            }
        }
        x
    }

    /// `ln_f` applied to one residual vector.
    pub fn final_norm(&self, x: &[f32]) -> Vec<f32> {
        let mut v = x.to_vec();
        tensor::layernorm_row(&mut v, &self.ln_f.gain, &self.ln_f.bias, self.config.layer_norm_eps);
        v
    }

    /// `W_U · v` for every vocabulary entry.
    pub fn unembed(&self, v: &[f32]) -> Vec<f32> {
        self.unembed_rows().data().chunks_exact(self.config.d_model).map(|row| dot(row, v)).collect()
    }

    /// `W_U · v` restricted to `tokens`.
    pub fn unembed_tokens(&self, v: &[f32], tokens: &[TokenId]) -> Vec<f32> {
        let u = self.unembed_rows();
        tokens.iter().map(|&t| dot(u.row(t as usize), v)).collect()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let max = self.config.n_ctx;
        if tokens.is_empty() || tokens.len() > max {
            return Err(ModelError::SequenceLength { len: tokens.len(), max });
        }
        let vocab = self.config.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(ModelError::TokenOutOfRange { token: bad, vocab });
        }
        Ok(())
    }

    fn run_from(
        &self,
        k: usize,
        start_layer: usize,
        mut x: Tensor,
        capture: &CaptureSpec,
        edits: Option<&AttentionEdits>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let empty = AttentionEdits::default();
        let edits = edits.unwrap_or(&empty);
        edits.validate(self, k)?;

        let mut trace = TraceRecord::empty(cfg.n_layers, cfg.n_heads, cfg.d_model, k, capture);
        if capture.residual {
            trace.residual[start_layer] = Some(x.clone());
        }
        for l in start_layer..cfg.n_layers {
            let attn_out = self.attention_block(l, &x, k, capture, edits, &mut trace)?;
            let mut mid = x.clone();
            mid.add_assign(&attn_out)?;
            let mlp_out = self.mlp_block(l, &mid)?;
            let mut next = mid;
            next.add_assign(&mlp_out)?;
            match capture.blocks {
                Scope::Off => {}
                Scope::Last => {
                    trace.attn_out[l] = Some(attn_out.slice_rows(k - 1, k)?);
                    trace.mlp_out[l] = Some(mlp_out.slice_rows(k - 1, k)?);
                }
                Scope::All => {
                    trace.attn_out[l] = Some(attn_out);
                    trace.mlp_out[l] = Some(mlp_out);
                }
            }
            x = next;
            if capture.residual {
                trace.residual[l + 1] = Some(x.clone());
            }
        }

        let logit_rows = match capture.logits {
            Scope::Off => 0..0,
            Scope::Last => k - 1..k,
            Scope::All => 0..k,
        };
        let logits = if logit_rows.is_empty() {
            Tensor::zeros(vec![0, cfg.vocab_size])
        } else {
            let normed = layernorm(
                &x.slice_rows(logit_rows.start, logit_rows.end)?,
                &self.ln_f.gain,
                &self.ln_f.bias,
                cfg.layer_norm_eps,
            )?;
            matmul_transposed(&normed, self.unembed_rows())?
        };
        trace.final_residual = x;
        Ok(ForwardOutput { logits, trace })
    }

    fn attention_block(
        &self,
        l: usize,
        x: &Tensor,
        k: usize,
        capture: &CaptureSpec,
        edits: &AttentionEdits,
        trace: &mut TraceRecord,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (d, n_heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
        let w = &self.layers[l].attn;
        let ln1 = &self.layers[l].ln1;
        let h = layernorm(x, &ln1.gain, &ln1.bias, cfg.layer_norm_eps)?;
        let project = |wt: &Tensor, b: &[f32]| -> Result<Tensor> {
            let mut t = matmul(&h, wt)?;
            t.add_row_bias(b)?;
            Ok(t)
        };
        let q = project(&w.w_q, &w.b_q)?;
        let kk = project(&w.w_k, &w.b_k)?;
        let v = project(&w.w_v, &w.b_v)?;
        let scale = 1.0 / (dh as f32).sqrt();

        let head_rows = match capture.heads {
            Scope::Off => 0,
            Scope::Last => 1,
            Scope::All => k,
        };
        let mut heads_capture = (head_rows > 0).then(|| Tensor::zeros(vec![n_heads * head_rows, d]));
        let mut patterns = capture.attention.then(|| Tensor::zeros(vec![n_heads, k, k]));
        let mut out = Tensor::zeros(vec![k, d]);
        let mut pattern = vec![0.0f32; k * k];
        let mut z = vec![0.0f32; k * dh];
        let mut head_out = vec![0.0f32; k * d];

        for head in 0..n_heads {
            let cols = head * dh..(head + 1) * dh;
            pattern.iter_mut().for_each(|p| *p = 0.0);
            for i in 0..k {
                let qi = &q.row(i)[cols.clone()];
                let row = &mut pattern[i * k..i * k + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kk.row(j)[cols.clone()]) * scale;
                }
                tensor::softmax_in_place(row);
            }
            for s in edits.scales.iter().filter(|s| s.layer == l && s.head == head) {
                pattern[s.row * k + s.col] *= s.alpha;
            }
            if let Some(p) = patterns.as_mut() {
                p.data_mut()[head * k * k..(head + 1) * k * k].copy_from_slice(&pattern);
            }

            let ablated = edits.ablations.iter().any(|a| a.layer == l && a.head == head);
            z.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..k {
                let zi = &mut z[i * dh..(i + 1) * dh];
                for j in 0..=i {
                    let a = pattern[i * k + j];
                    if a == 0.0 {
                        continue;
                    }
                    for (o, vv) in zi.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += a * vv;
                    }
                }
            }
            head_out.iter_mut().for_each(|v| *v = 0.0);
            if !ablated {
                let w_o_rows = &w.w_o.data()[head * dh * d..(head + 1) * dh * d];
                matmul_into(&z, w_o_rows, &mut head_out, k, dh, d);
            }
            for (o, hv) in out.data_mut().iter_mut().zip(&head_out) {
                *o += hv;
            }
            if let Some(hc) = heads_capture.as_mut() {
                let src = &head_out[(k - head_rows) * d..];
                hc.data_mut()[head * head_rows * d..(head + 1) * head_rows * d].copy_from_slice(src);
            }
        }
        out.add_row_bias(&w.b_o)?;
        trace.head_out[l] = heads_capture;
        trace.attention[l] = patterns;
        Ok(out)
    }

    fn mlp_block(&self, l: usize, mid: &Tensor) -> Result<Tensor> {
        let lw = &self.layers[l];
        let h = layernorm(mid, &lw.ln2.gain, &lw.ln2.bias, self.config.layer_norm_eps)?;
        let mut hidden = matmul(&h, &lw.mlp.w_in)?;
        hidden.add_row_bias(&lw.mlp.b_in)?;
        gelu_in_place(hidden.data_mut());
        let mut out = matmul(&hidden, &lw.mlp.w_out)?;
        out.add_row_bias(&lw.mlp.b_out)?;
        Ok(out)
    }
}
