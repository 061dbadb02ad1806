//! safetensors weight containers.
//!
//! Two naming schemes are understood:
//!
//! * the internal scheme written by [`save_model`] (`embed.W_E`,
//!   `blocks.{l}.attn.W_Q`, ...), with every matrix in `x · W` orientation;
//! * the published Hugging Face GPT-2 names (`wte.weight`,
//!   `h.{l}.attn.c_attn.weight`, ..., optionally prefixed `transformer.`).
//!   GPT-2 uses `Conv1D`, so its matrices are already `[in × out]`; the fused
//!   `c_attn` is split column-wise into Q, K and V.
//!
//! | internal                    | GPT-2 checkpoint                          |
//! |-----------------------------|-------------------------------------------|
//! | `embed.W_E`                 | `wte.weight`                              |
//! | `pos_embed.W_pos`           | `wpe.weight`                              |
//! | `blocks.{l}.ln1.{w,b}`      | `h.{l}.ln_1.{weight,bias}`                |
//! | `blocks.{l}.attn.W_{Q,K,V}` | `h.{l}.attn.c_attn.weight` columns 0/1/2·d |
//! | `blocks.{l}.attn.b_{Q,K,V}` | `h.{l}.attn.c_attn.bias` slices           |
//! | `blocks.{l}.attn.W_O`, `b_O`| `h.{l}.attn.c_proj.{weight,bias}`         |
//! | `blocks.{l}.ln2.{w,b}`      | `h.{l}.ln_2.{weight,bias}`                |
//! | `blocks.{l}.mlp.W_in`, `b_in` | `h.{l}.mlp.c_fc.{weight,bias}`          |
//! | `blocks.{l}.mlp.W_out`, `b_out` | `h.{l}.mlp.c_proj.{weight,bias}`      |
//! | `ln_final.{w,b}`            | `ln_f.{weight,bias}`                      |
//! | `unembed.W_U` (optional)    | `lm_head.weight` (`[|V|×d]`, tied if absent or equal) |

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::{
    AttentionWeights, LayerNormParams, LayerWeights, MlpWeights, ModelBundle, ModelConfig, ModelError, Result,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NameMapping {
    Internal,
    HfGpt2,
}

/// Internal name → GPT-2 checkpoint name, for every tensor of one layer
/// index range. Fused Q/K/V entries map to the shared `c_attn` tensor.
pub fn hf_gpt2_name_map(n_layers: usize) -> Vec<(String, String)> {
    let mut out = vec![
        ("embed.W_E".to_string(), "wte.weight".to_string()),
        ("pos_embed.W_pos".to_string(), "wpe.weight".to_string()),
    ];
    for l in 0..n_layers {
        let pairs = [
            ("ln1.w", "ln_1.weight"),
            ("ln1.b", "ln_1.bias"),
            ("attn.W_Q", "attn.c_attn.weight"),
            ("attn.W_K", "attn.c_attn.weight"),
            ("attn.W_V", "attn.c_attn.weight"),
            ("attn.b_Q", "attn.c_attn.bias"),
            ("attn.b_K", "attn.c_attn.bias"),
            ("attn.b_V", "attn.c_attn.bias"),
            ("attn.W_O", "attn.c_proj.weight"),
            ("attn.b_O", "attn.c_proj.bias"),
            ("ln2.w", "ln_2.weight"),
            ("ln2.b", "ln_2.bias"),
            ("mlp.W_in", "mlp.c_fc.weight"),
            ("mlp.b_in", "mlp.c_fc.bias"),
            ("mlp.W_out", "mlp.c_proj.weight"),
            ("mlp.b_out", "mlp.c_proj.bias"),
        ];
        out.extend(pairs.iter().map(|(a, b)| (format!("blocks.{l}.{a}"), format!("h.{l}.{b}"))));
    }
    out.push(("ln_final.w".into(), "ln_f.weight".into()));
    out.push(("ln_final.b".into(), "ln_f.bias".into()));
    out.push(("unembed.W_U".into(), "lm_head.weight".into()));
    out
}

struct Raw {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn to_f32(name: &str, view: &TensorView<'_>) -> Result<Raw> {
    let bytes = view.data();
    let data = match view.dtype() {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        Dtype::F16 => bytes.chunks_exact(2).map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
        other => return Err(ModelError::Dtype { name: name.to_string(), dtype: format!("{other:?}") }),
    };
    Ok(Raw { shape: view.shape().to_vec(), data })
}

struct Store {
    tensors: HashMap<String, Raw>,
    mapping: NameMapping,
}

impl Store {
    fn take(&mut self, name: &str, expected: &[usize]) -> Result<Tensor> {
        let raw = self.tensors.remove(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
        if raw.shape != expected {
            return Err(ModelError::Shape { name: name.to_string(), expected: expected.to_vec(), got: raw.shape });
        }
        Ok(Tensor::new(raw.shape, raw.data)?)
    }

    fn take_vec(&mut self, name: &str, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(name, &[n])?.into_data())
    }
}

/// Loads and validates a model from a safetensors file.
pub fn load_model(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    load_model_from_bytes(&bytes, config)
}

pub fn load_model_from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<ModelBundle> {
    config.validate()?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| ModelError::Container(e.to_string()))?;
    let names = st.names();
    let hf = names.iter().any(|n| n.ends_with("wte.weight"));
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        let key = if hf { name.strip_prefix("transformer.").unwrap_or(&name).to_string() } else { name.clone() };
        tensors.insert(key, to_f32(&name, &view)?);
    }
    let mut store = Store { tensors, mapping: if hf { NameMapping::HfGpt2 } else { NameMapping::Internal } };
    let model = match store.mapping {
        NameMapping::Internal => build_internal(&mut store, config)?,
        NameMapping::HfGpt2 => build_hf(&mut store, config)?,
    };
    let mut leftover: Vec<_> = store.tensors.keys().cloned().collect();
    leftover.sort();
    if !leftover.is_empty() {
        // e.g. the causal-mask buffers `h.{l}.attn.bias` of older checkpoints
        log::debug!("ignoring {} unused tensors: {:?}", leftover.len(), leftover);
    }
    model.validate()?;
    log::info!("loaded model with {} parameters", model.parameter_count());
    Ok(model)
}

fn build_internal(s: &mut Store, c: &ModelConfig) -> Result<ModelBundle> {
    let (d, m, v) = (c.d_model, c.d_mlp, c.vocab_size);
    let w_e = s.take("embed.W_E", &[v, d])?;
    let w_pos = s.take("pos_embed.W_pos", &[c.n_ctx, d])?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let p = |n: &str| format!("blocks.{l}.{n}");
        layers.push(LayerWeights {
            ln1: LayerNormParams { gain: s.take_vec(&p("ln1.w"), d)?, bias: s.take_vec(&p("ln1.b"), d)? },
            attn: AttentionWeights {
                w_q: s.take(&p("attn.W_Q"), &[d, d])?,
                b_q: s.take_vec(&p("attn.b_Q"), d)?,
                w_k: s.take(&p("attn.W_K"), &[d, d])?,
                b_k: s.take_vec(&p("attn.b_K"), d)?,
                w_v: s.take(&p("attn.W_V"), &[d, d])?,
                b_v: s.take_vec(&p("attn.b_V"), d)?,
                w_o: s.take(&p("attn.W_O"), &[d, d])?,
                b_o: s.take_vec(&p("attn.b_O"), d)?,
            },
            ln2: LayerNormParams { gain: s.take_vec(&p("ln2.w"), d)?, bias: s.take_vec(&p("ln2.b"), d)? },
            mlp: MlpWeights {
                w_in: s.take(&p("mlp.W_in"), &[d, m])?,
                b_in: s.take_vec(&p("mlp.b_in"), m)?,
                w_out: s.take(&p("mlp.W_out"), &[m, d])?,
                b_out: s.take_vec(&p("mlp.b_out"), d)?,
            },
        });
    }
    let ln_f = LayerNormParams { gain: s.take_vec("ln_final.w", d)?, bias: s.take_vec("ln_final.b", d)? };
    let unembed_t =
        if s.tensors.contains_key("unembed.W_U") { Some(s.take("unembed.W_U", &[d, v])?.transpose()?) } else { None };
    Ok(ModelBundle { config: c.clone(), w_e, w_pos, layers, ln_f, unembed_t })
}

fn build_hf(s: &mut Store, c: &ModelConfig) -> Result<ModelBundle> {
    let (d, m, v) = (c.d_model, c.d_mlp, c.vocab_size);
    let w_e = s.take("wte.weight", &[v, d])?;
    let w_pos = s.take("wpe.weight", &[c.n_ctx, d])?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let p = |n: &str| format!("h.{l}.{n}");
        let qkv = s.take(&p("attn.c_attn.weight"), &[d, 3 * d])?;
        let qkv_b = s.take_vec(&p("attn.c_attn.bias"), 3 * d)?;
        layers.push(LayerWeights {
            ln1: LayerNormParams { gain: s.take_vec(&p("ln_1.weight"), d)?, bias: s.take_vec(&p("ln_1.bias"), d)? },
            attn: AttentionWeights {
                w_q: qkv.slice_cols(0, d)?,
                b_q: qkv_b[..d].to_vec(),
                w_k: qkv.slice_cols(d, 2 * d)?,
                b_k: qkv_b[d..2 * d].to_vec(),
                w_v: qkv.slice_cols(2 * d, 3 * d)?,
                b_v: qkv_b[2 * d..].to_vec(),
                w_o: s.take(&p("attn.c_proj.weight"), &[d, d])?,
                b_o: s.take_vec(&p("attn.c_proj.bias"), d)?,
            },
            ln2: LayerNormParams { gain: s.take_vec(&p("ln_2.weight"), d)?, bias: s.take_vec(&p("ln_2.bias"), d)? },
            mlp: MlpWeights {
                w_in: s.take(&p("mlp.c_fc.weight"), &[d, m])?,
                b_in: s.take_vec(&p("mlp.c_fc.bias"), m)?,
                w_out: s.take(&p("mlp.c_proj.weight"), &[m, d])?,
                b_out: s.take_vec(&p("mlp.c_proj.bias"), d)?,
            },
        });
    }
    let ln_f = LayerNormParams { gain: s.take_vec("ln_f.weight", d)?, bias: s.take_vec("ln_f.bias", d)? };
    let unembed_t = match s.tensors.contains_key("lm_head.weight") {
        true => {
            let head = s.take("lm_head.weight", &[v, d])?;
            (head != w_e).then_some(head)
        }
        false => None,
    };
    Ok(ModelBundle { config: c.clone(), w_e, w_pos, layers, ln_f, unembed_t })
}

/// Writes `model` in the internal naming scheme as little-endian F32. A tied
/// unembedding is not written.
pub fn save_model(model: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut named: Vec<(String, Vec<usize>, &[f32])> = vec![
        ("embed.W_E".into(), model.w_e.shape().to_vec(), model.w_e.data()),
        ("pos_embed.W_pos".into(), model.w_pos.shape().to_vec(), model.w_pos.data()),
    ];
    for (l, lw) in model.layers.iter().enumerate() {
        let p = |n: &str| format!("blocks.{l}.{n}");
        let a = &lw.attn;
        named.push((p("ln1.w"), vec![lw.ln1.gain.len()], &lw.ln1.gain));
        named.push((p("ln1.b"), vec![lw.ln1.bias.len()], &lw.ln1.bias));
        for (n, t) in [("attn.W_Q", &a.w_q), ("attn.W_K", &a.w_k), ("attn.W_V", &a.w_v), ("attn.W_O", &a.w_o)] {
            named.push((p(n), t.shape().to_vec(), t.data()));
        }
        for (n, b) in [("attn.b_Q", &a.b_q), ("attn.b_K", &a.b_k), ("attn.b_V", &a.b_v), ("attn.b_O", &a.b_o)] {
            named.push((p(n), vec![b.len()], b));
        }
        named.push((p("ln2.w"), vec![lw.ln2.gain.len()], &lw.ln2.gain));
        named.push((p("ln2.b"), vec![lw.ln2.bias.len()], &lw.ln2.bias));
        named.push((p("mlp.W_in"), lw.mlp.w_in.shape().to_vec(), lw.mlp.w_in.data()));
        named.push((p("mlp.b_in"), vec![lw.mlp.b_in.len()], &lw.mlp.b_in));
        named.push((p("mlp.W_out"), lw.mlp.w_out.shape().to_vec(), lw.mlp.w_out.data()));
        named.push((p("mlp.b_out"), vec![lw.mlp.b_out.len()], &lw.mlp.b_out));
    }
    named.push(("ln_final.w".into(), vec![model.ln_f.gain.len()], &model.ln_f.gain));
    named.push(("ln_final.b".into(), vec![model.ln_f.bias.len()], &model.ln_f.bias));
    let w_u = match &model.unembed_t {
        Some(t) => Some(t.transpose()?),
        None => None,
    };
    if let Some(w_u) = &w_u {
        named.push(("unembed.W_U".into(), w_u.shape().to_vec(), w_u.data()));
    }
    write_f32_archive(path, &named)
}

/// Writes named F32 tensors to a safetensors file.
pub fn write_f32_archive(path: &Path, tensors: &[(String, Vec<usize>, &[f32])]) -> Result<()> {
    let bytes: Vec<Vec<u8>> =
        tensors.iter().map(|(_, _, d)| d.iter().flat_map(|v| v.to_le_bytes()).collect()).collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, shape, _), b)| {
            TensorView::new(Dtype::F32, shape.clone(), b)
                .map(|v| (name.clone(), v))
                .map_err(|e| ModelError::Container(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, None, path).map_err(|e| ModelError::Container(e.to_string()))
}
