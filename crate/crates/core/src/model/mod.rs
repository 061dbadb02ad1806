//! GPT-2 family model: configuration, weights, loading and the instrumented
//! forward pass.

mod forward;
mod loader;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::tokenizer::TokenId;

pub use forward::{AttentionEdits, AttentionScale, CaptureSpec, ForwardOutput, Scope, TraceRecord};
pub use loader::{hf_gpt2_name_map, load_model, load_model_from_bytes, save_model, write_f32_archive, NameMapping};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("weight container: {0}")]
    Container(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("tensor `{name}` has unsupported dtype {dtype} (only F32 and F16 are accepted)")]
    Dtype { name: String, dtype: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },
    #[error("invalid attention edit: {0}")]
    InvalidEdit(String),
    #[error("{0} was not captured by this trace")]
    NotCaptured(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_eps() -> f32 {
    1e-5
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Hidden width of the MLP; GPT-2 uses `4 * d_model`.
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f32,
}

impl ModelConfig {
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_mlp: 3072,
            vocab_size: 50257,
            n_ctx: 1024,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.vocab_size == 0 || self.n_ctx == 0 {
            return bad("all dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_mlp == 0 {
            return bad("d_mlp must be positive");
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps < 0.0 {
            return bad("layer_norm_eps must be non-negative");
        }
        Ok(())
    }

    /// Parses either this crate's own config JSON or a Hugging Face GPT-2
    /// `config.json` (`n_layer`, `n_head`, `n_embd`, `n_positions`, ...).
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        if value.get("n_layers").is_some() {
            let cfg: Self = serde_json::from_value(value).map_err(|e| ModelError::Config(e.to_string()))?;
            cfg.validate()?;
            return Ok(cfg);
        }
        let get = |keys: &[&str]| -> Option<u64> { keys.iter().find_map(|k| value.get(*k).and_then(|v| v.as_u64())) };
        let need = |keys: &[&str]| {
            get(keys).map(|v| v as usize).ok_or_else(|| ModelError::Config(format!("missing `{}`", keys[0])))
        };
        let d_model = need(&["n_embd"])?;
        let cfg = Self {
            n_layers: need(&["n_layer"])?,
            n_heads: need(&["n_head"])?,
            d_model,
            d_mlp: get(&["n_inner"]).map(|v| v as usize).unwrap_or(4 * d_model),
            vocab_size: need(&["vocab_size"])?,
            n_ctx: need(&["n_positions", "n_ctx"])?,
            layer_norm_eps: value.get("layer_norm_epsilon").and_then(|v| v.as_f64()).map(|v| v as f32).unwrap_or(1e-5),
        };
        if let Some(act) = value.get("activation_function").and_then(|v| v.as_str()) {
            if act != "gelu_new" {
                return Err(ModelError::Config(format!("unsupported activation `{act}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of parameters of a tied-embedding model with this shape.
    pub fn parameter_count(&self) -> usize {
        let (d, m, v) = (self.d_model, self.d_mlp, self.vocab_size);
        let per_layer = 2 * (2 * d) + 4 * (d * d + d) + (d * m + m) + (m * d + d);
        v * d + self.n_ctx * d + self.n_layers * per_layer + 2 * d
    }
}

/// Attention head `LxHy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

impl HeadRef {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl FromStr for HeadRef {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let err = || format!("expected a head like `L10H7`, got `{s}`");
        let rest = s.trim().strip_prefix(['L', 'l']).ok_or_else(err)?;
        let (layer, head) = rest.split_once(['H', 'h']).ok_or_else(err)?;
        Ok(Self { layer: layer.parse().map_err(|_| err())?, head: head.parse().map_err(|_| err())? })
    }
}

/// Parses a comma-separated head list such as `L10H7,L11H10`.
pub fn parse_heads(list: &str) -> std::result::Result<Vec<HeadRef>, String> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self { gain: vec![1.0; d], bias: vec![0.0; d] }
    }
}

/// Attention weights in `x · W` orientation: `w_q`, `w_k`, `w_v` map the
/// normalized residual `[k×d]` to `[k×d]` (heads laid out as contiguous
/// column blocks), and head `h` owns rows `h*d_head..(h+1)*d_head` of `w_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub b_q: Vec<f32>,
    pub w_k: Tensor,
    pub b_k: Vec<f32>,
    pub w_v: Tensor,
    pub b_v: Vec<f32>,
    pub w_o: Tensor,
    pub b_o: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w_in: Tensor,
    pub b_in: Vec<f32>,
    pub w_out: Tensor,
    pub b_out: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormParams,
    pub attn: AttentionWeights,
    pub ln2: LayerNormParams,
    pub mlp: MlpWeights,
}

/// Configuration plus every weight tensor of a model. Immutable after load
/// and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    /// `[|V| × d]`
    pub w_e: Tensor,
    /// `[n_ctx × d]`
    pub w_pos: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_f: LayerNormParams,
    /// Untied unembedding stored as `W_Uᵀ` (`[|V| × d]`); `None` means tied
    /// to `w_e`.
    pub(crate) unembed_t: Option<Tensor>,
}

impl ModelBundle {
    /// Checks every tensor against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, m, v) = (c.d_model, c.d_mlp, c.vocab_size);
        let check = |name: String, t: &Tensor, expected: &[usize]| -> Result<()> {
            if t.shape() != expected {
                return Err(ModelError::Shape { name, expected: expected.to_vec(), got: t.shape().to_vec() });
            }
            Ok(())
        };
        let check_vec = |name: String, t: &[f32], n: usize| -> Result<()> {
            if t.len() != n {
                return Err(ModelError::Shape { name, expected: vec![n], got: vec![t.len()] });
            }
            Ok(())
        };
        check("embed.W_E".into(), &self.w_e, &[v, d])?;
        check("pos_embed.W_pos".into(), &self.w_pos, &[c.n_ctx, d])?;
        if self.layers.len() != c.n_layers {
            return Err(ModelError::Config(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (l, lw) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            check_vec(p("ln1.w"), &lw.ln1.gain, d)?;
            check_vec(p("ln1.b"), &lw.ln1.bias, d)?;
            check_vec(p("ln2.w"), &lw.ln2.gain, d)?;
            check_vec(p("ln2.b"), &lw.ln2.bias, d)?;
            let a = &lw.attn;
            for (n, t) in [("attn.W_Q", &a.w_q), ("attn.W_K", &a.w_k), ("attn.W_V", &a.w_v), ("attn.W_O", &a.w_o)] {
                check(p(n), t, &[d, d])?;
            }
            for (n, t) in [("attn.b_Q", &a.b_q), ("attn.b_K", &a.b_k), ("attn.b_V", &a.b_v), ("attn.b_O", &a.b_o)] {
                check_vec(p(n), t, d)?;
            }
            check(p("mlp.W_in"), &lw.mlp.w_in, &[d, m])?;
            check_vec(p("mlp.b_in"), &lw.mlp.b_in, m)?;
            check(p("mlp.W_out"), &lw.mlp.w_out, &[m, d])?;
            check_vec(p("mlp.b_out"), &lw.mlp.b_out, d)?;
        }
        check_vec("ln_final.w".into(), &self.ln_f.gain, d)?;
        check_vec("ln_final.b".into(), &self.ln_f.bias, d)?;
        if let Some(u) = &self.unembed_t {
            check("unembed.W_U (transposed)".into(), u, &[v, d])?;
        }
        Ok(())
    }

    /// `W_Uᵀ` as `[|V| × d]`: row `t` is the unembedding direction of token `t`.
    pub fn unembed_rows(&self) -> &Tensor {
        self.unembed_t.as_ref().unwrap_or(&self.w_e)
    }

    pub fn is_tied(&self) -> bool {
        self.unembed_t.is_none()
    }

    /// Replaces the tied unembedding with an explicit `W_U` of shape `[d × |V|]`.
    pub fn set_unembedding(&mut self, w_u: &Tensor) -> Result<()> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        if w_u.shape() != [d, v] {
            return Err(ModelError::Shape {
                name: "unembed.W_U".into(),
                expected: vec![d, v],
                got: w_u.shape().to_vec(),
            });
        }
        self.unembed_t = Some(w_u.transpose()?);
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = self.w_e.len() + self.w_pos.len() + self.ln_f.gain.len() + self.ln_f.bias.len();
        for lw in &self.layers {
            let a = &lw.attn;
            n += lw.ln1.gain.len() + lw.ln1.bias.len() + lw.ln2.gain.len() + lw.ln2.bias.len();
            n += a.w_q.len() + a.w_k.len() + a.w_v.len() + a.w_o.len();
            n += a.b_q.len() + a.b_k.len() + a.b_v.len() + a.b_o.len();
            n += lw.mlp.w_in.len() + lw.mlp.b_in.len() + lw.mlp.w_out.len() + lw.mlp.b_out.len();
        }
        n + self.unembed_t.as_ref().map_or(0, Tensor::len)
    }

    /// Model with random weights, for tests and the property suite.
    pub fn random(config: ModelConfig, seed: u64, scale: f32) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let mut t = |shape: Vec<usize>, s: f32| Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0) * s);
        let w_e = t(vec![v, d], 1.0);
        let w_pos = t(vec![config.n_ctx, d], 0.5);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let ln = |t: &mut dyn FnMut(Vec<usize>, f32) -> Tensor| LayerNormParams {
                gain: t(vec![d], 0.2).into_data().into_iter().map(|g| 1.0 + g).collect(),
                bias: t(vec![d], 0.1).into_data(),
            };
            let ln1 = ln(&mut t);
            let ln2 = ln(&mut t);
            let attn = AttentionWeights {
                w_q: t(vec![d, d], scale),
                b_q: t(vec![d], 0.1).into_data(),
                w_k: t(vec![d, d], scale),
                b_k: t(vec![d], 0.1).into_data(),
                w_v: t(vec![d, d], scale),
                b_v: t(vec![d], 0.1).into_data(),
                w_o: t(vec![d, d], scale),
                b_o: t(vec![d], 0.1).into_data(),
            };
            let mlp = MlpWeights {
                w_in: t(vec![d, m], scale),
                b_in: t(vec![m], 0.1).into_data(),
                w_out: t(vec![m, d], scale),
                b_out: t(vec![d], 0.1).into_data(),
            };
            layers.push(LayerWeights { ln1, attn, ln2, mlp });
        }
        let ln_f = LayerNormParams {
            gain: t(vec![d], 0.2).into_data().into_iter().map(|g| 1.0 + g).collect(),
            bias: t(vec![d], 0.1).into_data(),
        };
        let model = Self { config, w_e, w_pos, layers, ln_f, unembed_t: None };
        model.validate()?;
        Ok(model)
    }

    /// Copy of this model with every attention and MLP weight and bias set
    /// to zero and every layernorm set to the identity affine map.
    pub fn zero_blocks(&self) -> Self {
        let c = &self.config;
        let (d, m) = (c.d_model, c.d_mlp);
        let layer = LayerWeights {
            ln1: LayerNormParams::identity(d),
            attn: AttentionWeights {
                w_q: Tensor::zeros(vec![d, d]),
                b_q: vec![0.0; d],
                w_k: Tensor::zeros(vec![d, d]),
                b_k: vec![0.0; d],
                w_v: Tensor::zeros(vec![d, d]),
                b_v: vec![0.0; d],
                w_o: Tensor::zeros(vec![d, d]),
                b_o: vec![0.0; d],
            },
            ln2: LayerNormParams::identity(d),
            mlp: MlpWeights {
                w_in: Tensor::zeros(vec![d, m]),
                b_in: vec![0.0; m],
                w_out: Tensor::zeros(vec![m, d]),
                b_out: vec![0.0; d],
            },
        };
        Self {
            config: c.clone(),
            w_e: self.w_e.clone(),
            w_pos: self.w_pos.clone(),
            layers: vec![layer; c.n_layers],
            ln_f: LayerNormParams::identity(d),
            unembed_t: self.unembed_t.clone(),
        }
    }

    pub(crate) fn check_head(&self, h: HeadRef) -> Result<()> {
        if h.layer >= self.config.n_layers || h.head >= self.config.n_heads {
            return Err(ModelError::InvalidEdit(format!(
                "head {h} outside {} layers × {} heads",
                self.config.n_layers, self.config.n_heads
            )));
        }
        Ok(())
    }
}
