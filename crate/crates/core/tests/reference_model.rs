//! Forward-pass fidelity against logits produced by the HF GPT-2
//! implementation on a small random-init checkpoint.

use std::path::PathBuf;

use compmech_core::model::{load_model, CaptureSpec, ModelConfig, Scope};
use serde::Deserialize;

#[derive(Deserialize)]
struct Reference {
    atol: f32,
    prompts: Vec<Vec<u32>>,
    final_logits: Vec<Vec<f32>>,
    all_position_logits_prompt: usize,
    all_position_logits: Vec<Vec<f32>>,
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/reference_model")
}

fn load() -> (compmech_core::model::ModelBundle, Reference) {
    let dir = fixture_dir();
    let cfg = ModelConfig::from_json(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    let model = load_model(dir.join("model.safetensors"), &cfg).unwrap();
    let reference: Reference =
        serde_json::from_str(&std::fs::read_to_string(dir.join("logits.json")).unwrap()).unwrap();
    (model, reference)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn config_is_read_from_hf_json() {
    let dir = fixture_dir();
    let cfg = ModelConfig::from_json(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(
        (cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_mlp, cfg.vocab_size, cfg.n_ctx),
        (3, 4, 64, 256, 1000, 64)
    );
}

#[test]
fn final_logits_match_reference() {
    let (model, reference) = load();
    assert!(model.is_tied());
    for (prompt, want) in reference.prompts.iter().zip(&reference.final_logits) {
        let out = model.forward(prompt, &CaptureSpec::logits_last(), None).unwrap();
        let diff = max_abs_diff(out.final_logits().unwrap(), want);
        assert!(diff <= reference.atol, "prompt of {} tokens: max |Δ| = {diff}", prompt.len());
    }
}

#[test]
fn all_position_logits_match_reference() {
    let (model, reference) = load();
    let prompt = &reference.prompts[reference.all_position_logits_prompt];
    let cap = CaptureSpec { logits: Scope::All, ..Default::default() };
    let out = model.forward(prompt, &cap, None).unwrap();
    assert_eq!(out.logits.rows(), prompt.len());
    for (i, want) in reference.all_position_logits.iter().enumerate() {
        let diff = max_abs_diff(out.logits.row(i), want);
        assert!(diff <= reference.atol, "position {i}: max |Δ| = {diff}");
    }
}

#[test]
fn f16_checkpoint_upcasts() {
    let (model, reference) = load();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.safetensors");
    let bytes = std::fs::read(fixture_dir().join("model.safetensors")).unwrap();
    let st = safetensors::SafeTensors::deserialize(&bytes).unwrap();
    let mut halves: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, view) in st.tensors() {
        let data: Vec<u8> = view
            .data()
            .chunks_exact(4)
            .flat_map(|c| half::f16::from_f32(f32::from_le_bytes(c.try_into().unwrap())).to_le_bytes())
            .collect();
        halves.push((name, view.shape().to_vec(), data));
    }
    let views: Vec<(String, safetensors::tensor::TensorView)> = halves
        .iter()
        .map(|(n, s, d)| {
            (n.clone(), safetensors::tensor::TensorView::new(safetensors::Dtype::F16, s.clone(), d).unwrap())
        })
        .collect();
    safetensors::serialize_to_file(views, None, &path).unwrap();
    let half_model = load_model(&path, &model.config).unwrap();
    let prompt = &reference.prompts[1];
    let a = model.forward(prompt, &CaptureSpec::logits_last(), None).unwrap();
    let b = half_model.forward(prompt, &CaptureSpec::logits_last(), None).unwrap();
    // Half-precision weights: loose agreement only.
    assert!(max_abs_diff(a.final_logits().unwrap(), b.final_logits().unwrap()) < 0.1);
}
