//! Synthetic inputs for driving the `compmech` binary end to end.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use compmech_core::model::{save_model, LayerNormParams, ModelBundle, ModelConfig};
use compmech_core::tensor::Tensor;
use compmech_core::tokenizer::Tokenizer;
use serde_json::json;
use tempfile::TempDir;

/// `(subject, template, target_true, target_new)`; the first eight end in
/// distinct words that the synthetic model maps to their true target.
pub const FACTS: [(&str, &str, &str, &str); 8] = [
    ("Danielle Darrieux", "The mother tongue of {} is", "French", "English"),
    ("Toko Yasuda", "{} plays the", "guitar", "piano"),
    ("Ivan Petrov", "{} is a citizen of", "Russia", "Canada"),
    ("Eiffel Tower", "{} is located in", "Paris", "Rome"),
    ("iPhone", "{} was developed by", "Apple", "Google"),
    ("Giovanni Rossi", "{} works as", "doctor", "actor"),
    ("Mozart", "{} is known for", "music", "football"),
    ("Sushi", "{} originated from", "Japan", "Mexico"),
];

pub const N_FACTS: usize = FACTS.len();

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_compmech"))
}

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub struct Workspace {
    pub dir: TempDir,
    pub model: PathBuf,
    pub counterfact: PathBuf,
    pub embeddings: PathBuf,
}

fn token(tok: &Tokenizer, text: &str) -> usize {
    let ids = tok.encode(text);
    assert_eq!(ids.len(), 1, "{text:?} is not a single token");
    ids[0] as usize
}

/// A 2-layer model with weak random blocks whose embedding-to-unembedding
/// path maps each fact's final word onto its true target.
pub fn synthetic_model() -> ModelBundle {
    let tok = Tokenizer::gpt2();
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        d_mlp: 64,
        vocab_size: 50257,
        n_ctx: 64,
        layer_norm_eps: 1e-5,
    };
    let d = config.d_model;
    let mut m = ModelBundle::random(config, 17, 0.1).unwrap();
    m.ln_f = LayerNormParams::identity(d);
    m.w_pos.data_mut().iter_mut().for_each(|v| *v *= 0.1);
    let mut w_u = Tensor::from_fn(vec![d, 50257], |i| ((i * 7919 % 1000) as f32 / 1000.0 - 0.5) * 0.1);
    for (j, (_, template, fact, _)) in FACTS.iter().enumerate() {
        let last = template.rsplit(' ').next().unwrap();
        let last_id = token(&tok, &format!(" {last}"));
        let fact_id = token(&tok, &format!(" {fact}"));
        let mut v = vec![0.0f32; d];
        v[j] = 1.0;
        v[j + 8] = -1.0;
        m.w_e.row_mut(last_id).iter_mut().zip(&v).for_each(|(e, x)| *e = 4.0 * x);
        for (i, x) in v.iter().enumerate() {
            w_u.data_mut()[i * 50257 + fact_id] = 3.0 * x;
        }
    }
    m.set_unembedding(&w_u).unwrap();
    m
}

pub fn write_model(model: &ModelBundle, dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    save_model(model, dir.join("model.safetensors")).unwrap();
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&model.config).unwrap()).unwrap();
}

fn counterfact_json() -> serde_json::Value {
    let mut records: Vec<serde_json::Value> = FACTS
        .iter()
        .enumerate()
        .map(|(i, (s, p, t, n))| {
            json!({ "case_id": i, "requested_rewrite": { "subject": s, "prompt": p, "target_true": { "str": t }, "target_new": { "str": n } } })
        })
        .collect();
    // Not completed factually by the synthetic model.
    records.push(json!({ "case_id": 100, "requested_rewrite": {
        "subject": "Pierre Dupont", "prompt": "{} speaks", "target_true": { "str": "Spanish" }, "target_new": { "str": "German" } } }));
    // Multi-token true target.
    records.push(json!({ "case_id": 101, "requested_rewrite": {
        "subject": "Lake Tahoe", "prompt": "{} lies near", "target_true": { "str": "Qwertyzzland" }, "target_new": { "str": "Paris" } } }));
    json!(records)
}

/// Vectors for every attribute word except "football".
fn embeddings_text() -> String {
    let words = [
        "French", "English", "guitar", "piano", "Russia", "Canada", "Paris", "Rome", "Apple", "Google", "doctor",
        "actor", "music", "Japan", "Mexico",
    ];
    let mut s = format!("{} 4\n", words.len());
    for (i, w) in words.iter().enumerate() {
        let a = i as f32 * 0.37;
        s.push_str(&format!("{w} {:.4} {:.4} {:.4} {:.4}\n", a.cos(), a.sin(), 0.5, (i % 3) as f32 * 0.2));
    }
    s
}

impl Workspace {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("model");
        write_model(&synthetic_model(), &model);
        let counterfact = dir.path().join("counterfact.json");
        std::fs::write(&counterfact, serde_json::to_string(&counterfact_json()).unwrap()).unwrap();
        let embeddings = dir.path().join("vectors.txt");
        std::fs::write(&embeddings, embeddings_text()).unwrap();
        Self { dir, model, counterfact, embeddings }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn run(&self, args: &[&str]) -> Outcome {
        let out = Command::new(bin())
            .args(args)
            .env("COMPMECH_CACHE_DIR", self.path("cache"))
            .output()
            .expect("spawn compmech");
        Outcome {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    pub fn ok(&self, args: &[&str]) -> Outcome {
        let o = self.run(args);
        assert_eq!(o.code, 0, "compmech {args:?} failed\nstdout:\n{}\nstderr:\n{}", o.stdout, o.stderr);
        o
    }

    /// Builds `data/dataset.jsonl` with similarity scores and returns its path.
    pub fn build_dataset(&self) -> PathBuf {
        let out = self.path("data");
        self.ok(&[
            "dataset",
            "build",
            "--counterfact",
            self.counterfact.to_str().unwrap(),
            "--model",
            self.model.to_str().unwrap(),
            "--seed",
            "3",
            "--embeddings",
            self.embeddings.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        out.join("dataset.jsonl")
    }
}

/// Every file under `dir` except the manifest, as relative path and bytes.
pub fn result_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

/// Runs trace, intervene and similarity with the given worker count.
pub fn analysis_outputs(ws: &Workspace, dataset: &Path, workers: usize) -> Vec<(String, Vec<u8>)> {
    let root = ws.path(&format!("workers{workers}"));
    let w = workers.to_string();
    let model = ws.model.to_str().unwrap();
    let data = dataset.to_str().unwrap();
    let sub = |name: &str| root.join(name).to_str().unwrap().to_owned();
    ws.ok(&[
        "trace",
        "--model",
        model,
        "--dataset",
        data,
        "--sample",
        "0",
        "--per-token",
        "--attention-maps",
        "--heads",
        "L1H0,L1H3",
        "--workers",
        &w,
        "--out",
        &sub("trace"),
    ]);
    ws.ok(&[
        "intervene",
        "--model",
        model,
        "--dataset",
        data,
        "--sample",
        "0",
        "--heads",
        "L1H0,L1H3",
        "--alpha",
        "5",
        "--ablate",
        "L1H0",
        "--grid",
        "--workers",
        &w,
        "--out",
        &sub("intervene"),
    ]);
    ws.ok(&[
        "similarity",
        "--model",
        model,
        "--dataset",
        data,
        "--sample",
        "0",
        "--bins",
        "2",
        "--workers",
        &w,
        "--out",
        &sub("similarity"),
    ]);
    result_files(&root)
}
