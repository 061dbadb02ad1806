//! Structural properties of the forward pass on random weights.

use compmech_core::model::{AttentionEdits, AttentionScale, CaptureSpec, HeadRef, ModelBundle, ModelConfig, Scope};
use compmech_core::tensor::layernorm;
use proptest::prelude::*;

fn config(n_layers: usize, n_heads: usize, d_head: usize) -> ModelConfig {
    let d = n_heads * d_head;
    ModelConfig { n_layers, n_heads, d_model: d, d_mlp: 4 * d, vocab_size: 97, n_ctx: 24, layer_norm_eps: 1e-5 }
}

fn model(seed: u64) -> ModelBundle {
    ModelBundle::random(config(3, 4, 6), seed, 0.4).unwrap()
}

fn tokens_strategy() -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(0u32..97, 1..24)
}

fn close(a: &[f32], b: &[f32], tol: f32) -> Result<(), String> {
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let scale = x.abs().max(y.abs()).max(1.0);
        if (x - y).abs() > tol * scale {
            return Err(format!("index {i}: {x} vs {y}"));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn residual_is_sum_of_blocks(seed in 0u64..1000, tokens in tokens_strategy()) {
        let m = model(seed);
        let out = m.forward(&tokens, &CaptureSpec::everything(), None).unwrap();
        let t = &out.trace;
        for l in 0..m.config.n_layers {
            for i in 0..tokens.len() {
                let want: Vec<f32> = t.residual(l, i).unwrap().iter()
                    .zip(t.attn_out(l, i).unwrap())
                    .zip(t.mlp_out(l, i).unwrap())
                    .map(|((x, a), mm)| x + a + mm)
                    .collect();
                close(t.residual(l + 1, i).unwrap(), &want, 1e-4).map_err(TestCaseError::fail)?;
            }
        }
        prop_assert_eq!(t.residual(m.config.n_layers, tokens.len() - 1).unwrap(), t.final_residual().row(tokens.len() - 1));
    }

    #[test]
    fn heads_plus_bias_rebuild_attention_block(seed in 0u64..1000, tokens in tokens_strategy()) {
        let m = model(seed);
        let out = m.forward(&tokens, &CaptureSpec::everything(), None).unwrap();
        for l in 0..m.config.n_layers {
            for i in 0..tokens.len() {
                let mut sum = m.layers[l].attn.b_o.clone();
                for h in 0..m.config.n_heads {
                    for (s, v) in sum.iter_mut().zip(out.trace.head_out(l, h, i).unwrap()) {
                        *s += v;
                    }
                }
                close(&sum, out.trace.attn_out(l, i).unwrap(), 1e-4).map_err(TestCaseError::fail)?;
            }
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions(seed in 0u64..1000, tokens in tokens_strategy()) {
        let m = model(seed);
        let k = tokens.len();
        let out = m.forward(&tokens, &CaptureSpec { attention: true, ..Default::default() }, None).unwrap();
        for l in 0..m.config.n_layers {
            for h in 0..m.config.n_heads {
                let a = out.trace.attention(l, h).unwrap();
                for i in 0..k {
                    let row = &a[i * k..(i + 1) * k];
                    let sum: f32 = row.iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-4, "row sum {}", sum);
                    prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn prefix_logits_ignore_later_tokens(seed in 0u64..1000, tokens in tokens_strategy(), cut in 1usize..24) {
        let m = model(seed);
        let cut = cut.min(tokens.len());
        let cap = CaptureSpec { logits: Scope::All, ..Default::default() };
        let full = m.forward(&tokens, &cap, None).unwrap();
        let prefix = m.forward(&tokens[..cut], &cap, None).unwrap();
        for i in 0..cut {
            for (a, b) in full.logits.row(i).iter().zip(prefix.logits.row(i)) {
                prop_assert!((a - b).abs() <= 1e-5, "position {}: {} vs {}", i, a, b);
            }
        }
    }

    #[test]
    fn single_entry_edit(seed in 0u64..1000, tokens in proptest::collection::vec(0u32..97, 2..24),
                         layer in 0usize..3, head in 0usize..4, pick in any::<prop::sample::Index>(),
                         alpha in 0.05f32..20.0) {
        let m = model(seed);
        let k = tokens.len();
        let row = 1 + pick.index(k - 1);
        let col = pick.index(row);
        let edits = AttentionEdits { scales: vec![AttentionScale { layer, head, row, col, alpha }], ablations: vec![] };
        let cap = CaptureSpec { attention: true, ..CaptureSpec::logits_last() };
        let clean = m.forward(&tokens, &cap, None).unwrap();
        let edited = m.forward(&tokens, &cap, Some(&edits)).unwrap();
        let a = clean.trace.attention(layer, head).unwrap();
        let b = edited.trace.attention(layer, head).unwrap();
        let differing: Vec<usize> = (0..k * k).filter(|&i| a[i] != b[i]).collect();
        if alpha != 1.0 && a[row * k + col] != 0.0 {
            prop_assert_eq!(differing, vec![row * k + col]);
        }
        let sum: f32 = b[row * k..(row + 1) * k].iter().sum();
        prop_assert!((sum - (1.0 + (alpha - 1.0) * a[row * k + col])).abs() <= 1e-5);
        // Layers before the edit are untouched.
        for l in 0..layer {
            for h in 0..m.config.n_heads {
                prop_assert_eq!(clean.trace.attention(l, h).unwrap(), edited.trace.attention(l, h).unwrap());
            }
        }
    }

    #[test]
    fn unit_alpha_and_empty_ablation_are_bitwise_noops(seed in 0u64..1000, tokens in proptest::collection::vec(0u32..97, 2..24)) {
        let m = model(seed);
        let k = tokens.len();
        let mut scales = Vec::new();
        for layer in 0..3 {
            for head in 0..4 {
                for row in 1..k {
                    scales.push(AttentionScale { layer, head, row, col: row - 1, alpha: 1.0 });
                }
            }
        }
        let cap = CaptureSpec { logits: Scope::All, ..Default::default() };
        let clean = m.forward(&tokens, &cap, None).unwrap();
        let unit = m.forward(&tokens, &cap, Some(&AttentionEdits { scales, ablations: vec![] })).unwrap();
        let empty = m.forward(&tokens, &cap, Some(&AttentionEdits::default())).unwrap();
        let bits = |t: &compmech_core::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&clean.logits), bits(&unit.logits));
        prop_assert_eq!(bits(&clean.logits), bits(&empty.logits));
    }

    #[test]
    fn resumed_run_matches_full_edited_run(seed in 0u64..1000, tokens in proptest::collection::vec(0u32..97, 2..24),
                                           layer in 0usize..3, alpha in 0.1f32..10.0) {
        let m = model(seed);
        let k = tokens.len();
        let edits = AttentionEdits {
            scales: vec![AttentionScale { layer, head: 1, row: k - 1, col: 0, alpha }],
            ablations: vec![HeadRef::new(2, 3)],
        };
        let full = m.forward(&tokens, &CaptureSpec::logits_last(), Some(&edits)).unwrap();
        let clean = m.forward(&tokens, &CaptureSpec { residual: true, ..CaptureSpec::logits_last() }, None).unwrap();
        let x = clean.trace.residual_layer(layer).unwrap();
        let resumed = m.forward_from(layer, x, &CaptureSpec::logits_last(), Some(&edits)).unwrap();
        prop_assert_eq!(full.final_logits().unwrap(), resumed.final_logits().unwrap());
    }
}

#[test]
fn resume_rejects_edits_before_start() {
    let m = model(1);
    let clean = m.forward(&[1, 2, 3], &CaptureSpec { residual: true, ..Default::default() }, None).unwrap();
    let edits = AttentionEdits { scales: vec![], ablations: vec![HeadRef::new(0, 0)] };
    assert!(m
        .forward_from(1, clean.trace.residual_layer(1).unwrap(), &CaptureSpec::logits_last(), Some(&edits))
        .is_err());
}

#[test]
fn ablating_a_whole_layer_leaves_only_the_bias() {
    let m = model(7);
    let tokens = [3, 14, 15, 92, 65, 35];
    let edits = AttentionEdits { scales: vec![], ablations: (0..4).map(|h| HeadRef::new(1, h)).collect() };
    let out = m
        .forward(&tokens, &CaptureSpec { blocks: Scope::All, heads: Scope::All, ..Default::default() }, Some(&edits))
        .unwrap();
    for i in 0..tokens.len() {
        assert_eq!(out.trace.attn_out(1, i).unwrap(), &m.layers[1].attn.b_o[..]);
        for h in 0..4 {
            assert!(out.trace.head_out(1, h, i).unwrap().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn zero_blocks_reduce_to_embedding_projection() {
    let m = model(3).zero_blocks();
    let tokens = [5u32, 6, 7, 8];
    let out = m.forward(&tokens, &CaptureSpec { logits: Scope::All, ..Default::default() }, None).unwrap();
    let x0 = m.embed(&tokens);
    assert_eq!(out.trace.final_residual(), &x0);
    let d = m.config.d_model;
    let normed = layernorm(&x0, &vec![1.0; d], &vec![0.0; d], 1e-5).unwrap();
    for i in 0..tokens.len() {
        let want: Vec<f32> =
            (0..97).map(|t| m.w_e.row(t).iter().zip(normed.row(i)).map(|(a, b)| a * b).sum()).collect();
        close(out.logits.row(i), &want, 1e-5).unwrap();
    }
}

#[test]
fn greedy_ties_pick_the_lowest_id() {
    // Tokens 3 and 7 share an embedding; with zero blocks their logits tie
    // at the top whenever the input is that embedding.
    let mut m = model(5).zero_blocks();
    let d = m.config.d_model;
    let target: Vec<f32> = (0..d).map(|i| if i % 2 == 0 { 3.0 } else { -3.0 }).collect();
    for t in [3usize, 7] {
        m.w_e.row_mut(t).copy_from_slice(&target);
    }
    m.w_pos.data_mut().iter_mut().for_each(|v| *v = 0.0);
    for t in 0..97 {
        if t != 3 && t != 7 {
            m.w_e.row_mut(t).iter_mut().for_each(|v| *v *= 0.1);
        }
    }
    assert_eq!(m.greedy_next(&[7]).unwrap(), 3);
}
