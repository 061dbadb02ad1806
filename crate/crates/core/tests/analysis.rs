//! Tracer and intervention behaviour on a random GPT-2-vocabulary model.

use std::path::PathBuf;

use compmech_core::corpus::{label_spans, CounterFactRecord, Dataset, FilterCounts, Group, PromptStyle, Provenance};
use compmech_core::intervention::{ablate_heads, apply_alpha, grid_search_alpha, run_interventions, InterventionSpec};
use compmech_core::model::{CaptureSpec, HeadRef, ModelBundle, ModelConfig};
use compmech_core::tokenizer::Tokenizer;
use compmech_core::tracer::{
    block_attribution, head_attention_profile, head_attribution, layer_position_map, logit_lens, rank_curves,
    win_rates, Projection, TraceError,
};

fn tokenizer() -> Tokenizer {
    Tokenizer::from_dir(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/gpt2-tokenizer")).unwrap()
}

fn model() -> ModelBundle {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        d_mlp: 64,
        vocab_size: 50257,
        n_ctx: 64,
        layer_norm_eps: 1e-5,
    };
    ModelBundle::random(cfg, 2024, 0.6).unwrap()
}

const FACTS: [(&str, &str, &str, &str); 8] = [
    ("iPhone", "{} was developed by", "Apple", "Google"),
    ("Danielle Darrieux", "The mother tongue of {} is", "French", "English"),
    ("Toko Yasuda", "{} plays the", "guitar", "piano"),
    ("Windows Vista", "{} is a product of", "Microsoft", "Nokia"),
    ("BBC One", "{} is owned by", "BBC", "Sega"),
    ("Berlin", "{}'s twin city is", "Paris", "Tokyo"),
    ("Kilian Jornet", "{} was born in", "Spain", "Japan"),
    ("Tesla Model S", "{} is produced by", "Tesla", "Ford"),
];

fn dataset() -> Dataset {
    let tok = tokenizer();
    let instances = FACTS
        .iter()
        .enumerate()
        .map(|(i, (s, r, t, n))| {
            let rec = CounterFactRecord {
                id: i.to_string(),
                subject: s.to_string(),
                template: r.to_string(),
                target_true: t.to_string(),
                target_new: n.to_string(),
            };
            let f = tok.single_token(t, true).unwrap();
            let c = tok.single_token(n, true).unwrap();
            label_spans(&rec, &tok, &PromptStyle::default(), f, c).unwrap()
        })
        .collect();
    Dataset {
        provenance: Provenance {
            source_sha256: None,
            seed: 0,
            requested: 8,
            prefix: "Redefine:".into(),
            counts: FilterCounts::default(),
        },
        instances,
    }
}

#[test]
fn lens_at_final_layer_reproduces_output_logits() {
    let m = model();
    let ds = dataset();
    for inst in &ds.instances {
        let out = m.forward(&inst.tokens, &CaptureSpec { residual: true, ..CaptureSpec::logits_last() }, None).unwrap();
        let lens = logit_lens(&out.trace, &m, inst.last_position(), m.config.n_layers).unwrap();
        for (a, b) in lens.iter().zip(out.final_logits().unwrap()) {
            assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn lens_of_zero_vector_is_unembedded_bias() {
    let m = model();
    let d = m.config.d_model;
    let got = m.unembed(&m.final_norm(&vec![0.0; d]));
    for t in [0usize, 13, 4196, 50256] {
        let want: f64 = m.w_e.row(t).iter().zip(&m.ln_f.bias).map(|(&u, &b)| f64::from(u) * f64::from(b)).sum();
        assert!((f64::from(got[t]) - want).abs() < 1e-5);
    }
}

#[test]
fn lens_map_shape_and_single_instance() {
    let m = model();
    let mut ds = dataset();
    ds.instances.truncate(1);
    let map = layer_position_map(&ds, &m, true).unwrap();
    assert_eq!(map.cells.len(), (m.config.n_layers + 1) * 7);
    assert!(map.cells.iter().all(|c| c.fact.variance == 0.0 && c.cofa.variance == 0.0 && c.fact.mean.is_finite()));
    let inst = &ds.instances[0];
    assert_eq!(map.per_token.as_ref().unwrap().len(), (m.config.n_layers + 1) * inst.tokens.len());
    // The cell agrees with a direct lens readout at the representative token.
    let out = m.forward(&inst.tokens, &CaptureSpec { residual: true, ..Default::default() }, None).unwrap();
    let lens = logit_lens(&out.trace, &m, inst.spans.representative(Group::Subject1).unwrap(), 1).unwrap();
    let cell = map.cell(1, Group::Subject1);
    assert!((cell.cofa.mean - f64::from(lens[inst.t_cofa as usize])).abs() < 1e-4);
}

#[test]
fn zero_weight_model_attributes_nothing() {
    let m = model().zero_blocks();
    let rec = head_attribution(&dataset(), &m, Projection::Bare).unwrap();
    for b in &rec.blocks {
        assert_eq!((b.attn.mean, b.mlp.mean, b.attn.variance), (0.0, 0.0, 0.0));
    }
    assert!(rec.heads.iter().all(|h| h.delta.mean == 0.0));
}

#[test]
fn head_sums_and_telescoping() {
    let m = model();
    let ds = dataset();
    for projection in [Projection::Bare, Projection::FinalNorm] {
        let rec = head_attribution(&ds, &m, projection).unwrap();
        assert_eq!(rec.heads.len(), 8);
        assert!(rec.max_head_decomposition_error < 1e-3, "{projection:?}: {}", rec.max_head_decomposition_error);
        assert!(rec.max_telescoping_error < 1e-2, "{projection:?}: {}", rec.max_telescoping_error);
        let blocks = block_attribution(&ds, &m, projection).unwrap();
        assert_eq!(blocks.blocks, rec.blocks);
        assert!(blocks.heads.is_empty());
    }
    // Under the linearised final norm, only the final-norm bias is left over.
    let rec = head_attribution(&ds, &m, Projection::FinalNorm).unwrap();
    let mean_bias: f64 = ds
        .instances
        .iter()
        .map(|i| {
            let (c, f) = (m.w_e.row(i.t_cofa as usize), m.w_e.row(i.t_fact as usize));
            m.ln_f.bias.iter().zip(c.iter().zip(f)).map(|(&b, (&c, &f))| f64::from(b) * f64::from(c - f)).sum::<f64>()
        })
        .sum::<f64>()
        / ds.len() as f64;
    assert!((rec.final_norm_gap.mean - mean_bias).abs() < 1e-3, "{} vs {mean_bias}", rec.final_norm_gap.mean);
}

#[test]
fn head_shares() {
    let m = model();
    let rec = head_attribution(&dataset(), &m, Projection::Bare).unwrap();
    let all: Vec<HeadRef> = rec.heads.iter().map(|h| h.head).collect();
    if rec.total_negative() < 0.0 {
        assert!((rec.negative_share(&all) - 1.0).abs() < 1e-12);
    }
    let neg = rec.most_negative(2);
    let pos = rec.most_positive(1);
    assert!(rec.head(neg[0]).unwrap().delta.mean <= rec.head(neg[1]).unwrap().delta.mean);
    assert!(rec.head(pos[0]).unwrap().delta.mean >= rec.head(neg[1]).unwrap().delta.mean);
    let layer0: Vec<HeadRef> = all.iter().copied().filter(|h| h.layer == 0).collect();
    let share = rec.layer_positive_share(0, &layer0);
    assert!(share == 0.0 || (share - 1.0).abs() < 1e-12);
}

#[test]
fn attention_profile_partitions_the_last_row() {
    let m = model();
    let heads = [HeadRef::new(0, 1), HeadRef::new(1, 3)];
    let prof = head_attention_profile(&dataset(), &m, &heads, true).unwrap();
    assert!(prof.max_partition_error < 1e-4);
    assert_eq!(prof.heads.len(), 2);
    let maps = prof.maps.unwrap();
    assert_eq!(maps.len(), 8);
    assert_eq!(maps[0].maps.shape()[0], 2);
    let err = head_attention_profile(&dataset(), &m, &[HeadRef::new(2, 0)], false).unwrap_err();
    assert!(matches!(err, TraceError::UnknownHead(_)));
}

#[test]
fn rank_curve_bounds_and_argmax() {
    let m = model();
    let mut ds = dataset();
    for inst in &mut ds.instances {
        inst.t_fact = m.greedy_next(&inst.tokens).unwrap();
    }
    let curves = rank_curves(&ds, &m, Group::Last).unwrap();
    assert_eq!(curves.rows.len(), m.config.n_layers + 1);
    for r in &curves.rows {
        assert!(r.fact_mean >= 1.0 && r.cofa_mean >= 1.0 && r.fact_mean <= 50257.0 && r.cofa_median <= 50257.0);
    }
    let last = curves.rows.last().unwrap();
    assert_eq!((last.fact_mean, last.fact_median), (1.0, 1.0));
}

#[test]
fn tied_logits_count_for_the_counterfactual() {
    let m = model();
    let mut ds = dataset();
    for inst in &mut ds.instances {
        inst.t_fact = inst.t_cofa;
    }
    let r = win_rates(&ds, &m, None).unwrap();
    assert_eq!((r.fact.successes, r.cofa.successes), (0, 8));
}

#[test]
fn aggregation_ignores_instance_order() {
    let m = model();
    let ds = dataset();
    let mut rev = ds.clone();
    rev.instances.reverse();
    let a = head_attribution(&ds, &m, Projection::Bare).unwrap();
    let b = head_attribution(&rev, &m, Projection::Bare).unwrap();
    for (x, y) in a.heads.iter().zip(&b.heads) {
        assert!((x.delta.mean - y.delta.mean).abs() < 1e-9);
        assert!((x.delta.variance - y.delta.variance).abs() < 1e-9);
    }
    assert_eq!(win_rates(&ds, &m, None).unwrap(), win_rates(&rev, &m, None).unwrap());
}

#[test]
fn identity_interventions_are_exact() {
    let m = model();
    let ds = dataset();
    let heads = [HeadRef::new(1, 0), HeadRef::new(1, 2)];
    let clean = win_rates(&ds, &m, None).unwrap();
    let unit = apply_alpha(&ds, &m, &heads, 1.0).unwrap();
    assert!(unit.identical_to_clean);
    assert_eq!((unit.clean, unit.edited), (clean, clean));
    let none = ablate_heads(&ds, &m, &[]).unwrap();
    assert!(none.identical_to_clean);
    assert_eq!(none.edited, clean);
    let real = apply_alpha(&ds, &m, &heads, 5.0).unwrap();
    assert!(!real.identical_to_clean);
    assert_eq!(real.edited, win_rates(&ds, &m, Some(&InterventionSpec::scale(&heads, 5.0))).unwrap());
}

#[test]
fn grid_search_selection() {
    let m = model();
    let ds = dataset();
    let heads = [HeadRef::new(1, 1)];
    let single = grid_search_alpha(&ds, &m, &heads, &[1.0]).unwrap();
    assert_eq!(single.best_alpha, 1.0);
    assert_eq!(single.best, single.clean);
    let a = grid_search_alpha(&ds, &m, &heads, &[2.0, 5.0, 10.0, 100.0]).unwrap();
    let b = grid_search_alpha(&ds, &m, &heads, &[100.0, 5.0, 2.0, 10.0, 5.0]).unwrap();
    assert_eq!(a, b);
    let best = a.rows.iter().map(|r| r.rates.fact.successes).max().unwrap();
    let first = a.rows.iter().find(|r| r.rates.fact.successes == best).unwrap();
    assert_eq!(a.best_alpha, first.alpha);
    assert!(grid_search_alpha(&ds, &m, &heads, &[]).is_err());
    assert!(grid_search_alpha(&ds, &m, &heads, &[2.0, -1.0]).is_err());
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let m = model();
    let ds = dataset();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let heads = head_attribution(&ds, &m, Projection::FinalNorm).unwrap();
            let lens = layer_position_map(&ds, &m, false).unwrap();
            let grid = run_interventions(&ds, &m, &[InterventionSpec::scale(&[HeadRef::new(1, 1)], 5.0)]).unwrap();
            serde_json::to_string(&(heads, lens, grid)).unwrap()
        })
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(3));
}

/// One layer, one head, MLP weights zero: the last position's output is a
/// closed-form weighted sum of value vectors, checked in f64.
#[test]
fn alpha_edit_matches_single_layer_oracle() {
    let cfg =
        ModelConfig { n_layers: 1, n_heads: 1, d_model: 8, d_mlp: 32, vocab_size: 30, n_ctx: 8, layer_norm_eps: 1e-5 };
    let mut m = ModelBundle::random(cfg, 77, 0.8).unwrap();
    let mlp = &mut m.layers[0].mlp;
    mlp.w_in.data_mut().iter_mut().for_each(|v| *v = 0.0);
    mlp.w_out.data_mut().iter_mut().for_each(|v| *v = 0.0);
    mlp.b_in.iter_mut().for_each(|v| *v = 0.0);
    mlp.b_out.iter_mut().for_each(|v| *v = 0.0);
    let tokens = [4u32, 9, 17, 2, 25];
    let (k, d) = (tokens.len(), 8);
    let (row, col, alpha) = (k - 1, 1, 5.0f64);

    let ln = |x: &[f64], g: &[f32], b: &[f32]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        x.iter()
            .zip(g.iter().zip(b))
            .map(|(v, (&g, &b))| (v - mean) / (var + 1e-5).sqrt() * f64::from(g) + f64::from(b))
            .collect()
    };
    let affine = |x: &[f64], w: &compmech_core::tensor::Tensor, b: &[f32]| -> Vec<f64> {
        (0..d).map(|j| f64::from(b[j]) + (0..d).map(|i| x[i] * f64::from(w.data()[i * d + j])).sum::<f64>()).collect()
    };
    let x0: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (0..d).map(|j| f64::from(m.w_e.row(t as usize)[j]) + f64::from(m.w_pos.row(i)[j])).collect())
        .collect();
    let a = &m.layers[0].attn;
    let h: Vec<Vec<f64>> = x0.iter().map(|x| ln(x, &m.layers[0].ln1.gain, &m.layers[0].ln1.bias)).collect();
    let q = affine(&h[row], &a.w_q, &a.b_q);
    let keys: Vec<Vec<f64>> = h.iter().map(|x| affine(x, &a.w_k, &a.b_k)).collect();
    let vals: Vec<Vec<f64>> = h.iter().map(|x| affine(x, &a.w_v, &a.b_v)).collect();
    let scores: Vec<f64> =
        keys.iter().map(|kk| q.iter().zip(kk).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp() / z).collect();
    weights[col] *= alpha;
    let mixed: Vec<f64> = (0..d).map(|j| weights.iter().zip(&vals).map(|(w, v)| w * v[j]).sum()).collect();
    let attn_out = affine(&mixed, &a.w_o, &a.b_o);
    let x1: Vec<f64> = x0[row].iter().zip(&attn_out).map(|(x, a)| x + a).collect();
    let fin = ln(&x1, &m.ln_f.gain, &m.ln_f.bias);
    let want: Vec<f64> = (0..30).map(|t| m.w_e.row(t).iter().zip(&fin).map(|(&u, f)| f64::from(u) * f).sum()).collect();

    let edits = compmech_core::model::AttentionEdits {
        scales: vec![compmech_core::model::AttentionScale { layer: 0, head: 0, row, col, alpha: alpha as f32 }],
        ablations: vec![],
    };
    let out = m.forward(&tokens, &CaptureSpec::logits_last(), Some(&edits)).unwrap();
    for (g, w) in out.final_logits().unwrap().iter().zip(&want) {
        assert!((f64::from(*g) - w).abs() < 1e-4, "{g} vs {w}");
    }
}
