//! `trace`: logit-lens map, block and head attribution, attention profile
//! and rank curves.

use anyhow::{Context, Result};
use compmech_core::corpus::{Dataset, Group};
use compmech_core::model::{write_f32_archive, CaptureSpec, HeadRef, ModelBundle, Scope};
use compmech_core::tracer::{
    block_attribution, head_attention_profile, head_attribution, layer_position_map, rank_curves, win_rates,
    AttributionRecord, HeadAttentionProfile, LogitLensMap, Projection, RankCurves,
};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::failure::{Category, Failure};
use crate::inputs;
use crate::manifest::Run;
use crate::output::{csv_bytes, describe, round4, RateOut};

pub const DEFAULT_ANALYSES: &str = "lens,blocks,heads,attention,ranks";
pub const DEFAULT_PROFILE_HEADS: &str = "L9H6,L9H9,L10H0,L10H10,L10H7,L11H10";
pub const DEFAULT_RANK_GROUPS: &str = "attribute,last";
pub const DEFAULT_MAX_CAPTURE_MB: usize = 4096;

#[derive(Debug, Clone, Copy, Default)]
struct Analyses {
    lens: bool,
    blocks: bool,
    heads: bool,
    attention: bool,
    ranks: bool,
}

fn parse_analyses(list: &str) -> Result<Analyses> {
    let mut a = Analyses::default();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "lens" => a.lens = true,
            "blocks" => a.blocks = true,
            "heads" => a.heads = true,
            "attention" => a.attention = true,
            "ranks" => a.ranks = true,
            other => {
                return Err(Failure::new(
                    Category::Usage,
                    format!("unknown analysis `{other}` (expected lens, blocks, heads, attention, ranks)"),
                )
                .into())
            }
        }
    }
    Ok(a)
}

fn parse_groups(list: &str) -> Result<Vec<Group>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Group>().map_err(|e| Failure::new(Category::Usage, e).into()))
        .collect()
}

/// Rejects runs whose concurrent traces would exceed the memory budget.
fn check_capture(
    cfg: &ExperimentConfig,
    model: &ModelBundle,
    dataset: &Dataset,
    a: Analyses,
    n_heads: usize,
) -> Result<()> {
    let limit_mb = cfg.max_capture_mb.unwrap_or(DEFAULT_MAX_CAPTURE_MB);
    let k = dataset.instances.iter().map(|i| i.tokens.len()).max().unwrap_or(0);
    let capture = CaptureSpec {
        residual: a.lens || a.blocks || a.heads || a.ranks,
        blocks: if a.blocks || a.heads { Scope::Last } else { Scope::Off },
        heads: if a.heads { Scope::Last } else { Scope::Off },
        attention: a.attention,
        logits: Scope::Last,
    };
    let workers = rayon::current_num_threads();
    let mut bytes = capture.trace_bytes(&model.config, k) * workers;
    if a.attention && cfg.attention_maps.unwrap_or(false) {
        let maps: usize = dataset.instances.iter().map(|i| i.tokens.len().pow(2)).sum();
        bytes += maps * n_heads * 4;
    }
    let need_mb = bytes.div_ceil(1 << 20);
    if need_mb > limit_mb {
        return Err(Failure::new(
            Category::Resource,
            format!(
                "capture needs about {need_mb} MiB with {workers} workers, above --max-capture-mb {limit_mb}; \
                 lower --workers, drop analyses or --attention-maps, or reduce --sample"
            ),
        )
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct LensRow {
    layer: usize,
    group: &'static str,
    token: &'static str,
    count: u64,
    mean: f64,
    variance: f64,
    std: f64,
}

fn lens_rows(map: &LogitLensMap) -> Vec<LensRow> {
    let mut rows = Vec::with_capacity(map.cells.len() * 2);
    for c in &map.cells {
        rows.push(LensRow {
            layer: c.layer,
            group: c.group.name(),
            token: "fact",
            count: c.fact.count,
            mean: c.fact.mean,
            variance: c.fact.variance,
            std: c.fact.std,
        });
        rows.push(LensRow {
            layer: c.layer,
            group: c.group.name(),
            token: "cofa",
            count: c.cofa.count,
            mean: c.cofa.mean,
            variance: c.cofa.variance,
            std: c.cofa.std,
        });
    }
    rows
}

#[derive(Serialize)]
struct BlockRow {
    layer: String,
    block: &'static str,
    count: u64,
    mean: f64,
    variance: f64,
    std: f64,
}

fn block_rows(rec: &AttributionRecord) -> Vec<BlockRow> {
    let mut rows = vec![BlockRow {
        layer: "embed".into(),
        block: "embedding",
        count: rec.embedding.count,
        mean: rec.embedding.mean,
        variance: rec.embedding.variance,
        std: rec.embedding.std,
    }];
    for b in &rec.blocks {
        let layer = b.layer.to_string();
        rows.push(BlockRow {
            layer: layer.clone(),
            block: "attn",
            count: b.attn.count,
            mean: b.attn.mean,
            variance: b.attn.variance,
            std: b.attn.std,
        });
        rows.push(BlockRow {
            layer: layer.clone(),
            block: "mlp",
            count: b.mlp.count,
            mean: b.mlp.mean,
            variance: b.mlp.variance,
            std: b.mlp.std,
        });
        rows.push(BlockRow {
            layer,
            block: "attn_bias",
            count: b.attn_bias.count,
            mean: b.attn_bias.mean,
            variance: b.attn_bias.variance,
            std: b.attn_bias.std,
        });
    }
    rows
}

#[derive(Serialize)]
struct HeadRow {
    head: String,
    layer: usize,
    index: usize,
    count: u64,
    mean: f64,
    variance: f64,
    std: f64,
}

#[derive(Serialize)]
struct ProfileRow {
    head: String,
    group: &'static str,
    count: u64,
    mean: f64,
    variance: f64,
    std: f64,
}

#[derive(Serialize)]
struct RankCsvRow {
    group: &'static str,
    layer: usize,
    fact_mean: f64,
    fact_median: f64,
    cofa_mean: f64,
    cofa_median: f64,
}

#[derive(Serialize)]
struct MapIndexRow<'a> {
    file: String,
    instance: &'a str,
    tokens: usize,
}

fn attribution_summary(rec: &AttributionRecord) -> serde_json::Value {
    let last = rec.blocks.last();
    let mut v = json!({
        "projection": rec.projection,
        "final_delta_mean": rec.final_delta.mean,
        "last_attention_block_mean": last.map(|b| b.attn.mean),
        "last_mlp_block_mean": last.map(|b| b.mlp.mean),
        "max_telescoping_error": rec.max_telescoping_error,
        "max_head_decomposition_error": rec.max_head_decomposition_error,
    });
    if !rec.heads.is_empty() {
        let top2 = rec.most_negative(2);
        v["most_negative_heads"] = json!(rec.most_negative(5).iter().map(HeadRef::to_string).collect::<Vec<_>>());
        v["most_positive_heads"] = json!(rec.most_positive(5).iter().map(HeadRef::to_string).collect::<Vec<_>>());
        v["total_negative"] = json!(rec.total_negative());
        v["top2_negative_share"] = json!(round4(rec.negative_share(&top2)));
    }
    v
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_maps(run: &mut Run, profile: &HeadAttentionProfile) -> Result<()> {
    let Some(maps) = &profile.maps else { return Ok(()) };
    let mut index = Vec::with_capacity(maps.len());
    for (i, m) in maps.iter().enumerate() {
        let k = m.maps.shape()[1];
        let name = format!("attention_maps/{i:05}_{}.safetensors", sanitize(&m.instance));
        let path = run.out_dir().join(&name);
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        let tensors: Vec<(String, Vec<usize>, &[f32])> = m
            .heads
            .iter()
            .enumerate()
            .map(|(h, head)| (head.to_string(), vec![k, k], &m.maps.data()[h * k * k..(h + 1) * k * k]))
            .collect();
        write_f32_archive(&path, &tensors).with_context(|| format!("writing {}", path.display()))?;
        run.record(&name)?;
        index.push(MapIndexRow { file: name, instance: &m.instance, tokens: k });
    }
    run.write("attention_maps/index.csv", &csv_bytes(index)?)?;
    Ok(())
}

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let analyses = parse_analyses(cfg.analyses.as_deref().unwrap_or(DEFAULT_ANALYSES))?;
    let projection: Projection =
        cfg.projection.as_deref().unwrap_or("bare").parse().map_err(|e: String| Failure::new(Category::Usage, e))?;
    let rank_groups = parse_groups(cfg.rank_groups.as_deref().unwrap_or(DEFAULT_RANK_GROUPS))?;
    let mut run = Run::start("trace", cfg)?;
    let model = run.stage("load model", || inputs::model(cfg))?;
    let dataset = run.stage("load dataset", || inputs::dataset(cfg))?;
    run.input("model", &model.weights)?;
    run.input("dataset", cfg.dataset.as_ref().expect("dataset checked"))?;
    let m = &model.bundle;

    let profile_heads = match &cfg.heads {
        Some(list) => inputs::heads(list, m)?,
        None => match inputs::heads(DEFAULT_PROFILE_HEADS, m) {
            Ok(h) => h,
            Err(_) => {
                let last = m.config.n_layers - 1;
                log::info!("default profile heads do not fit this model; profiling every head of layer {last}");
                (0..m.config.n_heads).map(|h| HeadRef::new(last, h)).collect()
            }
        },
    };
    check_capture(cfg, m, &dataset, analyses, profile_heads.len())?;

    let rates = run.stage("win rates", || Ok(win_rates(&dataset, m, None)?))?;
    println!("instances: {}", dataset.len());
    println!("cofa win rate: {}", describe(&rates.cofa));
    println!("fact win rate: {}", describe(&rates.fact));
    let mut summary = json!({
        "instances": dataset.len(),
        "cofa_win_rate": round4(rates.cofa.rate),
        "win_rates": { "fact": RateOut::from(rates.fact), "cofa": RateOut::from(rates.cofa) },
    });

    if analyses.lens {
        let per_token = cfg.per_token.unwrap_or(false);
        let map = run.stage("logit lens", || Ok(layer_position_map(&dataset, m, per_token)?))?;
        run.write("lens_map.csv", &csv_bytes(lens_rows(&map))?)?;
        if let Some(tokens) = &map.per_token {
            run.write("lens_tokens.csv", &csv_bytes(tokens)?)?;
        }
        let strongest =
            |cofa: bool| (0..=map.n_layers).map(|l| map.strongest_group(l, cofa).name()).collect::<Vec<_>>();
        summary["lens"] = json!({
            "rows": map.cells.len() * 2,
            "strongest_group_fact": strongest(false),
            "strongest_group_cofa": strongest(true),
        });
    }

    if analyses.blocks || analyses.heads {
        let rec = run.stage("attribution", || {
            Ok(if analyses.heads {
                head_attribution(&dataset, m, projection)?
            } else {
                block_attribution(&dataset, m, projection)?
            })
        })?;
        if analyses.blocks {
            run.write("blocks.csv", &csv_bytes(block_rows(&rec))?)?;
        }
        if analyses.heads {
            let rows = rec.heads.iter().map(|h| HeadRow {
                head: h.head.to_string(),
                layer: h.head.layer,
                index: h.head.head,
                count: h.delta.count,
                mean: h.delta.mean,
                variance: h.delta.variance,
                std: h.delta.std,
            });
            run.write("heads.csv", &csv_bytes(rows)?)?;
            let top = rec.most_negative(2);
            println!(
                "most negative heads: {} ({:.4} of total negative)",
                top.iter().map(HeadRef::to_string).collect::<Vec<_>>().join(", "),
                rec.negative_share(&top)
            );
        }
        if let Some(b) = rec.blocks.last() {
            println!("last attention block mean Δ_cofa: {:.4}", b.attn.mean);
        }
        run.write_json("attribution.json", &rec)?;
        summary["attribution"] = attribution_summary(&rec);
    }

    if analyses.attention {
        let full = cfg.attention_maps.unwrap_or(false);
        let profile =
            run.stage("attention profile", || Ok(head_attention_profile(&dataset, m, &profile_heads, full)?))?;
        let rows = profile.heads.iter().flat_map(|p| {
            p.groups.iter().map(|(g, s)| ProfileRow {
                head: p.head.to_string(),
                group: g.name(),
                count: s.count,
                mean: s.mean,
                variance: s.variance,
                std: s.std,
            })
        });
        run.write("attention_profile.csv", &csv_bytes(rows)?)?;
        write_maps(&mut run, &profile)?;
        let tops: Vec<_> = profile
            .heads
            .iter()
            .map(|p| json!({ "head": p.head.to_string(), "top_group": p.top_group().name() }))
            .collect();
        for p in &profile.heads {
            println!("{}: most attended group {}", p.head, p.top_group());
        }
        summary["attention"] = json!({ "heads": tops, "max_partition_error": profile.max_partition_error });
    }

    if analyses.ranks {
        let curves: Vec<RankCurves> = run.stage("rank curves", || {
            rank_groups.iter().map(|&g| Ok(rank_curves(&dataset, m, g)?)).collect::<Result<_>>()
        })?;
        let rows = curves.iter().flat_map(|c| {
            c.rows.iter().map(|r| RankCsvRow {
                group: c.group.name(),
                layer: r.layer,
                fact_mean: r.fact_mean,
                fact_median: r.fact_median,
                cofa_mean: r.cofa_mean,
                cofa_median: r.cofa_median,
            })
        });
        run.write("ranks.csv", &csv_bytes(rows)?)?;
        summary["ranks"] = json!(rank_groups.iter().map(|g| g.name()).collect::<Vec<_>>());
    }

    run.write_json("summary.json", &summary)?;
    println!("wrote {}", run.out_dir().display());
    run.finish()?;
    Ok(())
}
