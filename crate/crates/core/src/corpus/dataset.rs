//! Filtering, sampling and the JSON-lines dataset file.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{label_spans, CorpusError, CounterFactRecord, PromptInstance, PromptStyle, Result};
use crate::model::{ModelBundle, ModelError};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub style: PromptStyle,
}

impl SampleOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, style: PromptStyle::default() }
    }
}

/// Records removed at each filtering stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub records: usize,
    pub multi_token_target_true: usize,
    pub multi_token_target_new: usize,
    pub identical_targets: usize,
    pub alignment_failed: usize,
    pub not_factual: usize,
    /// Records passing every filter.
    pub pool: usize,
    pub sampled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the source record file, when known.
    pub source_sha256: Option<String>,
    pub seed: u64,
    pub requested: usize,
    pub prefix: String,
    pub counts: FilterCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub provenance: Provenance,
    pub instances: Vec<PromptInstance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// The first `n` instances of a seeded uniform subsample, in dataset order.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.instances.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = index::sample(&mut rng, self.instances.len(), n).into_vec();
        picks.sort_unstable();
        Dataset {
            provenance: self.provenance.clone(),
            instances: picks.into_iter().map(|i| self.instances[i].clone()).collect(),
        }
    }
}

/// Keeps records whose targets are distinct single tokens with a leading
/// space, whose prompt spans align, and which the model completes
/// factually under greedy decoding; then draws `opts.n` of them uniformly.
pub fn filter_and_sample(
    records: &[CounterFactRecord],
    model: &ModelBundle,
    tokenizer: &Tokenizer,
    opts: &SampleOptions,
) -> Result<Dataset> {
    filter_and_sample_with(records, tokenizer, opts, |tokens| model.greedy_next(tokens))
}

/// As [`filter_and_sample`] with an arbitrary next-token predictor.
pub fn filter_and_sample_with<F>(
    records: &[CounterFactRecord],
    tokenizer: &Tokenizer,
    opts: &SampleOptions,
    predict: F,
) -> Result<Dataset>
where
    F: Fn(&[TokenId]) -> std::result::Result<TokenId, ModelError> + Sync,
{
    let mut counts = FilterCounts { records: records.len(), ..Default::default() };
    let mut candidates = Vec::new();
    for rec in records {
        let t_fact = tokenizer.single_token(rec.target_true.trim(), true);
        let t_cofa = tokenizer.single_token(rec.target_new.trim(), true);
        let (t_fact, t_cofa) = match (t_fact, t_cofa) {
            (None, _) => {
                counts.multi_token_target_true += 1;
                continue;
            }
            (_, None) => {
                counts.multi_token_target_new += 1;
                continue;
            }
            (Some(f), Some(c)) => (f, c),
        };
        if t_fact == t_cofa {
            counts.identical_targets += 1;
            continue;
        }
        match label_spans(rec, tokenizer, &opts.style, t_fact, t_cofa) {
            Ok(inst) => candidates.push((rec, inst)),
            Err(CorpusError::Alignment(why)) => {
                log::debug!("record {}: {why}", rec.id);
                counts.alignment_failed += 1;
            }
            Err(e) => return Err(e),
        }
    }

    let factual: Vec<bool> = candidates
        .par_iter()
        .map(|(rec, inst)| -> Result<bool> {
            let prefix = tokenizer.encode(&rec.fact_prefix()?);
            Ok(predict(&prefix)? == inst.t_fact)
        })
        .collect::<Result<_>>()?;
    let pool: Vec<PromptInstance> =
        candidates.into_iter().zip(factual).filter_map(|((_, inst), keep)| keep.then_some(inst)).collect();
    counts.pool = pool.len();
    counts.not_factual = counts.records
        - counts.multi_token_target_true
        - counts.multi_token_target_new
        - counts.identical_targets
        - counts.alignment_failed
        - counts.pool;

    let instances = if opts.n >= pool.len() {
        if opts.n > pool.len() {
            log::warn!("requested {} instances but only {} pass the filters; keeping all", opts.n, pool.len());
        }
        pool
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picks = index::sample(&mut rng, pool.len(), opts.n).into_vec();
        picks.sort_unstable();
        let mut pool: Vec<Option<PromptInstance>> = pool.into_iter().map(Some).collect();
        picks.into_iter().map(|i| pool[i].take().expect("distinct indices")).collect()
    };
    counts.sampled = instances.len();

    Ok(Dataset {
        provenance: Provenance {
            source_sha256: None,
            seed: opts.seed,
            requested: opts.n,
            prefix: opts.style.prefix.clone(),
            counts,
        },
        instances,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    provenance: Provenance,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

/// Writes a provenance header line followed by one instance per line.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &Header { provenance: dataset.provenance.clone() })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    for inst in &dataset.instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| CorpusError::Schema {
        record: path.display().to_string(),
        detail: "empty dataset file".into(),
    })?;
    let header: Header = serde_json::from_str(&header.map_err(io_err(path))?)?;
    let mut instances = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: PromptInstance = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Schema { record: format!("line {}", i + 2), detail: e.to_string() })?;
        if inst.tokens.is_empty() || !inst.spans.is_partition(inst.tokens.len()) {
            return Err(CorpusError::Schema { record: inst.id, detail: "spans do not partition the tokens".into() });
        }
        instances.push(inst);
    }
    Ok(Dataset { provenance: header.provenance, instances })
}
