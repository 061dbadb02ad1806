//! Word-embedding tables and similarity binning.
//!
//! Tables use the word2vec layouts: a `count dim` header line followed by
//! either `word v1 .. vd` text lines or, in the binary variant, the word,
//! a space and `dim` little-endian f32 values per entry.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, PromptInstance, Result};

#[derive(Debug, Clone, Default)]
pub struct Embeddings {
    dim: usize,
    words: Vec<String>,
    vectors: Vec<f32>,
    exact: HashMap<String, usize>,
    folded: HashMap<String, usize>,
}

fn bad(msg: impl Into<String>) -> CorpusError {
    CorpusError::Embeddings(msg.into())
}

impl Embeddings {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Adds an entry; later duplicates of a word are ignored.
    pub fn insert(&mut self, word: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(bad(format!("vector for {word:?} has {} values, expected {}", vector.len(), self.dim)));
        }
        if self.exact.contains_key(word) {
            return Ok(());
        }
        let idx = self.words.len();
        self.words.push(word.to_owned());
        self.vectors.extend_from_slice(vector);
        self.exact.insert(word.to_owned(), idx);
        self.folded.entry(word.to_lowercase()).or_insert(idx);
        Ok(())
    }

    /// Vector for `word` after trimming: exact match first, then case-folded.
    pub fn get(&self, word: &str) -> Option<&[f32]> {
        let w = word.trim();
        let idx = self.exact.get(w).or_else(|| self.folded.get(&w.to_lowercase()))?;
        Some(&self.vectors[idx * self.dim..(idx + 1) * self.dim])
    }

    /// Loads a table, choosing the binary reader for `.bin` files. When
    /// `keep` is given, only words whose lowercase form it contains are kept.
    pub fn load(path: impl AsRef<Path>, keep: Option<&HashSet<String>>) -> Result<Self> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        let reader = BufReader::with_capacity(1 << 20, file);
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_binary(reader, keep)
        } else {
            Self::read_text(reader, keep)
        }
    }

    fn header(line: &str) -> Result<(usize, usize)> {
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(n)), Some(Ok(d)), None) if d > 0 => Ok((n, d)),
            _ => Err(bad(format!("expected `count dim` header, got {line:?}"))),
        }
    }

    fn wanted(keep: Option<&HashSet<String>>, word: &str) -> bool {
        keep.is_none_or(|k| k.contains(&word.to_lowercase()))
    }

    pub fn read_text(mut reader: impl BufRead, keep: Option<&HashSet<String>>) -> Result<Self> {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        let (count, dim) = Self::header(&line)?;
        let mut table = Self::new(dim);
        let mut values = Vec::with_capacity(dim);
        let mut seen = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            seen += 1;
            let (word, rest) = line.split_once(' ').ok_or_else(|| bad(format!("line {}: no values", i + 2)))?;
            if !Self::wanted(keep, word) {
                continue;
            }
            values.clear();
            for v in rest.split_whitespace() {
                values.push(v.parse::<f32>().map_err(|_| bad(format!("line {}: bad value {v:?}", i + 2)))?);
            }
            table.insert(word, &values)?;
        }
        if seen != count {
            log::warn!("embedding header announces {count} words, found {seen}");
        }
        Ok(table)
    }

    pub fn read_binary(mut reader: impl BufRead, keep: Option<&HashSet<String>>) -> Result<Self> {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        let (count, dim) = Self::header(&line)?;
        let mut table = Self::new(dim);
        let mut word = Vec::new();
        let mut raw = vec![0u8; dim * 4];
        let mut values = vec![0.0f32; dim];
        for i in 0..count {
            word.clear();
            reader.read_until(b' ', &mut word).map_err(|e| bad(e.to_string()))?;
            if word.last() != Some(&b' ') {
                return Err(bad(format!("entry {i}: truncated word")));
            }
            word.pop();
            let start = word.iter().position(|&b| b != b'\n').unwrap_or(word.len());
            let text = String::from_utf8_lossy(&word[start..]).into_owned();
            reader.read_exact(&mut raw).map_err(|_| bad(format!("entry {i}: truncated vector")))?;
            if !Self::wanted(keep, &text) {
                continue;
            }
            for (v, b) in values.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            table.insert(&text, &values)?;
        }
        Ok(table)
    }
}

/// Cosine similarity computed in f64; zero vectors give 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub scored: usize,
    pub out_of_vocabulary: usize,
}

/// Scores every instance by the cosine similarity of its two attribute
/// words; instances with an out-of-vocabulary word get `None`.
pub fn attach_similarity(dataset: &mut Dataset, embeddings: &Embeddings) -> SimilarityReport {
    let mut report = SimilarityReport::default();
    for inst in &mut dataset.instances {
        inst.similarity = match (embeddings.get(&inst.target_true), embeddings.get(&inst.target_new)) {
            (Some(a), Some(b)) => {
                report.scored += 1;
                Some(cosine(a, b) as f32)
            }
            _ => {
                report.out_of_vocabulary += 1;
                None
            }
        };
    }
    report
}

/// A contiguous similarity range holding an equal share of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBin {
    pub index: usize,
    pub lower: f32,
    pub upper: f32,
    /// Indices into the instance slice.
    pub members: Vec<usize>,
}

/// Splits scored instances into `n_bins` equal-count bins by ascending
/// similarity; the first `count % n_bins` bins take one extra instance.
/// Returns the bins and the number of unscored instances left out.
pub fn similarity_bins(instances: &[PromptInstance], n_bins: usize) -> Result<(Vec<SimilarityBin>, usize)> {
    let mut scored: Vec<(f32, usize)> =
        instances.iter().enumerate().filter_map(|(i, inst)| inst.similarity.map(|s| (s, i))).collect();
    let excluded = instances.len() - scored.len();
    if n_bins == 0 || scored.len() < n_bins {
        return Err(CorpusError::TooFewScored { scored: scored.len(), bins: n_bins });
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (base, extra) = (scored.len() / n_bins, scored.len() % n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for index in 0..n_bins {
        let size = base + usize::from(index < extra);
        let chunk = &scored[start..start + size];
        bins.push(SimilarityBin {
            index,
            lower: chunk[0].0,
            upper: chunk[size - 1].0,
            members: chunk.iter().map(|&(_, i)| i).collect(),
        });
        start += size;
    }
    Ok((bins, excluded))
}
