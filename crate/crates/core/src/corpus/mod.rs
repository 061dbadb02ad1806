//! Counterfactual prompt corpus: record ingestion, prompt construction,
//! position labelling, filtering, and word-similarity scores.
//!
//! A prompt restates a fact with a counterfactual attribute and then asks the
//! model to complete the same fact again:
//!
//! ```text
//! Redefine: iPhone was developed by Google. iPhone was developed by
//! ```
//!
//! Every token is assigned to one of seven [`Group`]s so analyses can be
//! aggregated by position.

mod dataset;
mod embeddings;

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::ModelError;
use crate::tokenizer::{TokenId, Tokenizer};

pub use dataset::{
    filter_and_sample, filter_and_sample_with, read_dataset, write_dataset, Dataset, FilterCounts, Provenance,
    SampleOptions,
};
pub use embeddings::{attach_similarity, cosine, similarity_bins, Embeddings, SimilarityBin, SimilarityReport};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record {record}: {detail}")]
    Schema { record: String, detail: String },
    #[error("template {0:?} must contain exactly one `{{}}` placeholder")]
    Template(String),
    #[error("cannot label spans: {0}")]
    Alignment(String),
    #[error("embedding table: {0}")]
    Embeddings(String),
    #[error("need at least {bins} scored instances for {bins} bins, have {scored}")]
    TooFewScored { scored: usize, bins: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One fact and its counterfactual rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterFactRecord {
    pub id: String,
    pub subject: String,
    /// Relation template with a single `{}` standing for the subject.
    pub template: String,
    pub target_true: String,
    pub target_new: String,
}

impl CounterFactRecord {
    pub fn validate(&self) -> Result<()> {
        let schema = |detail: &str| CorpusError::Schema { record: self.id.clone(), detail: detail.into() };
        for (name, v) in
            [("subject", &self.subject), ("target_true", &self.target_true), ("target_new", &self.target_new)]
        {
            if v.trim().is_empty() {
                return Err(schema(&format!("empty {name}")));
            }
        }
        if self.template.matches("{}").count() != 1 {
            return Err(CorpusError::Template(self.template.clone()));
        }
        Ok(())
    }

    /// The relation sentence with the subject filled in, whitespace-normalised.
    pub fn fact_prefix(&self) -> Result<String> {
        self.validate()?;
        let mut text = String::new();
        for (_, part) in sentence_parts(&self.subject, &self.template) {
            push_part(&mut text, &part);
        }
        Ok(text)
    }
}

/// Dotted JSON paths locating each record field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldPaths {
    pub id: String,
    pub subject: String,
    pub template: String,
    pub target_true: String,
    pub target_new: String,
}

impl Default for FieldPaths {
    /// Layout of the public CounterFact release.
    fn default() -> Self {
        Self {
            id: "case_id".into(),
            subject: "requested_rewrite.subject".into(),
            template: "requested_rewrite.prompt".into(),
            target_true: "requested_rewrite.target_true.str".into(),
            target_new: "requested_rewrite.target_new.str".into(),
        }
    }
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |node, key| match node {
        Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => node.get(key),
    })
}

/// Parses a JSON array of records using `paths`.
pub fn parse_records(json: &str, paths: &FieldPaths) -> Result<Vec<CounterFactRecord>> {
    let root: Value = serde_json::from_str(json)?;
    let items = root.as_array().ok_or_else(|| CorpusError::Schema {
        record: "<root>".into(),
        detail: "expected a JSON array of records".into(),
    })?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let id = match lookup(item, &paths.id) {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => format!("#{i}"),
            };
            let field = |path: &str| -> Result<String> {
                lookup(item, path).and_then(Value::as_str).map(str::to_owned).ok_or_else(|| CorpusError::Schema {
                    record: id.clone(),
                    detail: format!("missing string field `{path}`"),
                })
            };
            let rec = CounterFactRecord {
                subject: field(&paths.subject)?,
                template: field(&paths.template)?,
                target_true: field(&paths.target_true)?,
                target_new: field(&paths.target_new)?,
                id: id.clone(),
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

/// Position groups of a prompt, in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// The premise prefix and the full stop closing the first sentence.
    PremiseMarker,
    Subject1,
    Relation1,
    Attribute,
    Subject2,
    Relation2,
    /// The final position, where the attribute is predicted.
    Last,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::PremiseMarker,
        Group::Subject1,
        Group::Relation1,
        Group::Attribute,
        Group::Subject2,
        Group::Relation2,
        Group::Last,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::PremiseMarker => "premise_marker",
            Group::Subject1 => "subject_1",
            Group::Relation1 => "relation_1",
            Group::Attribute => "attribute",
            Group::Subject2 => "subject_2",
            Group::Relation2 => "relation_2",
            Group::Last => "last",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Group::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| format!("unknown position group `{s}`"))
    }
}

/// Token indices per group. Groups partition `0..k`; a group may be empty
/// when its text is absent (for example an empty premise prefix).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Spans {
    pub premise_marker: Vec<usize>,
    pub subject_1: Vec<usize>,
    pub relation_1: Vec<usize>,
    pub attribute: Vec<usize>,
    pub subject_2: Vec<usize>,
    pub relation_2: Vec<usize>,
    pub last: Vec<usize>,
}

impl Spans {
    pub fn get(&self, g: Group) -> &[usize] {
        match g {
            Group::PremiseMarker => &self.premise_marker,
            Group::Subject1 => &self.subject_1,
            Group::Relation1 => &self.relation_1,
            Group::Attribute => &self.attribute,
            Group::Subject2 => &self.subject_2,
            Group::Relation2 => &self.relation_2,
            Group::Last => &self.last,
        }
    }

    fn get_mut(&mut self, g: Group) -> &mut Vec<usize> {
        match g {
            Group::PremiseMarker => &mut self.premise_marker,
            Group::Subject1 => &mut self.subject_1,
            Group::Relation1 => &mut self.relation_1,
            Group::Attribute => &mut self.attribute,
            Group::Subject2 => &mut self.subject_2,
            Group::Relation2 => &mut self.relation_2,
            Group::Last => &mut self.last,
        }
    }

    /// Representative position of a group: its last token.
    pub fn representative(&self, g: Group) -> Option<usize> {
        self.get(g).last().copied()
    }

    /// Group of each token position, for a prompt of `k` tokens.
    pub fn group_of_positions(&self, k: usize) -> Vec<Option<Group>> {
        let mut out = vec![None; k];
        for g in Group::ALL {
            for &i in self.get(g) {
                if i < k {
                    out[i] = Some(g);
                }
            }
        }
        out
    }

    /// True if the groups are disjoint and cover exactly `0..k`.
    pub fn is_partition(&self, k: usize) -> bool {
        let mut seen = vec![false; k];
        for g in Group::ALL {
            for &i in self.get(g) {
                if i >= k || std::mem::replace(&mut seen[i], true) {
                    return false;
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// A labelled test item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub id: String,
    pub subject: String,
    pub target_true: String,
    pub target_new: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub t_fact: TokenId,
    pub t_cofa: TokenId,
    pub spans: Spans,
    pub similarity: Option<f32>,
}

impl PromptInstance {
    /// Index of the final token `N`.
    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn attribute_position(&self) -> Option<usize> {
        self.spans.representative(Group::Attribute)
    }
}

/// Prompt construction settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptStyle {
    /// Text opening the first sentence.
    pub prefix: String,
}

impl Default for PromptStyle {
    fn default() -> Self {
        Self { prefix: "Redefine:".into() }
    }
}

fn normalise(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Subject and relation pieces of one sentence, in order, whitespace-normalised.
fn sentence_parts(subject: &str, template: &str) -> Vec<(bool, String)> {
    let (before, after) = template.split_once("{}").expect("validated template");
    [(false, normalise(before)), (true, normalise(subject)), (false, normalise(after))]
        .into_iter()
        .filter(|(_, p)| !p.is_empty())
        .collect()
}

/// Appends `part`, separated by one space unless it opens with punctuation
/// that attaches to the previous word.
fn push_part(text: &mut String, part: &str) -> Range<usize> {
    let attaches = part.starts_with([',', '.', ';', ':', '!', '?', '\'', '\u{2019}', ')']);
    let start = text.len();
    if !text.is_empty() && !attaches {
        text.push(' ');
    }
    text.push_str(part);
    start..text.len()
}

fn ends_sentence(text: &str) -> bool {
    text.ends_with(['.', '!', '?'])
}

type Layout = (String, Vec<(Group, Range<usize>)>);

/// Prompt text plus the byte range and group of every constituent.
fn layout(record: &CounterFactRecord, style: &PromptStyle) -> Result<Layout> {
    record.validate()?;
    let mut text = String::new();
    let mut pieces = Vec::new();
    let prefix = normalise(&style.prefix);
    if !prefix.is_empty() {
        pieces.push((Group::PremiseMarker, push_part(&mut text, &prefix)));
    }
    let parts = sentence_parts(&record.subject, &record.template);
    for (is_subject, part) in &parts {
        let g = if *is_subject { Group::Subject1 } else { Group::Relation1 };
        pieces.push((g, push_part(&mut text, part)));
    }
    pieces.push((Group::Attribute, push_part(&mut text, &normalise(&record.target_new))));
    if !ends_sentence(&text) {
        let start = text.len();
        text.push('.');
        pieces.push((Group::PremiseMarker, start..text.len()));
    }
    for (is_subject, part) in &parts {
        let g = if *is_subject { Group::Subject2 } else { Group::Relation2 };
        pieces.push((g, push_part(&mut text, part)));
    }
    Ok((text, pieces))
}

/// `"{prefix} {s r t_cofa}. {s r}"` with single spaces and one full stop
/// between the sentences.
pub fn build_prompt(record: &CounterFactRecord, style: &PromptStyle) -> Result<String> {
    layout(record, style).map(|(text, _)| text)
}

/// Tokenises the prompt for `record` and assigns every token to a group.
///
/// Fails when the subject is ambiguous (it also occurs in the template or
/// twice in a sentence), when a token straddles two constituents, or when
/// the attribute does not come out as the single token `t_cofa`.
pub fn label_spans(
    record: &CounterFactRecord,
    tokenizer: &Tokenizer,
    style: &PromptStyle,
    t_fact: TokenId,
    t_cofa: TokenId,
) -> Result<PromptInstance> {
    let (text, pieces) = layout(record, style)?;
    let subject = normalise(&record.subject);
    let template = normalise(&record.template.replace("{}", " "));
    if template.contains(&subject) {
        return Err(CorpusError::Alignment(format!("subject {subject:?} also occurs in the relation text")));
    }
    let attribute = normalise(&record.target_new);
    if attribute.contains(&subject) {
        return Err(CorpusError::Alignment(format!("subject {subject:?} occurs in the attribute {attribute:?}")));
    }

    let encoded = tokenizer.encode_with_offsets(&text);
    let mut spans = Spans::default();
    let mut piece = 0;
    for (i, (_, range)) in encoded.iter().enumerate() {
        while piece < pieces.len() && pieces[piece].1.end <= range.start {
            piece += 1;
        }
        match pieces.get(piece) {
            Some((g, r)) if r.start <= range.start && range.end <= r.end => spans.get_mut(*g).push(i),
            _ => {
                return Err(CorpusError::Alignment(format!("token {:?} straddles constituents", &text[range.clone()])))
            }
        }
    }
    let tokens: Vec<TokenId> = encoded.iter().map(|(t, _)| *t).collect();
    if spans.attribute.len() != 1 || tokens[spans.attribute[0]] != t_cofa {
        return Err(CorpusError::Alignment(format!("attribute {attribute:?} is not the single token {t_cofa}")));
    }
    if spans.subject_1.is_empty() || spans.subject_2.is_empty() {
        return Err(CorpusError::Alignment("subject produced no tokens".into()));
    }
    let n = tokens.len() - 1;
    for g in Group::ALL {
        spans.get_mut(g).retain(|&i| i != n);
    }
    spans.last = vec![n];
    debug_assert!(spans.is_partition(tokens.len()));

    Ok(PromptInstance {
        id: record.id.clone(),
        subject: record.subject.clone(),
        target_true: record.target_true.clone(),
        target_new: record.target_new.clone(),
        text,
        tokens,
        t_fact,
        t_cofa,
        spans,
        similarity: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(subject: &str, template: &str, t: &str, n: &str) -> CounterFactRecord {
        CounterFactRecord {
            id: "1".into(),
            subject: subject.into(),
            template: template.into(),
            target_true: t.into(),
            target_new: n.into(),
        }
    }

    #[test]
    fn builds_the_canonical_prompt() {
        let r = rec("iPhone", "{} was developed by", "Apple", "Google");
        assert_eq!(
            build_prompt(&r, &PromptStyle::default()).unwrap(),
            "Redefine: iPhone was developed by Google. iPhone was developed by"
        );
        assert_eq!(r.fact_prefix().unwrap(), "iPhone was developed by");
    }

    #[test]
    fn template_without_placeholder_is_rejected() {
        let r = rec("iPhone", "was developed by", "Apple", "Google");
        assert!(matches!(build_prompt(&r, &PromptStyle::default()), Err(CorpusError::Template(_))));
        let r = rec("iPhone", "{} and {}", "Apple", "Google");
        assert!(build_prompt(&r, &PromptStyle::default()).is_err());
    }

    #[test]
    fn whitespace_and_punctuation() {
        let r = rec("  Danielle  Darrieux ", "The mother tongue of {}  is ", "French", "English");
        assert_eq!(
            build_prompt(&r, &PromptStyle::default()).unwrap(),
            "Redefine: The mother tongue of Danielle Darrieux is English. The mother tongue of Danielle Darrieux is"
        );
        let r = rec("Apple", "{}'s headquarters are in", "Cupertino", "Washington D.C.");
        assert_eq!(
            build_prompt(&r, &PromptStyle { prefix: String::new() }).unwrap(),
            "Apple's headquarters are in Washington D.C. Apple's headquarters are in"
        );
    }

    #[test]
    fn field_paths_follow_nesting() {
        let json = r#"[{"case_id": 7, "requested_rewrite": {"prompt": "{} was developed by", "subject": "iPhone",
            "target_true": {"str": "Apple"}, "target_new": {"str": "Google"}}}]"#;
        let recs = parse_records(json, &FieldPaths::default()).unwrap();
        assert_eq!(
            recs,
            vec![CounterFactRecord {
                id: "7".into(),
                subject: "iPhone".into(),
                template: "{} was developed by".into(),
                target_true: "Apple".into(),
                target_new: "Google".into(),
            }]
        );
        let err = parse_records(r#"[{"case_id": 3, "requested_rewrite": {}}]"#, &FieldPaths::default()).unwrap_err();
        assert!(err.to_string().contains("record 3"), "{err}");
    }

    #[test]
    fn group_round_trip() {
        for g in Group::ALL {
            assert_eq!(g.name().parse::<Group>().unwrap(), g);
        }
    }
}
