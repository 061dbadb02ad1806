//! Byte-level BPE compatible with the published GPT-2 `vocab.json` /
//! `merges.txt` pair.
//!
//! Text is split with the GPT-2 pre-tokenization pattern, every byte of a
//! piece is mapped through the 256-entry byte→unicode table, and merges are
//! applied lowest-rank first. Because every single byte has a vocabulary
//! entry, encoding is total and `decode(encode(s)) == s` byte for byte.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use fancy_regex::Regex;
use thiserror::Error;

pub type TokenId = u32;

pub const END_OF_TEXT: &str = "<|endoftext|>";

const GPT2_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("vocab.json: {0}")]
    Vocab(String),
    #[error("merges.txt line {line}: {detail}")]
    Merges { line: usize, detail: String },
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
}

/// The GPT-2 byte→unicode table: printable Latin-1 bytes map to themselves,
/// the remaining 68 bytes map to U+0100 onwards in byte order.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u32 {
        let printable = (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).unwrap()
        } else {
            let c = char::from_u32(256 + extra).unwrap();
            extra += 1;
            c
        };
    }
    table
}

#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    byte_to_unicode: [char; 256],
}

impl Vocab {
    /// Builds a vocabulary from an id map and ordered merge list.
    pub fn new(token_to_id: HashMap<String, TokenId>, merges: Vec<(String, String)>) -> Result<Self, TokenizerError> {
        let n = token_to_id.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| TokenizerError::Vocab(format!("id {id} outside 0..{n}")))?;
            if slot.is_some() {
                return Err(TokenizerError::Vocab(format!("id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token = id_to_token.into_iter().map(|t| t.unwrap()).collect();
        Ok(Self { token_to_id, id_to_token, merges, byte_to_unicode: bytes_to_unicode() })
    }

    pub fn from_json_and_merges(vocab_json: &str, merges_txt: &str) -> Result<Self, TokenizerError> {
        let token_to_id: HashMap<String, TokenId> =
            serde_json::from_str(vocab_json).map_err(|e| TokenizerError::Vocab(e.to_string()))?;
        let mut merges = Vec::new();
        for (i, line) in merges_txt.lines().enumerate() {
            if i == 0 && line.starts_with("#version") {
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(TokenizerError::Merges {
                        line: i + 1,
                        detail: format!("expected two symbols, got {line:?}"),
                    })
                }
            }
        }
        Self::new(token_to_id, merges)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn byte_to_unicode(&self) -> &[char; 256] {
        &self.byte_to_unicode
    }
}

/// A GPT-2 tokenizer. Immutable after construction; `encode`/`decode` may be
/// called from many threads.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
    ranks: HashMap<(String, String), usize>,
    unicode_to_byte: HashMap<char, u8>,
    byte_tokens: [TokenId; 256],
    pattern: Regex,
}

impl Tokenizer {
    pub fn new(vocab: Vocab) -> Result<Self, TokenizerError> {
        let ranks = vocab.merges.iter().enumerate().map(|(i, (a, b))| ((a.clone(), b.clone()), i)).collect();
        let unicode_to_byte = vocab.byte_to_unicode.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let mut byte_tokens = [0; 256];
        for (b, c) in vocab.byte_to_unicode.iter().enumerate() {
            byte_tokens[b] =
                vocab.id(&c.to_string()).ok_or_else(|| TokenizerError::Vocab(format!("no token for byte {b:#04x}")))?;
        }
        let pattern = Regex::new(GPT2_PATTERN).expect("static pattern");
        Ok(Self { vocab, ranks, unicode_to_byte, byte_tokens, pattern })
    }

    /// The GPT-2 vocabulary and merges bundled with the crate.
    pub fn gpt2() -> Self {
        const VOCAB: &str = include_str!("../../../assets/gpt2-tokenizer/vocab.json");
        const MERGES: &str = include_str!("../../../assets/gpt2-tokenizer/merges.txt");
        let vocab = Vocab::from_json_and_merges(VOCAB, MERGES).expect("bundled tokenizer files parse");
        Self::new(vocab).expect("bundled tokenizer is complete")
    }

    /// Loads `vocab.json` and `merges.txt` from `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let dir = dir.as_ref();
        Self::from_files(dir.join("vocab.json"), dir.join("merges.txt"))
    }

    pub fn from_files(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| TokenizerError::Io { path: p.display().to_string(), source })
        };
        let vocab = Vocab::from_json_and_merges(&read(vocab.as_ref())?, &read(merges.as_ref())?)?;
        Self::new(vocab)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn end_of_text(&self) -> Option<TokenId> {
        self.vocab.id(END_OF_TEXT)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_with_offsets(text).into_iter().map(|(id, _)| id).collect()
    }

    /// Encodes `text` and reports the byte range each token covers.
    /// `<|endoftext|>` is not treated specially.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<(TokenId, Range<usize>)> {
        let mut out = Vec::new();
        for m in self.pattern.find_iter(text) {
            let m = m.expect("GPT-2 pattern cannot exceed the backtrack limit");
            self.encode_piece(&text.as_bytes()[m.start()..m.end()], m.start(), &mut out);
        }
        out
    }

    fn encode_piece(&self, bytes: &[u8], offset: usize, out: &mut Vec<(TokenId, Range<usize>)>) {
        let mut symbols: Vec<String> =
            bytes.iter().map(|&b| self.vocab.byte_to_unicode[b as usize].to_string()).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.vocab.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        let mut pos = offset;
        for sym in symbols {
            // one unicode char per byte
            let width = sym.chars().count();
            match self.vocab.id(&sym) {
                Some(id) => out.push((id, pos..pos + width)),
                None => {
                    // merged symbol absent from the vocabulary: fall back to bytes
                    for (k, c) in sym.chars().enumerate() {
                        let b = self.unicode_to_byte[&c];
                        out.push((self.byte_tokens[b as usize], pos + k..pos + k + 1));
                    }
                }
            }
            pos += width;
        }
    }

    /// Raw bytes of the decoded token sequence.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(TokenizerError::UnknownId(id))?;
            for c in tok.chars() {
                match self.unicode_to_byte.get(&c) {
                    Some(&b) => out.push(b),
                    // special tokens such as <|endoftext|> are stored literally
                    None => {
                        let mut buf = [0u8; 4];
                        out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Decodes to a string, replacing invalid UTF-8 (possible for partial
    /// sequences) with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// True iff `word` (prefixed with a space when `with_leading_space`)
    /// encodes to exactly one token.
    pub fn is_single_token(&self, word: &str, with_leading_space: bool) -> bool {
        self.single_token(word, with_leading_space).is_some()
    }

    pub fn single_token(&self, word: &str, with_leading_space: bool) -> Option<TokenId> {
        let ids = if with_leading_space { self.encode(&format!(" {word}")) } else { self.encode(word) };
        match ids.as_slice() {
            [id] => Some(*id),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A toy vocabulary: all 256 byte symbols plus a few merges.
    fn toy() -> Tokenizer {
        let table = bytes_to_unicode();
        let mut map: HashMap<String, TokenId> =
            table.iter().enumerate().map(|(i, c)| (c.to_string(), i as TokenId)).collect();
        let merges = vec![("Ġ", "t"), ("h", "e"), ("Ġt", "he"), ("l", "l")];
        for (a, b) in &merges {
            let id = map.len() as TokenId;
            map.insert(format!("{a}{b}"), id);
        }
        let merges = merges.into_iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        Tokenizer::new(Vocab::new(map, merges).unwrap()).unwrap()
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let mut seen: Vec<char> = t.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'A' as usize], 'A');
        assert_eq!(t[b'\n' as usize], 'Ċ');
    }

    #[test]
    fn toy_merges_apply_by_rank() {
        let tok = toy();
        let ids = tok.encode("the hello");
        let pieces: Vec<&str> = ids.iter().map(|&i| tok.vocab().token(i).unwrap()).collect();
        assert_eq!(pieces, ["t", "he", "Ġ", "he", "ll", "o"]);
        let ids = tok.encode(" the");
        assert_eq!(ids.len(), 1);
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        let tok = toy();
        assert!(tok.encode("").is_empty());
        assert!(!tok.is_single_token("", false));
    }

    #[test]
    fn offsets_cover_the_input() {
        let tok = toy();
        let text = "the  hello, wörld\n";
        let enc = tok.encode_with_offsets(text);
        let mut pos = 0;
        for (_, r) in &enc {
            assert_eq!(r.start, pos);
            pos = r.end;
        }
        assert_eq!(pos, text.len());
    }

    #[test]
    fn merges_header_and_errors() {
        let vocab = r#"{"a": 0, "b": 1, "ab": 2}"#;
        let v = Vocab::from_json_and_merges(vocab, "#version: 0.2\na b\n").unwrap();
        assert_eq!(v.merges().len(), 1);
        assert!(Vocab::from_json_and_merges(vocab, "#version: 0.2\nab\n").is_err());
        assert!(Vocab::from_json_and_merges(r#"{"a": 0, "b": 0}"#, "").is_err());
    }

    #[test]
    fn unknown_id_is_an_error() {
        let tok = toy();
        assert!(matches!(tok.decode(&[9999]), Err(TokenizerError::UnknownId(9999))));
    }
}
