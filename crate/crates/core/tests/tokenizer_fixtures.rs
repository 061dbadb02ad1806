//! Encodings checked against the reference GPT-2 BPE implementation.

use std::path::PathBuf;

use compmech_core::tokenizer::Tokenizer;
use serde::Deserialize;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tokenizer() -> Tokenizer {
    Tokenizer::from_dir(root().join("assets/gpt2-tokenizer")).unwrap()
}

#[derive(Deserialize)]
struct Encoding {
    text: String,
    ids: Vec<u32>,
}

#[derive(Deserialize)]
struct SingleToken {
    word: String,
    with_leading_space: bool,
    ids: Vec<u32>,
}

#[test]
fn vocabulary_shape() {
    let tok = tokenizer();
    assert_eq!(tok.vocab_size(), 50257);
    assert_eq!(tok.end_of_text(), Some(50256));
    assert_eq!(tok.vocab().id("ĠApple"), Some(4196));
    assert_eq!(tok.vocab().id("ĠGoogle"), Some(3012));
}

#[test]
fn reference_encodings_round_trip() {
    let tok = tokenizer();
    let cases: Vec<Encoding> = serde_json::from_str(
        &std::fs::read_to_string(root().join("fixtures/tokenizer/reference_encodings.json")).unwrap(),
    )
    .unwrap();
    assert!(cases.len() >= 50);
    for case in &cases {
        assert_eq!(tok.encode(&case.text), case.ids, "encoding {:?}", case.text);
        assert_eq!(tok.decode(&case.ids).unwrap(), case.text, "decoding {:?}", case.text);
    }
}

#[test]
fn offsets_tile_the_text() {
    let tok = tokenizer();
    let text = "Redefine: iPhone was developed by Google. iPhone was developed by";
    let pieces = tok.encode_with_offsets(text);
    let ids: Vec<u32> = pieces.iter().map(|(id, _)| *id).collect();
    assert_eq!(ids, [7738, 891, 500, 25, 7133, 373, 4166, 416, 3012, 13, 7133, 373, 4166, 416]);
    let mut end = 0;
    for (id, range) in &pieces {
        assert_eq!(range.start, end);
        assert_eq!(tok.decode(&[*id]).unwrap(), &text[range.clone()]);
        end = range.end;
    }
    assert_eq!(end, text.len());
}

#[test]
fn single_token_checks_match_reference() {
    let tok = tokenizer();
    let cases: Vec<SingleToken> =
        serde_json::from_str(&std::fs::read_to_string(root().join("fixtures/tokenizer/single_token.json")).unwrap())
            .unwrap();
    for case in &cases {
        let expect_single = case.ids.len() == 1;
        assert_eq!(
            tok.is_single_token(&case.word, case.with_leading_space),
            expect_single,
            "{:?} space={}",
            case.word,
            case.with_leading_space
        );
        if expect_single {
            assert_eq!(tok.single_token(&case.word, case.with_leading_space), Some(case.ids[0]));
        }
    }
}

#[test]
fn bundled_tokenizer_matches_files() {
    let bundled = Tokenizer::gpt2();
    let files = tokenizer();
    assert_eq!(bundled.vocab_size(), files.vocab_size());
    let text = "Redefine: Danielle Darrieux's mother tongue is English. 12,345 tokens!";
    assert_eq!(bundled.encode(text), files.encode(text));
}
