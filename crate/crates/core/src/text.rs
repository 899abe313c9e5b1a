//! Tokenization, vocabularies, corpus loading and length-based cleaning.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// An ordered sequence of whitespace-free tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence(Vec<String>);

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Self {
        Sentence(tokens)
    }

    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        Sentence(tokens.iter().map(|t| t.as_ref().to_string()).collect())
    }

    /// Splits on whitespace without any normalization.
    pub fn from_words(line: &str) -> Self {
        Sentence(line.split_whitespace().map(str::to_string).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizeMode {
    /// Lowercase and split on whitespace.
    Clean,
    /// Lowercase, strip ASCII punctuation, drop punctuation-only tokens.
    AsrLike,
}

pub fn tokenize(raw: &str, mode: TokenizeMode) -> Result<Sentence> {
    let lowered = raw.to_lowercase();
    let tokens: Vec<String> = match mode {
        TokenizeMode::Clean => lowered.split_whitespace().map(str::to_string).collect(),
        TokenizeMode::AsrLike => lowered
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect(),
    };
    if tokens.is_empty() {
        return Err(Error::EmptySentence);
    }
    Ok(Sentence(tokens))
}

/// Pluggable subword segmentation applied after word tokenization.
pub trait Segmenter {
    fn segment(&self, sentence: &Sentence) -> Sentence;
    fn join(&self, sentence: &Sentence) -> Sentence;
}

/// Word-level identity segmentation.
#[derive(Clone, Copy, Debug, Default)]
pub struct WordLevel;

impl Segmenter for WordLevel {
    fn segment(&self, sentence: &Sentence) -> Sentence {
        sentence.clone()
    }

    fn join(&self, sentence: &Sentence) -> Sentence {
        sentence.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: Sentence,
    pub target: Sentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionPair {
    pub auto: Sentence,
    pub manual: Sentence,
    pub wer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanRules {
    pub max_len: usize,
    pub ratio_bound: f64,
}

impl Default for CleanRules {
    fn default() -> Self {
        CleanRules {
            max_len: 100,
            ratio_bound: 2.0,
        }
    }
}

/// Returns `true` when the pair should be kept.
pub fn clean_pair(pair: &ParallelPair, rules: &CleanRules) -> bool {
    let (s, t) = (pair.source.len(), pair.target.len());
    if s == 0 || t == 0 || s > rules.max_len || t > rules.max_len {
        return false;
    }
    let (s, t) = (s as f64, t as f64);
    s * rules.ratio_bound >= t && s <= t * rules.ratio_bound
}

/// Token-to-id map with the four reserved ids at positions 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Builds a vocabulary from an explicit list of non-reserved tokens, in order.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            let t = t.as_ref();
            if !all.iter().any(|x| x == t) {
                all.push(t.to_string());
            }
        }
        Self::from_list(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved entries in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn entries(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        Self::from_entries(lines)
    }

    /// Rebuilds from a full entry list (reserved tokens first).
    pub fn from_entries(entries: Vec<String>) -> Result<Self> {
        if entries.len() < RESERVED.len()
            || entries.iter().zip(RESERVED.iter()).any(|(a, b)| a != b)
        {
            return Err(Error::Parse(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let vocab = Self::from_list(entries);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Parse("vocabulary has duplicate entries".into()));
        }
        Ok(vocab)
    }
}

pub fn build_vocab<'a, I>(corpus: I, min_freq: usize, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut seen = 0usize;
    for s in corpus {
        seen += 1;
        for t in s.tokens() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if seen == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    let words: Vec<&str> = ranked.into_iter().map(|(t, _)| t).collect();
    Ok(Vocabulary::from_tokens(&words))
}

pub fn encode_ids(sentence: &Sentence, vocab: &Vocabulary, add_bos_eos: bool) -> Vec<usize> {
    let mut ids = Vec::with_capacity(sentence.len() + 2);
    if add_bos_eos {
        ids.push(BOS);
    }
    ids.extend(sentence.tokens().iter().map(|t| vocab.id(t)));
    if add_bos_eos {
        ids.push(EOS);
    }
    ids
}

/// Inverse of [`encode_ids`]: drops PAD and BOS, stops at the first EOS.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> Sentence {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            EOS => break,
            PAD | BOS => {}
            _ => out.push(vocab.token(id).unwrap_or(RESERVED[UNK]).to_string()),
        }
    }
    Sentence(out)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(fs::File::open(path)?);
    reader
        .lines()
        .map(|l| l.map_err(Error::from))
        .collect::<Result<Vec<_>>>()
}

pub fn write_sentences(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in sentences {
        writeln!(f, "{s}")?;
    }
    Ok(())
}

/// Tokenizes every line; lines that come out empty are dropped.
pub fn load_corpus(path: &Path, mode: TokenizeMode) -> Result<Vec<Sentence>> {
    Ok(read_lines(path)?
        .iter()
        .filter_map(|l| tokenize(l, mode).ok())
        .collect())
}

/// Loads a parallel corpus from two line-aligned files and applies `rules`.
pub fn load_parallel(
    source: &Path,
    target: &Path,
    mode: TokenizeMode,
    rules: Option<&CleanRules>,
) -> Result<Vec<ParallelPair>> {
    let src = read_lines(source)?;
    let tgt = read_lines(target)?;
    if src.len() != tgt.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            actual: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    let mut dropped = 0usize;
    for (s, t) in src.iter().zip(&tgt) {
        let pair = match (tokenize(s, mode), tokenize(t, mode)) {
            (Ok(source), Ok(target)) => ParallelPair { source, target },
            _ => {
                dropped += 1;
                continue;
            }
        };
        if rules.is_some_and(|r| !clean_pair(&pair, r)) {
            dropped += 1;
            continue;
        }
        pairs.push(pair);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} parallel pairs during loading");
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(s: &str) -> Sentence {
        Sentence::from_words(s)
    }

    fn pair(s: usize, t: usize) -> ParallelPair {
        ParallelPair {
            source: Sentence::new(vec!["x".into(); s]),
            target: Sentence::new(vec!["y".into(); t]),
        }
    }

    #[test]
    fn asr_like_strips_punctuation_and_case() {
        let s = tokenize("Hello, world!", TokenizeMode::AsrLike).unwrap();
        assert_eq!(s, sent("hello world"));
    }

    #[test]
    fn clean_mode_splits_whitespace() {
        assert_eq!(tokenize("a b c", TokenizeMode::Clean).unwrap(), sent("a b c"));
        assert_eq!(tokenize("A, b", TokenizeMode::Clean).unwrap(), sent("a, b"));
    }

    #[test]
    fn punctuation_only_line_is_empty() {
        assert!(matches!(
            tokenize("...", TokenizeMode::AsrLike),
            Err(Error::EmptySentence)
        ));
        assert!(tokenize("   ", TokenizeMode::Clean).is_err());
    }

    #[test]
    fn clean_pair_examples() {
        let rules = CleanRules::default();
        assert!(clean_pair(&pair(50, 50), &rules));
        assert!(!clean_pair(&pair(101, 60), &rules));
        assert!(!clean_pair(&pair(10, 21), &rules));
        assert!(clean_pair(&pair(10, 20), &rules));
        assert!(!clean_pair(&pair(0, 3), &rules));
    }

    #[test]
    fn clean_pair_exhaustive() {
        let rules = CleanRules::default();
        for s in 1..=120usize {
            for t in 1..=120usize {
                let keep = clean_pair(&pair(s, t), &rules);
                let expected = s <= 100 && t <= 100 && 2 * s >= t && s <= 2 * t;
                assert_eq!(keep, expected, "s={s} t={t}");
            }
        }
    }

    #[test]
    fn vocab_min_freq() {
        let corpus = [sent("a a b")];
        let v = build_vocab(&corpus, 1, 100).unwrap();
        assert_eq!(v.words(), &["a".to_string(), "b".to_string()]);
        let v = build_vocab(&corpus, 2, 100).unwrap();
        assert_eq!(v.words(), &["a".to_string()]);
        assert_eq!(v.entries()[..4], RESERVED.map(String::from));
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let v = build_vocab(&[sent("c b a c")], 1, 2).unwrap();
        assert_eq!(v.words(), &["c".to_string(), "a".to_string()]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [Sentence; 0] = [];
        assert!(matches!(build_vocab(&empty, 1, 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocab_max_size_on_random_corpus() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let corpus: Vec<Sentence> = (0..1000)
            .map(|_| {
                let n = rng.random_range(1..12);
                Sentence::new((0..n).map(|_| format!("w{}", rng.random_range(0..200))).collect())
            })
            .collect();
        // Oracle: distinct token count is far above the cap.
        let distinct: std::collections::HashSet<&String> =
            corpus.iter().flat_map(|s| s.tokens()).collect();
        assert!(distinct.len() > 50);
        let v = build_vocab(&corpus, 1, 50).unwrap();
        assert_eq!(v.len(), 54);
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = Vocabulary::from_tokens(&["a"]);
        assert_eq!(encode_ids(&sent("a zz"), &v, false), vec![4, UNK]);
        assert_eq!(encode_ids(&sent("a"), &v, true), vec![BOS, 4, EOS]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_tokens(&["x", "y", "z"]);
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn parallel_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        fs::write(&a, "x y\nz\n").unwrap();
        fs::write(&b, "x y\n").unwrap();
        assert!(matches!(
            load_parallel(&a, &b, TokenizeMode::Clean, None),
            Err(Error::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(raw in "[ a-zA-Z,.!?']{0,40}") {
            for mode in [TokenizeMode::Clean, TokenizeMode::AsrLike] {
                if let Ok(once) = tokenize(&raw, mode) {
                    let twice = tokenize(&once.to_string(), mode).unwrap();
                    prop_assert_eq!(&once, &twice);
                    if mode == TokenizeMode::AsrLike {
                        for t in once.tokens() {
                            prop_assert!(!t.chars().all(|c| c.is_ascii_punctuation()));
                            prop_assert!(!t.chars().any(char::is_uppercase));
                        }
                    }
                }
            }
        }

    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn encode_decode_round_trip(idx in proptest::collection::vec(0usize..30, 1..20)) {
            let words: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
            let vocab = Vocabulary::from_tokens(&words);
            let s = Sentence::new(idx.iter().map(|&i| words[i].clone()).collect());
            prop_assert_eq!(decode_ids(&encode_ids(&s, &vocab, false), &vocab), s.clone());
            prop_assert_eq!(decode_ids(&encode_ids(&s, &vocab, true), &vocab), s);
        }
    }
}
