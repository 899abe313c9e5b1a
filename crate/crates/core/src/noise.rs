//! Synthetic ASR-style corruption (omission, repetition, confusable
//! substitution, insertion) and Gaussian embedding noise.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::edit_distance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{tokenize, Sentence, TokenizeMode, RESERVED, UNK};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub p_delete: f64,
    pub p_repeat: f64,
    pub p_substitute: f64,
    pub p_insert: f64,
    /// Substitution candidates per token; tokens without an entry draw
    /// uniformly from the vocabulary.
    pub confusion_table: Option<BTreeMap<String, Vec<String>>>,
    /// Tokens drawn for insertions; defaults to the vocabulary.
    pub insert_tokens: Option<Vec<String>>,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_delete, self.p_repeat, self.p_substitute, self.p_insert];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("noise probabilities must lie in [0, 1]".into()));
        }
        if self.p_delete + self.p_repeat + self.p_substitute > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig(
                "p_delete + p_repeat + p_substitute must not exceed 1".into(),
            ));
        }
        Ok(())
    }
}

/// Tokens at character edit distance 1 from each token.
pub fn default_confusion_table(tokens: &[String]) -> BTreeMap<String, Vec<String>> {
    let chars: Vec<Vec<char>> = tokens.iter().map(|t| t.chars().collect()).collect();
    let mut table = BTreeMap::new();
    for (i, a) in chars.iter().enumerate() {
        let near: Vec<String> = chars
            .iter()
            .enumerate()
            .filter(|(j, b)| {
                *j != i && a.len().abs_diff(b.len()) <= 1 && edit_distance(a, b) == 1
            })
            .map(|(j, _)| tokens[j].clone())
            .collect();
        if !near.is_empty() {
            table.insert(tokens[i].clone(), near);
        }
    }
    table
}

/// A [`NoiseConfig`] bound to a vocabulary.
#[derive(Clone, Debug)]
pub struct NoiseChannel {
    config: NoiseConfig,
    vocab: Vec<String>,
    confusion: BTreeMap<String, Vec<String>>,
    insert_tokens: Vec<String>,
}

impl NoiseChannel {
    /// `vocab` are the real tokens available for uniform draws (no reserved entries).
    pub fn new(config: NoiseConfig, vocab: &[String]) -> Result<Self> {
        config.validate()?;
        let vocab: Vec<String> = vocab
            .iter()
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .cloned()
            .collect();
        let confusion = config
            .confusion_table
            .clone()
            .unwrap_or_else(|| default_confusion_table(&vocab));
        let insert_tokens = config.insert_tokens.clone().unwrap_or_else(|| vocab.clone());
        Ok(NoiseChannel {
            config,
            vocab,
            confusion,
            insert_tokens,
        })
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.config
    }

    fn substitute<R: Rng + ?Sized>(&self, token: &str, rng: &mut R) -> String {
        if let Some(c) = self.confusion.get(token).filter(|c| !c.is_empty()) {
            return c.choose(rng).expect("nonempty").clone();
        }
        let others: Vec<&String> = self.vocab.iter().filter(|t| *t != token).collect();
        match others.choose(rng) {
            Some(t) => (*t).clone(),
            None => token.to_string(),
        }
    }

    fn corrupt_once<R: Rng + ?Sized>(&self, s: &Sentence, rng: &mut R) -> Vec<String> {
        let c = &self.config;
        let mut out = Vec::with_capacity(s.len() * 2);
        for tok in s.tokens() {
            let u: f64 = rng.random();
            if u < c.p_delete {
                // omitted
            } else if u < c.p_delete + c.p_repeat {
                out.push(tok.clone());
                out.push(tok.clone());
            } else if u < c.p_delete + c.p_repeat + c.p_substitute {
                out.push(self.substitute(tok, rng));
            } else {
                out.push(tok.clone());
            }
            if c.p_insert > 0.0 && rng.random::<f64>() < c.p_insert {
                if let Some(t) = self.insert_tokens.choose(rng) {
                    out.push(t.clone());
                }
            }
        }
        out.into_iter()
            .filter_map(|t| tokenize(&t, TokenizeMode::AsrLike).ok())
            .flat_map(Sentence::into_tokens)
            .collect()
    }

    /// Corrupts one sentence; an empty result is resampled once and then
    /// replaced by a single UNK token.
    pub fn corrupt<R: Rng + ?Sized>(&self, s: &Sentence, rng: &mut R) -> Sentence {
        for _ in 0..2 {
            let out = self.corrupt_once(s, rng);
            if !out.is_empty() {
                return Sentence::new(out);
            }
        }
        Sentence::new(vec![RESERVED[UNK].to_string()])
    }

    /// Corrupts a corpus with per-sentence seeds derived from the global seed
    /// and the sentence index.
    pub fn corrupt_corpus(&self, corpus: &[Sentence]) -> Vec<Sentence> {
        corpus
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = sentence_rng(self.config.seed, i as u64);
                self.corrupt(s, &mut rng)
            })
            .collect()
    }
}

pub fn sentence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Corpus-level WER of `noisy` against `clean`.
pub fn corpus_wer(noisy: &[Sentence], clean: &[Sentence]) -> f64 {
    let edits: usize = noisy
        .iter()
        .zip(clean)
        .map(|(n, c)| edit_distance(n.tokens(), c.tokens()))
        .sum();
    let words: usize = clean.iter().map(Sentence::len).sum();
    if words == 0 {
        0.0
    } else {
        edits as f64 / words as f64
    }
}

/// How the configured Gaussian noise scale is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    #[default]
    Std,
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianNoiseConfig {
    pub sigma: f64,
    pub scale: NoiseScale,
}

impl Default for GaussianNoiseConfig {
    fn default() -> Self {
        GaussianNoiseConfig {
            sigma: 0.01,
            scale: NoiseScale::Std,
        }
    }
}

impl GaussianNoiseConfig {
    pub fn std(&self) -> f64 {
        match self.scale {
            NoiseScale::Std => self.sigma,
            NoiseScale::Variance => self.sigma.sqrt(),
        }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every component.
pub fn gaussian_embedding_noise<R: Rng + ?Sized>(embeddings: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma == 0.0 {
        return embeddings.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    Tensor::from_vec(
        embeddings.rows,
        embeddings.cols,
        embeddings
            .data
            .iter()
            .map(|x| x + normal.sample(rng))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vec<String> {
        (0..20).map(|i| format!("w{i}")).collect()
    }

    fn sentence(n: usize, rng: &mut ChaCha8Rng) -> Sentence {
        let v = vocab();
        Sentence::new((0..n).map(|_| v.choose(rng).unwrap().clone()).collect())
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let ch = NoiseChannel::new(NoiseConfig::default(), &vocab()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sentence(10, &mut rng);
        assert_eq!(ch.corrupt(&s, &mut rng), s);
    }

    #[test]
    fn full_deletion_falls_back_to_unk() {
        let cfg = NoiseConfig {
            p_delete: 1.0,
            ..Default::default()
        };
        let ch = NoiseChannel::new(cfg, &vocab()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sentence(5, &mut rng);
        assert_eq!(ch.corrupt(&s, &mut rng), Sentence::from_tokens(&["<unk>"]));
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let cfg = NoiseConfig {
            p_delete: 0.6,
            p_substitute: 0.6,
            ..Default::default()
        };
        assert!(NoiseChannel::new(cfg, &vocab()).is_err());
    }

    #[test]
    fn substitution_rate_matches_wer() {
        let cfg = NoiseConfig {
            p_substitute: 0.15,
            seed: 5,
            ..Default::default()
        };
        let ch = NoiseChannel::new(cfg, &vocab()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean: Vec<Sentence> = (0..1000).map(|_| sentence(10, &mut rng)).collect();
        let noisy = ch.corrupt_corpus(&clean);
        let wer = corpus_wer(&noisy, &clean);
        assert!((wer - 0.15).abs() <= 0.01, "wer {wer}");
    }

    #[test]
    fn corruption_is_seeded_and_bounded() {
        let cfg = NoiseConfig {
            p_delete: 0.1,
            p_repeat: 0.2,
            p_substitute: 0.1,
            p_insert: 0.3,
            seed: 9,
            ..Default::default()
        };
        let ch = NoiseChannel::new(cfg, &vocab()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clean: Vec<Sentence> = (0..200).map(|_| sentence(8, &mut rng)).collect();
        let a = ch.corrupt_corpus(&clean);
        assert_eq!(a, ch.corrupt_corpus(&clean));
        // one extra slot per position for the repeat, one for the insertion
        assert!(a.iter().zip(&clean).all(|(n, c)| n.len() <= 3 * c.len()));
        // order of processing does not matter
        let rev: Vec<Sentence> = (0..clean.len())
            .rev()
            .map(|i| ch.corrupt(&clean[i], &mut sentence_rng(9, i as u64)))
            .collect();
        assert_eq!(rev.into_iter().rev().collect::<Vec<_>>(), a);
    }

    #[test]
    fn confusion_table_neighbors() {
        let toks: Vec<String> = ["cat", "bat", "cap", "dog", "cats"].map(String::from).to_vec();
        let t = default_confusion_table(&toks);
        assert_eq!(t["cat"], vec!["bat", "cap", "cats"]);
        assert!(!t.contains_key("dog"));
    }

    #[test]
    fn gaussian_noise_statistics() {
        let x = Tensor::zeros(1000, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(gaussian_embedding_noise(&x, 0.0, &mut rng), x);
        let y = gaussian_embedding_noise(&x, 0.01, &mut rng);
        let n = y.len() as f64;
        let mean = y.data.iter().sum::<f64>() / n;
        let std = (y.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.01).abs() <= 0.0002, "std {std}");
        let var = GaussianNoiseConfig {
            sigma: 0.01,
            scale: NoiseScale::Variance,
        };
        assert!((var.std() - 0.1).abs() < 1e-12);
    }
}
