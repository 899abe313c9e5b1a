//! Synthetic copy-with-remap translation task with a learnable ASR-like
//! noise channel: each source word has a one-character homophone, and
//! filler words can be inserted between tokens.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::edit_distance;
use crate::noise::{NoiseChannel, NoiseConfig};
use crate::text::{ParallelPair, Sentence, TranscriptionPair};
use crate::Result;

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
pub const FILLERS: [&str; 2] = ["uh", "um"];

#[derive(Clone, Debug)]
pub struct ToyTask {
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
}

fn char_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

impl ToyTask {
    /// `words` consonant-vowel-consonant source words, pairwise at least two
    /// character edits apart, so their homophones never collide.
    pub fn new(words: usize) -> Self {
        let mut source_words: Vec<String> = Vec::new();
        'outer: for (i, c1) in CONSONANTS.iter().enumerate() {
            for (j, v) in VOWELS.iter().enumerate() {
                let c2 = CONSONANTS[(i * 3 + j * 5 + 1) % CONSONANTS.len()];
                let w: String = [*c1, *v, c2].iter().collect();
                if source_words.iter().all(|o| char_distance(o, &w) >= 2) {
                    source_words.push(w);
                }
                if source_words.len() == words {
                    break 'outer;
                }
            }
        }
        assert_eq!(source_words.len(), words, "toy vocabulary too large");
        let target_words = (0..words).map(|i| format!("y{i:02}")).collect();
        ToyTask {
            source_words,
            target_words,
            min_len: 3,
            max_len: 10,
        }
    }

    pub fn homophone(word: &str) -> String {
        format!("{word}h")
    }

    pub fn confusion_table(&self) -> BTreeMap<String, Vec<String>> {
        self.source_words
            .iter()
            .map(|w| (w.clone(), vec![Self::homophone(w)]))
            .collect()
    }

    /// Every token the noisy side can contain.
    pub fn noisy_words(&self) -> Vec<String> {
        let mut out: Vec<String> = self.source_words.clone();
        out.extend(self.source_words.iter().map(|w| Self::homophone(w)));
        out.extend(FILLERS.iter().map(|f| f.to_string()));
        out
    }

    /// Roughly 15% word error rate.
    pub fn noise_config(&self, seed: u64) -> NoiseConfig {
        NoiseConfig {
            p_delete: 0.02,
            p_repeat: 0.02,
            p_substitute: 0.10,
            p_insert: 0.01,
            confusion_table: Some(self.confusion_table()),
            insert_tokens: Some(FILLERS.iter().map(|f| f.to_string()).collect()),
            seed,
        }
    }

    pub fn noise_channel(&self, seed: u64) -> Result<NoiseChannel> {
        NoiseChannel::new(self.noise_config(seed), &self.noisy_words())
    }

    pub fn translate(&self, source: &Sentence) -> Sentence {
        Sentence::new(
            source
                .tokens()
                .iter()
                .map(|t| match self.source_words.iter().position(|w| w == t) {
                    Some(i) => self.target_words[i].clone(),
                    None => "<unk>".to_string(),
                })
                .collect(),
        )
    }

    /// Random source sentence without immediately repeated words.
    pub fn sample_source<R: Rng + ?Sized>(&self, rng: &mut R) -> Sentence {
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut tokens: Vec<String> = Vec::with_capacity(len);
        while tokens.len() < len {
            let w = self.source_words.choose(rng).expect("nonempty vocabulary");
            if tokens.last() != Some(w) {
                tokens.push(w.clone());
            }
        }
        Sentence::new(tokens)
    }

    pub fn parallel(&self, n: usize, seed: u64) -> Vec<ParallelPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let source = self.sample_source(&mut rng);
                let target = self.translate(&source);
                ParallelPair { source, target }
            })
            .collect()
    }

    /// Noisy/clean transcript pairs over fresh clean sentences.
    pub fn transcriptions(&self, n: usize, seed: u64) -> Result<Vec<TranscriptionPair>> {
        let manual: Vec<Sentence> = self.parallel(n, seed).into_iter().map(|p| p.source).collect();
        let auto = self.noise_channel(seed ^ 0x7a5)?.corrupt_corpus(&manual);
        auto.into_iter()
            .zip(manual)
            .map(|(auto, manual)| {
                let wer = crate::align::wer(&auto, &manual)?;
                Ok(TranscriptionPair { auto, manual, wer })
            })
            .collect()
    }
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask::new(24)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::corpus_wer;

    #[test]
    fn words_are_separated() {
        let t = ToyTask::default();
        let noisy = t.noisy_words();
        for (i, a) in noisy.iter().enumerate() {
            for b in &noisy[i + 1..] {
                assert_ne!(a, b);
            }
        }
        for (i, a) in t.source_words.iter().enumerate() {
            for b in &t.source_words[i + 1..] {
                assert!(char_distance(a, b) >= 2, "{a} {b}");
            }
            assert_eq!(char_distance(a, &ToyTask::homophone(a)), 1);
        }
        assert_eq!(noisy.len() + 4, 54);
    }

    #[test]
    fn parallel_is_a_remap() {
        let t = ToyTask::default();
        for p in t.parallel(200, 3) {
            assert_eq!(p.source.len(), p.target.len());
            assert!((t.min_len..=t.max_len).contains(&p.source.len()));
            assert!(p.source.tokens().windows(2).all(|w| w[0] != w[1]));
            assert!(!p.target.tokens().contains(&"<unk>".to_string()));
        }
    }

    #[test]
    fn noise_is_near_fifteen_percent() {
        let t = ToyTask::default();
        let pairs = t.transcriptions(3000, 11).unwrap();
        let auto: Vec<Sentence> = pairs.iter().map(|p| p.auto.clone()).collect();
        let manual: Vec<Sentence> = pairs.iter().map(|p| p.manual.clone()).collect();
        let w = corpus_wer(&auto, &manual);
        assert!((0.12..0.18).contains(&w), "wer {w}");
    }
}
