//! Corpus BLEU, checkpoint inference and evaluation curve files.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::text::{decode_ids, tokenize, Sentence, TokenizeMode};
use crate::training::source_ids;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped n-gram precisions and a single reference
/// per candidate. Without smoothing, any zero precision (including an order
/// for which the candidates have no n-grams at all) yields 0. With
/// `smoothing`, orders above 1 use `(matches + 1) / (total + 1)`.
pub fn bleu(
    candidates: &[Sentence],
    references: &[Sentence],
    max_n: usize,
    smoothing: bool,
) -> Result<BleuScore> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            expected: references.len(),
            actual: candidates.len(),
        });
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, reference) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=max_n {
            let cc = ngram_counts(cand.tokens(), n);
            let rc = ngram_counts(reference.tokens(), n);
            totals[n - 1] += cand.len().saturating_sub(n - 1);
            matches[n - 1] += cc
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if smoothing && i > 0 {
                (matches[i] + 1) as f64 / (totals[i] + 1) as f64
            } else if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        (brevity_penalty * log_mean.exp() * 100.0).min(100.0)
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputCondition {
    Clean,
    Noisy,
}

impl fmt::Display for InputCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputCondition::Clean => "clean",
            InputCondition::Noisy => "noisy",
        })
    }
}

impl FromStr for InputCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(InputCondition::Clean),
            "noisy" => Ok(InputCondition::Noisy),
            other => Err(Error::Parse(format!("unknown input condition {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub condition: InputCondition,
    pub step: u64,
    pub alpha: f64,
    pub beta: f64,
    pub bleu: BleuScore,
}

impl EvalReport {
    pub fn tsv_header() -> &'static str {
        "dataset\tcondition\tstep\talpha\tbeta\tbleu\tbrevity_penalty\tprecisions"
    }

    pub fn to_tsv(&self) -> String {
        let p: Vec<String> = self.bleu.precisions.iter().map(|p| format!("{p:.6}")).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.6}\t{}",
            self.dataset,
            self.condition,
            self.step,
            self.alpha,
            self.beta,
            self.bleu.score,
            self.bleu.brevity_penalty,
            p.join(",")
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::Parse(format!("bad eval report line: {line}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string()));
        let precisions = f[7]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(num)
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            dataset: f[0].to_string(),
            condition: f[1].parse()?,
            step: f[2].parse().map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string()))?,
            alpha: num(f[3])?,
            beta: num(f[4])?,
            bleu: BleuScore {
                score: num(f[5])?,
                precisions,
                brevity_penalty: num(f[6])?,
                candidate_len: 0,
                reference_len: 0,
            },
        })
    }
}

/// Parses report lines, skipping headers and blank lines.
pub fn parse_reports(text: &str) -> Result<Vec<EvalReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with("dataset\t"))
        .map(EvalReport::from_tsv)
        .collect()
}

pub const CURVE_HEADER: &str = "step\tbleu\tcondition\talpha\tbeta";

/// Curve file body: one block per (condition, alpha, beta), rows sorted by
/// step, blocks separated by a blank line.
pub fn render_curves(reports: &[EvalReport]) -> String {
    type Key = (InputCondition, u64, u64);
    let mut groups: Vec<(Key, Vec<&EvalReport>)> = Vec::new();
    for r in reports {
        let key = (r.condition, r.alpha.to_bits(), r.beta.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups.sort_by(|a, b| {
        let (ka, kb) = (&a.1[0], &b.1[0]);
        ka.condition
            .cmp(&kb.condition)
            .then(ka.alpha.total_cmp(&kb.alpha))
            .then(ka.beta.total_cmp(&kb.beta))
    });
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for (i, (_, rows)) in groups.iter_mut().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        rows.sort_by_key(|r| r.step);
        for r in rows.iter() {
            out.push_str(&format!(
                "{}\t{:.4}\t{}\t{}\t{}\n",
                r.step, r.bleu.score, r.condition, r.alpha, r.beta
            ));
        }
    }
    out
}

/// Greedy translation of raw input lines with a checkpoint. Discriminator
/// parameters, if any, are never touched. Empty lines translate to empty.
pub fn translate(checkpoint: &Checkpoint, lines: &[String], max_len: usize) -> Result<Vec<Sentence>> {
    let (src_vocab, tgt_vocab) = checkpoint.vocabularies()?;
    let model = checkpoint.to_model(0)?;
    let mut out = vec![Sentence::default(); lines.len()];
    let encoded: Vec<(usize, Vec<usize>)> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, l)| tokenize(l, TokenizeMode::Clean).ok().map(|s| (i, s)))
        .map(|(i, s)| {
            let mut ids = source_ids(&s, &src_vocab);
            ids.truncate(model.config.max_positions);
            (i, ids)
        })
        .collect();
    for chunk in encoded.chunks(64) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|(_, ids)| ids.clone()).collect();
        let decoded = model.greedy_decode(&srcs, max_len)?;
        for ((i, _), ids) in chunk.iter().zip(decoded) {
            out[*i] = decode_ids(&ids, &tgt_vocab);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Sentence {
        Sentence::from_words(x)
    }

    fn report(cond: InputCondition, step: u64, alpha: f64, score: f64) -> EvalReport {
        EvalReport {
            dataset: "dev".into(),
            condition: cond,
            step,
            alpha,
            beta: 0.5,
            bleu: BleuScore {
                score,
                precisions: vec![1.0; 4],
                brevity_penalty: 1.0,
                candidate_len: 0,
                reference_len: 0,
            },
        }
    }

    #[test]
    fn perfect_match_is_100() {
        let c = vec![s("a b c d e"), s("f g h i")];
        assert_eq!(bleu(&c, &c, 4, false).unwrap().score, 100.0);
    }

    #[test]
    fn disjoint_is_zero() {
        let b = bleu(&[s("x y z w")], &[s("a b c d")], 4, false).unwrap();
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn short_candidate_example() {
        let b = bleu(&[s("the cat sat")], &[s("the cat sat down")], 3, false).unwrap();
        assert_eq!(b.precisions, vec![1.0, 1.0, 1.0]);
        assert!((b.brevity_penalty - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((b.score - 71.653).abs() < 0.05);
        // no 4-gram exists in the candidate
        assert_eq!(bleu(&[s("the cat sat")], &[s("the cat sat down")], 4, false).unwrap().score, 0.0);
        assert!(bleu(&[s("the cat sat")], &[s("the cat sat down")], 4, true).unwrap().score > 0.0);
    }

    #[test]
    fn clipping_limits_repeated_matches() {
        let b = bleu(&[s("the the the the")], &[s("the cat")], 1, false).unwrap();
        assert_eq!(b.precisions[0], 0.25);
    }

    #[test]
    fn errors() {
        assert!(matches!(bleu(&[], &[], 4, false), Err(Error::EmptyCorpus)));
        assert!(bleu(&[s("a")], &[], 4, false).is_err());
    }

    #[test]
    fn order_invariance() {
        let c = vec![s("a b c d"), s("e f g"), s("a c d e f")];
        let r = vec![s("a b c e"), s("e f g h"), s("a c d f f")];
        let fwd = bleu(&c, &r, 4, true).unwrap().score;
        let rc: Vec<Sentence> = c.iter().rev().cloned().collect();
        let rr: Vec<Sentence> = r.iter().rev().cloned().collect();
        assert!((fwd - bleu(&rc, &rr, 4, true).unwrap().score).abs() < 1e-12);
    }

    #[test]
    fn curves_group_by_condition() {
        assert_eq!(render_curves(&[]), format!("{CURVE_HEADER}\n"));
        let reports = vec![
            report(InputCondition::Noisy, 200, 0.5, 40.0),
            report(InputCondition::Clean, 100, 0.5, 90.0),
            report(InputCondition::Noisy, 100, 0.5, 30.0),
        ];
        let text = render_curves(&reports);
        let blocks: Vec<&str> = text.trim_end().split("\n\n").collect();
        assert_eq!(blocks.len(), 2);
        assert!(blocks[1].ends_with("200\t40.0000\tnoisy\t0.5\t0.5"));
    }

    #[test]
    fn report_line_round_trip() {
        let r = report(InputCondition::Clean, 7, 0.1, 12.5);
        let back = EvalReport::from_tsv(&r.to_tsv()).unwrap();
        assert_eq!(back.condition, r.condition);
        assert_eq!(back.bleu.score, 12.5);
        assert_eq!(back.alpha, 0.1);
    }
}
