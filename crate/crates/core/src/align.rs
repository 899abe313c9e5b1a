//! Word-level Levenshtein alignment, re-segmentation of unsegmented automatic
//! transcripts against a reference segmentation, WER and WER-based filtering.
//!
//! Convention: `Delete` is a reference token missing from the hypothesis,
//! `Insert` is a hypothesis token absent from the reference.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::{read_lines, tokenize, Sentence, TokenizeMode, TranscriptionPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditKind {
    Match,
    Substitute,
    Delete,
    Insert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EditOp {
    pub kind: EditKind,
    pub hyp_index: Option<usize>,
    pub ref_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath {
    pub ops: Vec<EditOp>,
    pub cost: usize,
}

fn distance_table<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<Vec<u32>> {
    let (m, n) = (hyp.len(), reference.len());
    let mut d = vec![vec![0u32; n + 1]; m + 1];
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j as u32;
    }
    for i in 1..=m {
        d[i][0] = i as u32;
        for j in 1..=n {
            let diag = d[i - 1][j - 1] + u32::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = diag.min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    d
}

/// Unit-cost edit distance only, in O(len(ref)) memory.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(h != r))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Backtraces one step from `(i, j)`; match > substitute > delete > insert.
fn back_step<T: PartialEq>(
    d: &[Vec<u32>],
    hyp: &[T],
    reference: &[T],
    i: usize,
    j: usize,
) -> EditKind {
    let here = d[i][j];
    if i > 0 && j > 0 {
        let same = hyp[i - 1] == reference[j - 1];
        if same && d[i - 1][j - 1] == here {
            return EditKind::Match;
        }
        if !same && d[i - 1][j - 1] + 1 == here {
            return EditKind::Substitute;
        }
    }
    if j > 0 && d[i][j - 1] + 1 == here {
        return EditKind::Delete;
    }
    EditKind::Insert
}

pub fn edit_distance_align<T: PartialEq>(hyp: &[T], reference: &[T]) -> AlignmentPath {
    let d = distance_table(hyp, reference);
    let (mut i, mut j) = (hyp.len(), reference.len());
    let mut ops = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        let kind = back_step(&d, hyp, reference, i, j);
        let op = match kind {
            EditKind::Match | EditKind::Substitute => {
                i -= 1;
                j -= 1;
                EditOp {
                    kind,
                    hyp_index: Some(i),
                    ref_index: Some(j),
                }
            }
            EditKind::Delete => {
                j -= 1;
                EditOp {
                    kind,
                    hyp_index: None,
                    ref_index: Some(j),
                }
            }
            EditKind::Insert => {
                i -= 1;
                EditOp {
                    kind,
                    hyp_index: Some(i),
                    ref_index: None,
                }
            }
        };
        ops.push(op);
    }
    ops.reverse();
    AlignmentPath {
        ops,
        cost: d[hyp.len()][reference.len()] as usize,
    }
}

pub fn wer(hyp: &Sentence, reference: &Sentence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(hyp.tokens(), reference.tokens()) as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedTranscript {
    /// One (possibly empty) segment per reference sentence.
    pub segments: Vec<Sentence>,
    /// Edit distance of each segment against its reference.
    pub costs: Vec<usize>,
    pub total_cost: usize,
}

/// Splits `auto_stream` into `refs.len()` contiguous segments minimizing the
/// summed edit distance against the references.
///
/// The stream is aligned against the concatenated references with a single
/// Levenshtein table; segment boundaries are read off the backtrace at the
/// columns where one reference ends and the next begins. Hypothesis words
/// inserted at a boundary go to the later segment, so boundaries are placed
/// as early as the backtrace allows.
pub fn resegment(auto_stream: &[String], refs: &[Sentence]) -> Result<SegmentedTranscript> {
    if refs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let concat: Vec<&String> = refs.iter().flat_map(|r| r.tokens()).collect();
    let hyp: Vec<&String> = auto_stream.iter().collect();
    // ends[k] = column index where reference k ends.
    let mut ends = Vec::with_capacity(refs.len());
    let mut acc = 0;
    for r in refs {
        acc += r.len();
        ends.push(acc);
    }
    let mut is_boundary = vec![false; concat.len() + 1];
    for &e in &ends[..ends.len() - 1] {
        is_boundary[e] = true;
    }

    let d = distance_table(&hyp, &concat);
    // starts[k] = first stream position of segment k
    let mut starts = vec![0usize; refs.len()];
    let (mut i, mut j) = (hyp.len(), concat.len());
    let mut k = refs.len() - 1;
    loop {
        while k > 0 && j <= ends[k - 1] {
            if j == ends[k - 1] {
                // stay on the boundary column while insertions are optimal
                while i > 0 && d[i - 1][j] + 1 == d[i][j] && is_boundary[j] {
                    i -= 1;
                }
            }
            starts[k] = i;
            k -= 1;
        }
        if i == 0 && j == 0 {
            break;
        }
        match back_step(&d, &hyp, &concat, i, j) {
            EditKind::Match | EditKind::Substitute => {
                i -= 1;
                j -= 1;
            }
            EditKind::Delete => j -= 1,
            EditKind::Insert => i -= 1,
        }
    }

    let mut segments = Vec::with_capacity(refs.len());
    let mut costs = Vec::with_capacity(refs.len());
    for (idx, r) in refs.iter().enumerate() {
        let lo = starts[idx];
        let hi = starts.get(idx + 1).copied().unwrap_or(hyp.len());
        let seg = Sentence::new(auto_stream[lo..hi].to_vec());
        costs.push(edit_distance(seg.tokens(), r.tokens()));
        segments.push(seg);
    }
    let total_cost = costs.iter().sum();
    debug_assert_eq!(total_cost, d[hyp.len()][concat.len()] as usize);
    Ok(SegmentedTranscript {
        segments,
        costs,
        total_cost,
    })
}

/// Drops the `ceil(drop_fraction * N)` highest-WER pairs; among equal WERs the
/// later pair is dropped first. Survivors keep their input order.
pub fn filter_by_wer(pairs: Vec<TranscriptionPair>, drop_fraction: f64) -> Result<Vec<TranscriptionPair>> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::InvalidConfig(format!(
            "drop_fraction must lie in [0, 1), got {drop_fraction}"
        )));
    }
    // guard against 0.3 * 10 = 3.0000000000000004
    let n_drop = ((drop_fraction * pairs.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    if n_drop == 0 {
        return Ok(pairs);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pairs[b]
            .wer
            .total_cmp(&pairs[a].wer)
            .then_with(|| b.cmp(&a))
    });
    let mut dropped = vec![false; pairs.len()];
    for &idx in &order[..n_drop] {
        dropped[idx] = true;
    }
    Ok(pairs
        .into_iter()
        .zip(dropped)
        .filter_map(|(p, d)| (!d).then_some(p))
        .collect())
}

/// Reads blank-line separated blocks of non-empty lines.
pub fn read_documents(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut docs = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for line in read_lines(path)? {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignStats {
    pub documents: usize,
    pub pairs: usize,
    pub dropped_empty: usize,
}

/// Aligns automatic transcript documents (one token stream each) to manual
/// documents (one reference sentence per line). Both sides use asr-like
/// tokenization; pairs whose automatic side is empty are dropped.
pub fn align_documents(
    auto_docs: &[Vec<String>],
    manual_docs: &[Vec<String>],
) -> Result<(Vec<TranscriptionPair>, AlignStats)> {
    if auto_docs.len() != manual_docs.len() {
        return Err(Error::LengthMismatch {
            expected: manual_docs.len(),
            actual: auto_docs.len(),
        });
    }
    let mut stats = AlignStats {
        documents: auto_docs.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (auto, manual) in auto_docs.iter().zip(manual_docs) {
        let stream: Vec<String> = auto
            .iter()
            .filter_map(|l| tokenize(l, TokenizeMode::AsrLike).ok())
            .flat_map(Sentence::into_tokens)
            .collect();
        let refs: Vec<Sentence> = manual
            .iter()
            .filter_map(|l| tokenize(l, TokenizeMode::AsrLike).ok())
            .collect();
        if refs.is_empty() {
            continue;
        }
        let seg = resegment(&stream, &refs)?;
        for (auto, manual) in seg.segments.into_iter().zip(refs) {
            if auto.is_empty() {
                stats.dropped_empty += 1;
                continue;
            }
            let wer = wer(&auto, &manual)?;
            out.push(TranscriptionPair { auto, manual, wer });
        }
    }
    stats.pairs = out.len();
    if stats.dropped_empty > 0 {
        log::info!(
            "dropped {} reference sentences with empty automatic segment",
            stats.dropped_empty
        );
    }
    Ok((out, stats))
}

pub fn write_pairs(path: &Path, pairs: &[TranscriptionPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        writeln!(f, "{}\t{}\t{:.6}", p.auto, p.manual, p.wer)?;
    }
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<TranscriptionPair>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!(
                    "line {}: expected 3 tab-separated fields",
                    n + 1
                )));
            }
            let wer = fields[2]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
            Ok(TranscriptionPair {
                auto: Sentence::from_words(fields[0]),
                manual: Sentence::from_words(fields[1]),
                wer,
            })
        })
        .collect()
}
