use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{adversarial_loss, nll_loss, total_loss, LossBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Group, Var};
use crate::model::{EmbeddingNoise, EncoderOutput, Model, OptimizerState, PaddedBatch};
use crate::text::{BOS, EOS};

/// Source ids end with EOS; target ids are bare tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelBatch {
    pub sources: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Paired automatic and manual transcripts as source ids ending with EOS.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranscriptionBatch {
    pub auto: Vec<Vec<usize>>,
    pub manual: Vec<Vec<usize>>,
    /// Gaussian perturbation of the automatic side's embeddings, used when the
    /// "automatic" side is a copy of the manual one.
    pub auto_noise: Option<EmbeddingNoise>,
}

impl TranscriptionBatch {
    pub fn is_empty(&self) -> bool {
        self.auto.is_empty()
    }
}

/// Decoder input (`BOS y`) and gold output (`y EOS`) batches.
pub fn teacher_forcing(targets: &[Vec<usize>]) -> (PaddedBatch, PaddedBatch) {
    let inputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
        .collect();
    let outputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| t.iter().copied().chain(std::iter::once(EOS)).collect())
        .collect();
    (PaddedBatch::new(&inputs), PaddedBatch::new(&outputs))
}

/// Decoding budget for pseudo-references of a source with `len` ids.
pub fn pseudo_max_len(len: usize) -> usize {
    2 * len + 4
}

/// The model's own greedy translations of the manual transcripts, computed
/// in inference mode outside any training graph.
pub fn pseudo_reference(model: &Model, manual: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let budget = manual.iter().map(|m| pseudo_max_len(m.len())).max().unwrap_or(0);
    model.greedy_decode(manual, budget)
}

/// Smoothed NLL of the pseudo-references given already-encoded automatic
/// transcripts. Pairs with an empty pseudo-reference are excluded; returns
/// `None` when every pair is excluded.
pub fn consistency_loss(
    g: &mut Graph,
    model: &Model,
    auto: &EncoderOutput,
    pseudo: &[Vec<usize>],
    epsilon: f64,
) -> Result<Option<Var>> {
    let include: Vec<bool> = pseudo.iter().map(|p| !p.is_empty()).collect();
    if !include.iter().any(|i| *i) {
        return Ok(None);
    }
    let (inputs, outputs) = teacher_forcing(pseudo);
    let logits = model.decoder_logits(g, auto, &inputs)?;
    nll_loss(g, logits, &outputs, epsilon, Some(&include)).map(Some)
}

/// Per-step dropout generator derived from the run seed.
pub fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d80b_0000_0000);
    rng.set_stream(step);
    rng
}

pub struct StepInputs<'a> {
    pub parallel: &'a ParallelBatch,
    pub transcription: Option<&'a TranscriptionBatch>,
    pub weights: LossWeights,
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
}

pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Pairs whose pseudo-reference was empty and were left out of the decoder term.
    pub skipped_pseudo: usize,
}

fn check_finite(component: &'static str, step: u64, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            component,
            step,
            value,
        })
    }
}

/// One joint update on `l_normal + alpha * l_enc + beta * l_dec`.
///
/// The encoder states feeding the discriminator pass through gradient
/// reversal, so the discriminator descends on `l_enc` while the encoder
/// ascends on it in the same backward pass. Terms whose weight is zero are
/// still evaluated for the log but never enter the backward pass.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut OptimizerState,
    inputs: StepInputs<'_>,
) -> Result<StepOutput> {
    let StepInputs {
        parallel,
        transcription,
        weights,
        step,
        lr,
        seed,
    } = inputs;
    let eps = model.config.label_smoothing;
    let mut g = Graph::training(dropout_rng(seed, step));

    let src = PaddedBatch::new(&parallel.sources);
    let (dec_in, dec_out) = teacher_forcing(&parallel.targets);
    let enc = model.encode(&mut g, &src, None)?;
    let logits = model.decoder_logits(&mut g, &enc, &dec_in)?;
    let l_normal = nll_loss(&mut g, logits, &dec_out, eps, None)?;

    let mut l_enc = None;
    let mut l_dec = None;
    let mut skipped_pseudo = 0;
    if let Some(tb) = transcription.filter(|t| !t.is_empty()) {
        let pseudo = pseudo_reference(model, &tb.manual)?;
        skipped_pseudo = pseudo.iter().filter(|p| p.is_empty()).count();
        let h_manual = model.encode(&mut g, &PaddedBatch::new(&tb.manual), None)?;
        let h_auto = model.encode(&mut g, &PaddedBatch::new(&tb.auto), tb.auto_noise)?;
        let rev_manual = EncoderOutput {
            states: g.grad_reverse(h_manual.states, 1.0),
            ..h_manual
        };
        let rev_auto = EncoderOutput {
            states: g.grad_reverse(h_auto.states, 1.0),
            ..h_auto.clone()
        };
        let d_manual = model.discriminate(&mut g, &rev_manual)?;
        let d_auto = model.discriminate(&mut g, &rev_auto)?;
        l_enc = Some(adversarial_loss(&mut g, d_manual, d_auto));
        l_dec = consistency_loss(&mut g, model, &h_auto, &pseudo, eps)?;
        if skipped_pseudo > 0 {
            log::debug!("step {step}: {skipped_pseudo} empty pseudo-references skipped");
        }
    }

    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let (vn, ve, vd) = (g.value(l_normal).item(), value(l_enc), value(l_dec));
    check_finite("l_normal", step, vn)?;
    check_finite("l_enc", step, ve)?;
    check_finite("l_dec", step, vd)?;

    let mut total = l_normal;
    if let Some(le) = l_enc.filter(|_| weights.alpha != 0.0) {
        let t = g.scale(le, weights.alpha);
        total = g.add(total, t);
    }
    if let Some(ld) = l_dec.filter(|_| weights.beta != 0.0) {
        let t = g.scale(ld, weights.beta);
        total = g.add(total, t);
    }
    let grads = g.backward(total);
    let nmt_grads = grads.for_store(Group::Nmt, &model.nmt);
    let disc_grads = grads.for_store(Group::Discriminator, &model.discriminator);
    drop(grads);
    drop(g);
    optimizer.nmt.update(&mut model.nmt, &nmt_grads, lr);
    if disc_grads.iter().any(Option::is_some) {
        if let Some(opt) = optimizer.discriminator.as_mut() {
            opt.update(&mut model.discriminator, &disc_grads, lr);
        }
    }

    Ok(StepOutput {
        breakdown: LossBreakdown {
            step,
            l_normal: vn,
            l_enc: ve,
            l_dec: vd,
            total: total_loss(vn, ve, vd, &weights),
        },
        skipped_pseudo,
    })
}
