//! Pre-norm transformer encoder-decoder with a discriminator over encoder
//! states and gradient reversal in front of it.

mod checkpoint;
mod layers;

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_FORMAT};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttentionSpec, Graph, Group, Var};
use crate::noise::gaussian_embedding_noise;
use crate::tensor::{ParamStore, Tensor};
use crate::text::{BOS, EOS, PAD};
use layers::{Attention, FeedForward, Linear, Norm};

/// Discriminator probabilities are clamped to `[δ, 1 - δ]`.
pub const SCORE_CLAMP: f64 = 1e-7;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub ffn_size: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 128,
            ffn_size: 256,
            num_heads: 4,
            dropout: 0.1,
            max_positions: 128,
            source_vocab_size: 0,
            target_vocab_size: 0,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad("d_model must be divisible by num_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.source_vocab_size <= EOS || self.target_vocab_size <= EOS {
            return bad("vocabulary sizes must include the reserved tokens");
        }
        if self.max_positions == 0 || self.num_layers == 0 || self.ffn_size == 0 {
            return bad("num_layers, ffn_size and max_positions must be positive");
        }
        Ok(())
    }
}

/// Right-padded id sequences flattened to `batch * len`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        PaddedBatch {
            ids,
            mask,
            batch: seqs.len(),
            len,
        }
    }
}

/// Encoder states `[batch * len, d_model]` in some graph, plus validity mask.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Gaussian perturbation of looked-up source embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingNoise {
    pub std: f64,
    pub seed: u64,
}

struct EncoderLayer {
    attn_norm: Norm,
    attn: Attention,
    ffn_norm: Norm,
    ffn: FeedForward,
}

struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ffn_norm: Norm,
    ffn: FeedForward,
}

struct NmtLayout {
    source_embed: crate::tensor::ParamId,
    target_embed: crate::tensor::ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    output: Linear,
}

struct DiscriminatorLayout {
    attn_norm: Norm,
    attn: Attention,
    hidden: Linear,
    score: Linear,
}

pub struct Model {
    pub config: ModelConfig,
    pub nmt: ParamStore,
    pub discriminator: ParamStore,
    nmt_layout: NmtLayout,
    disc_layout: DiscriminatorLayout,
    positions: Tensor,
}

fn sinusoid_table(max_positions: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(max_positions, d);
    for pos in 0..max_positions {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            t.data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

impl Model {
    /// Fresh model with NMT and discriminator parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nmt = ParamStore::new();
        let d = config.d_model;
        let embed_std = (d as f64).powf(-0.5);
        let source_embed = nmt.add(
            "encoder.embed",
            Tensor::randn(config.source_vocab_size, d, embed_std, &mut rng),
        );
        let target_embed = nmt.add(
            "decoder.embed",
            Tensor::randn(config.target_vocab_size, d, embed_std, &mut rng),
        );
        let encoder = (0..config.num_layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                EncoderLayer {
                    attn_norm: Norm::new(&mut nmt, &format!("{p}.attn_norm"), d),
                    attn: Attention::new(&mut nmt, &format!("{p}.attn"), d, &mut rng),
                    ffn_norm: Norm::new(&mut nmt, &format!("{p}.ffn_norm"), d),
                    ffn: FeedForward::new(&mut nmt, &format!("{p}.ffn"), d, config.ffn_size, &mut rng),
                }
            })
            .collect();
        let encoder_norm = Norm::new(&mut nmt, "encoder.norm", d);
        let decoder = (0..config.num_layers)
            .map(|l| {
                let p = format!("decoder.layer{l}");
                DecoderLayer {
                    self_norm: Norm::new(&mut nmt, &format!("{p}.self_norm"), d),
                    self_attn: Attention::new(&mut nmt, &format!("{p}.self_attn"), d, &mut rng),
                    cross_norm: Norm::new(&mut nmt, &format!("{p}.cross_norm"), d),
                    cross_attn: Attention::new(&mut nmt, &format!("{p}.cross_attn"), d, &mut rng),
                    ffn_norm: Norm::new(&mut nmt, &format!("{p}.ffn_norm"), d),
                    ffn: FeedForward::new(&mut nmt, &format!("{p}.ffn"), d, config.ffn_size, &mut rng),
                }
            })
            .collect();
        let decoder_norm = Norm::new(&mut nmt, "decoder.norm", d);
        let output = Linear::new(&mut nmt, "decoder.output", d, config.target_vocab_size, &mut rng);

        let mut discriminator = ParamStore::new();
        let disc_layout = DiscriminatorLayout {
            attn_norm: Norm::new(&mut discriminator, "discriminator.attn_norm", d),
            attn: Attention::new(&mut discriminator, "discriminator.attn", d, &mut rng),
            hidden: Linear::new(&mut discriminator, "discriminator.hidden", d, config.ffn_size, &mut rng),
            score: Linear::new(&mut discriminator, "discriminator.score", config.ffn_size, 1, &mut rng),
        };
        let positions = sinusoid_table(config.max_positions, d);
        Ok(Model {
            config,
            nmt,
            discriminator,
            nmt_layout: NmtLayout {
                source_embed,
                target_embed,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                output,
            },
            disc_layout,
            positions,
        })
    }

    /// Re-draws only the discriminator parameters.
    pub fn reset_discriminator(&mut self, seed: u64) -> Result<()> {
        let fresh = Model::new(self.config.clone(), seed)?;
        self.discriminator = fresh.discriminator;
        Ok(())
    }

    fn embed(
        &self,
        g: &mut Graph,
        table: crate::tensor::ParamId,
        batch: &PaddedBatch,
        noise: Option<EmbeddingNoise>,
    ) -> Result<Var> {
        if batch.len > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: batch.len,
                max: self.config.max_positions,
            });
        }
        let d = self.config.d_model;
        let table = g.param(Group::Nmt, &self.nmt, table);
        let mut x = g.embedding(table, &batch.ids);
        if let Some(n) = noise {
            let clean = g.value(x).clone();
            let mut rng = ChaCha8Rng::seed_from_u64(n.seed);
            let noisy = gaussian_embedding_noise(&clean, n.std, &mut rng);
            let delta: Vec<f64> = noisy
                .data
                .iter()
                .zip(&clean.data)
                .map(|(a, b)| a - b)
                .collect();
            let delta = g.constant(Tensor::from_vec(clean.rows, clean.cols, delta));
            x = g.add(x, delta);
        }
        let x = g.scale(x, (d as f64).sqrt());
        let mut pos = Tensor::zeros(batch.batch * batch.len, d);
        for b in 0..batch.batch {
            for t in 0..batch.len {
                pos.row_mut(b * batch.len + t)
                    .copy_from_slice(self.positions.row(t));
            }
        }
        let pos = g.constant(pos);
        let x = g.add(x, pos);
        Ok(g.dropout(x, self.config.dropout))
    }

    /// Encodes a padded batch of source ids.
    pub fn encode(
        &self,
        g: &mut Graph,
        src: &PaddedBatch,
        noise: Option<EmbeddingNoise>,
    ) -> Result<EncoderOutput> {
        let store = &self.nmt;
        let grp = Group::Nmt;
        let p = self.config.dropout;
        let mut x = self.embed(g, self.nmt_layout.source_embed, src, noise)?;
        let spec = AttentionSpec {
            batch: src.batch,
            query_len: src.len,
            key_len: src.len,
            heads: self.config.num_heads,
            key_mask: src.mask.clone(),
            causal: false,
        };
        for layer in &self.nmt_layout.encoder {
            let h = layer.attn_norm.forward(g, store, grp, x);
            let a = layer.attn.forward(g, store, grp, h, h, spec.clone());
            let a = g.dropout(a, p);
            x = g.add(x, a);
            let h = layer.ffn_norm.forward(g, store, grp, x);
            let f = layer.ffn.forward(g, store, grp, h, p);
            let f = g.dropout(f, p);
            x = g.add(x, f);
        }
        let states = self.nmt_layout.encoder_norm.forward(g, store, grp, x);
        Ok(EncoderOutput {
            states,
            mask: src.mask.clone(),
            batch: src.batch,
            len: src.len,
        })
    }

    /// Logits `[batch * prefix_len, target_vocab]`; row `t` predicts token `t + 1`.
    pub fn decoder_logits(
        &self,
        g: &mut Graph,
        memory: &EncoderOutput,
        prefix: &PaddedBatch,
    ) -> Result<Var> {
        if prefix.batch != memory.batch {
            return Err(Error::LengthMismatch {
                expected: memory.batch,
                actual: prefix.batch,
            });
        }
        let store = &self.nmt;
        let grp = Group::Nmt;
        let p = self.config.dropout;
        let mut x = self.embed(g, self.nmt_layout.target_embed, prefix, None)?;
        let self_spec = AttentionSpec {
            batch: prefix.batch,
            query_len: prefix.len,
            key_len: prefix.len,
            heads: self.config.num_heads,
            key_mask: prefix.mask.clone(),
            causal: true,
        };
        let cross_spec = AttentionSpec {
            batch: prefix.batch,
            query_len: prefix.len,
            key_len: memory.len,
            heads: self.config.num_heads,
            key_mask: memory.mask.clone(),
            causal: false,
        };
        for layer in &self.nmt_layout.decoder {
            let h = layer.self_norm.forward(g, store, grp, x);
            let a = layer.self_attn.forward(g, store, grp, h, h, self_spec.clone());
            let a = g.dropout(a, p);
            x = g.add(x, a);
            let h = layer.cross_norm.forward(g, store, grp, x);
            let a = layer
                .cross_attn
                .forward(g, store, grp, h, memory.states, cross_spec.clone());
            let a = g.dropout(a, p);
            x = g.add(x, a);
            let h = layer.ffn_norm.forward(g, store, grp, x);
            let f = layer.ffn.forward(g, store, grp, h, p);
            let f = g.dropout(f, p);
            x = g.add(x, f);
        }
        let h = self.nmt_layout.decoder_norm.forward(g, store, grp, x);
        Ok(self.nmt_layout.output.forward(g, store, grp, h))
    }

    /// Discriminator probabilities `[batch, 1]` that each sequence came from a
    /// manual transcript: self-attention sub-layer, masked mean pooling, then
    /// a feed-forward network and a clamped sigmoid.
    pub fn discriminate(&self, g: &mut Graph, h: &EncoderOutput) -> Result<Var> {
        for b in 0..h.batch {
            if !h.mask[b * h.len..(b + 1) * h.len].iter().any(|m| *m) {
                return Err(Error::AllMasked);
            }
        }
        let store = &self.discriminator;
        let grp = Group::Discriminator;
        let l = &self.disc_layout;
        let spec = AttentionSpec {
            batch: h.batch,
            query_len: h.len,
            key_len: h.len,
            heads: self.config.num_heads,
            key_mask: h.mask.clone(),
            causal: false,
        };
        let n = l.attn_norm.forward(g, store, grp, h.states);
        let a = l.attn.forward(g, store, grp, n, n, spec);
        let x = g.add(h.states, a);
        let pooled = g.masked_mean(x, h.len, &h.mask);
        let hidden = l.hidden.forward(g, store, grp, pooled);
        let hidden = g.relu(hidden);
        let logit = l.score.forward(g, store, grp, hidden);
        let prob = g.sigmoid(logit);
        Ok(g.clamp(prob, SCORE_CLAMP, 1.0 - SCORE_CLAMP))
    }

    /// Greedy decoding in inference mode. Each result excludes BOS/EOS and
    /// has at most `max_len` tokens. PAD and BOS are never emitted.
    pub fn greedy_decode(&self, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let src = PaddedBatch::new(sources);
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, &src, None)?;
        let memory_value = g.value(enc.states).clone();
        let max_len = max_len.min(self.config.max_positions.saturating_sub(1));
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; sources.len()];
        let mut done = vec![false; sources.len()];
        for _ in 0..max_len {
            let mut g = Graph::inference();
            let memory = EncoderOutput {
                states: g.constant(memory_value.clone()),
                ..enc.clone()
            };
            let batch = PaddedBatch::new(&prefixes);
            let logits = self.decoder_logits(&mut g, &memory, &batch)?;
            let lv = g.value(logits);
            for (b, prefix) in prefixes.iter_mut().enumerate() {
                if done[b] {
                    continue;
                }
                let row = lv.row(b * batch.len + prefix.len() - 1);
                let next = argmax_token(row);
                prefix.push(next);
                if next == EOS {
                    done[b] = true;
                }
            }
            if done.iter().all(|d| *d) {
                break;
            }
        }
        Ok(prefixes
            .into_iter()
            .map(|p| p.into_iter().skip(1).take_while(|&t| t != EOS).collect())
            .collect())
    }

    /// Encoder states of a single sequence in inference mode.
    pub fn encode_sequence(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.encode(&mut g, &PaddedBatch::new(&[ids.to_vec()]), None)?;
        Ok(g.value(out.states).clone())
    }

    /// Discriminator probability of a single sequence in inference mode.
    pub fn score_sequence(&self, ids: &[usize]) -> Result<f64> {
        let mut g = Graph::inference();
        let out = self.encode(&mut g, &PaddedBatch::new(&[ids.to_vec()]), None)?;
        let s = self.discriminate(&mut g, &out)?;
        Ok(g.value(s).item())
    }
}

/// Largest logit among emittable tokens; lowest id wins ties.
fn argmax_token(row: &[f64]) -> usize {
    let mut best = EOS;
    for (id, &v) in row.iter().enumerate().skip(EOS) {
        if v > row[best] {
            best = id;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::UNK;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            d_model: 16,
            ffn_size: 32,
            num_heads: 2,
            dropout: 0.1,
            max_positions: 32,
            source_vocab_size: 12,
            target_vocab_size: 10,
            label_smoothing: 0.1,
        }
    }

    fn model() -> Model {
        Model::new(tiny_config(), 11).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.num_heads = 3;
        assert!(Model::new(c, 0).is_err());
        let mut c = tiny_config();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = model();
        let ids = vec![4, 5, 6, 7, 8, 9, EOS];
        let a = m.encode_sequence(&ids).unwrap();
        assert_eq!(a.shape(), (7, 16));
        assert_eq!(a, m.encode_sequence(&ids).unwrap());
    }

    #[test]
    fn positional_encoding_distinguishes_order() {
        let m = model();
        let a = m.encode_sequence(&[4, 5, 6, 7, EOS]).unwrap();
        let b = m.encode_sequence(&[6, 5, 4, 7, EOS]).unwrap();
        assert_ne!(a, b);
        // same token at a different position gets a different state
        assert_ne!(a.row(0), b.row(2));
    }

    #[test]
    fn overlong_input_rejected() {
        let m = model();
        let ids = vec![4; 33];
        assert!(matches!(
            m.encode_sequence(&ids),
            Err(Error::SequenceTooLong { len: 33, max: 32 })
        ));
    }

    #[test]
    fn decoder_is_causal_and_normalized() {
        let m = model();
        let src = PaddedBatch::new(&[vec![4, 5, 6, EOS]]);
        let run = |prefix: Vec<usize>| {
            let mut g = Graph::inference();
            let enc = m.encode(&mut g, &src, None).unwrap();
            let l = m
                .decoder_logits(&mut g, &enc, &PaddedBatch::new(&[prefix]))
                .unwrap();
            g.value(l).clone()
        };
        let short = run(vec![BOS, 5, 6]);
        let long = run(vec![BOS, 5, 6, 7, 8]);
        for r in 0..3 {
            for (a, b) in short.row(r).iter().zip(long.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for r in 0..long.rows {
            let row = long.row(r);
            assert!(row.iter().all(|v| v.is_finite()));
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-5);
            let arg = argmax_token(row);
            assert!(arg < m.config.target_vocab_size && arg >= EOS);
        }
    }

    #[test]
    fn discriminator_range_and_padding_invariance() {
        let m = model();
        let s = m.score_sequence(&[4, 5, 6, EOS]).unwrap();
        assert!((SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&s));
        let mut g = Graph::inference();
        let batch = PaddedBatch::new(&[vec![4, 5, 6, EOS], vec![7, 8, 9, 10, 4, 5, 6, EOS]]);
        let enc = m.encode(&mut g, &batch, None).unwrap();
        let scores = m.discriminate(&mut g, &enc).unwrap();
        assert!((g.value(scores).data[0] - s).abs() < 1e-5);
        let other = m.score_sequence(&[7, 8, 9, 10, UNK, EOS]).unwrap();
        assert_ne!(s, other);
    }

    #[test]
    fn discriminator_rejects_all_masked() {
        let m = model();
        let mut g = Graph::inference();
        let states = g.constant(Tensor::zeros(2, 16));
        let enc = EncoderOutput {
            states,
            mask: vec![false, false],
            batch: 1,
            len: 2,
        };
        assert!(matches!(m.discriminate(&mut g, &enc), Err(Error::AllMasked)));
    }

    #[test]
    fn greedy_decode_bounds_and_determinism() {
        let m = model();
        let srcs = vec![vec![4, 5, EOS], vec![6, 7, 8, 9, EOS]];
        let a = m.greedy_decode(&srcs, 5).unwrap();
        assert_eq!(a, m.greedy_decode(&srcs, 5).unwrap());
        assert!(a.iter().all(|s| s.len() <= 5));
        assert!(a.iter().flatten().all(|&t| t != PAD && t != BOS && t != EOS));
        // batching does not change individual results
        assert_eq!(a[1], m.greedy_decode(&srcs[1..], 5).unwrap()[0]);
    }
}
