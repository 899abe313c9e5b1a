use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::PaddedBatch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_normal: f64,
    pub l_enc: f64,
    pub l_dec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn tsv_header() -> &'static str {
        "step\tl_normal\tl_enc\tl_dec\ttotal"
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.l_normal, self.l_enc, self.l_dec, self.total
        )
    }
}

pub fn total_loss(l_normal: f64, l_enc: f64, l_dec: f64, w: &LossWeights) -> f64 {
    w.alpha * l_enc + w.beta * l_dec + l_normal
}

/// Smoothed negative log-likelihood, averaged over each sentence's positions
/// and then over the sentences with `include[b]` set.
///
/// `targets` holds the gold next tokens (each sequence ends with EOS) and
/// must have the same geometry as the decoder prefix that produced `logits`.
pub fn nll_loss(
    g: &mut Graph,
    logits: Var,
    targets: &PaddedBatch,
    epsilon: f64,
    include: Option<&[bool]>,
) -> Result<Var> {
    let rows = g.value(logits).rows;
    let expected = targets.batch * targets.len;
    if rows != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: rows,
        });
    }
    let keep = |b: usize| include.is_none_or(|inc| inc[b]);
    let n_sent = (0..targets.batch).filter(|&b| keep(b)).count();
    let mut weights = vec![0.0; rows];
    if n_sent > 0 {
        for b in 0..targets.batch {
            if !keep(b) {
                continue;
            }
            let span = &targets.mask[b * targets.len..(b + 1) * targets.len];
            let len = span.iter().filter(|m| **m).count();
            for (t, valid) in span.iter().enumerate() {
                if *valid {
                    weights[b * targets.len + t] = 1.0 / (len as f64 * n_sent as f64);
                }
            }
        }
    }
    Ok(g.smoothed_nll(logits, &targets.ids, &weights, epsilon))
}

/// `mean(-ln D(manual)) + mean(-ln(1 - D(auto)))` over paired scores `[batch, 1]`.
pub fn adversarial_loss(g: &mut Graph, score_manual: Var, score_auto: Var) -> Var {
    let lm = g.ln(score_manual);
    let lm = g.mean(lm);
    let one_minus = g.scale(score_auto, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let la = g.ln(one_minus);
    let la = g.mean(la);
    let s = g.add(lm, la);
    g.scale(s, -1.0)
}

/// Direct scalar evaluation of the adversarial objective.
pub fn adversarial_loss_value(score_manual: &[f64], score_auto: &[f64]) -> f64 {
    let m = score_manual.iter().map(|d| -d.ln()).sum::<f64>() / score_manual.len() as f64;
    let a = score_auto.iter().map(|d| -(1.0 - d).ln()).sum::<f64>() / score_auto.len() as f64;
    m + a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SCORE_CLAMP;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    /// Per-token log-softmax recomputed independently of the graph op.
    fn oracle_nll(logits: &Tensor, targets: &[usize], eps: f64) -> f64 {
        let v = logits.cols as f64;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            let logp: Vec<f64> = row.iter().map(|x| x - lse).collect();
            let smooth = -logp.iter().sum::<f64>() / v;
            total += (1.0 - eps) * -logp[t] + eps * smooth;
        }
        total / targets.len() as f64
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::inference();
        let logits = g.constant(Tensor::zeros(5, 100));
        let targets = PaddedBatch::new(&[vec![4, 9, 17, 55, 2]]);
        let l = nll_loss(&mut g, logits, &targets, 0.0, None).unwrap();
        assert!((scalar(&g, l) - 100f64.ln()).abs() < 1e-6);
        let l = nll_loss(&mut g, logits, &targets, 0.3, None).unwrap();
        assert!((scalar(&g, l) - 100f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_prediction_is_zero() {
        let mut t = Tensor::filled(2, 6, -1e4);
        t.data[3] = 0.0;
        t.data[6 + 2] = 0.0;
        let mut g = Graph::inference();
        let logits = g.constant(t);
        let l = nll_loss(&mut g, logits, &PaddedBatch::new(&[vec![3, 2]]), 0.0, None).unwrap();
        assert!(scalar(&g, l).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_and_averages_per_sentence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let logits = Tensor::randn(2 * 4, 7, 2.0, &mut rng);
        let seqs = vec![vec![3, 5, 2], vec![1, 6, 4, 2]];
        let batch = PaddedBatch::new(&seqs);
        let mut g = Graph::inference();
        let lv = g.constant(logits.clone());
        let l = nll_loss(&mut g, lv, &batch, 0.1, None).unwrap();
        let first = oracle_nll(&Tensor::from_vec(3, 7, logits.data[..21].to_vec()), &seqs[0], 0.1);
        let second = oracle_nll(&Tensor::from_vec(4, 7, logits.data[28..].to_vec()), &seqs[1], 0.1);
        assert!((scalar(&g, l) - (first + second) / 2.0).abs() < 1e-10);
        let only_second = nll_loss(&mut g, lv, &batch, 0.1, Some(&[false, true])).unwrap();
        assert!((scalar(&g, only_second) - second).abs() < 1e-10);
        assert!(scalar(&g, l) >= 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::inference();
        let logits = g.constant(Tensor::zeros(3, 5));
        let r = nll_loss(&mut g, logits, &PaddedBatch::new(&[vec![1, 2]]), 0.0, None);
        assert!(matches!(r, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn adversarial_loss_values() {
        let mut g = Graph::inference();
        let half = g.constant(Tensor::filled(3, 1, 0.5));
        let l = adversarial_loss(&mut g, half, half);
        assert!((scalar(&g, l) - 2.0 * 2f64.ln()).abs() < 1e-6);

        let hi = g.constant(Tensor::filled(1, 1, 1.0 - SCORE_CLAMP));
        let lo = g.constant(Tensor::filled(1, 1, SCORE_CLAMP));
        let l = adversarial_loss(&mut g, hi, lo);
        assert!((scalar(&g, l) - 2.0 * -(1.0 - SCORE_CLAMP).ln()).abs() < 1e-12);
        assert!(scalar(&g, l) < 1e-6);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let m: Vec<f64> = (0..6).map(|_| rng.random_range(SCORE_CLAMP..1.0 - SCORE_CLAMP)).collect();
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(SCORE_CLAMP..1.0 - SCORE_CLAMP)).collect();
        let mv = g.constant(Tensor::from_vec(6, 1, m.clone()));
        let av = g.constant(Tensor::from_vec(6, 1, a.clone()));
        let l = adversarial_loss(&mut g, mv, av);
        let direct: f64 = m.iter().zip(&a).map(|(x, y)| -x.ln() - (1.0 - y).ln()).sum::<f64>() / 6.0;
        assert!((scalar(&g, l) - direct).abs() < 1e-12);
        assert!((adversarial_loss_value(&m, &a) - direct).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(total_loss(1.5, 7.0, 9.0, &w), 1.5);
        let w = LossWeights::new(0.5, 0.5).unwrap();
        assert_eq!(total_loss(1.0, 2.0, 4.0, &w), 4.0);
        assert!(LossWeights::new(-0.1, 0.0).is_err());
        assert!(LossWeights::new(f64::NAN, 0.0).is_err());
    }
}
