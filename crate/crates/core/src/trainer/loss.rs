//! The three objective terms and their gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{dot, small_uniform, HiddenStates, ParamTensors};
use super::{Ablation, TrainingConfig};
use crate::error::{CctError, Result};

/// Unit margin of the token-level hinge.
pub const TOKEN_MARGIN: f64 = 1.0;

/// Affine map from a hidden vector to a scalar score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl ScalarHead {
    pub fn new(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
        Self {
            weight: small_uniform(&mut rng, d_model, 0.01),
            bias: 0.0,
        }
    }

    pub fn zeros(d_model: usize) -> Self {
        Self {
            weight: vec![0.0; d_model],
            bias: 0.0,
        }
    }

    pub fn score(&self, h: &[f64]) -> f64 {
        dot(&self.weight, h) + self.bias
    }
}

impl ParamTensors for ScalarHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("head.weight", &self.weight);
        f("head.bias", std::slice::from_ref(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("head.weight", &mut self.weight);
        f("head.bias", std::slice::from_mut(&mut self.bias));
    }
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Mean negative log-likelihood of `targets` over the masked positions.
/// `logits` is row-major `(positions, vocab)`.
pub fn lm_loss(logits: &[f64], vocab: usize, targets: &[u32], mask: &[bool]) -> Result<f64> {
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(CctError::InvalidSample("empty output mask".into()));
    }
    let total: f64 = mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(j, _)| -log_softmax_at(&logits[j * vocab..(j + 1) * vocab], targets[j] as usize))
        .sum();
    Ok(total / count as f64)
}

/// `lm_loss` and its gradient with respect to the logits.
pub fn lm_loss_grad(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let loss = lm_loss(logits, vocab, targets, mask)?;
    let count = mask.iter().filter(|m| **m).count() as f64;
    let mut grad = vec![0.0; logits.len()];
    for (j, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let row = &logits[j * vocab..(j + 1) * vocab];
        let g = &mut grad[j * vocab..(j + 1) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        for (gv, x) in g.iter_mut().zip(row) {
            *gv = (x - max).exp() / sum / count;
        }
        g[targets[j] as usize] -= 1.0 / count;
    }
    Ok((loss, grad))
}

fn check_alignment(
    correct: &HiddenStates,
    buggy: &HiddenStates,
    diff_index: usize,
    aligned_length: usize,
) -> Result<()> {
    if diff_index >= aligned_length {
        return Err(CctError::Contract(format!(
            "first differing index {diff_index} must be below aligned length {aligned_length}"
        )));
    }
    if correct.len() < aligned_length || buggy.len() < aligned_length {
        return Err(CctError::Contract(format!(
            "hidden states ({}, {}) do not cover aligned length {aligned_length}",
            correct.len(),
            buggy.len()
        )));
    }
    Ok(())
}

/// Mean unit-margin hinge over aligned code positions `[I, M)`:
/// `(1/(M-I)) * sum max(0, 1 - (r(h_correct) - r(h_buggy)))`.
pub fn token_comparison_loss(
    correct: &HiddenStates,
    buggy: &HiddenStates,
    diff_index: usize,
    aligned_length: usize,
    head: &ScalarHead,
) -> Result<f64> {
    check_alignment(correct, buggy, diff_index, aligned_length)?;
    let span = (aligned_length - diff_index) as f64;
    let sum: f64 = (diff_index..aligned_length)
        .map(|i| (TOKEN_MARGIN - (head.score(correct.row(i)) - head.score(buggy.row(i)))).max(0.0))
        .sum();
    Ok(sum / span)
}

pub struct TokenLossGrad {
    pub loss: f64,
    /// Gradient on each side's hidden rows `[0, M)`, row-major.
    pub d_correct: Vec<f64>,
    pub d_buggy: Vec<f64>,
    pub d_head: ScalarHead,
}

pub fn token_comparison_loss_grad(
    correct: &HiddenStates,
    buggy: &HiddenStates,
    diff_index: usize,
    aligned_length: usize,
    head: &ScalarHead,
) -> Result<TokenLossGrad> {
    check_alignment(correct, buggy, diff_index, aligned_length)?;
    let d = correct.d_model;
    let span = (aligned_length - diff_index) as f64;
    let mut out = TokenLossGrad {
        loss: 0.0,
        d_correct: vec![0.0; aligned_length * d],
        d_buggy: vec![0.0; aligned_length * d],
        d_head: ScalarHead::zeros(d),
    };
    for i in diff_index..aligned_length {
        let (hc, hb) = (correct.row(i), buggy.row(i));
        let slack = TOKEN_MARGIN - (head.score(hc) - head.score(hb));
        // Subgradient zero at the kink.
        if slack <= 0.0 {
            continue;
        }
        out.loss += slack;
        let g = 1.0 / span;
        for k in 0..d {
            out.d_correct[i * d + k] -= g * head.weight[k];
            out.d_buggy[i * d + k] += g * head.weight[k];
            out.d_head.weight[k] += g * (hb[k] - hc[k]);
        }
    }
    out.loss /= span;
    Ok(out)
}

/// Per-record (or batch-mean) loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub token: f64,
    pub seq: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.lm.is_finite() && self.token.is_finite() && self.seq.is_finite() && self.total.is_finite()
    }
}

/// Combines the three terms under the active weights. Disabled or missing
/// streams contribute zero and are reported as zero.
pub fn combined_loss(lm: f64, token: Option<f64>, seq: Option<f64>, config: &TrainingConfig) -> LossBreakdown {
    let (alpha, beta) = config.effective_weights();
    let token = if config.ablation.uses_token() { token.unwrap_or(0.0) } else { 0.0 };
    let seq = if config.ablation.uses_seq() { seq.unwrap_or(0.0) } else { 0.0 };
    LossBreakdown {
        lm,
        token,
        seq,
        total: lm + alpha * token + beta * seq,
    }
}

impl Ablation {
    pub fn uses_token(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoSeq)
    }

    pub fn uses_seq(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoToken)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states(rows: &[&[f64]]) -> HiddenStates {
        HiddenStates {
            d_model: rows[0].len(),
            data: rows.concat(),
        }
    }

    /// Head that reads the first coordinate, so r(h) = h[0].
    fn identity_head() -> ScalarHead {
        ScalarHead {
            weight: vec![1.0, 0.0],
            bias: 0.0,
        }
    }

    #[test]
    fn hinge_clamped() {
        let l = token_comparison_loss(&states(&[&[2.0, 0.0]]), &states(&[&[0.5, 0.0]]), 0, 1, &identity_head()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn hinge_active() {
        let l = token_comparison_loss(&states(&[&[0.2, 0.0]]), &states(&[&[0.5, 0.0]]), 0, 1, &identity_head()).unwrap();
        assert!((l - 1.3).abs() < 1e-9);
    }

    #[test]
    fn hinge_two_positions_after_diff() {
        let c = states(&[&[9.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]]);
        let b = states(&[&[-9.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]]);
        let l = token_comparison_loss(&c, &b, 1, 3, &identity_head()).unwrap();
        assert!((l - 2.0).abs() < 1e-9);
    }

    #[test]
    fn hinge_rejects_bad_alignment() {
        let c = states(&[&[0.0, 0.0]]);
        assert!(matches!(
            token_comparison_loss(&c, &c, 1, 1, &identity_head()),
            Err(CctError::Contract(_))
        ));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = vec![0.3; 2 * 8];
        let l = lm_loss(&logits, 8, &[3, 6], &[true, true]).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero() {
        let mut logits = vec![0.0; 8];
        logits[5] = 60.0;
        assert!(lm_loss(&logits, 8, &[5], &[true]).unwrap() < 1e-20);
    }

    /// Reference: softmax over [1, 2, 0] is e^[1,2,0]/(e+e^2+1); target 1 ->
    /// -ln(e^2/(e+e^2+1)). Second row [0.5, -1, 0] target 2 ->
    /// -ln(1/(e^0.5+e^-1+1)). Values computed independently in Python.
    #[test]
    fn two_position_hand_values() {
        let logits = [1.0, 2.0, 0.0, 0.5, -1.0, 0.0];
        let first = 0.407_605_964_444_380_1;
        let second = 1.104_130_605_336_728_4;
        let l = lm_loss(&logits, 3, &[1, 2], &[true, true]).unwrap();
        assert!((l - (first + second) / 2.0).abs() < 1e-12);
        let only_second = lm_loss(&logits, 3, &[1, 2], &[false, true]).unwrap();
        assert!((only_second - second).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(matches!(
            lm_loss(&[0.0; 4], 4, &[1], &[false]),
            Err(CctError::InvalidSample(_))
        ));
    }

    #[test]
    fn combined_default_weights() {
        let cfg = TrainingConfig::default();
        let b = combined_loss(1.0, Some(0.3), Some(0.4), &cfg);
        assert_eq!(b.total, 1.0 + 2.0 * 0.3 + 0.5 * 0.4);
        assert!((b.total - 1.8).abs() < 1e-15);
        let zero = TrainingConfig {
            alpha: 0.0,
            beta: 0.0,
            ..cfg.clone()
        };
        assert_eq!(combined_loss(1.0, Some(0.3), Some(0.4), &zero).total, 1.0);
        assert_eq!(combined_loss(1.0, None, None, &cfg).total, 1.0);
    }

    #[test]
    fn ablations_zero_their_terms() {
        let base = TrainingConfig::default();
        let with = |ablation| TrainingConfig { ablation, ..base.clone() };
        let b = combined_loss(1.0, Some(0.3), Some(0.4), &with(Ablation::NoSeq));
        assert_eq!((b.seq, b.total), (0.0, 1.6));
        let b = combined_loss(1.0, Some(0.3), Some(0.4), &with(Ablation::NoToken));
        assert_eq!((b.token, b.total), (0.0, 1.2));
        let b = combined_loss(1.0, Some(0.3), Some(0.4), &with(Ablation::InstructOnly));
        assert_eq!((b.token, b.seq, b.total), (0.0, 0.0, 1.0));
    }
}
