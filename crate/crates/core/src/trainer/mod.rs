//! Training with the combined objective
//! `L = L_lm + alpha * L_token + beta * L_seq`.
//!
//! Each record costs up to four forward/backward passes: the LM sample, the
//! correct and buggy sides of its comparison (hidden states only, scored by
//! the [`ScalarHead`]), and the template-rendered fix sample.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

pub use loss::{
    combined_loss, lm_loss, lm_loss_grad, token_comparison_loss, token_comparison_loss_grad,
    LossBreakdown, ScalarHead,
};
pub use model::{Decoder, ForwardOutput, HiddenStates, Model, ModelConfig, ParamTensors, Params};
pub use optim::AdamW;

use crate::error::{CctError, Result};
use crate::sample_builder::{CctRecord, ComparisonSample, LmExample, Vocab, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoSeq,
    NoToken,
    InstructOnly,
    /// Sequence-level samples mixed in as ordinary instruction data.
    SeqDataOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoSeq,
        Ablation::NoToken,
        Ablation::InstructOnly,
        Ablation::SeqDataOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSeq => "no_seq",
            Ablation::NoToken => "no_token",
            Ablation::InstructOnly => "instruct_only",
            Ablation::SeqDataOnly => "seq_data_only",
        }
    }
}

impl FromStr for Ablation {
    type Err = CctError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CctError::Config(format!("unknown ablation `{s}`")))
    }
}

/// How the learning rate evolves over the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from the base rate to zero at the last step.
    Linear,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Linear => "linear",
        }
    }
}

impl FromStr for LrSchedule {
    type Err = CctError;

    fn from_str(s: &str) -> Result<Self> {
        [LrSchedule::Constant, LrSchedule::Linear]
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| CctError::Config(format!("unknown lr_schedule `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.5,
            learning_rate: 2e-5,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 1,
            seed: 0,
            ablation: Ablation::Full,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(CctError::Config("alpha and beta must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(CctError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for zero-based `step` of a `total_steps` run.
    pub fn learning_rate_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Linear => {
                self.learning_rate * (1.0 - step as f64 / total_steps.max(1) as f64)
            }
        }
    }

    /// Loss weights after the ablation is applied.
    pub fn effective_weights(&self) -> (f64, f64) {
        let alpha = if self.ablation.uses_token() { self.alpha } else { 0.0 };
        let beta = if self.ablation.uses_seq() { self.beta } else { 0.0 };
        (alpha, beta)
    }
}

/// A single term of the objective, or the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Lm,
    Token,
    Seq,
    Total,
}

/// A record with every stream already mapped to ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRecord {
    pub id: String,
    pub lm: LmExample,
    pub comparison: Option<ComparisonSample>,
    pub seq: Option<LmExample>,
}

impl EncodedRecord {
    pub fn encode(record: &CctRecord, vocab: &Vocab) -> Self {
        Self {
            id: record.id.clone(),
            lm: vocab.encode_sample(&record.lm),
            comparison: record.comparison.clone(),
            seq: record.seq.as_ref().map(|s| vocab.encode_sample(s)),
        }
    }

    /// Longest forward pass this record needs.
    pub fn max_len(&self) -> usize {
        let lm = self.lm.ids.len() - 1;
        let cmp = self
            .comparison
            .as_ref()
            .map_or(0, |c| c.prompt_tokens.len() + c.aligned_length);
        let seq = self.seq.as_ref().map_or(0, |s| s.ids.len() - 1);
        lm.max(cmp).max(seq)
    }
}

/// Training items for an ablation. Under `SeqDataOnly` every fix sample
/// becomes a standalone LM item placed right after its source record.
pub fn prepare_items(records: &[CctRecord], vocab: &Vocab, ablation: Ablation) -> Vec<EncodedRecord> {
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        let enc = EncodedRecord::encode(r, vocab);
        if ablation == Ablation::SeqDataOnly {
            let seq = enc.seq.clone();
            items.push(EncodedRecord {
                comparison: None,
                seq: None,
                ..enc
            });
            if let Some(seq) = seq {
                items.push(EncodedRecord {
                    id: format!("{}.seq", r.id),
                    lm: seq,
                    comparison: None,
                    seq: None,
                });
            }
        } else {
            items.push(enc);
        }
    }
    items
}

/// Model, scoring head, and optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub head: ScalarHead,
    pub config: TrainingConfig,
    pub optimizer: AdamW,
}

/// Gradient accumulators shaped like the trainable state.
#[derive(Debug, Clone)]
pub struct Grads {
    pub params: Params,
    pub head: ScalarHead,
}

impl Grads {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            params: Params::zeros(cfg),
            head: ScalarHead::zeros(cfg.d_model),
        }
    }
}

fn lm_pass(
    model: &Model,
    ex: &LmExample,
    scale: f64,
    grads: Option<&mut Params>,
) -> Result<f64> {
    let (inputs, targets, mask) = ex.inputs_targets_mask();
    let acts = model.forward_cached(inputs, true)?;
    let v = model.config.vocab_size;
    match grads {
        Some(g) => {
            let (loss, mut dlogits) = lm_loss_grad(&acts.logits, v, targets, &mask)?;
            dlogits.iter_mut().for_each(|x| *x *= scale);
            model.backward(&acts, Some(&dlogits), None, g);
            Ok(loss)
        }
        None => lm_loss(&acts.logits, v, targets, &mask),
    }
}

fn comparison_pass(
    model: &Model,
    head: &ScalarHead,
    cmp: &ComparisonSample,
    scale: f64,
    grads: Option<&mut Grads>,
) -> Result<f64> {
    let m = cmp.aligned_length;
    let p = cmp.prompt_tokens.len();
    let padded = |code: &[u32]| {
        let mut ids = cmp.prompt_tokens.clone();
        ids.extend_from_slice(code);
        ids.resize(p + m, PAD);
        ids
    };
    let acts_c = model.forward_cached(&padded(&cmp.correct_tokens), false)?;
    let acts_b = model.forward_cached(&padded(&cmp.buggy_tokens), false)?;
    let hc = acts_c.hidden.slice(p, p + m);
    let hb = acts_b.hidden.slice(p, p + m);
    let Some(grads) = grads else {
        return token_comparison_loss(&hc, &hb, cmp.diff_index, m, head);
    };
    let tg = token_comparison_loss_grad(&hc, &hb, cmp.diff_index, m, head)?;
    let d = model.config.d_model;
    let widen = |rows: &[f64]| {
        let mut full = vec![0.0; (p + m) * d];
        full[p * d..]
            .iter_mut()
            .zip(rows)
            .for_each(|(f, r)| *f = r * scale);
        full
    };
    model.backward(&acts_c, None, Some(&widen(&tg.d_correct)), &mut grads.params);
    model.backward(&acts_b, None, Some(&widen(&tg.d_buggy)), &mut grads.params);
    for (g, t) in grads.head.weight.iter_mut().zip(&tg.d_head.weight) {
        *g += scale * t;
    }
    grads.head.bias += scale * tg.d_head.bias;
    Ok(tg.loss)
}

impl Trainer {
    pub fn new(model: Model, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let head = ScalarHead::new(model.config.d_model, model.config.seed);
        let optimizer = AdamW::new(config.learning_rate, config.weight_decay, &[&model.params, &head]);
        Ok(Self {
            model,
            head,
            config,
            optimizer,
        })
    }

    /// Raw stream losses of one record. With `grads`, accumulates the
    /// gradient of `w_lm * lm + w_token * token + w_seq * seq`. Streams
    /// with weight zero are skipped and reported as `None`.
    fn stream_losses(
        &self,
        rec: &EncodedRecord,
        (w_lm, w_token, w_seq): (f64, f64, f64),
        mut grads: Option<&mut Grads>,
    ) -> Result<(f64, Option<f64>, Option<f64>)> {
        let lm = lm_pass(&self.model, &rec.lm, w_lm, grads.as_deref_mut().map(|g| &mut g.params))?;
        let token = match &rec.comparison {
            Some(cmp) if w_token != 0.0 => Some(comparison_pass(
                &self.model,
                &self.head,
                cmp,
                w_token,
                grads.as_deref_mut(),
            )?),
            _ => None,
        };
        let seq = match &rec.seq {
            Some(s) if w_seq != 0.0 => Some(lm_pass(
                &self.model,
                s,
                w_seq,
                grads.as_deref_mut().map(|g| &mut g.params),
            )?),
            _ => None,
        };
        Ok((lm, token, seq))
    }

    /// Loss of one record; with `grads`, also accumulates `scale` times the
    /// gradient of its total.
    pub fn record_loss(
        &self,
        rec: &EncodedRecord,
        scale: f64,
        grads: Option<&mut Grads>,
    ) -> Result<LossBreakdown> {
        let (alpha, beta) = self.config.effective_weights();
        let weights = (
            scale,
            if self.config.ablation.uses_token() { scale * alpha } else { 0.0 },
            if self.config.ablation.uses_seq() { scale * beta } else { 0.0 },
        );
        let (lm, token, seq) = self.stream_losses(rec, weights, grads)?;
        let breakdown = combined_loss(lm, token, seq, &self.config);
        if !breakdown.is_finite() {
            return Err(CctError::NonFiniteLoss {
                record: rec.id.clone(),
                value: breakdown.total,
            });
        }
        Ok(breakdown)
    }

    /// Value and gradient of one part of the objective for a single record,
    /// ignoring the ablation setting (but not alpha and beta for `Total`).
    pub fn objective_grads(&self, rec: &EncodedRecord, objective: Objective) -> Result<(f64, Grads)> {
        let mut grads = Grads::zeros(&self.model.config);
        let (alpha, beta) = (self.config.alpha, self.config.beta);
        let weights = match objective {
            Objective::Lm => (1.0, 0.0, 0.0),
            Objective::Token => (0.0, 1.0, 0.0),
            Objective::Seq => (0.0, 0.0, 1.0),
            Objective::Total => (1.0, alpha, beta),
        };
        let (lm, token, seq) = self.stream_losses(rec, weights, Some(&mut grads))?;
        let missing = || CctError::Contract(format!("record {} has no comparison stream", rec.id));
        let value = match objective {
            Objective::Lm => lm,
            Objective::Token => token.ok_or_else(missing)?,
            Objective::Seq => seq.ok_or_else(missing)?,
            Objective::Total => lm + alpha * token.unwrap_or(0.0) + beta * seq.unwrap_or(0.0),
        };
        Ok((value, grads))
    }

    /// Mean loss and gradient over a batch. Records are reduced in batch
    /// order.
    pub fn batch_grads(&self, batch: &[EncodedRecord]) -> Result<(LossBreakdown, Grads)> {
        if batch.is_empty() {
            return Err(CctError::Contract("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Grads::zeros(&self.model.config);
        let mut mean = LossBreakdown::default();
        for rec in batch {
            let b = self.record_loss(rec, scale, Some(&mut grads))?;
            mean.lm += b.lm * scale;
            mean.token += b.token * scale;
            mean.seq += b.seq * scale;
            mean.total += b.total * scale;
        }
        Ok((mean, grads))
    }

    /// One optimizer update on the mean batch loss.
    pub fn train_step(&mut self, batch: &[EncodedRecord]) -> Result<LossBreakdown> {
        let (loss, grads) = self.batch_grads(batch)?;
        self.optimizer.update(
            &mut [&mut self.model.params, &mut self.head],
            &[&grads.params, &grads.head],
        );
        Ok(loss)
    }

    /// Runs steps `[self.optimizer.step, schedule.total_steps())`, calling
    /// `on_step` after each. Stops early when `on_step` returns false.
    pub fn fit(
        &mut self,
        items: &[EncodedRecord],
        mut on_step: impl FnMut(u64, &LossBreakdown, &Trainer) -> Result<bool>,
    ) -> Result<()> {
        let longest = items.iter().map(EncodedRecord::max_len).max().unwrap_or(0);
        if longest > self.model.config.context_length {
            return Err(CctError::Config(format!(
                "context_length {} is shorter than the longest record ({longest} tokens)",
                self.model.config.context_length
            )));
        }
        let schedule = Schedule::new(items.len(), self.config.batch_size, self.config.epochs, self.config.seed);
        while self.optimizer.step < schedule.total_steps() {
            let batch: Vec<EncodedRecord> = schedule
                .batch(self.optimizer.step)
                .into_iter()
                .map(|i| items[i].clone())
                .collect();
            self.optimizer.learning_rate =
                self.config.learning_rate_at(self.optimizer.step, schedule.total_steps());
            let loss = self.train_step(&batch)?;
            if !on_step(self.optimizer.step, &loss, self)? {
                break;
            }
        }
        Ok(())
    }
}

/// Deterministic batch order: each epoch is a seeded shuffle cut into
/// consecutive batches, so any global step maps to its batch directly.
#[derive(Debug, Clone)]
pub struct Schedule {
    n: usize,
    batch_size: usize,
    epochs: usize,
    seed: u64,
}

impl Schedule {
    pub fn new(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size,
            epochs,
            seed,
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.n.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.epochs as u64
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Item indices of zero-based global step `step`.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let order = self.epoch_order(step / spe);
        let start = (step % spe) as usize * self.batch_size;
        order[start..(start + self.batch_size).min(self.n)].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_every_item_each_epoch() {
        let s = Schedule::new(10, 4, 2, 9);
        assert_eq!(s.total_steps(), 6);
        for epoch in 0..2 {
            let mut seen: Vec<usize> = (0..3).flat_map(|b| s.batch(epoch * 3 + b)).collect();
            seen.sort();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
        assert_ne!(s.epoch_order(0), s.epoch_order(1));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn linear_schedule_decays_to_zero() {
        let cfg = TrainingConfig {
            learning_rate: 0.01,
            lr_schedule: LrSchedule::Linear,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate_at(0, 4), 0.01);
        assert!((cfg.learning_rate_at(3, 4) - 0.0025).abs() < 1e-15);
        let flat = TrainingConfig::default();
        assert_eq!(flat.learning_rate_at(3, 4), flat.learning_rate);
        assert!("cosine".parse::<LrSchedule>().is_err());
    }

    #[test]
    fn negative_weights_rejected() {
        let cfg = TrainingConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
