//! Next-token selection strategies and completion sampling.
//!
//! Strategies implement [`TokenSampler`] and are looked up by name in a
//! [`SamplerRegistry`]; the run configuration names the strategy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::code_model::{extract_code_blocks, render_lexemes};
use crate::error::{CctError, Result};
use crate::sample_builder::{Vocab, BOS, EOS, PAD, SEP};
use crate::trainer::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub n_samples: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Registered sampler name.
    pub strategy: String,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            top_p: 0.95,
            n_samples: 20,
            max_new_tokens: 128,
            seed: 0,
            strategy: "nucleus".into(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CctError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature >= 0.0) {
            return Err(CctError::Config("temperature must be non-negative".into()));
        }
        if self.n_samples == 0 {
            return Err(CctError::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

pub trait TokenSampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(&self, logits: &[f64], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> u32;
}

/// Always the arg-max token; ties go to the lowest id.
#[derive(Debug, Default)]
pub struct Greedy;

impl TokenSampler for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn sample(&self, logits: &[f64], _cfg: &SamplingConfig, _rng: &mut ChaCha8Rng) -> u32 {
        argmax(logits)
    }
}

/// Temperature-scaled top-p sampling. Temperature 0 falls back to greedy.
#[derive(Debug, Default)]
pub struct Nucleus;

impl TokenSampler for Nucleus {
    fn name(&self) -> &'static str {
        "nucleus"
    }

    fn sample(&self, logits: &[f64], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> u32 {
        if cfg.temperature == 0.0 {
            return argmax(logits);
        }
        let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
        let kept = nucleus(&softmax(&scaled), cfg.top_p);
        let mut u: f64 = rng.gen();
        for &(id, p) in &kept {
            if u < p {
                return id;
            }
            u -= p;
        }
        kept.last().expect("nucleus is never empty").0
    }
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best as u32
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// The smallest highest-probability prefix whose mass reaches `top_p`,
/// renormalized. Ties keep id order.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(u32, f64)> {
    let mut order: Vec<(u32, f64)> = probs.iter().enumerate().map(|(i, p)| (i as u32, *p)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut cut = order.len();
    for (i, (_, p)) in order.iter().enumerate() {
        mass += p;
        if mass >= top_p {
            cut = i + 1;
            break;
        }
    }
    order.truncate(cut);
    let total: f64 = order.iter().map(|(_, p)| p).sum();
    order.iter_mut().for_each(|(_, p)| *p /= total);
    order
}

pub struct SamplerRegistry {
    entries: Vec<Box<dyn TokenSampler>>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        Self {
            entries: vec![Box::new(Nucleus), Box::new(Greedy)],
        }
    }
}

impl fmt::Debug for SamplerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.entries.iter().map(|s| s.name()))
            .finish()
    }
}

impl SamplerRegistry {
    pub fn register(&mut self, sampler: Box<dyn TokenSampler>) {
        self.entries.retain(|s| s.name() != sampler.name());
        self.entries.push(sampler);
    }

    pub fn get(&self, name: &str) -> Result<&dyn TokenSampler> {
        self.entries
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| CctError::Config(format!("unknown sampling strategy `{name}`")))
    }
}

/// Candidate program text from a raw completion: the first fenced block when
/// there is one, otherwise the whole completion.
pub fn candidate_from_completion(text: &str) -> String {
    if text.contains("```") {
        if let Some(b) = extract_code_blocks(text).into_iter().find(|b| b.fenced) {
            return b.text;
        }
    }
    text.to_string()
}

/// Renders generated ids as source text, dropping control ids.
pub fn render_ids(vocab: &Vocab, ids: &[u32]) -> String {
    let lexemes: Vec<&str> = ids
        .iter()
        .filter(|&&id| !matches!(id, PAD | BOS | SEP | EOS))
        .map(|&id| vocab.lexeme(id))
        .collect();
    render_lexemes(&lexemes)
}

/// Draws `cfg.n_samples` completions of `prompt` from one seeded stream.
pub fn sample_completions(
    model: &Model,
    vocab: &Vocab,
    prompt: &str,
    cfg: &SamplingConfig,
    sampler: &dyn TokenSampler,
    stream: u64,
) -> Result<Vec<String>> {
    let ids = vocab.encode_prompt(prompt, None);
    let ctx = model.config.context_length;
    if ids.len() >= ctx {
        return Err(CctError::Contract(format!(
            "prompt of {} tokens leaves no room in context {ctx}",
            ids.len()
        )));
    }
    let mut prefix = model.decoder();
    let mut last = Vec::new();
    for &id in &ids {
        last = prefix.step(id)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let mut dec = prefix.clone();
        let mut logits = last.clone();
        let mut generated = Vec::new();
        while generated.len() < cfg.max_new_tokens {
            let next = sampler.sample(&logits, cfg, &mut rng);
            if next == EOS {
                break;
            }
            generated.push(next);
            if dec.len() >= ctx {
                break;
            }
            logits = dec.step(next)?;
        }
        out.push(render_ids(vocab, &generated));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_keeps_two_of_three() {
        let kept = nucleus(&[0.6, 0.3, 0.1], 0.8);
        assert_eq!(kept.len(), 2);
        assert!((kept[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((kept[1].1 - 1.0 / 3.0).abs() < 1e-12);
    }

    /// Monte Carlo check of the renormalized nucleus frequencies.
    #[test]
    fn nucleus_frequencies() {
        let logits: Vec<f64> = [0.6f64, 0.3, 0.1].iter().map(|p| p.ln()).collect();
        let cfg = SamplingConfig {
            temperature: 1.0,
            top_p: 0.8,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        let draws = 20_000;
        for _ in 0..draws {
            counts[Nucleus.sample(&logits, &cfg, &mut rng) as usize] += 1;
        }
        assert_eq!(counts[2], 0);
        let f0 = counts[0] as f64 / draws as f64;
        assert!((f0 - 2.0 / 3.0).abs() < 0.015, "{counts:?}");
    }

    #[test]
    fn full_nucleus_is_ancestral() {
        let probs = [0.5, 0.25, 0.125, 0.125];
        let kept = nucleus(&probs, 1.0);
        assert_eq!(kept.len(), 4);
        for (id, p) in kept {
            assert!((p - probs[id as usize]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let cfg = SamplingConfig {
            temperature: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(Nucleus.sample(&[0.1, 2.0, 1.9], &cfg, &mut rng), 1);
        }
    }

    #[test]
    fn config_bounds() {
        let bad = SamplingConfig {
            top_p: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(SamplingConfig::default().validate().is_ok());
    }

    #[test]
    fn registry_lookup() {
        let reg = SamplerRegistry::default();
        assert_eq!(reg.get("greedy").unwrap().name(), "greedy");
        assert!(reg.get("beam").is_err());
    }

    #[test]
    fn completion_fence_extraction() {
        assert_eq!(candidate_from_completion("x = 1\n"), "x = 1\n");
        assert_eq!(
            candidate_from_completion("Fixed:\n```python\nx = 2\n```\nDone"),
            "x = 2\n"
        );
    }
}
