//! Shared oracles for the integration tests.
#![allow(dead_code)]

use cct_core::code_model::CodeBlock;
use cct_core::mutation::make_counterpart;
use cct_core::sample_builder::{assemble_record, InstructionSample, Vocab, TEMPLATES};
use cct_core::trainer::{
    lm_loss, token_comparison_loss, EncodedRecord, Model, ModelConfig, Objective, ParamTensors,
    Trainer, TrainingConfig,
};
use cct_core::sample_builder::PAD;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-6;

/// A tiny trainer and one record carrying all three streams.
pub fn grad_fixture(d_model: usize, n_layers: usize) -> (Trainer, EncodedRecord) {
    let sample = InstructionSample::new(
        "Write a function f that returns the larger of a and b .",
        "def f(a, b):\n    if a > b:\n        return a\n    return b\n",
    );
    let vocab = Vocab::for_samples(std::slice::from_ref(&sample), 256);
    let pair = make_counterpart(&CodeBlock::whole(sample.output.as_str()), 5).expect("mutable");
    let record = assemble_record("0".into(), &sample, Some(&pair), &TEMPLATES[2], &vocab);
    let enc = EncodedRecord::encode(&record, &vocab);
    let model = Model::new(ModelConfig {
        vocab_size: vocab.len(),
        d_model,
        n_layers,
        n_heads: 2,
        context_length: enc.max_len() + 2,
        seed: 11,
    })
    .unwrap();
    let mut trainer = Trainer::new(model, TrainingConfig::default()).unwrap();
    // A head large enough that the hinge contributes non-trivially.
    for (i, w) in trainer.head.weight.iter_mut().enumerate() {
        *w = 0.3 * ((i as f64 * 1.7).sin());
    }
    trainer.head.bias = 0.1;
    (trainer, enc)
}

/// Forward-only value of `objective`, recomputed from the model and loss
/// definitions without any backward code.
pub fn objective_value(t: &Trainer, rec: &EncodedRecord, objective: Objective) -> f64 {
    let v = t.model.config.vocab_size;
    let lm_of = |ex: &cct_core::sample_builder::LmExample| {
        let (inputs, targets, mask) = ex.inputs_targets_mask();
        let out = t.model.forward(inputs).unwrap();
        lm_loss(&out.logits, v, targets, &mask).unwrap()
    };
    let token = || {
        let cmp = rec.comparison.as_ref().unwrap();
        let (p, m) = (cmp.prompt_tokens.len(), cmp.aligned_length);
        let hidden = |code: &[u32]| {
            let mut ids = cmp.prompt_tokens.clone();
            ids.extend_from_slice(code);
            ids.resize(p + m, PAD);
            t.model.forward(&ids).unwrap().hidden.slice(p, p + m)
        };
        token_comparison_loss(
            &hidden(&cmp.correct_tokens),
            &hidden(&cmp.buggy_tokens),
            cmp.diff_index,
            m,
            &t.head,
        )
        .unwrap()
    };
    let seq = || lm_of(rec.seq.as_ref().unwrap());
    match objective {
        Objective::Lm => lm_of(&rec.lm),
        Objective::Token => token(),
        Objective::Seq => seq(),
        Objective::Total => lm_of(&rec.lm) + t.config.alpha * token() + t.config.beta * seq(),
    }
}

fn flatten(p: &dyn ParamTensors) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit(&mut |n, t| out.push((n.to_string(), t.to_vec())));
    out
}

fn nudge(t: &mut Trainer, tensor: usize, elem: usize, delta: f64) {
    let n_model = flatten(&t.model.params).len();
    let (target, start) = if tensor < n_model { (tensor, 0) } else { (tensor, n_model) };
    let mut i = start;
    let mut f = |_: &str, xs: &mut [f64]| {
        if i == target {
            xs[elem] += delta;
        }
        i += 1;
    };
    if tensor < n_model {
        t.model.params.visit_mut(&mut f);
    } else {
        t.head.visit_mut(&mut f);
    }
}

#[derive(Debug, Clone)]
pub struct TensorError {
    pub name: String,
    pub rel: f64,
}

/// Central-difference check of every parameter tensor. Returns the
/// relative error `|g - g_fd| / max(|g|, |g_fd|, GRAD_FLOOR)` (Euclidean
/// norms) per tensor. The floor keeps tensors whose true gradient is zero
/// (such as the final LayerNorm bias under the token loss, which shifts
/// both sides' scores equally) from dividing rounding noise by itself.
pub fn gradient_errors(t: &mut Trainer, rec: &EncodedRecord, objective: Objective) -> Vec<TensorError> {
    let (_, grads) = t.objective_grads(rec, objective).unwrap();
    let mut analytic = flatten(&grads.params);
    analytic.extend(flatten(&grads.head));
    let mut errors = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; g.len()];
        for (e, slot) in fd.iter_mut().enumerate() {
            nudge(t, ti, e, FD_EPS);
            let up = objective_value(t, rec, objective);
            nudge(t, ti, e, -2.0 * FD_EPS);
            let down = objective_value(t, rec, objective);
            nudge(t, ti, e, FD_EPS);
            *slot = (up - down) / (2.0 * FD_EPS);
        }
        let norm = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(g).max(norm(&fd)).max(GRAD_FLOOR);
        errors.push(TensorError {
            name: name.clone(),
            rel,
        });
    }
    errors
}

/// Exact pass@k by enumerating every k-subset of n samples with the first
/// `c` correct, in integer arithmetic.
pub fn pass_at_k_enumerated(n: usize, c: usize, k: usize) -> f64 {
    fn walk(start: usize, left: usize, n: usize, c: usize, hit: bool, total: &mut u64, good: &mut u64) {
        if left == 0 {
            *total += 1;
            if hit {
                *good += 1;
            }
            return;
        }
        for i in start..n {
            walk(i + 1, left - 1, n, c, hit || i < c, total, good);
        }
    }
    let (mut total, mut good) = (0, 0);
    walk(0, k, n, c, false, &mut total, &mut good);
    good as f64 / total as f64
}

use cct_core::pipeline::{write_synthetic_corpus, RunConfig};
use std::path::{Path, PathBuf};

/// Writes a small synthetic corpus and a fast configuration into `dir`.
pub fn tiny_run(dir: &Path, extra: &str) -> PathBuf {
    write_synthetic_corpus(
        3,
        45,
        12,
        &dir.join("data/train.jsonl"),
        &dir.join("data/held_out.jsonl"),
    )
    .unwrap();
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "seed = 7\nd_model = 16\nn_layers = 1\nn_heads = 2\ncontext_length = 128\n\
             learning_rate = 0.003\nbatch_size = 8\nepochs = 2\nn_samples = 4\n\
             max_new_tokens = 48\nsandbox_workers = 2\n{extra}"
        ),
    )
    .unwrap();
    cfg
}

pub fn load(cfg: &Path, overrides: &[(&str, &str)]) -> RunConfig {
    let o: Vec<(String, String)> = overrides
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    RunConfig::load(cfg, &o).unwrap()
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
