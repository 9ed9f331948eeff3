//! Bug-fix benchmark construction and pass@k evaluation.

pub mod pass_at_k;
pub mod sampling;
pub mod sandbox;

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

pub use pass_at_k::pass_at_k;
pub use sampling::{
    candidate_from_completion, sample_completions, Greedy, Nucleus, SamplerRegistry,
    SamplingConfig, TokenSampler,
};
pub use sandbox::{Outcome, Sandbox, SandboxConfig};

use crate::code_model::CodeBlock;
use crate::error::{CctError, Result};
use crate::mutation::MutationEngine;
use crate::sample_builder::{record_seeds, Vocab, TEMPLATES};
use crate::trainer::Model;

fn default_timeout() -> f64 {
    5.0
}

/// A correct function with the tests it passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutFunction {
    pub task_id: String,
    pub instruction: String,
    pub reference: String,
    pub tests: String,
    pub entry_point: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task_id: String,
    pub prompt: String,
    pub reference: String,
    pub tests: String,
    pub entry_point: String,
    pub timeout_s: f64,
    /// The buggy function shown in the prompt, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buggy: Option<String>,
}

impl EvalTask {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s.max(0.0))
    }

    /// The program run for a candidate: the candidate followed by the tests.
    pub fn program(&self, candidate: &str) -> String {
        let mut src = candidate.trim_end().to_string();
        src.push_str("\n\n\n");
        src.push_str(&self.tests);
        if !src.ends_with('\n') {
            src.push('\n');
        }
        src
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task_id: String,
    pub n: usize,
    pub correct: usize,
    /// Keyed `pass_at_{k}`.
    #[serde(flatten)]
    pub pass_at_k: BTreeMap<String, f64>,
}

impl EvalResult {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at_k.get(&format!("pass_at_{k}")).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub results: Vec<EvalResult>,
    /// Unweighted mean over tasks, per k.
    pub corpus: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSuite {
    pub tasks: Vec<EvalTask>,
    pub discarded: usize,
}

/// Bug-fix prompt for `instruction` and the buggy code.
pub fn fix_prompt(instruction: &str, buggy: &str) -> String {
    TEMPLATES[0].fill(instruction, buggy)
}

/// One task per function whose seeded mutant the tests detect. Functions
/// without a mutation site, whose reference fails, or whose mutant still
/// passes are dropped.
pub fn build_eval_suite(
    held_out: &[HeldOutFunction],
    seed: u64,
    sandbox: &Sandbox,
) -> Result<EvalSuite> {
    let engine = MutationEngine::default();
    let mut drafts = Vec::new();
    for (i, f) in held_out.iter().enumerate() {
        let (mutation_seed, _) = record_seeds(seed, i);
        let Some(pair) = engine.make_counterpart(&CodeBlock::whole(f.reference.as_str()), mutation_seed)
        else {
            continue;
        };
        drafts.push(EvalTask {
            task_id: f.task_id.clone(),
            prompt: fix_prompt(&f.instruction, &pair.buggy),
            reference: f.reference.clone(),
            tests: f.tests.clone(),
            entry_point: f.entry_point.clone(),
            timeout_s: f.timeout_s,
            buggy: Some(pair.buggy),
        });
    }
    let jobs: Vec<_> = drafts
        .iter()
        .flat_map(|t| {
            let buggy = t.buggy.as_deref().expect("drafts carry their mutant");
            [
                (t.program(&t.reference), t.timeout()),
                (t.program(buggy), t.timeout()),
            ]
        })
        .collect();
    let outcomes = sandbox.run_many(&jobs);
    let tasks: Vec<EvalTask> = drafts
        .into_iter()
        .zip(outcomes.chunks(2))
        .filter(|(_, o)| o[0].passed() && !o[1].passed())
        .map(|(t, _)| t)
        .collect();
    let discarded = held_out.len() - tasks.len();
    if discarded > 0 {
        log::info!("eval suite: kept {} tasks, discarded {discarded}", tasks.len());
    }
    Ok(EvalSuite { tasks, discarded })
}

/// Produces raw completions for a task.
pub trait CompletionSource {
    fn complete(&self, task: &EvalTask, cfg: &SamplingConfig, stream: u64) -> Result<Vec<String>>;
}

pub struct ModelCompletions<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub sampler: &'a dyn TokenSampler,
}

impl CompletionSource for ModelCompletions<'_> {
    fn complete(&self, task: &EvalTask, cfg: &SamplingConfig, stream: u64) -> Result<Vec<String>> {
        sample_completions(self.model, self.vocab, &task.prompt, cfg, self.sampler, stream)
    }
}

/// Samples, executes, and scores every task. Identical candidates within a
/// task run once.
pub fn evaluate(
    source: &dyn CompletionSource,
    tasks: &[EvalTask],
    sampling: &SamplingConfig,
    sandbox: &Sandbox,
    ks: &[usize],
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(CctError::Contract("no tasks to evaluate".into()));
    }
    sampling.validate()?;
    let mut results = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let candidates: Vec<String> = source
            .complete(task, sampling, i as u64)?
            .iter()
            .map(|c| candidate_from_completion(c))
            .collect();
        let mut unique: Vec<&str> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for c in &candidates {
            slot.entry(c.as_str()).or_insert_with(|| {
                unique.push(c);
                unique.len() - 1
            });
        }
        let jobs: Vec<_> = unique
            .iter()
            .map(|c| (task.program(c), task.timeout()))
            .collect();
        let outcomes = sandbox.run_many(&jobs);
        let n = candidates.len();
        let correct = candidates
            .iter()
            .filter(|c| outcomes[slot[c.as_str()]].passed())
            .count();
        let mut pass = BTreeMap::new();
        for &k in ks.iter().filter(|&&k| k <= n) {
            pass.insert(format!("pass_at_{k}"), pass_at_k(n, correct, k)?);
        }
        results.push(EvalResult {
            task_id: task.task_id.clone(),
            n,
            correct,
            pass_at_k: pass,
        });
    }
    let mut corpus = BTreeMap::new();
    for &k in ks {
        let scores: Vec<f64> = results.iter().filter_map(|r| r.pass_at(k)).collect();
        if !scores.is_empty() {
            corpus.insert(k, scores.iter().sum::<f64>() / scores.len() as f64);
        }
    }
    Ok(EvalReport { results, corpus })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed<F: Fn(&EvalTask) -> String>(F);

    impl<F: Fn(&EvalTask) -> String> CompletionSource for Fixed<F> {
        fn complete(&self, task: &EvalTask, cfg: &SamplingConfig, _: u64) -> Result<Vec<String>> {
            Ok(vec![(self.0)(task); cfg.n_samples])
        }
    }

    fn held_out() -> Vec<HeldOutFunction> {
        vec![
            HeldOutFunction {
                task_id: "bigger".into(),
                instruction: "Return the larger of a and b.".into(),
                reference: "def bigger(a, b):\n    if a > b:\n        return a\n    return b\n".into(),
                tests: "assert bigger(1, 2) == 2\nassert bigger(5, 3) == 5\n".into(),
                entry_point: "bigger".into(),
                timeout_s: 5.0,
            },
            HeldOutFunction {
                task_id: "const".into(),
                instruction: "Return one.".into(),
                reference: "def const():\n    return 1\n".into(),
                tests: "assert const() == 1\n".into(),
                entry_point: "const".into(),
                timeout_s: 5.0,
            },
        ]
    }

    fn sandbox() -> Sandbox {
        Sandbox::new(&SandboxConfig::default()).unwrap()
    }

    #[test]
    fn suite_drops_unmutable_and_keeps_detectable() {
        let sb = sandbox();
        let suite = build_eval_suite(&held_out(), 4, &sb).unwrap();
        // `const` has no mutation site.
        assert!(suite.tasks.iter().all(|t| t.task_id != "const"));
        for t in &suite.tasks {
            assert_eq!(sb.run(&t.program(&t.reference), t.timeout()), Outcome::Pass);
            assert!(!sb.run(&t.program(t.buggy.as_ref().unwrap()), t.timeout()).passed());
        }
        assert_eq!(build_eval_suite(&held_out(), 4, &sb).unwrap(), suite);
    }

    #[test]
    fn undetectable_mutant_discarded() {
        // Only edit: `a > b` -> `b > b`-style swaps and operator swaps; with
        // a test that only checks ties nothing is detectable.
        let f = HeldOutFunction {
            task_id: "tie".into(),
            instruction: "Return a.".into(),
            reference: "def tie(a, b):\n    return a == b or True\n".into(),
            tests: "assert tie(1, 1)\n".into(),
            entry_point: "tie".into(),
            timeout_s: 5.0,
        };
        let suite = build_eval_suite(&[f], 0, &sandbox()).unwrap();
        assert!(suite.tasks.is_empty());
        assert_eq!(suite.discarded, 1);
    }

    #[test]
    fn oracle_models_score_one_and_zero() {
        let sb = sandbox();
        let suite = build_eval_suite(&held_out(), 4, &sb).unwrap();
        assert!(!suite.tasks.is_empty());
        let cfg = SamplingConfig {
            n_samples: 3,
            ..Default::default()
        };
        let good = evaluate(&Fixed(|t: &EvalTask| t.reference.clone()), &suite.tasks, &cfg, &sb, &[1]).unwrap();
        assert_eq!(good.corpus[&1], 1.0);
        let bad = evaluate(
            &Fixed(|t: &EvalTask| t.buggy.clone().unwrap()),
            &suite.tasks,
            &cfg,
            &sb,
            &[1],
        )
        .unwrap();
        assert_eq!(bad.corpus[&1], 0.0);
        assert_eq!(bad.results[0].correct, 0);
        assert_eq!(bad.results[0].n, 3);
    }

    #[test]
    fn result_json_shape() {
        let r = EvalResult {
            task_id: "t".into(),
            n: 20,
            correct: 10,
            pass_at_k: BTreeMap::from([("pass_at_1".to_string(), 0.5)]),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"task_id":"t","n":20,"correct":10,"pass_at_1":0.5}"#);
        assert_eq!(serde_json::from_str::<EvalResult>(&s).unwrap(), r);
    }
}
