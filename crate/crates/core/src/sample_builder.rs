//! Training data for the three objective streams.
//!
//! Every instruction record yields a plain LM sample. When its first code
//! block admits a mutation, the record also carries a token-aligned
//! comparison between the correct and buggy code and a template-rendered
//! "fix this code" sample whose target is the correct code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::code_model::{extract_code_blocks, tokenize, CodeBlock, NEWLINE_LEXEME};
use crate::error::{CctError, Result};
use crate::mutation::{MutantPair, MutationEngine};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub instruction: String,
    #[serde(default)]
    pub input: Option<String>,
    pub output: String,
}

impl InstructionSample {
    pub fn new(instruction: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            input: None,
            output: output.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() || self.output.trim().is_empty() {
            return Err(CctError::InvalidSample(
                "instruction and output must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

pub const INSTRUCTION_SLOT: &str = "<Instruction>";
pub const BUG_SLOT: &str = "<Bug output>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub id: u8,
    pub body: &'static str,
}

/// The shipped sequence-level comparison templates.
pub const TEMPLATES: [Template; 3] = [
    Template {
        id: 1,
        body: "Given the instruction: <Instruction>\nHere is a piece of code with bugs: <Bug output>\nFix the bugs in the code.",
    },
    Template {
        id: 2,
        body: "<Bug output> is the code implementation of <Instruction>,\nHowever, there are some bugs in the code\nPlease fix bugs in the code.",
    },
    Template {
        id: 3,
        body: "Find the bugs in the <Bug output>",
    },
];

impl Template {
    pub fn by_id(id: u8) -> Option<Template> {
        TEMPLATES.iter().copied().find(|t| t.id == id)
    }

    /// Fills both slots in one left-to-right pass, so slot text appearing
    /// inside the substituted values is never expanded again.
    pub fn fill(&self, instruction: &str, bug_output: &str) -> String {
        let mut out = String::with_capacity(self.body.len() + instruction.len() + bug_output.len());
        let mut rest = self.body;
        loop {
            let next_instr = rest.find(INSTRUCTION_SLOT);
            let next_bug = rest.find(BUG_SLOT);
            let (at, slot, value) = match (next_instr, next_bug) {
                (Some(i), Some(b)) if i < b => (i, INSTRUCTION_SLOT, instruction),
                (Some(i), None) => (i, INSTRUCTION_SLOT, instruction),
                (_, Some(b)) => (b, BUG_SLOT, bug_output),
                (None, None) => break,
            };
            out.push_str(&rest[..at]);
            out.push_str(value);
            rest = &rest[at + slot.len()..];
        }
        out.push_str(rest);
        out
    }
}

pub fn render_template(
    template: &Template,
    instr: &InstructionSample,
    pair: &MutantPair,
) -> InstructionSample {
    InstructionSample {
        instruction: template.fill(&instr.instruction, &pair.buggy),
        input: None,
        output: pair.correct.clone(),
    }
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Separates the prompt from the response.
pub const SEP: u32 = 4;
const RESERVED: [&str; 5] = ["<PAD>", "<BOS>", "<EOS>", "<UNK>", "<SEP>"];
pub const DEFAULT_VOCAB_CAP: usize = 8192;

/// Lexeme-level vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    lexemes: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    lexemes: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Self::from_lexemes(f.lexemes)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { lexemes: v.lexemes }
    }
}

impl Vocab {
    /// Builds from full lexeme list, reserved entries first.
    pub fn from_lexemes(lexemes: Vec<String>) -> Self {
        let index = lexemes
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i as u32))
            .collect();
        Self { lexemes, index }
    }

    /// Most frequent lexemes of `texts` up to `cap` entries in total; ties
    /// break lexicographically so the result does not depend on input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok.lexeme().to_string()).or_default() += 1;
            }
        }
        // Layout marker used between instruction and input.
        counts.entry(NEWLINE_LEXEME.to_string()).or_default();
        let mut ranked: Vec<_> = counts
            .into_iter()
            .filter(|(l, _)| !RESERVED.contains(&l.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = cap.saturating_sub(RESERVED.len());
        let lexemes = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(l, _)| l))
            .collect();
        Self::from_lexemes(lexemes)
    }

    /// Vocabulary over everything a CCT run will encode: the samples and
    /// the template scaffolding.
    pub fn for_samples(samples: &[InstructionSample], cap: usize) -> Self {
        let mut texts: Vec<&str> = Vec::new();
        for s in samples {
            texts.push(&s.instruction);
            if let Some(x) = &s.input {
                texts.push(x);
            }
            texts.push(&s.output);
        }
        for t in &TEMPLATES {
            texts.push(t.body);
        }
        Self::build(texts, cap)
    }

    pub fn len(&self) -> usize {
        self.lexemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lexemes.is_empty()
    }

    pub fn id(&self, lexeme: &str) -> u32 {
        self.index.get(lexeme).copied().unwrap_or(UNK)
    }

    pub fn lexeme(&self, id: u32) -> &str {
        self.lexemes.get(id as usize).map_or("<UNK>", String::as_str)
    }

    pub fn lexemes(&self) -> &[String] {
        &self.lexemes
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t.lexeme())).collect()
    }

    /// `BOS instruction [NL input] SEP`
    pub fn encode_prompt(&self, instruction: &str, input: Option<&str>) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(instruction));
        if let Some(x) = input.filter(|x| !x.is_empty()) {
            ids.push(self.id(NEWLINE_LEXEME));
            ids.extend(self.encode(x));
        }
        ids.push(SEP);
        ids
    }

    /// Full LM sequence for a sample: prompt, response, EOS.
    pub fn encode_sample(&self, sample: &InstructionSample) -> LmExample {
        let mut ids = self.encode_prompt(&sample.instruction, sample.input.as_deref());
        let output_start = ids.len();
        ids.extend(self.encode(&sample.output));
        ids.push(EOS);
        LmExample { ids, output_start }
    }
}

/// A token sequence whose response part starts at `output_start`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmExample {
    pub ids: Vec<u32>,
    pub output_start: usize,
}

impl LmExample {
    /// Model input (all but the last id), next-token targets, and the mask
    /// selecting positions whose target lies in the response.
    pub fn inputs_targets_mask(&self) -> (&[u32], &[u32], Vec<bool>) {
        let n = self.ids.len() - 1;
        let mask = (0..n).map(|j| j + 1 >= self.output_start).collect();
        (&self.ids[..n], &self.ids[1..], mask)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonSample {
    pub prompt_tokens: Vec<u32>,
    pub correct_tokens: Vec<u32>,
    pub buggy_tokens: Vec<u32>,
    /// First aligned code position at which the two sides differ.
    pub diff_index: usize,
    /// Length of the longer side.
    pub aligned_length: usize,
}

impl ComparisonSample {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (&self.correct_tokens, &self.buggy_tokens);
        let ok = self.aligned_length == a.len().max(b.len())
            && self.diff_index < self.aligned_length
            && a[..self.diff_index.min(a.len())] == b[..self.diff_index.min(b.len())];
        if !ok {
            return Err(CctError::InvalidPair(format!(
                "comparison alignment I={} M={} inconsistent with token lists",
                self.diff_index, self.aligned_length
            )));
        }
        Ok(())
    }
}

/// Smallest index at which `a` and `b` differ, or the shorter length when
/// one is a strict prefix of the other.
pub fn first_diff_index<T: PartialEq>(a: &[T], b: &[T]) -> Result<usize> {
    if a == b {
        return Err(CctError::InvalidPair("sequences are identical".into()));
    }
    Ok(a.iter()
        .zip(b)
        .position(|(x, y)| x != y)
        .unwrap_or_else(|| a.len().min(b.len())))
}

pub fn build_comparison(
    pair: &MutantPair,
    instr: &InstructionSample,
    vocab: &Vocab,
) -> Result<ComparisonSample> {
    let correct_tokens = vocab.encode(&pair.correct);
    let buggy_tokens = vocab.encode(&pair.buggy);
    if correct_tokens == buggy_tokens {
        return Err(CctError::InvalidPair(
            "degenerate pair: both sides encode identically".into(),
        ));
    }
    let diff_index = first_diff_index(&correct_tokens, &buggy_tokens)?;
    let aligned_length = correct_tokens.len().max(buggy_tokens.len());

    // Shared prefix: the prompt plus any response text before the block.
    let mut prompt_tokens = vocab.encode_prompt(&instr.instruction, instr.input.as_deref());
    let lead = extract_code_blocks(&instr.output)
        .into_iter()
        .find(|b| b.text == pair.correct)
        .map(|b| b.origin.start)
        .or_else(|| instr.output.find(&pair.correct))
        .unwrap_or(0);
    prompt_tokens.extend(vocab.encode(&instr.output[..lead]));

    Ok(ComparisonSample {
        prompt_tokens,
        correct_tokens,
        buggy_tokens,
        diff_index,
        aligned_length,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CctRecord {
    pub id: String,
    #[serde(flatten)]
    pub lm: InstructionSample,
    pub comparison: Option<ComparisonSample>,
    pub seq: Option<InstructionSample>,
}

impl CctRecord {
    pub fn lm_only(id: impl Into<String>, lm: InstructionSample) -> Self {
        Self {
            id: id.into(),
            lm,
            comparison: None,
            seq: None,
        }
    }
}

/// Why a record carries only the LM stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationStatus {
    Mutated,
    NoCode,
    NoCandidates,
}

/// The first code block of `sample` and its seeded counterpart.
pub fn mutate_sample(
    engine: &MutationEngine,
    sample: &InstructionSample,
    seed: u64,
) -> (MutationStatus, Option<MutantPair>) {
    let Some(block) = first_block(sample) else {
        return (MutationStatus::NoCode, None);
    };
    match engine.make_counterpart(&block, seed) {
        Some(pair) => (MutationStatus::Mutated, Some(pair)),
        None => (MutationStatus::NoCandidates, None),
    }
}

pub fn first_block(sample: &InstructionSample) -> Option<CodeBlock> {
    extract_code_blocks(&sample.output).into_iter().next()
}

/// Seeds of record `index` under the dataset seed: (mutation, template).
pub fn record_seeds(seed: u64, index: usize) -> (u64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mutation_seed = rng.gen::<u64>();
    let template = rng.gen_range(0..TEMPLATES.len());
    (mutation_seed, template)
}

/// Assembles one record from a sample and an optional mutant pair. A pair
/// that is degenerate under `vocab` is dropped and the record keeps its LM
/// stream only.
pub fn assemble_record(
    id: String,
    sample: &InstructionSample,
    pair: Option<&MutantPair>,
    template: &Template,
    vocab: &Vocab,
) -> CctRecord {
    let mut record = CctRecord::lm_only(id, sample.clone());
    if let Some(pair) = pair {
        match build_comparison(pair, sample, vocab) {
            Ok(cmp) => {
                record.comparison = Some(cmp);
                record.seq = Some(render_template(template, sample, pair));
            }
            Err(e) => log::debug!("record {}: skipping comparison: {e}", record.id),
        }
    }
    record
}

pub fn build_cct_dataset(
    samples: &[InstructionSample],
    seed: u64,
    vocab: &Vocab,
) -> Vec<CctRecord> {
    build_cct_dataset_with(&MutationEngine::default(), samples, seed, vocab)
}

pub fn build_cct_dataset_with(
    engine: &MutationEngine,
    samples: &[InstructionSample],
    seed: u64,
    vocab: &Vocab,
) -> Vec<CctRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let (mutation_seed, template) = record_seeds(seed, i);
            let (_, pair) = mutate_sample(engine, sample, mutation_seed);
            assemble_record(i.to_string(), sample, pair.as_ref(), &TEMPLATES[template], vocab)
        })
        .collect()
}
