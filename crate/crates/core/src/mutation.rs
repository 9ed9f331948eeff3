//! Single-edit bug injection.
//!
//! Each bug class is a [`Mutator`] that scans a lexed block and proposes
//! every legal edit of its kind. Mutators live in a [`MutatorRegistry`] keyed
//! by name, so a run can restrict itself to a subset of bug classes from
//! configuration. A [`MutationEngine`] turns a registry into candidates,
//! applies them, and draws seeded counterparts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::code_model::{CodeBlock, SourceUnit, Token, TokenKind};
use crate::error::{CctError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MutationKind {
    VariableMisuse,
    OperatorMisuse,
    FunctionMissing,
}

impl fmt::Display for MutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::VariableMisuse => "variable_misuse",
            Self::OperatorMisuse => "operator_misuse",
            Self::FunctionMissing => "function_missing",
        };
        f.write_str(s)
    }
}

/// Half-open token index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenRange {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MutationCandidate {
    pub kind: MutationKind,
    pub site: TokenRange,
    /// Text substituted for the site; empty for a pure deletion.
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutantPair {
    pub correct: String,
    pub buggy: String,
    pub record: MutationCandidate,
    pub seed: u64,
}

impl MutantPair {
    /// Re-applies the recorded edit to the correct text.
    pub fn replay(&self) -> Result<String> {
        let unit = SourceUnit::new(self.correct.as_str());
        splice(&unit, &self.record)
    }
}

pub const COMPARISON_OPS: &[&str] = &["==", "!=", "<", ">", "<=", ">="];
pub const ARITHMETIC_OPS: &[&str] = &["+", "-", "*", "/", "%", "**", "//"];
pub const BOOLEAN_OPS: &[&str] = &["and", "or"];

/// One bug class.
pub trait Mutator: Send + Sync {
    fn name(&self) -> &'static str;
    fn kind(&self) -> MutationKind;
    /// Every legal edit of this class, in token order.
    fn candidates(&self, unit: &SourceUnit) -> Vec<MutationCandidate>;
}

/// Replaces one variable occurrence with another variable name used in the
/// same block.
#[derive(Debug, Default)]
pub struct VariableMisuse;

impl Mutator for VariableMisuse {
    fn name(&self) -> &'static str {
        "variable_misuse"
    }

    fn kind(&self) -> MutationKind {
        MutationKind::VariableMisuse
    }

    fn candidates(&self, unit: &SourceUnit) -> Vec<MutationCandidate> {
        let roles = classify_identifiers(&unit.tokens);
        let mut pool: Vec<&str> = Vec::new();
        for (tok, role) in unit.tokens.iter().zip(&roles) {
            if matches!(role, Role::Variable | Role::Parameter) && !pool.contains(&tok.text.as_str())
            {
                pool.push(&tok.text);
            }
        }
        let mut out = Vec::new();
        for (i, (tok, role)) in unit.tokens.iter().zip(&roles).enumerate() {
            if *role != Role::Variable {
                continue;
            }
            for name in pool.iter().filter(|n| **n != tok.text) {
                out.push(MutationCandidate {
                    kind: MutationKind::VariableMisuse,
                    site: TokenRange { start: i, end: i + 1 },
                    replacement: name.to_string(),
                });
            }
        }
        out
    }
}

/// Swaps a binary operator for another from the same class: comparison,
/// arithmetic, or boolean.
#[derive(Debug, Default)]
pub struct OperatorMisuse;

impl Mutator for OperatorMisuse {
    fn name(&self) -> &'static str {
        "operator_misuse"
    }

    fn kind(&self) -> MutationKind {
        MutationKind::OperatorMisuse
    }

    fn candidates(&self, unit: &SourceUnit) -> Vec<MutationCandidate> {
        let toks = &unit.tokens;
        let mut out = Vec::new();
        for (i, tok) in toks.iter().enumerate() {
            if tok.kind != TokenKind::Operator {
                continue;
            }
            let op = tok.text.as_str();
            let class = if COMPARISON_OPS.contains(&op) {
                COMPARISON_OPS
            } else if BOOLEAN_OPS.contains(&op) {
                BOOLEAN_OPS
            } else if ARITHMETIC_OPS.contains(&op) && i > 0 && ends_operand(&toks[i - 1]) {
                ARITHMETIC_OPS
            } else {
                continue;
            };
            for repl in class.iter().filter(|r| **r != op) {
                out.push(MutationCandidate {
                    kind: MutationKind::OperatorMisuse,
                    site: TokenRange { start: i, end: i + 1 },
                    replacement: repl.to_string(),
                });
            }
        }
        out
    }
}

/// Removes the wrapper of a single-argument call, `name(arg)` to `arg`.
#[derive(Debug, Default)]
pub struct FunctionMissing;

impl Mutator for FunctionMissing {
    fn name(&self) -> &'static str {
        "function_missing"
    }

    fn kind(&self) -> MutationKind {
        MutationKind::FunctionMissing
    }

    fn candidates(&self, unit: &SourceUnit) -> Vec<MutationCandidate> {
        let toks = &unit.tokens;
        let roles = classify_identifiers(toks);
        let mut out = Vec::new();
        for i in 0..toks.len() {
            if roles[i] != Role::CallName {
                continue;
            }
            let Some(close) = matching_close(toks, i + 1) else {
                continue;
            };
            let (first, last) = (i + 2, close);
            if first >= last {
                continue;
            }
            let mut depth = 0i32;
            let single_arg = toks[first..last].iter().all(|t| {
                match t.text.as_str() {
                    "(" | "[" | "{" => depth += 1,
                    ")" | "]" | "}" => depth -= 1,
                    "," if depth == 0 => return false,
                    _ => {}
                }
                true
            });
            let args = unit.slice(first, last);
            if !single_arg || args.contains('\n') || args.contains('#') {
                continue;
            }
            out.push(MutationCandidate {
                kind: MutationKind::FunctionMissing,
                site: TokenRange {
                    start: i,
                    end: close + 1,
                },
                replacement: args.to_string(),
            });
        }
        out
    }
}

pub struct MutatorRegistry {
    entries: Vec<Box<dyn Mutator>>,
}

impl Default for MutatorRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(VariableMisuse));
        reg.register(Box::new(OperatorMisuse));
        reg.register(Box::new(FunctionMissing));
        reg
    }
}

impl fmt::Debug for MutatorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl MutatorRegistry {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Adds a mutator, replacing any previous one with the same name.
    pub fn register(&mut self, mutator: Box<dyn Mutator>) {
        self.entries.retain(|m| m.name() != mutator.name());
        self.entries.push(mutator);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Mutator> {
        self.entries
            .iter()
            .find(|m| m.name() == name)
            .map(|m| m.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|m| m.name()).collect()
    }

    /// A registry holding only the named built-in mutators.
    pub fn select<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut all = Self::default();
        let mut picked = Self::empty();
        for name in names {
            let name = name.as_ref().trim();
            let idx = all
                .entries
                .iter()
                .position(|m| m.name() == name)
                .ok_or_else(|| {
                    CctError::Config(format!(
                        "unknown mutator `{name}` (known: {})",
                        Self::default().names().join(", ")
                    ))
                })?;
            picked.register(all.entries.remove(idx));
        }
        Ok(picked)
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Mutator> {
        self.entries.iter().map(|m| m.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct MutationEngine {
    registry: MutatorRegistry,
}

impl MutationEngine {
    pub fn new(registry: MutatorRegistry) -> Self {
        Self { registry }
    }

    pub fn registry(&self) -> &MutatorRegistry {
        &self.registry
    }

    /// All legal candidates, ordered by site start, then kind.
    pub fn enumerate_candidates(&self, block: &CodeBlock) -> Vec<MutationCandidate> {
        let unit = SourceUnit::new(block.text.as_str());
        self.candidates_for(&unit)
    }

    fn candidates_for(&self, unit: &SourceUnit) -> Vec<MutationCandidate> {
        let mut all: Vec<_> = self
            .registry
            .iter()
            .flat_map(|m| m.candidates(unit))
            .collect();
        all.sort_by_key(|c| (c.site.start, c.kind));
        all.dedup();
        all
    }

    pub fn apply_mutation(
        &self,
        block: &CodeBlock,
        candidate: &MutationCandidate,
    ) -> Result<MutantPair> {
        let unit = SourceUnit::new(block.text.as_str());
        if !self.candidates_for(&unit).contains(candidate) {
            return Err(CctError::Contract(format!(
                "{} at tokens {}..{} -> {:?} is not a legal edit of this block",
                candidate.kind, candidate.site.start, candidate.site.end, candidate.replacement
            )));
        }
        let buggy = splice(&unit, candidate)?;
        Ok(MutantPair {
            correct: block.text.clone(),
            buggy,
            record: candidate.clone(),
            seed: 0,
        })
    }

    /// Applies one candidate drawn uniformly under `seed`, or None when the
    /// block admits no edit.
    pub fn make_counterpart(&self, block: &CodeBlock, seed: u64) -> Option<MutantPair> {
        let unit = SourceUnit::new(block.text.as_str());
        let candidates = self.candidates_for(&unit);
        if candidates.is_empty() {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = &candidates[rng.gen_range(0..candidates.len())];
        let buggy = splice(&unit, pick).expect("enumerated sites are in range");
        Some(MutantPair {
            correct: block.text.clone(),
            buggy,
            record: pick.clone(),
            seed,
        })
    }
}

pub fn enumerate_candidates(block: &CodeBlock) -> Vec<MutationCandidate> {
    MutationEngine::default().enumerate_candidates(block)
}

pub fn apply_mutation(block: &CodeBlock, candidate: &MutationCandidate) -> Result<MutantPair> {
    MutationEngine::default().apply_mutation(block, candidate)
}

pub fn make_counterpart(block: &CodeBlock, seed: u64) -> Option<MutantPair> {
    MutationEngine::default().make_counterpart(block, seed)
}

/// Checks the pair invariants: the sides differ, the record replays, and
/// the lexeme streams agree everywhere outside the recorded site.
pub fn verify_pair(pair: &MutantPair) -> Result<()> {
    if pair.correct == pair.buggy {
        return Err(CctError::InvalidPair("buggy equals correct".into()));
    }
    if pair.replay()? != pair.buggy {
        return Err(CctError::InvalidPair("record does not replay".into()));
    }
    let a = SourceUnit::new(pair.correct.as_str()).tokens;
    let b = SourceUnit::new(pair.buggy.as_str()).tokens;
    crate::code_model::detokenize(&b)?;
    let site = pair.record.site;
    let tail = a.len() - site.end;
    if b.len() < site.start + tail {
        return Err(CctError::InvalidPair("buggy stream too short".into()));
    }
    let same = |x: &Token, y: &Token| x.kind == y.kind && x.lexeme() == y.lexeme();
    let prefix_ok = a[..site.start].iter().zip(&b[..site.start]).all(|(x, y)| same(x, y));
    let suffix_ok = a[site.end..]
        .iter()
        .zip(&b[b.len() - tail..])
        .all(|(x, y)| same(x, y));
    if !prefix_ok || !suffix_ok {
        return Err(CctError::InvalidPair(format!(
            "token streams differ outside site {}..{}",
            site.start, site.end
        )));
    }
    Ok(())
}

fn splice(unit: &SourceUnit, cand: &MutationCandidate) -> Result<String> {
    let TokenRange { start, end } = cand.site;
    if start >= end || end > unit.tokens.len() {
        return Err(CctError::Contract(format!(
            "site {start}..{end} outside a {}-token block",
            unit.tokens.len()
        )));
    }
    let lo = unit.tokens[start].span.start;
    let hi = unit.tokens[end - 1].span.end;
    let mut out = String::with_capacity(unit.raw.len() + cand.replacement.len());
    out.push_str(&unit.raw[..lo]);
    out.push_str(&cand.replacement);
    out.push_str(&unit.raw[hi..]);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    NotIdentifier,
    Variable,
    /// Parameter in a `def` header: a legal replacement, never a site.
    Parameter,
    DefName,
    CallName,
    Attribute,
    KeywordArg,
}

fn classify_identifiers(toks: &[Token]) -> Vec<Role> {
    let mut roles = vec![Role::NotIdentifier; toks.len()];
    let mut in_header = false;
    let mut depth = 0i32;
    for i in 0..toks.len() {
        let t = &toks[i];
        match t.text.as_str() {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => depth -= 1,
            ":" if in_header && depth == 0 => in_header = false,
            "def" if t.kind == TokenKind::Keyword => in_header = true,
            _ => {}
        }
        if t.kind != TokenKind::Identifier {
            continue;
        }
        let prev = i.checked_sub(1).map(|p| toks[p].text.as_str());
        let next = toks.get(i + 1).map(|n| n.text.as_str());
        roles[i] = if matches!(prev, Some("def") | Some("class")) {
            Role::DefName
        } else if prev == Some(".") {
            Role::Attribute
        } else if in_header {
            Role::Parameter
        } else if next == Some("(") {
            Role::CallName
        } else if next == Some("=") && depth > 0 {
            Role::KeywordArg
        } else {
            Role::Variable
        };
    }
    roles
}

fn ends_operand(tok: &Token) -> bool {
    match tok.kind {
        TokenKind::Identifier | TokenKind::Literal => true,
        TokenKind::Keyword => matches!(tok.text.as_str(), "True" | "False" | "None"),
        TokenKind::Punctuation => matches!(tok.text.as_str(), ")" | "]" | "}"),
        _ => false,
    }
}

fn matching_close(toks: &[Token], open: usize) -> Option<usize> {
    if toks.get(open)?.text != "(" {
        return None;
    }
    let mut depth = 0i32;
    for (j, t) in toks.iter().enumerate().skip(open) {
        match t.text.as_str() {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => {
                depth -= 1;
                if depth == 0 {
                    return (t.text == ")").then_some(j);
                }
            }
            _ => {}
        }
    }
    None
}
