//! Seeded synthetic corpus of small Python functions.
//!
//! Each function comes from a family (a behaviour with a fixed body shape)
//! instantiated with a function name and parameter names. The generator
//! splits the instantiations into a training set of instruction samples and
//! a disjoint held-out set of functions with tests, so the benchmark asks
//! for familiar behaviours under unseen names.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::HeldOutFunction;
use crate::sample_builder::InstructionSample;

pub const FUNCTION_NAMES: &[&str] = &[
    "solve", "calc", "pick", "get", "compute", "helper", "run", "work", "apply", "check", "find",
    "make",
];

pub const PARAM_NAMES: &[&str] = &["a", "b", "c", "m", "n", "p", "q", "u", "v", "w", "x", "y", "z"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Larger,
    Smaller,
    Add,
    Sub,
    Mul,
    IsLong,
    Total,
    AbsDiff,
    BothPositive,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Larger,
        Family::Smaller,
        Family::Add,
        Family::Sub,
        Family::Mul,
        Family::IsLong,
        Family::Total,
        Family::AbsDiff,
        Family::BothPositive,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Family::Larger => "larger",
            Family::Smaller => "smaller",
            Family::Add => "add",
            Family::Sub => "sub",
            Family::Mul => "mul",
            Family::IsLong => "is_long",
            Family::Total => "total",
            Family::AbsDiff => "abs_diff",
            Family::BothPositive => "both_positive",
        }
    }

    fn instruction(self, f: &str, a: &str, b: &str) -> String {
        match self {
            Family::Larger => format!("Write a function {f} that returns the larger of {a} and {b} ."),
            Family::Smaller => format!("Write a function {f} that returns the smaller of {a} and {b} ."),
            Family::Add => format!("Write a function {f} that returns the sum of {a} and {b} ."),
            Family::Sub => format!("Write a function {f} that returns {a} minus {b} ."),
            Family::Mul => format!("Write a function {f} that returns the product of {a} and {b} ."),
            Family::IsLong => {
                format!("Write a function {f} that checks whether {a} has more than {b} items .")
            }
            Family::Total => format!("Write a function {f} that adds up every {b} in the list {a} ."),
            Family::AbsDiff => {
                format!("Write a function {f} that returns the distance between {a} and {b} .")
            }
            Family::BothPositive => {
                format!("Write a function {f} that checks whether {a} and {b} are both positive .")
            }
        }
    }

    fn body(self, f: &str, a: &str, b: &str) -> String {
        match self {
            Family::Larger => {
                format!("def {f}({a}, {b}):\n    if {a} > {b}:\n        return {a}\n    return {b}\n")
            }
            Family::Smaller => {
                format!("def {f}({a}, {b}):\n    if {a} < {b}:\n        return {a}\n    return {b}\n")
            }
            Family::Add => format!("def {f}({a}, {b}):\n    return {a} + {b}\n"),
            Family::Sub => format!("def {f}({a}, {b}):\n    return {a} - {b}\n"),
            Family::Mul => format!("def {f}({a}, {b}):\n    return {a} * {b}\n"),
            Family::IsLong => format!("def {f}({a}, {b}):\n    return len({a}) > {b}\n"),
            Family::Total => format!(
                "def {f}({a}):\n    t = 0\n    for {b} in {a}:\n        t = t + {b}\n    return t\n"
            ),
            Family::AbsDiff => format!("def {f}({a}, {b}):\n    return abs({a} - {b})\n"),
            Family::BothPositive => format!("def {f}({a}, {b}):\n    return {a} > 0 and {b} > 0\n"),
        }
    }

    fn tests(self, f: &str) -> String {
        let cases: &[&str] = match self {
            Family::Larger => &["(3, 1) == 3", "(1, 3) == 3", "(-2, -5) == -2"],
            Family::Smaller => &["(3, 1) == 1", "(1, 3) == 1", "(-2, -5) == -5"],
            Family::Add => &["(2, 3) == 5", "(7, 1) == 8", "(0, 4) == 4"],
            Family::Sub => &["(7, 3) == 4", "(2, 5) == -3", "(9, 9) == 0"],
            Family::Mul => &["(2, 3) == 6", "(4, 5) == 20", "(1, 7) == 7"],
            Family::IsLong => &["([1, 2, 3], 2) is True", "([1], 2) is False", "([], 0) is False"],
            Family::Total => &["([1, 2, 3]) == 6", "([]) == 0", "([5, -2]) == 3"],
            Family::AbsDiff => &["(1, 4) == 3", "(4, 1) == 3", "(-2, 3) == 5"],
            Family::BothPositive => &["(1, 2) is True", "(1, -2) is False", "(-1, 2) is False", "(0, 3) is False"],
        };
        cases.iter().map(|c| format!("assert {f}{c}\n")).collect()
    }
}

/// One instantiated function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticFunction {
    pub family: Family,
    pub name: String,
    pub params: (String, String),
}

impl SyntheticFunction {
    pub fn id(&self) -> String {
        format!("{}/{}/{}_{}", self.family.slug(), self.name, self.params.0, self.params.1)
    }

    pub fn instruction(&self) -> String {
        self.family.instruction(&self.name, &self.params.0, &self.params.1)
    }

    pub fn code(&self) -> String {
        self.family.body(&self.name, &self.params.0, &self.params.1)
    }

    pub fn tests(&self) -> String {
        self.family.tests(&self.name)
    }

    pub fn sample(&self) -> InstructionSample {
        InstructionSample::new(self.instruction(), self.code())
    }

    pub fn held_out(&self) -> HeldOutFunction {
        HeldOutFunction {
            task_id: self.id(),
            instruction: self.instruction(),
            reference: self.code(),
            tests: self.tests(),
            entry_point: self.name.clone(),
            timeout_s: 5.0,
        }
    }
}

/// Every (family, name, ordered parameter pair) instantiation.
pub fn all_functions() -> Vec<SyntheticFunction> {
    let mut out = Vec::new();
    for family in Family::ALL {
        for name in FUNCTION_NAMES {
            for a in PARAM_NAMES {
                for b in PARAM_NAMES.iter().filter(|b| *b != a) {
                    out.push(SyntheticFunction {
                        family,
                        name: name.to_string(),
                        params: (a.to_string(), b.to_string()),
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<SyntheticFunction>,
    pub held_out: Vec<SyntheticFunction>,
}

impl SyntheticCorpus {
    pub fn train_samples(&self) -> Vec<InstructionSample> {
        self.train.iter().map(SyntheticFunction::sample).collect()
    }

    pub fn held_out_functions(&self) -> Vec<HeldOutFunction> {
        self.held_out.iter().map(SyntheticFunction::held_out).collect()
    }
}

/// Seeded disjoint draw of `n_train` training and `n_held_out` held-out
/// instantiations. Families are interleaved so every prefix of either list
/// is close to balanced.
pub fn generate(seed: u64, n_train: usize, n_held_out: usize) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_family: Vec<Vec<SyntheticFunction>> = Family::ALL
        .iter()
        .map(|&f| all_functions().into_iter().filter(|s| s.family == f).collect())
        .collect();
    for group in &mut per_family {
        group.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; per_family.len()];
    let mut take = |n: usize| {
        let mut out = Vec::with_capacity(n);
        let mut fam = 0;
        while out.len() < n {
            let group = &per_family[fam % per_family.len()];
            if let Some(f) = group.get(cursor[fam % per_family.len()]) {
                out.push(f.clone());
                cursor[fam % per_family.len()] += 1;
            } else if cursor.iter().zip(&per_family).all(|(c, g)| *c >= g.len()) {
                break;
            }
            fam += 1;
        }
        out
    };
    let held_out = take(n_held_out);
    let train = take(n_train);
    SyntheticCorpus { train, held_out }
}
