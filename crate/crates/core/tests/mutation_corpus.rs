mod common;

use cct_core::code_model::{detokenize, tokenize, CodeBlock};
use cct_core::corpus;
use cct_core::mutation::{apply_mutation, enumerate_candidates, make_counterpart, verify_pair};
use proptest::prelude::*;

fn functions() -> Vec<String> {
    corpus::generate(21, 150, 0).train.iter().map(|f| f.code()).collect()
}

#[test]
fn every_candidate_yields_a_valid_mutant() {
    let fns = functions();
    assert!(fns.len() >= 100);
    let mut total = 0;
    for code in &fns {
        let block = CodeBlock::whole(code.as_str());
        let cands = enumerate_candidates(&block);
        assert!(!cands.is_empty(), "{code}");
        for cand in &cands {
            let pair = apply_mutation(&block, cand).unwrap();
            verify_pair(&pair).unwrap_or_else(|e| panic!("{code:?} {cand:?}: {e}"));
            assert_eq!(detokenize(&tokenize(&pair.buggy)).unwrap(), pair.buggy);
            total += 1;
        }
    }
    assert!(total > 1000, "only {total} mutants");
}

#[test]
fn counterparts_are_seed_deterministic() {
    let fns = functions();
    let run = |seed: u64| -> Vec<_> {
        fns.iter()
            .map(|c| make_counterpart(&CodeBlock::whole(c.as_str()), seed))
            .collect()
    };
    assert_eq!(run(42), run(42));
    assert_ne!(run(42), run(43));
}

proptest! {
    #[test]
    fn random_seeds_give_valid_single_site_mutants(seed in any::<u64>(), idx in 0usize..150) {
        let code = &functions()[idx];
        let pair = make_counterpart(&CodeBlock::whole(code.as_str()), seed).unwrap();
        prop_assert!(verify_pair(&pair).is_ok());
        prop_assert_eq!(pair.replay().unwrap(), pair.buggy.clone());
        prop_assert_eq!(pair.record.site.end - pair.record.site.start >= 1, true);
    }
}
