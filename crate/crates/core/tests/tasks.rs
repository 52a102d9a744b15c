//! Corpus generators checked against brute-force scans of their output.

use proptest::prelude::*;
use rethead_core::jsonl::{read_jsonl, write_jsonl};
use rethead_core::tasks::*;

fn vocab() -> TaskVocab {
    TaskVocab::for_model(64, 16, 32).unwrap()
}

/// Full-length key-value sequences only.
fn fixed() -> CorpusSpec {
    CorpusSpec {
        variable_length: false,
        copy_fraction: 0.0,
        ..CorpusSpec::default()
    }
}

fn niah_spec(n_passages: usize) -> NiahSpec {
    NiahSpec {
        n_passages,
        passage_len: 5,
        value_len: 3,
    }
}

#[test]
fn every_queried_key_is_bound_earlier() {
    let v = vocab();
    let spec = fixed();
    let corpus = gen_pretrain_corpus(&v, &spec, 10_000, 64, 17).unwrap();
    assert_eq!(corpus.len(), 10_000);
    for (n, seq) in corpus.iter().enumerate() {
        assert_eq!(seq.tokens.len(), 64);
        let t = &seq.tokens;
        let mut checked = 0;
        for i in 0..t.len() - 1 {
            if t[i] != QRY {
                continue;
            }
            let key = t[i + 1];
            assert!(v.is_key(key));
            // the bound values follow the key's first occurrence before the query
            let bound = t[..i].iter().position(|&x| x == key);
            let b = bound.unwrap_or_else(|| {
                panic!("sequence {n}: key {key} queried at {i} but never bound")
            });
            assert_eq!(&t[i + 2..i + 5], &t[b + 1..b + 4], "sequence {n}");
            assert_eq!(t[i + 5], EOS);
            checked += 1;
        }
        assert_eq!(checked, spec.n_queries);
    }
}

#[test]
fn answer_targets_cover_answers_and_stops() {
    let spec = fixed();
    let corpus = gen_pretrain_corpus(&vocab(), &spec, 50, 64, 2).unwrap();
    for seq in &corpus {
        let ex = seq.example();
        assert_eq!(ex.n_targets(), spec.n_queries * 4);
        for q in &seq.queries {
            assert!(!ex.target_mask[q.cue_position]);
            assert!(ex.target_mask[q.cue_position + 1..=q.cue_position + 4]
                .iter()
                .all(|&m| m));
        }
    }
}

#[test]
fn copy_sequences_repeat_their_span() {
    let spec = CorpusSpec {
        copy_fraction: 0.5,
        ..fixed()
    };
    let corpus = gen_pretrain_corpus(&vocab(), &spec, 2000, 64, 9).unwrap();
    let copies: Vec<&KvSequence> = corpus.iter().filter(|s| s.repeat_start.is_some()).collect();
    let frac = copies.len() as f64 / corpus.len() as f64;
    assert!((frac - 0.5).abs() < 0.05, "{frac}");
    for seq in copies {
        let start = seq.repeat_start.unwrap();
        let t = &seq.tokens;
        assert!(t.len() <= 64);
        assert_eq!(t[0], BOS);
        assert_eq!(&t[1..start], &t[start..]);
        assert!(t[1..].iter().all(|&x| x > EOS));
        assert!(seq.queries.is_empty() && seq.first_query_prompt().is_none());
        let ex = seq.example();
        assert_eq!(ex.n_targets(), t.len() - start - 1);
        assert!(!ex.target_mask[start]);
    }
}

#[test]
fn variable_length_keeps_the_query_structure() {
    let spec = CorpusSpec {
        variable_length: true,
        ..fixed()
    };
    let corpus = gen_pretrain_corpus(&vocab(), &spec, 500, 64, 4).unwrap();
    let mut lengths = std::collections::BTreeSet::new();
    for seq in &corpus {
        lengths.insert(seq.tokens.len());
        assert!(seq.tokens.len() <= 64);
        assert_eq!(seq.queries.len(), spec.n_queries);
        for q in &seq.queries {
            let b = seq
                .bindings
                .iter()
                .find(|b| b.key == seq.tokens[q.cue_position])
                .unwrap();
            assert_eq!(q.answer, b.values);
        }
    }
    assert!(lengths.len() > 10);
}

#[test]
fn needle_slots_are_uniform() {
    let n = 10_000;
    let spec = niah_spec(7);
    let set = gen_niah_set(&vocab(), &spec, n, 64, 5).unwrap();
    let mut hist = [0usize; 8];
    for inst in &set {
        hist[inst.slot] += 1;
    }
    let p = 1.0 / 8.0;
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (slot, &c) in hist.iter().enumerate() {
        assert!(
            (c as f64 - mean).abs() <= 3.0 * sigma,
            "slot {slot}: {c} vs {mean} ± {:.1}",
            3.0 * sigma
        );
    }
}

#[test]
fn needle_instances_satisfy_constructive_invariants() {
    let v = vocab();
    let set = gen_niah_set(&v, &niah_spec(7), 500, 64, 11).unwrap();
    for inst in &set {
        let picked: Vec<_> = inst
            .needle_indices
            .iter()
            .map(|&i| inst.haystack[i])
            .collect();
        assert_eq!(picked, inst.needle);
        assert!(inst.needle_indices.windows(2).all(|w| w[0] + 1 == w[1]));
        let key_at = inst.needle_indices[0] - 1;
        for (i, &t) in inst.haystack.iter().enumerate() {
            if i != key_at && !inst.needle_indices.contains(&i) {
                assert!(v.is_filler(t));
                assert!(!inst.needle.contains(&t));
            }
        }
        assert_eq!(inst.question, vec![QRY, inst.haystack[key_at]]);
        assert!(v.is_key(inst.haystack[key_at]));
        let prompt = inst.prompt();
        assert!(prompt.len() + niah_spec(7).answer_budget() <= 64);
        for (&p, &k) in inst.prompt_needle_positions().iter().zip(&inst.needle) {
            assert_eq!(prompt[p], k);
        }
    }
}

#[test]
fn niah_set_is_seeded() {
    let a = gen_niah_set(&vocab(), &niah_spec(4), 30, 64, 1).unwrap();
    assert_eq!(a, gen_niah_set(&vocab(), &niah_spec(4), 30, 64, 1).unwrap());
    assert_ne!(a, gen_niah_set(&vocab(), &niah_spec(4), 30, 64, 2).unwrap());
}

#[test]
fn reference_answer_is_a_fact_subspan() {
    let set = gen_instruction_set(&vocab(), &InstructionSpec::default(), 2_000, 64, 8).unwrap();
    for inst in &set {
        assert!((2..=8).contains(&inst.n_facts));
        let facts = &inst.instruction[inst.fact_span.clone()];
        assert!(facts
            .windows(inst.reference.len())
            .any(|w| w == inst.reference.as_slice()));
        let tail = &inst.instruction[inst.fact_span.end..];
        assert_eq!(tail.len(), 2);
        assert_eq!(tail[0], QRY);
        let at = facts
            .windows(inst.reference.len())
            .position(|w| w == inst.reference.as_slice())
            .unwrap();
        assert_eq!(facts[at - 1], tail[1]);
    }
}

#[test]
fn niah_jsonl_roundtrip() {
    let set = gen_niah_set(&vocab(), &niah_spec(3), 20, 64, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("niah.jsonl");
    write_jsonl(&path, &set).unwrap();
    let back: Vec<NeedleInstance> = read_jsonl(&path).unwrap();
    assert_eq!(back, set);
}

proptest! {
    #[test]
    fn scoring_is_pure_and_subsequence_based(
        expected in prop::collection::vec(4u32..60, 1..5),
        prefix in prop::collection::vec(4u32..60, 0..6),
        suffix in prop::collection::vec(0u32..60, 0..6),
    ) {
        let mut out = prefix.clone();
        out.extend(&expected);
        out.extend(&suffix);
        prop_assert_eq!(score_answer(&expected, &out, Some(EOS)), Verdict::Correct);
        prop_assert_eq!(score_answer(&expected, &out, Some(EOS)), score_answer(&expected, &out, Some(EOS)));
        let mut stopped = prefix.clone();
        stopped.push(EOS);
        stopped.extend(&expected);
        let verdict = score_answer(&expected, &stopped, Some(EOS));
        let before = &prefix[..];
        let found = before.windows(expected.len()).any(|w| w == expected.as_slice());
        prop_assert_eq!(verdict.is_correct(), found);
    }

    #[test]
    fn corpus_bindings_are_unique(seed in any::<u64>()) {
        let v = vocab();
        let corpus = gen_pretrain_corpus(&v, &fixed(), 4, 64, seed).unwrap();
        for seq in corpus {
            let mut keys: Vec<_> = seq.bindings.iter().map(|b| b.key).collect();
            keys.sort_unstable();
            keys.dedup();
            prop_assert_eq!(keys.len(), seq.bindings.len());
            let mut vals: Vec<_> = seq.bindings.iter().flat_map(|b| b.values.clone()).collect();
            let n = vals.len();
            vals.sort_unstable();
            vals.dedup();
            prop_assert_eq!(vals.len(), n);
            for b in &seq.bindings {
                let toks = b.tokens();
                prop_assert_eq!(&seq.tokens[b.position..b.position + 4], toks.as_slice());
            }
        }
    }
}
