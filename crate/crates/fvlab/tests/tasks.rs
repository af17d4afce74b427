use fvlab::rng::substream;
use fvlab::tasks::{
    build_icl_prompt, derangement, lm_sequence, make_task, read_corpus, render, write_corpus, Curriculum, Example,
    PromptBundle, Suite, SuiteConfig, TaskDef, TaskKind, Vocab,
};
use fvlab::Error;
use proptest::prelude::*;
use std::collections::HashSet;

fn gen(seed: u64) -> fvlab::tasks::TaskSpec {
    make_task(&TaskDef::generation("g", seed, 2, None), &Vocab::default()).unwrap()
}

#[test]
fn same_seed_same_task() {
    assert_eq!(gen(11), gen(11));
    let v = Vocab::default();
    let d = TaskDef::classification("c", 5, 3);
    assert_eq!(make_task(&d, &v).unwrap(), make_task(&d, &v).unwrap());
}

#[test]
fn different_seeds_give_mostly_different_mappings() {
    let (a, b) = (gen(1), gen(2));
    let differ = a.mapping.iter().filter(|(k, y)| b.mapping[k] != **y).count();
    assert!(differ as f64 >= 0.9 * a.mapping.len() as f64, "{differ} of {}", a.mapping.len());
}

#[test]
fn generation_mapping_is_injective_into_its_pool() {
    let v = Vocab::default();
    let t = make_task(&TaskDef::generation("g", 3, 2, Some([52, 84])), &v).unwrap();
    let outs: HashSet<usize> = t.mapping.values().map(|y| y[0]).collect();
    assert_eq!(outs.len(), t.mapping.len());
    assert!(outs.iter().all(|o| (52..84).contains(o)));
}

#[test]
fn classification_labels_come_from_the_label_set() {
    let v = Vocab::default();
    let t = make_task(&TaskDef::classification("c", 9, 3), &v).unwrap();
    assert_eq!(t.kind, TaskKind::Classification);
    assert_eq!(t.label_set, v.labels);
    for e in t.train.iter().chain(&t.val).chain(&t.heldout) {
        assert_eq!(e.y.len(), 1);
        assert!(v.labels.contains(&e.y[0]));
    }
    // balanced: 32 inputs over 4 labels
    for l in &v.labels {
        assert_eq!(t.mapping.values().filter(|y| y[0] == *l).count(), 8);
    }
}

#[test]
fn examples_follow_the_mapping_and_splits_are_disjoint() {
    let t = gen(4);
    assert_eq!((t.train.len(), t.val.len(), t.heldout.len()), (500, 200, 200));
    let mut seen = HashSet::new();
    for e in t.train.iter().chain(&t.val).chain(&t.heldout) {
        assert_eq!(t.answer(&e.x).unwrap(), e.y);
        assert_ne!(e.x[0], e.x[1]);
        assert!(seen.insert(e.x.clone()), "input {:?} repeated", e.x);
    }
    assert!(matches!(t.split("test"), Err(Error::Data(_))));
}

#[test]
fn zero_shot_prompt_is_instruction_input_arrow() {
    let v = Vocab::default();
    let t = gen(4);
    let b = build_icl_prompt(&t, 0, 1).unwrap();
    let mut want = t.instruction.clone();
    want.extend_from_slice(&b.query.x);
    want.push(v.arrow);
    assert_eq!(b.tokens(&v), want);
    assert_eq!(b.shuffled_tokens(&v), want);
}

#[test]
fn render_places_arrows_and_eos() {
    let v = Vocab::default();
    let toks = render(&v, &[2], &[(&[20, 21][..], &[30][..]), (&[22, 23][..], &[31][..])], &[24, 25]);
    assert_eq!(toks, vec![2, 20, 21, 1, 30, 0, 22, 23, 1, 31, 0, 24, 25, 1]);
}

#[test]
fn shuffled_bundle_keeps_the_label_multiset() {
    let v = Vocab::default();
    let t = make_task(&TaskDef::classification("c", 9, 3), &v).unwrap();
    for seed in 0..20 {
        let b = build_icl_prompt(&t, 6, seed).unwrap();
        let mut a: Vec<_> = b.demos.iter().map(|e| e.y.clone()).collect();
        let mut s = b.shuffled_y.clone();
        a.sort();
        s.sort();
        assert_eq!(a, s);
        assert!(b.demos.iter().all(|d| t.heldout.contains(d)));
        assert_eq!(b.target(), b.query.y.as_slice());
    }
}

#[test]
fn five_shot_prompt_fits_the_context() {
    let t = gen(4);
    let b = build_icl_prompt(&t, 5, 3).unwrap();
    // 1 + 5 * (2 + 1 + 1 + 1) + 3 tokens
    assert_eq!(b.tokens(&Vocab::default()).len(), 29);
    assert!(29 < fvlab::model::ModelConfig::default().max_seq);
}

#[test]
fn too_small_heldout_pool_is_a_data_error() {
    let def = TaskDef { sizes: [20, 10, 3], ..TaskDef::generation("g", 1, 2, None) };
    let t = make_task(&def, &Vocab::default()).unwrap();
    let mut rng = substream(0, "p");
    assert!(matches!(PromptBundle::new(&t, 3, t.val[0].clone(), &mut rng), Err(Error::Data(_))));
    assert!(PromptBundle::new(&t, 2, t.val[0].clone(), &mut rng).is_ok());
}

#[test]
fn exhausted_vocabulary_is_a_config_error() {
    let v = Vocab::default();
    let def = TaskDef::generation("g", 1, 2, Some([52, 60]));
    assert!(matches!(make_task(&def, &v), Err(Error::Config(_))));
    let bad_instr = TaskDef::generation("g", 1, 40, None);
    assert!(matches!(make_task(&bad_instr, &v), Err(Error::Config(_))));
}

#[test]
fn too_many_requested_examples_is_a_data_error() {
    let def = TaskDef { sizes: [900, 100, 100], ..TaskDef::generation("g", 1, 2, None) };
    assert!(matches!(make_task(&def, &Vocab::default()), Err(Error::Data(_))));
}

#[test]
fn lm_targets_cover_outputs_and_eos() {
    let v = Vocab::default();
    let e = Example { x: vec![20, 21], y: vec![30, 31] };
    let (toks, tg) = lm_sequence(&v, &[2], &[&e]);
    assert_eq!(toks, vec![2, 20, 21, 1, 30, 31, 0]);
    assert_eq!(tg, vec![(3, 30), (4, 31), (5, 0)]);
    for (row, t) in tg {
        assert_eq!(toks[row + 1], t);
    }
}

#[test]
fn single_task_curriculum_cycles_its_train_split() {
    let t = vec![gen(4)];
    let items: Vec<_> = Curriculum::uniform(&t, 3, 1).unwrap().take(1200).collect();
    for (i, it) in items.iter().enumerate() {
        assert_eq!(it.task, 0);
        assert_eq!(it.query, t[0].train[i % 500]);
        assert!(it.demos.len() <= 3);
        assert!(!it.demos.contains(&it.query));
    }
}

#[test]
fn curriculum_is_deterministic_in_its_seed() {
    let t = vec![gen(4), gen(5)];
    let a: Vec<_> = Curriculum::uniform(&t, 4, 7).unwrap().take(200).collect();
    let b: Vec<_> = Curriculum::uniform(&t, 4, 7).unwrap().take(200).collect();
    let c: Vec<_> = Curriculum::uniform(&t, 4, 8).unwrap().take(200).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn curriculum_mixture_matches_its_weights() {
    let t = vec![gen(4), gen(5)];
    let n = 1000;
    let first = Curriculum::uniform(&t, 2, 3).unwrap().take(n).filter(|i| i.task == 0).count();
    assert!((first as f64 / n as f64 - 0.5).abs() <= 0.05);
    let first = Curriculum::new(&t, &[0.25, 0.75], 2, 3).unwrap().take(n).filter(|i| i.task == 0).count();
    assert!((first as f64 / n as f64 - 0.25).abs() <= 0.05);
    assert!(matches!(Curriculum::new(&t, &[0.5, 0.6], 2, 3), Err(Error::Config(_))));
    assert!(matches!(Curriculum::new(&t, &[1.0], 2, 3), Err(Error::Config(_))));
}

#[test]
fn corpus_round_trips() {
    let t = gen(4);
    let mut buf = Vec::new();
    write_corpus(&t, &mut buf).unwrap();
    let recs = read_corpus(buf.as_slice()).unwrap();
    assert_eq!(recs.len(), 900);
    let val: Vec<Example> = recs.iter().filter(|r| r.split == "val").map(|r| r.example()).collect();
    assert_eq!(val, t.val);
    assert!(recs.iter().all(|r| r.task_id == "g"));
}

#[test]
fn default_suite_roles_are_consistent() {
    let s = Suite::build(&SuiteConfig::default(), 1).unwrap();
    assert_eq!(s.tasks.len(), 12);
    // T1 reuses P2's function behind a new instruction
    assert_eq!(s.get("T1").unwrap().mapping, s.get("P2").unwrap().mapping);
    assert_ne!(s.get("T1").unwrap().instruction, s.get("P2").unwrap().instruction);
    let p: Vec<_> = ["P1", "P2", "P3"].iter().map(|i| s.get(i).unwrap().instruction.clone()).collect();
    assert!(p.iter().all(|i| *i == p[0]));
    assert!(matches!(s.get("nope"), Err(Error::Config(_))));
    let other = Suite::build(&SuiteConfig::default(), 2).unwrap();
    assert_ne!(s.get("E1").unwrap().mapping, other.get("E1").unwrap().mapping);
}

proptest! {
    #[test]
    fn derangements_have_no_fixed_point(n in 2usize..40, seed in 0u64..10_000) {
        let mut rng = substream(seed, "d");
        let p = derangement(n, &mut rng);
        let mut sorted = p.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }
}
