mod common;

use proptest::prelude::*;

use compground::splitter::{make_splits, report_stats, tagged, verify_manifest, Pos, Split, TaggedQuery};

use common::{brute_force_violation, random_corpus, toy_corpus, toy_manifest};

#[test]
fn toy_fixture_reproduces_manifest() {
    let corpus = toy_corpus();
    let expected = toy_manifest();
    let outcome = make_splits(&corpus, 0, 0.2, 0.01).unwrap();
    assert_eq!(outcome.manifest, expected);
    assert_eq!(outcome.warnings, vec!["split novel-word is empty".to_string()]);
}

#[test]
fn toy_fixture_is_seed_independent() {
    let corpus = toy_corpus();
    let expected = make_splits(&corpus, 0, 0.2, 0.01).unwrap().manifest.assignments;
    for seed in 1..20 {
        assert_eq!(make_splits(&corpus, seed, 0.2, 0.01).unwrap().manifest.assignments, expected, "seed {seed}");
    }
}

#[test]
fn toy_fixture_stats() {
    let corpus = toy_corpus();
    let m = make_splits(&corpus, 0, 0.2, 0.01).unwrap().manifest;
    let stats = report_stats(&m, &corpus).unwrap();
    let row = |s: Split| stats.splits.iter().find(|r| r.split == s.as_str()).unwrap().clone();
    let train = row(Split::Training);
    assert_eq!((train.videos, train.queries), (2, 4));
    assert_eq!(train.average_video_length, 25.0);
    assert_eq!(train.average_query_length, 4.0);
    let nc = row(Split::NovelComposition);
    assert_eq!((nc.videos, nc.queries, nc.average_video_length, nc.average_query_length), (1, 1, 10.0, 4.0));
    let tt = row(Split::TestTrivial);
    assert_eq!((tt.videos, tt.queries, tt.average_query_length), (1, 1, 2.0));
    let nw = row(Split::NovelWord);
    assert_eq!((nw.videos, nw.queries, nw.average_video_length), (0, 0, 0.0));
    assert_eq!(stats.splits.iter().map(|r| r.queries).sum::<usize>(), corpus.len());
}

#[test]
fn shared_video_lands_in_training() {
    let corpus: Vec<TaggedQuery> = (0..4)
        .map(|i| {
            let verb = ["open", "hold", "wash", "close"][i];
            tagged(
                &format!("q{i}"),
                "v",
                &[(verb, verb, Pos::Verb), ("door", "door", Pos::Noun)],
                &[(0, 1)],
            )
        })
        .collect();
    let out = make_splits(&corpus, 3, 0.3, 0.1).unwrap();
    assert!(out.manifest.assignments.iter().all(|a| a.split == Split::Training));
    assert_eq!(out.warnings.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fuzzed_corpora_satisfy_invariants(
        corpus_seed in any::<u64>(),
        split_seed in any::<u64>(),
        fc in 0.05f64..0.6,
        fw in 0.02f64..0.3,
    ) {
        let corpus = random_corpus(corpus_seed);
        let out = make_splits(&corpus, split_seed, fc, fw).unwrap();
        prop_assert_eq!(brute_force_violation(&corpus, &out.manifest), None);
        prop_assert!(verify_manifest(&corpus, &out.manifest).is_ok());
        let again = make_splits(&corpus, split_seed, fc, fw).unwrap();
        prop_assert_eq!(&again.manifest, &out.manifest);
    }
}

#[test]
fn fuzz_generator_exercises_novel_splits() {
    let (mut comp, mut word) = (0, 0);
    for seed in 0..200 {
        let corpus = random_corpus(seed);
        let m = make_splits(&corpus, seed, 0.3, 0.1).unwrap().manifest;
        comp += usize::from(m.queries(Split::NovelComposition).next().is_some());
        word += usize::from(m.queries(Split::NovelWord).next().is_some());
    }
    assert!(comp > 20 && word > 20, "novel-composition {comp}, novel-word {word}");
}
