#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use compground::annotation::read_records;
use compground::config::{LossConfig, ModelConfig, RunConfig};
use compground::diagnostics::Instance;
use compground::model::Mode;
use compground::nn::Ctx;
use compground::objectives::{relationship_distribution, sharpen};
use compground::tensor::{ParamStore, Tensor};
use compground::datagen::{gen_dataset, gen_world, GeneratedData, WorldSpec};
use compground::eval::{GroundTruth, PredictionRecord};
use compground::model::detection_vocab;
use compground::splitter::{extract_compositions, tagged, Composition, Pos, Split, SplitManifest, TaggedQuery, Witness};
use compground::train::{Prepared, Trainer};

/// A world small enough to train for a few steps in well under a second.
pub fn tiny_world() -> WorldSpec {
    WorldSpec {
        n_actions: 4,
        n_objects: 5,
        frame_dim: 6,
        frames_per_segment: 2,
        min_segments: 2,
        max_segments: 3,
        novel_compositions: 2,
        novel_words: 1,
        distractor_actions: 1,
        distractor_objects: 1,
        train_videos: 6,
        test_videos: 4,
        queries_per_video: 2,
        ..WorldSpec::default()
    }
}

pub fn tiny_run(dir: &Path) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = ModelConfig {
        d: 8,
        d_word: 8,
        n_objects: 2,
        n_actions: 2,
        n_events: 2,
        scl_layers: 1,
        hsa_layers: 1,
        heads: 2,
        mlp_hidden: 8,
        ..ModelConfig::default()
    };
    run.train.batch = 4;
    run.train.epochs = 2;
    run.train.lr = 0.01;
    run.paths.data_dir = dir.join("data");
    run.paths.out_dir = dir.join("out");
    run.world = tiny_world();
    run
}

pub fn tiny_data(run: &RunConfig) -> GeneratedData {
    let world = gen_world(&run.world).unwrap();
    gen_dataset(&run.world, &world).unwrap()
}

/// A fresh trainer and its prepared training split.
pub fn tiny_trainer(run: &RunConfig) -> (Trainer, Prepared) {
    let data = tiny_data(run);
    let train = &data.splits[&Split::Training];
    let frame_dim = train.videos[0].frame_dim().unwrap();
    let trainer = Trainer::new(run.clone(), frame_dim, detection_vocab(&train.videos)).unwrap();
    let prepared = Prepared::new(&trainer.model, &train.videos, &train.queries).unwrap();
    (trainer, prepared)
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn toy_corpus() -> Vec<TaggedQuery> {
    read_records(&fixture("toy_corpus.jsonl")).unwrap()
}

pub fn toy_manifest() -> SplitManifest {
    serde_json::from_str(&std::fs::read_to_string(fixture("toy_manifest.json")).unwrap()).unwrap()
}

const VERBS: [&str; 6] = ["open", "hold", "wash", "throw", "pull", "close"];
const NOUNS: [&str; 7] = ["door", "cup", "box", "flower", "horse", "window", "table"];
const ADJS: [&str; 3] = ["red", "small", "wooden"];
const ADVS: [&str; 3] = ["slowly", "quickly", "again"];
const ADPS: [&str; 3] = ["on", "under", "near"];

/// A random corpus of a few videos whose queries are built from short
/// dependency-linked phrases.
pub fn random_corpus(seed: u64) -> Vec<TaggedQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::new();
    let videos = rng.random_range(1..9);
    for v in 0..videos {
        for _ in 0..rng.random_range(1..5) {
            let mut tokens: Vec<(&str, &str, Pos)> = Vec::new();
            let mut deps = Vec::new();
            let pick = |rng: &mut ChaCha8Rng, words: &[&'static str]| words[rng.random_range(0..words.len())];
            for _ in 0..rng.random_range(0..4) {
                let (a, b) = match rng.random_range(0..5) {
                    0 => ((pick(&mut rng, &VERBS), Pos::Verb), (pick(&mut rng, &NOUNS), Pos::Noun)),
                    1 => ((pick(&mut rng, &ADJS), Pos::Adj), (pick(&mut rng, &NOUNS), Pos::Noun)),
                    2 => ((pick(&mut rng, &NOUNS), Pos::Noun), (pick(&mut rng, &NOUNS), Pos::Noun)),
                    3 => ((pick(&mut rng, &VERBS), Pos::Verb), (pick(&mut rng, &ADVS), Pos::Adv)),
                    _ => ((pick(&mut rng, &ADPS), Pos::Adp), (pick(&mut rng, &NOUNS), Pos::Noun)),
                };
                let i = tokens.len();
                tokens.push((a.0, a.0, a.1));
                tokens.push((b.0, b.0, b.1));
                // Either direction of the arc is allowed.
                deps.push(if rng.random() { (i, i + 1) } else { (i + 1, i) });
            }
            if tokens.is_empty() {
                tokens.push(("person", "person", Pos::Noun));
            }
            let id = format!("q{}", corpus.len());
            corpus.push(tagged(&id, &format!("v{v}"), &tokens, &deps));
        }
    }
    corpus
}

/// Recomputes I1 to I5 from the corpus without the crate's checker and
/// returns the first violation.
pub fn brute_force_violation(corpus: &[TaggedQuery], m: &SplitManifest) -> Option<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &m.assignments {
        *seen.entry(&a.query_id).or_default() += 1;
    }
    if corpus.iter().any(|q| seen.get(q.query_id.as_str()) != Some(&1)) || seen.len() != corpus.len() {
        return Some("I4".into());
    }
    let split_of: BTreeMap<&str, Split> = m.assignments.iter().map(|a| (a.query_id.as_str(), a.split)).collect();
    let train: Vec<&TaggedQuery> = corpus.iter().filter(|q| split_of[q.query_id.as_str()] == Split::Training).collect();
    let train_videos: BTreeSet<&str> = train.iter().map(|q| q.video_id.as_str()).collect();
    let mut train_words = BTreeSet::new();
    let mut train_comps = Vec::new();
    for q in &train {
        for t in &q.tokens {
            if matches!(t.pos, Pos::Noun | Pos::Verb | Pos::Adj | Pos::Adv) {
                train_words.insert(t.lemma.to_lowercase());
            }
        }
        train_comps.extend(extract_compositions(q));
    }
    for q in corpus {
        let a = m.assignments.iter().find(|a| a.query_id == q.query_id).unwrap();
        if a.split != Split::Training && train_videos.contains(q.video_id.as_str()) {
            return Some(format!("I3 {}", q.video_id));
        }
        match (&a.split, &a.witness) {
            (Split::NovelComposition, Some(Witness::Composition { kind, first, second })) => {
                let k = Composition {
                    kind: *kind,
                    first: first.clone(),
                    second: second.clone(),
                };
                if !extract_compositions(q).contains(&k) {
                    return Some(format!("witness not in {}", q.query_id));
                }
                if train_comps.contains(&k) {
                    return Some(format!("I5 {first} {second}"));
                }
                let first_ok = train_comps.iter().any(|t| t.kind == *kind && t.first == *first);
                let second_ok = train_comps.iter().any(|t| t.kind == *kind && t.second == *second);
                if !first_ok || !second_ok {
                    return Some(format!("I1 {first} {second}"));
                }
            }
            (Split::NovelWord, Some(Witness::Word(w))) => {
                if train_words.contains(w) {
                    return Some(format!("I2 {w}"));
                }
                if !q.tokens.iter().any(|t| t.lemma.to_lowercase() == *w) {
                    return Some(format!("witness not in {}", q.query_id));
                }
            }
            (Split::NovelComposition | Split::NovelWord, _) => return Some("missing witness".into()),
            _ => {}
        }
    }
    None
}

/// Intervals on a 1/64 grid keep every sum and difference exact, so the
/// reference and the library must agree bit for bit.
pub fn interval() -> impl Strategy<Value = (f64, f64)> {
    (0u32..=64, 0u32..=64).prop_map(|(a, b)| {
        let (a, b) = (a.min(b), a.max(b));
        (a as f64 / 64.0, b as f64 / 64.0)
    })
}

pub fn reference_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = if a.1 <= b.0 || b.1 <= a.0 {
        0.0
    } else {
        let lo = if a.0 > b.0 { a.0 } else { b.0 };
        let hi = if a.1 < b.1 { a.1 } else { b.1 };
        hi - lo
    };
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn reference_recall(preds: &[PredictionRecord], gts: &GroundTruth, n: usize, m: f64) -> f64 {
    let mut hits = 0usize;
    for (id, gt) in gts {
        let p = preds.iter().find(|p| &p.query_id == id).unwrap();
        let mut hit = false;
        for k in 0..n.min(p.intervals.len()) {
            if reference_iou(p.intervals[k], *gt) > m {
                hit = true;
            }
        }
        hits += hit as usize;
    }
    100.0 * hits as f64 / gts.len() as f64
}

pub fn reference_miou(preds: &[PredictionRecord], gts: &GroundTruth) -> f64 {
    let mut total = 0.0;
    for (id, gt) in gts {
        let p = preds.iter().find(|p| &p.query_id == id).unwrap();
        total += reference_iou(p.intervals[0], *gt);
    }
    100.0 * total / gts.len() as f64
}

/// The same 1/64 grid drawn from a seeded generator.
pub fn random_metric_case(rng: &mut impl Rng) -> (Vec<PredictionRecord>, GroundTruth) {
    let grid = |rng: &mut _| {
        let (a, b): (u32, u32) = (Rng::random_range(rng, 0..=64), Rng::random_range(rng, 0..=64));
        (a.min(b) as f64 / 64.0, a.max(b) as f64 / 64.0)
    };
    let mut preds = Vec::new();
    let mut gts = GroundTruth::new();
    for i in 0..rng.random_range(1..12) {
        let id = format!("q{i}");
        gts.insert(id.clone(), grid(rng));
        let ranked = (0..rng.random_range(1..6)).map(|_| grid(rng)).collect();
        preds.push(PredictionRecord::new(id, ranked));
    }
    (preds, gts)
}

const TOL: f64 = 1e-6;

fn row_sums(t: &Tensor<f64>) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row(r).iter().sum()).collect()
}

/// Every row sums to one; rows of masked attention may instead be all zero
/// when the node has no admissible partner.
fn stochastic_violation(name: &str, t: &Tensor<f64>, masked: bool) -> Option<String> {
    if !t.data().iter().all(|&v| (0.0..=1.0 + TOL).contains(&v)) {
        return Some(format!("{name} has entries outside [0, 1]"));
    }
    row_sums(t).into_iter().enumerate().find_map(|(r, s)| {
        let ok = (s - 1.0).abs() <= TOL || (masked && t.row(r).iter().all(|&v| v == 0.0));
        (!ok).then(|| format!("{name} row {r} sums to {s}"))
    })
}

/// Checks of one forward pass in both modes: row-stochastic attention,
/// correspondence, pooling and relationship distributions; gates strictly
/// inside (0, 1); ordered intervals in [0, 1]. Returns every violation.
pub fn contract_violations(inst: &Instance) -> Vec<String> {
    let mut bad = Vec::new();
    let store: ParamStore<f64> = inst.model.params.cast();
    for mode in [Mode::Inference, Mode::Training] {
        let mut ctx = Ctx::new(&store, false).with_trace();
        let out = match inst.model.forward(&mut ctx, &inst.video, &inst.video.graph, &inst.query, mode) {
            Ok(o) => o,
            Err(e) => return vec![format!("forward failed: {e}")],
        };
        let names: Vec<String> = ctx.trace.iter().map(|(n, _)| n.clone()).collect();
        for (name, v) in &ctx.trace {
            let masked = name.contains(".scl.") || name.starts_with("cross.");
            bad.extend(stochastic_violation(name, ctx.value(*v), masked));
        }
        let has = |p: &dyn Fn(&str) -> bool| names.iter().any(|n| p(n));
        let t = inst.model.toggles;
        let expected = [
            ("pooling", has(&|n| n == "pooling")),
            ("cross-graph attention", has(&|n| n.starts_with("cross."))),
            ("event attention", !t.hsa || has(&|n| n.contains(".hsa."))),
            ("prior", !t.vcc || has(&|n| n == "z.prior")),
            ("posterior", !t.vcc || has(&|n| n == "z.posterior") == (mode == Mode::Training)),
        ];
        for (what, ok) in expected {
            if !ok {
                bad.push(format!("{what} missing from trace {names:?}"));
            }
        }
        bad.extend(stochastic_violation("z", ctx.value(out.z), false));
        if let Some(g) = out.gates {
            if !ctx.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0) {
                bad.push("gate outside (0, 1)".into());
            }
        }
        let iv = ctx.value(out.head.interval);
        let (s, e) = (iv.get(0, 0), iv.get(0, 1));
        if !(0.0 <= s && s <= e && e <= 1.0) {
            bad.push(format!("interval ({s}, {e})"));
        }
        if !inst.record.is_empty() {
            let po = relationship_distribution(&mut ctx.tape, out.video, &inst.record.indices).unwrap();
            bad.extend(stochastic_violation("P^O", ctx.value(po), false));
            let pt = sharpen(ctx.value(po), LossConfig::default().tau).unwrap();
            bad.extend(stochastic_violation("P^T", &pt, false));
        }
    }
    match inst.model.predict(&inst.video, &inst.query) {
        Ok((s, e)) if 0.0 <= s && s <= e && e <= 1.0 => {}
        other => bad.push(format!("predicted {other:?}")),
    }
    bad
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}
