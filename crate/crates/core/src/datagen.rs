//! Synthetic compositional grounding world.
//!
//! Every action and object word has a prototype feature vector. A video is a
//! sequence of runs; each run spans 1 to `max_run` segments showing one latent
//! structure (an action with one or two objects). Frames are prototype sums
//! plus Gaussian noise, and detections list the latent labels with high
//! scores followed by low-scoring distractor labels. A query describes one
//! run, or two adjacent runs in order, and its ground truth is their span.
//!
//! Some (action, object) pairs are held out of training entirely, as are a
//! few object words. Test videos for those splits put the held-out item in
//! the queried run and fill the remaining runs with seen pairs that share a
//! component with it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{write_records, Detection, QueryAnnotation, Segment, SemanticStructure, VideoAnnotation};
use crate::embedding::fnv1a;
use crate::error::{Error, Result};
use crate::splitter::{Assignment, CompositionType, Split, SplitManifest, Witness};

const ACTION_WORDS: &[&str] = &[
    "open", "close", "hold", "throw", "pull", "push", "lift", "wash", "cut", "pour", "carry", "drop", "kick",
    "fold", "shake", "turn", "catch", "paint", "clean", "drag",
];
const OBJECT_WORDS: &[&str] = &[
    "door", "cup", "ball", "rope", "horse", "box", "book", "towel", "chair", "bottle", "phone", "bag", "plate",
    "shoe", "pillow", "laptop", "flower", "broom", "window", "blanket", "mirror", "basket", "lamp", "kite",
];
const THEN: &str = "then";
const AND: &str = "and";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_actions: usize,
    pub n_objects: usize,
    pub frame_dim: usize,
    pub frames_per_segment: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Longest run of segments sharing one latent.
    pub max_run: usize,
    /// Chance that a query spans two adjacent runs instead of one.
    pub pair_query_probability: f64,
    /// Seconds per segment.
    pub segment_seconds: f64,
    /// Standard deviation of the frame noise.
    pub noise: f64,
    /// Latent detections score in `[1 - detector_eps, 1]`.
    pub detector_eps: f64,
    pub distractor_actions: usize,
    pub distractor_objects: usize,
    /// Held-out (action, object) pairs.
    pub novel_compositions: usize,
    /// Held-out object words.
    pub novel_words: usize,
    /// Probability that a query word is replaced by its synonym token.
    pub synonym_fraction: f64,
    pub train_videos: usize,
    pub test_videos: usize,
    pub queries_per_video: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_actions: 12,
            n_objects: 16,
            frame_dim: 32,
            frames_per_segment: 4,
            min_segments: 4,
            max_segments: 6,
            max_run: 2,
            pair_query_probability: 0.25,
            segment_seconds: 2.0,
            noise: 0.3,
            detector_eps: 0.1,
            distractor_actions: 2,
            distractor_objects: 2,
            novel_compositions: 12,
            novel_words: 2,
            synonym_fraction: 0.0,
            train_videos: 200,
            test_videos: 50,
            queries_per_video: 2,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidWorld(msg));
        if self.n_actions < 2 || self.n_objects < 2 {
            return bad(format!("need at least 2 actions and 2 objects, got {} and {}", self.n_actions, self.n_objects));
        }
        if self.frame_dim == 0 || self.frames_per_segment == 0 {
            return bad("frame_dim and frames_per_segment must be positive".into());
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad(format!("segment range {}..={} is empty", self.min_segments, self.max_segments));
        }
        if self.max_run == 0 || !(0.0..=1.0).contains(&self.pair_query_probability) {
            return bad("max_run must be positive and pair_query_probability in [0, 1]".into());
        }
        if !(self.segment_seconds > 0.0) || !(self.noise >= 0.0) {
            return bad("segment_seconds must be positive and noise nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.detector_eps) || !(0.0..=1.0).contains(&self.synonym_fraction) {
            return bad("detector_eps must be in [0, 1) and synonym_fraction in [0, 1]".into());
        }
        if self.novel_words + 2 > self.n_objects {
            return bad(format!("{} novel words leave fewer than 2 seen objects", self.novel_words));
        }
        let seen_objects = self.n_objects - self.novel_words;
        let pairs = self.n_actions * seen_objects;
        // Every action and object must keep at least one seen pair, plus
        // room for distractor runs.
        if self.novel_compositions + self.n_actions.max(seen_objects) > pairs {
            return bad(format!(
                "{} novel compositions out of {pairs} pairs leave components without seen pairs",
                self.novel_compositions
            ));
        }
        if self.queries_per_video == 0 {
            return bad("queries_per_video must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub action_prototypes: Vec<Vec<f32>>,
    pub object_prototypes: Vec<Vec<f32>>,
    /// Held-out pairs as (action index, object index).
    pub novel_pairs: Vec<(usize, usize)>,
    /// Held-out object indices.
    pub novel_words: Vec<usize>,
}

fn word_list(base: &[&str], n: usize, stem: &str) -> Vec<String> {
    (0..n)
        .map(|i| match base.get(i) {
            Some(w) => w.to_string(),
            None => format!("{stem}{i}"),
        })
        .collect()
}

fn prototype(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

pub fn gen_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let actions = word_list(ACTION_WORDS, spec.n_actions, "action");
    let objects = word_list(OBJECT_WORDS, spec.n_objects, "object");
    let action_prototypes = (0..spec.n_actions).map(|_| prototype(&mut rng, spec.frame_dim)).collect();
    let object_prototypes = (0..spec.n_objects).map(|_| prototype(&mut rng, spec.frame_dim)).collect();

    let mut object_order: Vec<usize> = (0..spec.n_objects).collect();
    object_order.shuffle(&mut rng);
    let mut novel_words: Vec<usize> = object_order[..spec.novel_words].to_vec();
    novel_words.sort();

    let seen_objects: Vec<usize> = (0..spec.n_objects).filter(|o| !novel_words.contains(o)).collect();
    let mut candidates: Vec<(usize, usize)> = (0..spec.n_actions)
        .flat_map(|a| seen_objects.iter().map(move |&o| (a, o)))
        .collect();
    candidates.shuffle(&mut rng);
    let mut novel_pairs = Vec::new();
    let mut seen_per_action = vec![seen_objects.len(); spec.n_actions];
    let mut seen_per_object = vec![spec.n_actions; spec.n_objects];
    for (a, o) in candidates {
        if novel_pairs.len() == spec.novel_compositions {
            break;
        }
        // Keep at least two seen pairs per component so distractor runs
        // sharing a component always exist.
        if seen_per_action[a] > 2 && seen_per_object[o] > 2 {
            seen_per_action[a] -= 1;
            seen_per_object[o] -= 1;
            novel_pairs.push((a, o));
        }
    }
    if novel_pairs.len() < spec.novel_compositions {
        return Err(Error::InvalidWorld(format!(
            "could only hold out {} of {} compositions",
            novel_pairs.len(),
            spec.novel_compositions
        )));
    }
    novel_pairs.sort();
    Ok(World {
        actions,
        objects,
        action_prototypes,
        object_prototypes,
        novel_pairs,
        novel_words,
    })
}

/// One run's latent content: an action and its objects.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Latent {
    action: usize,
    objects: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Focus {
    Seen,
    Pair(usize, usize),
    Word(usize),
}

impl World {
    pub fn is_novel_pair(&self, a: usize, o: usize) -> bool {
        self.novel_pairs.binary_search(&(a, o)).is_ok()
    }

    pub fn is_novel_word(&self, o: usize) -> bool {
        self.novel_words.contains(&o)
    }

    fn seen_pair(&self, a: usize, o: usize) -> bool {
        !self.is_novel_pair(a, o) && !self.is_novel_word(o)
    }

    fn seen_latent(&self, l: &Latent) -> bool {
        l.objects.iter().all(|&o| self.seen_pair(l.action, o))
    }

    pub fn action_index(&self, word: &str) -> Option<usize> {
        self.actions.iter().position(|w| w == word)
    }

    pub fn object_index(&self, word: &str) -> Option<usize> {
        self.objects.iter().position(|w| w == word)
    }

    /// Synonym token of a word; never produced by the detector.
    pub fn synonym(word: &str) -> String {
        format!("{word}_alt")
    }

    fn base_word(token: &str) -> &str {
        token.strip_suffix("_alt").unwrap_or(token)
    }

    fn random_seen_latent(&self, rng: &mut impl Rng) -> Latent {
        loop {
            let action = rng.random_range(0..self.actions.len());
            let k = rng.random_range(1..=2);
            let mut objects: Vec<usize> = (0..self.objects.len()).filter(|&o| self.seen_pair(action, o)).collect();
            objects.shuffle(rng);
            objects.truncate(k);
            objects.sort();
            let l = Latent { action, objects };
            if !l.objects.is_empty() && self.seen_latent(&l) {
                return l;
            }
        }
    }

    /// A latent containing the focus item (and otherwise seen pairs).
    fn focus_latent(&self, focus: Focus, rng: &mut impl Rng) -> Latent {
        match focus {
            Focus::Seen => self.random_seen_latent(rng),
            Focus::Pair(a, o) => Latent { action: a, objects: vec![o] },
            Focus::Word(o) => {
                let action = rng.random_range(0..self.actions.len());
                Latent { action, objects: vec![o] }
            }
        }
    }

    /// A seen latent sharing the action or an object with `target`.
    fn distractor_latent(&self, target: &Latent, rng: &mut impl Rng) -> Latent {
        for _ in 0..64 {
            let l = if rng.random_bool(0.5) {
                let objs: Vec<usize> = (0..self.objects.len())
                    .filter(|&o| self.seen_pair(target.action, o) && !target.objects.contains(&o))
                    .collect();
                match objs.choose(rng) {
                    Some(&o) => Latent { action: target.action, objects: vec![o] },
                    None => continue,
                }
            } else {
                let o = *target.objects.choose(rng).expect("latent has objects");
                let acts: Vec<usize> = (0..self.actions.len())
                    .filter(|&a| a != target.action && self.seen_pair(a, o))
                    .collect();
                match acts.choose(rng) {
                    Some(&a) => Latent { action: a, objects: vec![o] },
                    None => continue,
                }
            };
            if self.seen_latent(&l) {
                return l;
            }
        }
        self.random_seen_latent(rng)
    }
}

/// A generated corpus: per-split annotations and the split manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub splits: BTreeMap<Split, SplitData>,
    pub manifest: SplitManifest,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitData {
    pub videos: Vec<VideoAnnotation>,
    pub queries: Vec<QueryAnnotation>,
}

struct GeneratedVideo {
    video: VideoAnnotation,
    queries: Vec<(QueryAnnotation, Option<Witness>)>,
}

fn derive_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = format!("{}:{index}", split.as_str());
    seed ^ fnv1a(tag.as_bytes()).rotate_left(17)
}

fn segment(world: &World, spec: &WorldSpec, latent: &Latent, rng: &mut impl Rng) -> Segment {
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut base = world.action_prototypes[latent.action].clone();
    for &o in &latent.objects {
        for (b, p) in base.iter_mut().zip(&world.object_prototypes[o]) {
            *b += p;
        }
    }
    let frames = (0..spec.frames_per_segment)
        .map(|_| {
            base.iter()
                .map(|&b| if spec.noise > 0.0 { b + noise.sample(rng) as f32 } else { b })
                .collect()
        })
        .collect();
    let score = |rng: &mut dyn rand::RngCore| 1.0 - spec.detector_eps * rng.random::<f64>();
    let mut actions = vec![Detection::new(world.actions[latent.action].clone(), score(rng))];
    let mut objects: Vec<Detection> = latent
        .objects
        .iter()
        .map(|&o| Detection::new(world.objects[o].clone(), score(rng)))
        .collect();
    let mut others: Vec<usize> = (0..world.actions.len()).filter(|&a| a != latent.action).collect();
    others.shuffle(rng);
    for &a in others.iter().take(spec.distractor_actions) {
        actions.push(Detection::new(world.actions[a].clone(), rng.random_range(0.05..0.5)));
    }
    let mut others: Vec<usize> = (0..world.objects.len())
        .filter(|o| !latent.objects.contains(o) && !world.is_novel_word(*o))
        .collect();
    others.shuffle(rng);
    for &o in others.iter().take(spec.distractor_objects) {
        objects.push(Detection::new(world.objects[o].clone(), rng.random_range(0.05..0.5)));
    }
    Segment { frames, actions, objects }
}

fn structure_of(world: &World, latent: &Latent) -> SemanticStructure {
    SemanticStructure {
        predicate: world.actions[latent.action].clone(),
        arguments: latent.objects.iter().map(|&o| world.objects[o].clone()).collect(),
    }
}

/// Surface tokens of a structure list: `verb obj [and obj] [then ...]`.
pub fn render_tokens(structures: &[SemanticStructure]) -> Vec<String> {
    let mut tokens = Vec::new();
    for (i, s) in structures.iter().enumerate() {
        if i > 0 {
            tokens.push(THEN.to_string());
        }
        tokens.push(s.predicate.clone());
        for (j, a) in s.arguments.iter().enumerate() {
            if j > 0 {
                tokens.push(AND.to_string());
            }
            tokens.push(a.clone());
        }
    }
    tokens
}

fn apply_synonyms(structures: &mut [SemanticStructure], fraction: f64, rng: &mut impl Rng) {
    if fraction <= 0.0 {
        return;
    }
    for s in structures {
        if rng.random_bool(fraction) {
            s.predicate = World::synonym(&s.predicate);
        }
        for a in &mut s.arguments {
            if rng.random_bool(fraction) {
                *a = World::synonym(a);
            }
        }
    }
}

fn gen_video(world: &World, spec: &WorldSpec, split: Split, index: usize, focus: Focus) -> GeneratedVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, split, index));
    let video_id = format!("{}-v{index:04}", split.as_str());
    let t_total = rng.random_range(spec.min_segments..=spec.max_segments);

    let mut lengths = Vec::new();
    let mut left = t_total;
    while left > 0 {
        let l = rng.random_range(1..=left.min(spec.max_run));
        lengths.push(l);
        left -= l;
    }
    let target_run = rng.random_range(0..lengths.len());
    let target = world.focus_latent(focus, &mut rng);
    let mut latents: Vec<Latent> = Vec::with_capacity(lengths.len());
    for r in 0..lengths.len() {
        if r == target_run {
            latents.push(target.clone());
            continue;
        }
        let mut l;
        loop {
            l = if focus == Focus::Seen && rng.random_bool(0.5) {
                world.random_seen_latent(&mut rng)
            } else {
                world.distractor_latent(&target, &mut rng)
            };
            let adjacent_same = r > 0 && latents[r - 1] == l;
            if l != target && !latents.contains(&l) && !adjacent_same {
                break;
            }
        }
        latents.push(l);
    }

    let mut segments = Vec::with_capacity(t_total);
    let mut run_bounds = Vec::with_capacity(lengths.len());
    for (r, &len) in lengths.iter().enumerate() {
        let start = segments.len();
        for _ in 0..len {
            segments.push(segment(world, spec, &latents[r], &mut rng));
        }
        run_bounds.push((start, segments.len()));
    }
    let duration = t_total as f64 * spec.segment_seconds;
    let video = VideoAnnotation {
        video_id: video_id.clone(),
        duration,
        segments,
    };

    // Candidate query spans: single runs and ordered adjacent pairs. Test
    // splits query the focus run only.
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let pair = spec.pair_query_probability;
    if focus == Focus::Seen {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.shuffle(&mut rng);
        for r in order {
            if r + 1 < lengths.len() && rng.random_bool(pair) {
                spans.push((r, r + 1));
            } else {
                spans.push((r, r));
            }
        }
    } else {
        spans.push((target_run, target_run));
        if rng.random_bool(pair) {
            if target_run + 1 < lengths.len() && (target_run == 0 || rng.random_bool(0.5)) {
                spans[0] = (target_run, target_run + 1);
            } else if target_run > 0 {
                spans[0] = (target_run - 1, target_run);
            }
        }
    }
    let wanted = if split == Split::Training { spec.queries_per_video } else { 1 };
    let mut queries = Vec::new();
    for (k, &(a, b)) in spans.iter().take(wanted).enumerate() {
        let mut structures: Vec<SemanticStructure> = (a..=b).map(|r| structure_of(world, &latents[r])).collect();
        apply_synonyms(&mut structures, spec.synonym_fraction, &mut rng);
        let witness = match focus {
            Focus::Seen => None,
            Focus::Pair(x, o) => Some(Witness::Composition {
                kind: CompositionType::VerbNoun,
                first: world.actions[x].clone(),
                second: world.objects[o].clone(),
            }),
            Focus::Word(o) => Some(Witness::Word(world.objects[o].clone())),
        };
        let (s, e) = (run_bounds[a].0, run_bounds[b].1);
        queries.push((
            QueryAnnotation {
                query_id: format!("{video_id}-q{k}"),
                video_id: video_id.clone(),
                tokens: render_tokens(&structures),
                structures,
                gt_interval: (s as f64 * spec.segment_seconds, e as f64 * spec.segment_seconds),
            },
            witness,
        ));
    }
    GeneratedVideo { video, queries }
}

pub fn gen_dataset(spec: &WorldSpec, world: &World) -> Result<GeneratedData> {
    spec.validate()?;
    let plan: Vec<(Split, usize)> = vec![
        (Split::Training, spec.train_videos),
        (Split::TestTrivial, spec.test_videos),
        (Split::NovelComposition, if world.novel_pairs.is_empty() { 0 } else { spec.test_videos }),
        (Split::NovelWord, if world.novel_words.is_empty() { 0 } else { spec.test_videos }),
    ];
    let mut splits = BTreeMap::new();
    let mut assignments = Vec::new();
    for (split, count) in plan {
        let videos: Vec<GeneratedVideo> = (0..count)
            .into_par_iter()
            .map(|i| {
                let focus = match split {
                    Split::Training | Split::TestTrivial => Focus::Seen,
                    Split::NovelComposition => {
                        let (a, o) = world.novel_pairs[i % world.novel_pairs.len()];
                        Focus::Pair(a, o)
                    }
                    Split::NovelWord => Focus::Word(world.novel_words[i % world.novel_words.len()]),
                };
                gen_video(world, spec, split, i, focus)
            })
            .collect();
        let mut data = SplitData::default();
        for g in videos {
            for (q, witness) in g.queries {
                assignments.push(Assignment {
                    query_id: q.query_id.clone(),
                    video_id: q.video_id.clone(),
                    split,
                    witness,
                });
                data.queries.push(q);
            }
            data.videos.push(g.video);
        }
        splits.insert(split, data);
    }
    Ok(GeneratedData {
        splits,
        manifest: SplitManifest {
            seed: spec.seed,
            novel_composition_fraction: None,
            novel_word_fraction: None,
            assignments,
        },
    })
}

/// Writes `world.json`, `manifest.json`, and `<split>.videos.jsonl` /
/// `<split>.queries.jsonl` for every split into `dir`.
pub fn write_dataset(dir: &Path, world: &World, data: &GeneratedData) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("world.json"), serde_json::to_string(world)?)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&data.manifest)?)?;
    for (split, d) in &data.splits {
        write_records(&dir.join(format!("{}.videos.jsonl", split.as_str())), &d.videos)?;
        write_records(&dir.join(format!("{}.queries.jsonl", split.as_str())), &d.queries)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    Word,
    Structure,
}

/// Rebuilds structures from a token sequence: each action token opens a
/// structure, object tokens attach to the open one, and objects before the
/// first action attach to the first action.
pub fn parse_tokens(world: &World, tokens: &[String]) -> Vec<SemanticStructure> {
    let mut structures: Vec<SemanticStructure> = Vec::new();
    let mut leading = Vec::new();
    for tok in tokens {
        let base = World::base_word(tok);
        if world.action_index(base).is_some() {
            structures.push(SemanticStructure {
                predicate: tok.clone(),
                arguments: Vec::new(),
            });
        } else if world.object_index(base).is_some() {
            match structures.last_mut() {
                Some(s) => s.arguments.push(tok.clone()),
                None => leading.push(tok.clone()),
            }
        }
    }
    if let Some(first) = structures.first_mut() {
        leading.extend(first.arguments.drain(..));
        first.arguments = leading;
    }
    structures
}

/// Shuffled copies of `queries`. Word mode permutes the tokens and re-derives
/// the structures; structure mode permutes the structures. Intervals are
/// untouched.
pub fn shuffle_queries(queries: &[QueryAnnotation], mode: ShuffleMode, seed: u64, world: &World) -> Vec<QueryAnnotation> {
    queries
        .iter()
        .map(|q| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(q.query_id.as_bytes()));
            let mut out = q.clone();
            match mode {
                ShuffleMode::Word => {
                    out.tokens.shuffle(&mut rng);
                    let parsed = parse_tokens(world, &out.tokens);
                    if !parsed.is_empty() {
                        out.structures = parsed;
                    }
                }
                ShuffleMode::Structure => {
                    out.structures.shuffle(&mut rng);
                    out.tokens = render_tokens(&out.structures);
                }
            }
            out
        })
        .collect()
}

/// All (action, object) pairs mentioned by a query's structures, as words.
pub fn query_pairs(q: &QueryAnnotation) -> BTreeSet<(String, String)> {
    q.structures
        .iter()
        .flat_map(|s| {
            s.arguments
                .iter()
                .map(move |a| (World::base_word(&s.predicate).to_string(), World::base_word(a).to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldSpec {
        WorldSpec {
            train_videos: 20,
            test_videos: 6,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn world_is_seeded() {
        let s = small();
        let a = gen_world(&s).unwrap();
        assert_eq!(a, gen_world(&s).unwrap());
        assert_eq!(a.action_prototypes.len() + a.object_prototypes.len(), 28);
        let b = gen_world(&WorldSpec { seed: 1, ..s }).unwrap();
        assert_ne!(a.action_prototypes, b.action_prototypes);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(gen_world(&WorldSpec { n_actions: 1, ..small() }).is_err());
        assert!(gen_world(&WorldSpec { min_segments: 7, ..small() }).is_err());
        assert!(gen_world(&WorldSpec { novel_compositions: 500, ..small() }).is_err());
    }

    #[test]
    fn noiseless_frames_are_prototype_sums() {
        let spec = WorldSpec { noise: 0.0, ..small() };
        let world = gen_world(&spec).unwrap();
        let data = gen_dataset(&spec, &world).unwrap();
        let v = &data.splits[&Split::Training].videos[0];
        let seg = &v.segments[0];
        let a = world.action_index(&seg.actions[0].label).unwrap();
        let mut expected = world.action_prototypes[a].clone();
        let n_latent = seg.objects.iter().filter(|d| d.score >= 1.0 - spec.detector_eps).count();
        for d in &seg.objects[..n_latent] {
            let o = world.object_index(&d.label).unwrap();
            for (e, p) in expected.iter_mut().zip(&world.object_prototypes[o]) {
                *e += p;
            }
        }
        for f in &seg.frames {
            assert_eq!(f, &expected);
        }
    }

    #[test]
    fn training_queries_avoid_held_out_items() {
        let spec = small();
        let world = gen_world(&spec).unwrap();
        let data = gen_dataset(&spec, &world).unwrap();
        let novel: BTreeSet<(String, String)> = world
            .novel_pairs
            .iter()
            .map(|&(a, o)| (world.actions[a].clone(), world.objects[o].clone()))
            .collect();
        let novel_words: Vec<&String> = world.novel_words.iter().map(|&o| &world.objects[o]).collect();
        for q in &data.splits[&Split::Training].queries {
            assert!(query_pairs(q).is_disjoint(&novel));
            assert!(q.tokens.iter().all(|t| !novel_words.contains(&t)));
        }
        for q in &data.splits[&Split::NovelComposition].queries {
            assert!(!query_pairs(q).is_disjoint(&novel));
        }
    }

    #[test]
    fn intervals_follow_runs() {
        let spec = small();
        let world = gen_world(&spec).unwrap();
        let data = gen_dataset(&spec, &world).unwrap();
        for d in data.splits.values() {
            for q in &d.queries {
                let v = d.videos.iter().find(|v| v.video_id == q.video_id).unwrap();
                q.validate(Some(v)).unwrap();
                let (s, e) = q.gt_interval;
                let t0 = (s / spec.segment_seconds).round() as usize;
                let t1 = (e / spec.segment_seconds).round() as usize;
                let first = structure_of_segment(&world, &v.segments[t0]);
                assert_eq!(first, q.structures[0]);
                let last = structure_of_segment(&world, &v.segments[t1 - 1]);
                assert_eq!(&last, q.structures.last().unwrap());
            }
        }
    }

    fn structure_of_segment(world: &World, seg: &Segment) -> SemanticStructure {
        let _ = world;
        SemanticStructure {
            predicate: seg.actions[0].label.clone(),
            arguments: seg.objects.iter().filter(|d| d.score >= 0.9).map(|d| d.label.clone()).collect(),
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = small();
        let world = gen_world(&spec).unwrap();
        assert_eq!(gen_dataset(&spec, &world).unwrap(), gen_dataset(&spec, &world).unwrap());
    }

    #[test]
    fn synonyms_replace_query_words() {
        let spec = WorldSpec { synonym_fraction: 1.0, ..small() };
        let world = gen_world(&spec).unwrap();
        let data = gen_dataset(&spec, &world).unwrap();
        let q = &data.splits[&Split::Training].queries[0];
        assert!(q.structures.iter().all(|s| s.predicate.ends_with("_alt")));
        assert_eq!(parse_tokens(&world, &q.tokens), q.structures);
    }

    #[test]
    fn grammar_round_trip() {
        let world = gen_world(&small()).unwrap();
        let s = vec![
            SemanticStructure::new("open", &["door", "box"]),
            SemanticStructure::new("hold", &["cup"]),
        ];
        assert_eq!(parse_tokens(&world, &render_tokens(&s)), s);
        let toks: Vec<String> = ["door", "open", "cup", "then", "hold"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            parse_tokens(&world, &toks),
            vec![SemanticStructure::new("open", &["door", "cup"]), SemanticStructure::new("hold", &[])]
        );
    }

    fn query(structures: Vec<SemanticStructure>) -> QueryAnnotation {
        QueryAnnotation {
            query_id: "q".into(),
            video_id: "v".into(),
            tokens: render_tokens(&structures),
            structures,
            gt_interval: (0.0, 1.0),
        }
    }

    #[test]
    fn single_token_unchanged_by_shuffle() {
        let world = gen_world(&small()).unwrap();
        let q = query(vec![SemanticStructure::new("open", &[])]);
        for mode in [ShuffleMode::Word, ShuffleMode::Structure] {
            assert_eq!(shuffle_queries(std::slice::from_ref(&q), mode, 3, &world)[0], q);
        }
    }

    #[test]
    fn structure_shuffle_reverses_half_the_time() {
        let world = gen_world(&small()).unwrap();
        let q = query(vec![SemanticStructure::new("open", &["door"]), SemanticStructure::new("hold", &["cup"])]);
        let a = shuffle_queries(std::slice::from_ref(&q), ShuffleMode::Structure, 11, &world);
        assert_eq!(a, shuffle_queries(std::slice::from_ref(&q), ShuffleMode::Structure, 11, &world));
        let trials = 10_000u64;
        let reversed = (0..trials)
            .filter(|&s| {
                let out = shuffle_queries(std::slice::from_ref(&q), ShuffleMode::Structure, s, &world);
                out[0].structures[0].predicate == "hold"
            })
            .count();
        let rate = reversed as f64 / trials as f64;
        assert!((rate - 0.5).abs() <= 0.05, "{rate}");
        assert_eq!(a[0].gt_interval, q.gt_interval);
    }
}
