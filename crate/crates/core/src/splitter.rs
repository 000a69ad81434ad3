//! Compositional re-splitting of a tagged query corpus into training,
//! novel-composition, novel-word, and test-trivial splits.
//!
//! Procedure, all choices seeded:
//!
//! 1. Novel words are drawn from the content lemmas. A candidate is kept only
//!    if every table row and column not headed by a novel word can still be
//!    covered by a query from a video with no novel-word query.
//! 2. Covering: table lines (rows and columns of the five composition
//!    tables) are visited fewest-candidates first; an uncovered line gets one
//!    randomly chosen candidate query, which goes to training together with
//!    every query of its video.
//! 3. Compositions with no training query and no novel-word component are
//!    eligible; a fraction of all compositions is drawn from them, and every
//!    query containing a drawn composition is held out with it as witness.
//! 4. Novel-word queries take their word as witness. Remaining queries of
//!    videos that hold a novel-split query go to test-trivial; everything
//!    else goes to training.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Training,
    NovelComposition,
    NovelWord,
    TestTrivial,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Training, Split::NovelComposition, Split::NovelWord, Split::TestTrivial];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::NovelComposition => "novel-composition",
            Split::NovelWord => "novel-word",
            Split::TestTrivial => "test-trivial",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionType {
    VerbNoun,
    AdjectiveNoun,
    NounNoun,
    VerbAdverb,
    PrepositionNoun,
}

impl CompositionType {
    pub const ALL: [CompositionType; 5] = [
        CompositionType::VerbNoun,
        CompositionType::AdjectiveNoun,
        CompositionType::NounNoun,
        CompositionType::VerbAdverb,
        CompositionType::PrepositionNoun,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompositionType::VerbNoun => "verb-noun",
            CompositionType::AdjectiveNoun => "adjective-noun",
            CompositionType::NounNoun => "noun-noun",
            CompositionType::VerbAdverb => "verb-adverb",
            CompositionType::PrepositionNoun => "preposition-noun",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Witness {
    Composition {
        kind: CompositionType,
        first: String,
        second: String,
    },
    Word(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    pub query_id: String,
    pub video_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    #[serde(default)]
    pub novel_composition_fraction: Option<f64>,
    #[serde(default)]
    pub novel_word_fraction: Option<f64>,
    pub assignments: Vec<Assignment>,
}

impl SplitManifest {
    pub fn split_of(&self, query_id: &str) -> Option<Split> {
        self.assignments.iter().find(|a| a.query_id == query_id).map(|a| a.split)
    }

    pub fn queries(&self, split: Split) -> impl Iterator<Item = &Assignment> {
        self.assignments.iter().filter(move |a| a.split == split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pos {
    #[serde(rename = "NOUN", alias = "PROPN")]
    Noun,
    #[serde(rename = "VERB")]
    Verb,
    #[serde(rename = "ADJ")]
    Adj,
    #[serde(rename = "ADV")]
    Adv,
    #[serde(rename = "ADP")]
    Adp,
    #[serde(other)]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedToken {
    pub text: String,
    pub lemma: String,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dependency {
    pub head: usize,
    pub dependent: usize,
    #[serde(default)]
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedQuery {
    pub query_id: String,
    pub video_id: String,
    pub tokens: Vec<TaggedToken>,
    #[serde(default)]
    pub dependencies: Vec<Dependency>,
    #[serde(default)]
    pub text: String,
    /// Seconds; used only for statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_duration: Option<f64>,
}

impl TaggedQuery {
    pub fn validate(&self) -> Result<()> {
        for d in &self.dependencies {
            if d.head >= self.tokens.len() || d.dependent >= self.tokens.len() {
                return Err(Error::InvalidAnnotation(format!(
                    "query `{}`: dependency {}->{} outside {} tokens",
                    self.query_id,
                    d.head,
                    d.dependent,
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }

    fn lemma(&self, i: usize) -> String {
        self.tokens[i].lemma.to_lowercase()
    }

    /// Lowercased lemmas of content tokens.
    pub fn content_lemmas(&self) -> BTreeSet<String> {
        self.tokens
            .iter()
            .filter(|t| matches!(t.pos, Pos::Noun | Pos::Verb | Pos::Adj | Pos::Adv))
            .map(|t| t.lemma.to_lowercase())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub kind: CompositionType,
    pub first: String,
    pub second: String,
}

/// Compositions of one query. POS signatures of a dependency pair map to
/// types as follows (unordered): verb+noun → verb-noun (verb, noun);
/// adj+noun → adjective-noun (adj, noun); noun+noun → noun-noun
/// (dependent, head); verb+adv → verb-adverb (verb, adv); adp+noun →
/// preposition-noun (adp, noun).
pub fn extract_compositions(q: &TaggedQuery) -> Vec<Composition> {
    let mut out = Vec::new();
    for d in &q.dependencies {
        let (h, t) = (d.head, d.dependent);
        if h >= q.tokens.len() || t >= q.tokens.len() || h == t {
            continue;
        }
        let (ph, pt) = (q.tokens[h].pos, q.tokens[t].pos);
        let pick = |a: Pos, b: Pos| -> Option<(usize, usize)> {
            if ph == a && pt == b {
                Some((h, t))
            } else if ph == b && pt == a {
                Some((t, h))
            } else {
                None
            }
        };
        let found = if ph == Pos::Noun && pt == Pos::Noun {
            Some((CompositionType::NounNoun, t, h))
        } else if let Some((a, b)) = pick(Pos::Verb, Pos::Noun) {
            Some((CompositionType::VerbNoun, a, b))
        } else if let Some((a, b)) = pick(Pos::Adj, Pos::Noun) {
            Some((CompositionType::AdjectiveNoun, a, b))
        } else if let Some((a, b)) = pick(Pos::Verb, Pos::Adv) {
            Some((CompositionType::VerbAdverb, a, b))
        } else if let Some((a, b)) = pick(Pos::Adp, Pos::Noun) {
            Some((CompositionType::PrepositionNoun, a, b))
        } else {
            None
        };
        if let Some((kind, a, b)) = found {
            out.push(Composition {
                kind,
                first: q.lemma(a),
                second: q.lemma(b),
            });
        }
    }
    out
}

/// Row/column statistics table of one composition type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub kind: CompositionType,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `(row, col)` → ids of queries containing the composition.
    pub cells: BTreeMap<(String, String), Vec<String>>,
}

impl CompositionTable {
    pub fn cell(&self, first: &str, second: &str) -> &[String] {
        self.cells
            .get(&(first.to_string(), second.to_string()))
            .map_or(&[], Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// One table per composition type, in [`CompositionType::ALL`] order.
pub fn build_tables(corpus: &[TaggedQuery]) -> Vec<CompositionTable> {
    let mut cells: BTreeMap<CompositionType, BTreeMap<(String, String), Vec<String>>> = BTreeMap::new();
    for q in corpus {
        let mut seen = BTreeSet::new();
        for c in extract_compositions(q) {
            if seen.insert(c.clone()) {
                cells
                    .entry(c.kind)
                    .or_default()
                    .entry((c.first, c.second))
                    .or_default()
                    .push(q.query_id.clone());
            }
        }
    }
    CompositionType::ALL
        .iter()
        .map(|&kind| {
            let cells = cells.remove(&kind).unwrap_or_default();
            let rows: BTreeSet<String> = cells.keys().map(|(r, _)| r.clone()).collect();
            let cols: BTreeSet<String> = cells.keys().map(|(_, c)| c.clone()).collect();
            CompositionTable {
                kind,
                rows: rows.into_iter().collect(),
                cols: cols.into_iter().collect(),
                cells,
            }
        })
        .collect()
}

/// A table row or column: the queries holding any composition in it.
struct Line {
    kind: CompositionType,
    axis: &'static str,
    word: String,
    queries: Vec<usize>,
}

fn table_lines(tables: &[CompositionTable], index: &HashMap<&str, usize>) -> Vec<Line> {
    let mut lines = Vec::new();
    for t in tables {
        let mut rows: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        let mut cols: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for ((r, c), ids) in &t.cells {
            for id in ids {
                let i = index[id.as_str()];
                rows.entry(r).or_default().insert(i);
                cols.entry(c).or_default().insert(i);
            }
        }
        for (axis, map) in [("row", rows), ("column", cols)] {
            for (word, qs) in map {
                lines.push(Line {
                    kind: t.kind,
                    axis,
                    word: word.to_string(),
                    queries: qs.into_iter().collect(),
                });
            }
        }
    }
    lines
}

struct Corpus {
    video_of: Vec<usize>,
    videos: Vec<Vec<usize>>,
    lemmas: Vec<BTreeSet<String>>,
    comps: Vec<BTreeSet<Composition>>,
}

impl Corpus {
    fn new(queries: &[TaggedQuery]) -> Self {
        let mut vid_index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut video_of = Vec::with_capacity(queries.len());
        let mut videos: Vec<Vec<usize>> = Vec::new();
        for (i, q) in queries.iter().enumerate() {
            let next = vid_index.len();
            let v = *vid_index.entry(q.video_id.as_str()).or_insert(next);
            if v == videos.len() {
                videos.push(Vec::new());
            }
            videos[v].push(i);
            video_of.push(v);
        }
        Self {
            video_of,
            videos,
            lemmas: queries.iter().map(TaggedQuery::content_lemmas).collect(),
            comps: queries.iter().map(|q| extract_compositions(q).into_iter().collect()).collect(),
        }
    }

    /// Videos holding a query with any of `words`.
    fn blocked_videos(&self, words: &BTreeSet<String>) -> Vec<bool> {
        let mut blocked = vec![false; self.videos.len()];
        for (i, l) in self.lemmas.iter().enumerate() {
            if !l.is_disjoint(words) {
                blocked[self.video_of[i]] = true;
            }
        }
        blocked
    }

    /// First line (in `lines` order) that cannot be covered, if any.
    fn uncoverable<'l>(&self, lines: &'l [Line], words: &BTreeSet<String>, blocked: &[bool]) -> Option<&'l Line> {
        lines.iter().find(|l| {
            !words.contains(&l.word) && l.queries.iter().all(|&q| blocked[self.video_of[q]])
        })
    }
}

fn round_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Output of [`make_splits`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub manifest: SplitManifest,
    pub warnings: Vec<String>,
}

pub fn make_splits(
    corpus: &[TaggedQuery],
    seed: u64,
    novel_comp_fraction: f64,
    novel_word_fraction: f64,
) -> Result<SplitOutcome> {
    if corpus.is_empty() {
        return Err(Error::InvalidAnnotation("empty corpus".into()));
    }
    for (name, f) in [("novel_comp_fraction", novel_comp_fraction), ("novel_word_fraction", novel_word_fraction)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::OutOfRange { name, value: f, range: "(0, 1)" });
        }
    }
    let mut ids = BTreeSet::new();
    for q in corpus {
        q.validate()?;
        if !ids.insert(q.query_id.as_str()) {
            return Err(Error::InvalidAnnotation(format!("duplicate query id `{}`", q.query_id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Corpus::new(corpus);
    let index: HashMap<&str, usize> = corpus.iter().enumerate().map(|(i, q)| (q.query_id.as_str(), i)).collect();
    let tables = build_tables(corpus);
    let mut lines = table_lines(&tables, &index);

    // 1. Novel words.
    let vocab: BTreeSet<String> = c.lemmas.iter().flatten().cloned().collect();
    let mut candidates: Vec<String> = vocab.iter().cloned().collect();
    candidates.shuffle(&mut rng);
    let want_words = round_count(novel_word_fraction, vocab.len());
    let mut novel_words = BTreeSet::new();
    for w in candidates {
        if novel_words.len() == want_words {
            break;
        }
        novel_words.insert(w.clone());
        let blocked = c.blocked_videos(&novel_words);
        // A word whose queries fill the whole corpus would leave nothing
        // for training.
        let all_blocked = blocked.iter().all(|&b| b);
        if all_blocked || c.uncoverable(&lines, &novel_words, &blocked).is_some() {
            novel_words.remove(&w);
        }
    }
    let blocked = c.blocked_videos(&novel_words);

    // 2. Covering.
    let mut split: Vec<Option<Split>> = vec![None; corpus.len()];
    let mut training_video = vec![false; c.videos.len()];
    lines.shuffle(&mut rng);
    let allowed = |l: &Line| -> Vec<usize> { l.queries.iter().copied().filter(|&q| !blocked[c.video_of[q]]).collect() };
    lines.sort_by_key(|l| allowed(l).len());
    for line in &lines {
        if novel_words.contains(&line.word) {
            continue;
        }
        if line.queries.iter().any(|&q| training_video[c.video_of[q]]) {
            continue;
        }
        let options = allowed(line);
        if options.is_empty() {
            return Err(Error::InfeasibleCovering {
                table: line.kind.as_str().to_string(),
                axis: line.axis,
                component: line.word.clone(),
            });
        }
        let pick = options[rng.random_range(0..options.len())];
        training_video[c.video_of[pick]] = true;
    }
    for (v, qs) in c.videos.iter().enumerate() {
        if training_video[v] {
            for &q in qs {
                split[q] = Some(Split::Training);
            }
        }
    }
    let mut witness: Vec<Option<Witness>> = vec![None; corpus.len()];

    // 4a. Novel-word queries.
    for (i, l) in c.lemmas.iter().enumerate() {
        if let Some(w) = l.intersection(&novel_words).next() {
            split[i] = Some(Split::NovelWord);
            witness[i] = Some(Witness::Word(w.clone()));
        }
    }

    // 3. Novel compositions.
    let trained: BTreeSet<&Composition> = (0..corpus.len())
        .filter(|&i| split[i] == Some(Split::Training))
        .flat_map(|i| c.comps[i].iter())
        .collect();
    let all_comps: BTreeSet<&Composition> = c.comps.iter().flatten().collect();
    let mut eligible: Vec<&Composition> = all_comps
        .iter()
        .copied()
        .filter(|k| !trained.contains(k) && !novel_words.contains(&k.first) && !novel_words.contains(&k.second))
        .collect();
    eligible.shuffle(&mut rng);
    eligible.truncate(round_count(novel_comp_fraction, all_comps.len()));
    eligible.sort();
    for (i, comps) in c.comps.iter().enumerate() {
        if split[i].is_some() {
            continue;
        }
        if let Some(k) = eligible.iter().find(|k| comps.contains(**k)) {
            split[i] = Some(Split::NovelComposition);
            witness[i] = Some(Witness::Composition {
                kind: k.kind,
                first: k.first.clone(),
                second: k.second.clone(),
            });
        }
    }

    // 4b. Companions and the rest.
    for qs in &c.videos {
        let held_out = qs
            .iter()
            .any(|&q| matches!(split[q], Some(Split::NovelComposition | Split::NovelWord)));
        for &q in qs {
            if split[q].is_none() {
                split[q] = Some(if held_out { Split::TestTrivial } else { Split::Training });
            }
        }
    }

    let assignments: Vec<Assignment> = corpus
        .iter()
        .enumerate()
        .map(|(i, q)| Assignment {
            query_id: q.query_id.clone(),
            video_id: q.video_id.clone(),
            split: split[i].expect("every query assigned"),
            witness: witness[i].take(),
        })
        .collect();
    let manifest = SplitManifest {
        seed,
        novel_composition_fraction: Some(novel_comp_fraction),
        novel_word_fraction: Some(novel_word_fraction),
        assignments,
    };
    let mut warnings = Vec::new();
    for s in [Split::NovelComposition, Split::NovelWord] {
        if manifest.queries(s).next().is_none() {
            warnings.push(format!("split {} is empty", s.as_str()));
        }
    }
    verify_manifest(corpus, &manifest)?;
    Ok(SplitOutcome { manifest, warnings })
}

/// Checks the five split invariants.
///
/// * I1: each component of every novel-composition witness appears, in the
///   same role, in a training query.
/// * I2: no novel-word witness appears in a training query.
/// * I3: no video has both training and test queries.
/// * I4: every query is assigned exactly once.
/// * I5: no novel-composition witness appears in a training query.
pub fn verify_manifest(corpus: &[TaggedQuery], manifest: &SplitManifest) -> Result<()> {
    let mut count: HashMap<&str, usize> = HashMap::new();
    for a in &manifest.assignments {
        *count.entry(a.query_id.as_str()).or_default() += 1;
    }
    for q in corpus {
        match count.get(q.query_id.as_str()) {
            Some(1) => {}
            n => {
                return Err(Error::SplitInvariant(
                    "I4",
                    format!("query `{}` assigned {} times", q.query_id, n.copied().unwrap_or(0)),
                ))
            }
        }
    }
    if manifest.assignments.len() != corpus.len() {
        return Err(Error::SplitInvariant("I4", "manifest lists queries outside the corpus".into()));
    }
    let by_id: HashMap<&str, &TaggedQuery> = corpus.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let training: Vec<&TaggedQuery> = manifest
        .queries(Split::Training)
        .map(|a| by_id[a.query_id.as_str()])
        .collect();
    let train_comps: BTreeSet<Composition> = training.iter().flat_map(|q| extract_compositions(q)).collect();
    let train_lemmas: BTreeSet<String> = training.iter().flat_map(|q| q.content_lemmas()).collect();
    let train_videos: BTreeSet<&str> = training.iter().map(|q| q.video_id.as_str()).collect();
    for a in &manifest.assignments {
        if a.split != Split::Training && train_videos.contains(a.video_id.as_str()) {
            return Err(Error::SplitInvariant(
                "I3",
                format!("video `{}` is in training and {}", a.video_id, a.split.as_str()),
            ));
        }
        match (&a.split, &a.witness) {
            (Split::NovelComposition, Some(Witness::Composition { kind, first, second })) => {
                let k = Composition {
                    kind: *kind,
                    first: first.clone(),
                    second: second.clone(),
                };
                if train_comps.contains(&k) {
                    return Err(Error::SplitInvariant("I5", format!("{first} {second} appears in training")));
                }
                let has_first = train_comps.iter().any(|t| t.kind == *kind && t.first == *first);
                let has_second = train_comps.iter().any(|t| t.kind == *kind && t.second == *second);
                if !has_first || !has_second {
                    return Err(Error::SplitInvariant(
                        "I1",
                        format!("a component of {first} {second} is missing from training"),
                    ));
                }
            }
            (Split::NovelWord, Some(Witness::Word(w))) => {
                if train_lemmas.contains(w) {
                    return Err(Error::SplitInvariant("I2", format!("novel word `{w}` appears in training")));
                }
            }
            (Split::NovelComposition | Split::NovelWord, _) => {
                return Err(Error::SplitInvariant(
                    "I4",
                    format!("query `{}` lacks a matching witness", a.query_id),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub videos: usize,
    /// Seconds; zero when durations are unknown.
    pub average_video_length: f64,
    pub queries: usize,
    /// Tokens per query.
    pub average_query_length: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsReport {
    pub splits: Vec<SplitStats>,
    /// Novel-composition queries per composition type.
    pub composition_types: BTreeMap<String, usize>,
}

impl StatsReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<18} {:>7} {:>10} {:>8} {:>10}\n",
            "split", "videos", "avg len s", "queries", "avg words"
        );
        for s in &self.splits {
            out.push_str(&format!(
                "{:<18} {:>7} {:>10.2} {:>8} {:>10.2}\n",
                s.split, s.videos, s.average_video_length, s.queries, s.average_query_length
            ));
        }
        out.push_str("novel-composition types:\n");
        for (k, n) in &self.composition_types {
            out.push_str(&format!("  {k:<18} {n}\n"));
        }
        out
    }
}

pub fn report_stats(manifest: &SplitManifest, corpus: &[TaggedQuery]) -> Result<StatsReport> {
    let by_id: HashMap<&str, &TaggedQuery> = corpus.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let mut splits = Vec::new();
    for s in Split::ALL {
        let qs: Vec<&TaggedQuery> = manifest
            .queries(s)
            .map(|a| {
                by_id
                    .get(a.query_id.as_str())
                    .copied()
                    .ok_or_else(|| Error::NotFound(format!("query `{}`", a.query_id)))
            })
            .collect::<Result<_>>()?;
        let mut videos: BTreeMap<&str, Option<f64>> = BTreeMap::new();
        for q in &qs {
            videos.insert(q.video_id.as_str(), q.video_duration);
        }
        let known: Vec<f64> = videos.values().flatten().copied().collect();
        let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        let lengths: Vec<f64> = qs.iter().map(|q| q.tokens.len() as f64).collect();
        splits.push(SplitStats {
            split: s.as_str().to_string(),
            videos: videos.len(),
            average_video_length: mean(&known),
            queries: qs.len(),
            average_query_length: mean(&lengths),
        });
    }
    let mut composition_types: BTreeMap<String, usize> =
        CompositionType::ALL.iter().map(|k| (k.as_str().to_string(), 0)).collect();
    for a in manifest.queries(Split::NovelComposition) {
        if let Some(Witness::Composition { kind, .. }) = &a.witness {
            *composition_types.entry(kind.as_str().to_string()).or_default() += 1;
        }
    }
    Ok(StatsReport { splits, composition_types })
}

/// Builds a tagged query from `(text, lemma, pos)` triples and
/// `(head, dependent)` pairs.
pub fn tagged(query_id: &str, video_id: &str, tokens: &[(&str, &str, Pos)], deps: &[(usize, usize)]) -> TaggedQuery {
    TaggedQuery {
        query_id: query_id.to_string(),
        video_id: video_id.to_string(),
        tokens: tokens
            .iter()
            .map(|&(text, lemma, pos)| TaggedToken {
                text: text.to_string(),
                lemma: lemma.to_string(),
                pos,
            })
            .collect(),
        dependencies: deps
            .iter()
            .map(|&(head, dependent)| Dependency {
                head,
                dependent,
                relation: String::new(),
            })
            .collect(),
        text: tokens.iter().map(|t| t.0).collect::<Vec<_>>().join(" "),
        video_duration: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Pos::*;

    #[test]
    fn throws_flowers() {
        let q = tagged("q", "v", &[("throws", "throw", Verb), ("Flowers", "Flower", Noun)], &[(0, 1)]);
        assert_eq!(
            extract_compositions(&q),
            vec![Composition {
                kind: CompositionType::VerbNoun,
                first: "throw".into(),
                second: "flower".into()
            }]
        );
        let q = tagged("q", "v", &[("pulling", "pull", Verb), ("horse", "horse", Noun)], &[(0, 1)]);
        assert_eq!(extract_compositions(&q)[0].first, "pull");
        let q = tagged("q", "v", &[("runs", "run", Verb)], &[]);
        assert!(extract_compositions(&q).is_empty());
    }

    #[test]
    fn signature_table() {
        let toks = [
            ("red", "red", Adj),
            ("ball", "ball", Noun),
            ("tennis", "tennis", Noun),
            ("quickly", "quickly", Adv),
            ("runs", "run", Verb),
            ("on", "on", Adp),
        ];
        let q = tagged("q", "v", &toks, &[(1, 0), (1, 2), (4, 3), (1, 5)]);
        let kinds: Vec<(CompositionType, String, String)> = extract_compositions(&q)
            .into_iter()
            .map(|c| (c.kind, c.first, c.second))
            .collect();
        assert_eq!(
            kinds,
            vec![
                (CompositionType::AdjectiveNoun, "red".into(), "ball".into()),
                (CompositionType::NounNoun, "tennis".into(), "ball".into()),
                (CompositionType::VerbAdverb, "run".into(), "quickly".into()),
                (CompositionType::PrepositionNoun, "on".into(), "ball".into()),
            ]
        );
    }

    #[test]
    fn tables_count_cells() {
        let one = vec![tagged("a", "v", &[("open", "open", Verb), ("door", "door", Noun)], &[(0, 1)])];
        let t = build_tables(&one);
        assert_eq!(t.len(), 5);
        assert_eq!((t[0].rows.len(), t[0].cols.len()), (1, 1));
        assert!(t[1..].iter().all(CompositionTable::is_empty));
        let three: Vec<TaggedQuery> = (0..3)
            .map(|i| tagged(&format!("q{i}"), "v", &[("open", "open", Verb), ("door", "door", Noun)], &[(0, 1)]))
            .collect();
        assert_eq!(build_tables(&three)[0].cell("open", "door").len(), 3);
        assert_eq!(build_tables(&three), build_tables(&three));
    }

    #[test]
    fn single_video_goes_to_training() {
        let corpus = vec![
            tagged("a", "v", &[("open", "open", Verb), ("door", "door", Noun)], &[(0, 1)]),
            tagged("b", "v", &[("hold", "hold", Verb), ("cup", "cup", Noun)], &[(0, 1)]),
        ];
        let out = make_splits(&corpus, 1, 0.5, 0.5).unwrap();
        assert!(out.manifest.assignments.iter().all(|a| a.split == Split::Training));
        assert_eq!(out.warnings.len(), 2);
    }

    #[test]
    fn fractions_validated() {
        let corpus = vec![tagged("a", "v", &[("open", "open", Verb)], &[])];
        assert!(make_splits(&corpus, 0, 0.0, 0.5).is_err());
        assert!(make_splits(&corpus, 0, 0.5, 1.0).is_err());
    }

    #[test]
    fn verify_detects_violations() {
        let corpus = vec![
            tagged("a", "v1", &[("open", "open", Verb), ("door", "door", Noun)], &[(0, 1)]),
            tagged("b", "v1", &[("hold", "hold", Verb), ("cup", "cup", Noun)], &[(0, 1)]),
        ];
        let mut m = SplitManifest {
            seed: 0,
            novel_composition_fraction: None,
            novel_word_fraction: None,
            assignments: vec![
                Assignment { query_id: "a".into(), video_id: "v1".into(), split: Split::Training, witness: None },
                Assignment { query_id: "b".into(), video_id: "v1".into(), split: Split::TestTrivial, witness: None },
            ],
        };
        assert!(matches!(verify_manifest(&corpus, &m), Err(Error::SplitInvariant("I3", _))));
        m.assignments.pop();
        assert!(matches!(verify_manifest(&corpus, &m), Err(Error::SplitInvariant("I4", _))));
    }

    #[test]
    fn empty_split_stats_are_zero() {
        let corpus = vec![tagged("a", "v", &[("open", "open", Verb)], &[])];
        let out = make_splits(&corpus, 0, 0.5, 0.5).unwrap();
        let stats = report_stats(&out.manifest, &corpus).unwrap();
        let total: usize = stats.splits.iter().map(|s| s.queries).sum();
        assert_eq!(total, 1);
        let nc = &stats.splits[1];
        assert_eq!((nc.videos, nc.queries, nc.average_query_length), (0, 0, 0.0));
    }
}
