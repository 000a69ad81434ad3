//! Hierarchical semantic graphs for videos and queries.
//!
//! A graph holds action and object nodes with their word vectors; event nodes
//! are produced later by the encoder and appended after these rows. Node
//! order is segment-major (structure-major on the language side) with actions
//! before objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use compground_tensor::Tensor;

use crate::annotation::{Detection, QueryAnnotation, VideoAnnotation};
use crate::embedding::EmbeddingTable;
use crate::error::{check_unit, Error, Result};

/// Padding label used when a segment has fewer detections than its quota.
pub const UNK: &str = "<unk>";
/// Label whose embedding replaces a masked node.
pub const MASK: &str = "<mask>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Action,
    Object,
    Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    ActionAction,
    ActionObject,
    ObjectObject,
}

impl Relation {
    pub const ALL: [Relation; 3] = [
        Relation::ActionAction,
        Relation::ActionObject,
        Relation::ObjectObject,
    ];

    pub fn index(self) -> usize {
        match self {
            Relation::ActionAction => 0,
            Relation::ActionObject => 1,
            Relation::ObjectObject => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Video,
    Language,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticNode {
    pub kind: NodeKind,
    pub label: String,
    /// Segment index (video) or structure index (language).
    pub owner: Option<usize>,
    /// Word vector of the label, before the learned input projection.
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalSemanticGraph {
    pub side: Side,
    pub nodes: Vec<SemanticNode>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub indices: Vec<usize>,
    pub original_labels: Vec<String>,
    pub original_features: Vec<Vec<f32>>,
    pub p: f64,
    pub seed: u64,
}

impl MaskRecord {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

/// Per-segment node quotas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quotas {
    pub actions: usize,
    pub objects: usize,
}

impl Default for Quotas {
    fn default() -> Self {
        Self {
            actions: 3,
            objects: 5,
        }
    }
}

/// Top-`k` labels by score, ties broken by label then list order, padded
/// with [`UNK`].
pub fn top_labels(detections: &[Detection], k: usize) -> Vec<String> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.label.cmp(&b.label)));
    let mut out: Vec<String> = order.into_iter().take(k).map(|d| d.label.clone()).collect();
    out.resize(k, UNK.to_string());
    out
}

fn node(kind: NodeKind, label: &str, owner: usize, table: &EmbeddingTable) -> Result<SemanticNode> {
    Ok(SemanticNode {
        kind,
        label: label.to_string(),
        owner: Some(owner),
        feature: table.embed_label(label)?,
    })
}

pub fn build_video_graph(
    ann: &VideoAnnotation,
    quotas: Quotas,
    table: &EmbeddingTable,
) -> Result<HierarchicalSemanticGraph> {
    if ann.segments.is_empty() {
        return Err(Error::NoSegments(ann.video_id.clone()));
    }
    let mut nodes = Vec::with_capacity(ann.segments.len() * (quotas.actions + quotas.objects));
    for (t, seg) in ann.segments.iter().enumerate() {
        for label in top_labels(&seg.actions, quotas.actions) {
            nodes.push(node(NodeKind::Action, &label, t, table)?);
        }
        for label in top_labels(&seg.objects, quotas.objects) {
            nodes.push(node(NodeKind::Object, &label, t, table)?);
        }
    }
    Ok(HierarchicalSemanticGraph {
        side: Side::Video,
        nodes,
        edges: Vec::new(),
    })
}

pub fn build_language_graph(
    q: &QueryAnnotation,
    table: &EmbeddingTable,
) -> Result<HierarchicalSemanticGraph> {
    if q.structures.is_empty() {
        return Err(Error::NoStructures(q.query_id.clone()));
    }
    let mut nodes = Vec::new();
    for (i, s) in q.structures.iter().enumerate() {
        nodes.push(node(NodeKind::Action, &s.predicate, i, table)?);
        for arg in &s.arguments {
            nodes.push(node(NodeKind::Object, arg, i, table)?);
        }
    }
    Ok(HierarchicalSemanticGraph {
        side: Side::Language,
        nodes,
        edges: Vec::new(),
    })
}

/// The relation an edge between nodes `a` and `b` would carry, if any.
pub fn relation_between(a: &SemanticNode, b: &SemanticNode) -> Option<Relation> {
    let same_owner = a.owner.is_some() && a.owner == b.owner;
    match (a.kind, b.kind) {
        (NodeKind::Action, NodeKind::Action) => Some(Relation::ActionAction),
        (NodeKind::Object, NodeKind::Object) if same_owner => Some(Relation::ObjectObject),
        (NodeKind::Action, NodeKind::Object) | (NodeKind::Object, NodeKind::Action) if same_owner => {
            Some(Relation::ActionObject)
        }
        _ => None,
    }
}

impl HierarchicalSemanticGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn wire_edges(&mut self) -> Result<()> {
        if !self.edges.is_empty() {
            return Err(Error::EdgesPresent);
        }
        for i in 0..self.nodes.len() {
            for j in i + 1..self.nodes.len() {
                if let Some(relation) = relation_between(&self.nodes[i], &self.nodes[j]) {
                    self.edges.push(Edge { i, j, relation });
                }
            }
        }
        Ok(())
    }

    pub fn count_edges(&self, relation: Relation) -> usize {
        self.edges.iter().filter(|e| e.relation == relation).count()
    }

    /// Row-major `n × n` neighbor mask for one relation, symmetric, with an
    /// empty diagonal.
    pub fn adjacency(&self, relation: Relation) -> Vec<bool> {
        let n = self.nodes.len();
        let mut m = vec![false; n * n];
        for e in self.edges.iter().filter(|e| e.relation == relation) {
            m[e.i * n + e.j] = true;
            m[e.j * n + e.i] = true;
        }
        m
    }

    /// Node word vectors stacked as rows.
    pub fn feature_matrix(&self) -> Result<Tensor> {
        let cols = self.nodes.first().map_or(0, |n| n.feature.len());
        let data: Vec<f32> = self.nodes.iter().flat_map(|n| n.feature.iter().copied()).collect();
        Ok(Tensor::from_vec(self.nodes.len(), cols, data)?)
    }

    pub fn kinds(&self) -> Vec<NodeKind> {
        self.nodes.iter().map(|n| n.kind).collect()
    }

    pub fn mask_nodes(&self, p: f64, seed: u64, table: &EmbeddingTable) -> Result<(Self, MaskRecord)> {
        if self.side != Side::Video {
            return Err(Error::LanguageMask);
        }
        check_unit("mask probability", p)?;
        let mask_vec = table.embed_label(MASK)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        let mut record = MaskRecord {
            indices: Vec::new(),
            original_labels: Vec::new(),
            original_features: Vec::new(),
            p,
            seed,
        };
        for (i, n) in out.nodes.iter_mut().enumerate() {
            if n.kind == NodeKind::Event {
                continue;
            }
            if rng.random::<f64>() < p {
                record.indices.push(i);
                record.original_labels.push(std::mem::replace(&mut n.label, MASK.to_string()));
                record
                    .original_features
                    .push(std::mem::replace(&mut n.feature, mask_vec.clone()));
            }
        }
        Ok((out, record))
    }
}
