//! The grounding model: parameters, inputs, and the forward pass.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use compground_tensor::{ParamStore, Real, Tensor, Var};

use crate::annotation::{QueryAnnotation, VideoAnnotation};
use crate::config::{ModelConfig, Toggles};
use crate::crossgraph::{self, IntervalHead};
use crate::embedding::EmbeddingTable;
use crate::encoder::{self, VideoFrames};
use crate::error::{Error, Result};
use crate::graph::{self, HierarchicalSemanticGraph, NodeKind, Quotas, UNK};
use crate::nn::{scaled_normal, Ctx};

/// A video prepared for the model: its wired graph, frames, and segment rows.
#[derive(Debug, Clone)]
pub struct VideoInput {
    pub video_id: String,
    pub graph: HierarchicalSemanticGraph,
    pub frames: VideoFrames,
    pub segments: Tensor<f32>,
}

impl VideoInput {
    pub fn new(ann: &VideoAnnotation, quotas: Quotas, table: &EmbeddingTable) -> Result<Self> {
        ann.validate()?;
        let mut graph = graph::build_video_graph(ann, quotas, table)?;
        graph.wire_edges()?;
        let frames = VideoFrames::from_annotation(ann)?;
        let segments = crossgraph::segment_rows(&frames);
        Ok(Self {
            video_id: ann.video_id.clone(),
            graph,
            frames,
            segments,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.frames.num_segments()
    }
}

/// A query prepared for the model, with its interval normalized to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct QueryInput {
    pub query_id: String,
    pub video_id: String,
    pub graph: HierarchicalSemanticGraph,
    pub interval: (f64, f64),
}

impl QueryInput {
    pub fn new(q: &QueryAnnotation, video: &VideoAnnotation, table: &EmbeddingTable) -> Result<Self> {
        q.validate(Some(video))?;
        let mut graph = graph::build_language_graph(q, table)?;
        graph.wire_edges()?;
        Ok(Self {
            query_id: q.query_id.clone(),
            video_id: q.video_id.clone(),
            graph,
            interval: q.normalized_interval(video.duration),
        })
    }
}

/// Which correspondence drives the interval head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Prior only, as at inference.
    Inference,
    /// Prior and posterior; the head consumes the posterior.
    Training,
}

/// Handles to the intermediate values of one forward pass.
pub struct Forward {
    /// Encoded video rows `[N_v + N_p, d]` before adaptation.
    pub video: Var,
    pub language: Var,
    pub video_kinds: Vec<NodeKind>,
    pub language_kinds: Vec<NodeKind>,
    /// Average-pooled adapted graphs, `[1, d]` each.
    pub pooled_video: Var,
    pub pooled_language: Var,
    pub z_prior: Option<Var>,
    pub z_posterior: Option<Var>,
    /// The correspondence fed to the head.
    pub z: Var,
    pub head: IntervalHead,
    pub gates: Option<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub toggles: Toggles,
    pub frame_dim: usize,
    /// Classifier vocabulary for masked-node prediction.
    pub vocab: Vec<String>,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, toggles: Toggles, frame_dim: usize, vocab: Vec<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, layers_s, layers_h) = (config.d, config.scl_layers, config.hsa_layers);
        let mut p = ParamStore::new();
        p.insert("input", scaled_normal(&mut rng, config.d_word, d, 1.0));
        for side in ["video", "lang"] {
            encoder::init_scl(&mut p, &mut rng, side, d, layers_s);
            encoder::init_hsa(&mut p, &mut rng, side, d, layers_h, config.n_events);
        }
        encoder::init_vcl(&mut p, &mut rng, d, frame_dim);
        p.insert("adapt.video", Tensor::eye(d));
        p.insert("adapt.lang", Tensor::eye(d));
        crossgraph::init_cross(&mut p, &mut rng, "cross.v2l", d);
        crossgraph::init_cross(&mut p, &mut rng, "cross.l2v", d);
        crossgraph::init_correspondence(&mut p, &mut rng, d);
        crossgraph::init_likelihood(&mut p, &mut rng, d, frame_dim, config.mlp_hidden);
        p.insert("msm.w", scaled_normal(&mut rng, d, vocab.len().max(1), 1.0));
        p.insert("msm.b", Tensor::zeros(1, vocab.len().max(1)));
        Self {
            config,
            toggles,
            frame_dim,
            vocab,
            params: p,
        }
    }

    pub fn quotas(&self) -> Quotas {
        Quotas {
            actions: self.config.n_actions,
            objects: self.config.n_objects,
        }
    }

    pub fn embedding_table(&self) -> Result<EmbeddingTable> {
        match &self.config.embeddings {
            Some(path) => EmbeddingTable::load_text(path, self.config.d_word, self.config.embedding_seed),
            None => Ok(EmbeddingTable::hashed(self.config.d_word, self.config.embedding_seed)),
        }
    }

    pub fn vocab_index(&self) -> HashMap<&str, usize> {
        self.vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect()
    }

    /// Class indices of `labels`, failing on labels outside the vocabulary.
    pub fn class_targets(&self, labels: &[String]) -> Result<Vec<usize>> {
        let index = self.vocab_index();
        labels
            .iter()
            .map(|l| index.get(l.as_str()).copied().ok_or_else(|| Error::UnknownLabel(l.clone())))
            .collect()
    }

    /// Encodes a video graph (possibly masked) into `[N_v + N_p, d]` rows.
    pub fn encode_video<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        g: &HierarchicalSemanticGraph,
        frames: &VideoFrames,
    ) -> Result<(Var, Option<Var>)> {
        let x = ctx.constant(&g.feature_matrix()?);
        let mut s = ctx.linear(x, "input")?;
        if self.toggles.scl {
            let masks = encoder::relation_masks(g);
            s = encoder::semantic_contextualize(ctx, s, &masks, "video", self.config.scl_layers)?;
        }
        let mut gates = None;
        if self.toggles.vcl {
            let owners: Vec<usize> = g
                .nodes
                .iter()
                .map(|n| n.owner.ok_or_else(|| Error::InvalidAnnotation("video node without segment".into())))
                .collect::<Result<_>>()?;
            let (refined, gate) = encoder::visual_contextualize(ctx, s, &owners, frames)?;
            s = refined;
            gates = Some(gate);
        }
        if self.toggles.hsa {
            s = encoder::aggregate_events(ctx, s, "video", self.config.hsa_layers)?;
        }
        Ok((s, gates))
    }

    pub fn encode_language<T: Real>(&self, ctx: &mut Ctx<'_, T>, g: &HierarchicalSemanticGraph) -> Result<Var> {
        let x = ctx.constant(&g.feature_matrix()?);
        let mut s = ctx.linear(x, "input")?;
        if self.toggles.scl {
            let masks = encoder::relation_masks(g);
            s = encoder::semantic_contextualize(ctx, s, &masks, "lang", self.config.scl_layers)?;
        }
        if self.toggles.hsa {
            s = encoder::aggregate_events(ctx, s, "lang", self.config.hsa_layers)?;
        }
        Ok(s)
    }

    /// Row kinds of an encoded graph: its nodes, then the event rows.
    pub fn row_kinds(&self, g: &HierarchicalSemanticGraph) -> Vec<NodeKind> {
        let mut kinds = g.kinds();
        if self.toggles.hsa {
            kinds.extend(std::iter::repeat_n(NodeKind::Event, self.config.n_events));
        }
        kinds
    }

    /// Full forward pass. `video_graph` is either `video.graph` or a masked copy
    /// of it.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        video: &VideoInput,
        video_graph: &HierarchicalSemanticGraph,
        query: &QueryInput,
        mode: Mode,
    ) -> Result<Forward> {
        let (m, gates) = self.encode_video(ctx, video_graph, &video.frames)?;
        let h = self.encode_language(ctx, &query.graph)?;
        let mk = self.row_kinds(video_graph);
        let hk = self.row_kinds(&query.graph);
        let (ma, ha) = if self.toggles.sam {
            (ctx.linear(m, "adapt.video")?, ctx.linear(h, "adapt.lang")?)
        } else {
            (m, h)
        };
        let pooled_video = ctx.tape.mean_pool_all(ma)?;
        let pooled_language = ctx.tape.mean_pool_all(ha)?;
        let (mt, _) = crossgraph::cross_graph_convolve(ctx, ma, &mk, ha, &hk, "cross.v2l")?;
        let (ht, _) = crossgraph::cross_graph_convolve(ctx, ha, &hk, ma, &mk, "cross.l2v")?;
        let q = crossgraph::content_mean(ctx, ha, &hk)?;
        let (z_prior, z_posterior, z) = if self.toggles.vcc {
            let prior = crossgraph::infer_prior(ctx, mt, ht, q)?;
            match mode {
                Mode::Inference => (Some(prior), None, prior),
                Mode::Training => {
                    let owners: Vec<Option<usize>> = video_graph
                        .nodes
                        .iter()
                        .map(|n| n.owner)
                        .chain(std::iter::repeat_n(None, mk.len() - video_graph.len()))
                        .collect();
                    let post = crossgraph::infer_posterior(
                        ctx,
                        mt,
                        &owners,
                        video.num_segments(),
                        ht,
                        q,
                        query.interval,
                    )?;
                    (Some(prior), Some(post), post)
                }
            }
        } else {
            let (rows, cols) = (mk.len(), hk.len());
            let uniform = Tensor::full(rows, cols, 1.0 / cols as f32);
            (None, None, ctx.constant(&uniform))
        };
        let head = crossgraph::predict_interval(ctx, mt, ht, z, &video.segments, q, self.config.heads)?;
        Ok(Forward {
            video: m,
            language: h,
            video_kinds: mk,
            language_kinds: hk,
            pooled_video,
            pooled_language,
            z_prior,
            z_posterior,
            z,
            head,
            gates,
        })
    }

    /// Predicted normalized interval for one query using the prior path.
    pub fn predict(&self, video: &VideoInput, query: &QueryInput) -> Result<(f64, f64)> {
        let mut ctx = Ctx::<f32>::new(&self.params, false);
        let out = self.forward(&mut ctx, video, &video.graph, query, Mode::Inference)?;
        let v = ctx.value(out.head.interval);
        Ok((v.get(0, 0) as f64, v.get(0, 1) as f64))
    }

    /// The inference correspondence with row and column labels.
    pub fn correspondence(&self, video: &VideoInput, query: &QueryInput) -> Result<LabeledMatrix> {
        let mut ctx = Ctx::<f32>::new(&self.params, false);
        let out = self.forward(&mut ctx, video, &video.graph, query, Mode::Inference)?;
        let z = ctx.value(out.z);
        let labels = |g: &HierarchicalSemanticGraph, kinds: &[NodeKind]| -> Vec<String> {
            let mut events = 0;
            kinds
                .iter()
                .enumerate()
                .map(|(i, k)| match g.nodes.get(i) {
                    Some(n) => match n.owner {
                        Some(o) => format!("{}:{}@{o}", kind_tag(*k), n.label),
                        None => format!("{}:{}", kind_tag(*k), n.label),
                    },
                    None => {
                        events += 1;
                        format!("event:{}", events - 1)
                    }
                })
                .collect()
        };
        Ok(LabeledMatrix {
            rows: labels(&video.graph, &out.video_kinds),
            cols: labels(&query.graph, &out.language_kinds),
            values: (0..z.rows()).map(|r| z.row(r).iter().map(|&v| v as f64).collect()).collect(),
        })
    }
}

fn kind_tag(k: NodeKind) -> &'static str {
    match k {
        NodeKind::Action => "action",
        NodeKind::Object => "object",
        NodeKind::Event => "event",
    }
}

/// A matrix with named rows and columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Classifier vocabulary: the padding label followed by every detected label
/// in the given videos, sorted.
pub fn detection_vocab<'a>(videos: impl IntoIterator<Item = &'a VideoAnnotation>) -> Vec<String> {
    let mut labels: Vec<String> = videos
        .into_iter()
        .flat_map(|v| v.segments.iter())
        .flat_map(|s| s.actions.iter().chain(&s.objects))
        .map(|d| d.label.clone())
        .filter(|l| l != UNK)
        .collect();
    labels.sort();
    labels.dedup();
    labels.insert(0, UNK.to_string());
    labels
}
