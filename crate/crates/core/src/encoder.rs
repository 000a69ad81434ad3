//! Graph encoders: relation-typed attention over neighbors, frame-gated
//! visual context for video nodes, and event-query aggregation.

use compground_tensor::{ParamStore, PoolKind, Real, Tensor, Var};
use rand::Rng;

use crate::annotation::VideoAnnotation;
use crate::error::{Error, Result};
use crate::graph::{HierarchicalSemanticGraph, Relation};
use crate::nn::{scaled_normal, Ctx};

const RELATION_TAGS: [&str; 3] = ["aa", "ao", "oo"];

/// Frame features of one video stacked by segment.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    /// `[sum of K_t, D_f]`.
    pub frames: Tensor<f32>,
    /// Row range of each segment in `frames`.
    pub ranges: Vec<(usize, usize)>,
}

impl VideoFrames {
    pub fn from_annotation(ann: &VideoAnnotation) -> Result<Self> {
        let dim = ann
            .frame_dim()
            .ok_or_else(|| Error::InvalidAnnotation(format!("video `{}` has no frames", ann.video_id)))?;
        let mut data = Vec::new();
        let mut ranges = Vec::with_capacity(ann.segments.len());
        let mut start = 0;
        for (t, seg) in ann.segments.iter().enumerate() {
            if seg.frames.is_empty() {
                return Err(Error::EmptySegment(t));
            }
            for f in &seg.frames {
                data.extend_from_slice(f);
            }
            ranges.push((start, start + seg.frames.len()));
            start += seg.frames.len();
        }
        Ok(Self {
            frames: Tensor::from_vec(start, dim, data)?,
            ranges,
        })
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn num_segments(&self) -> usize {
        self.ranges.len()
    }
}

/// Neighbor masks for the three relations.
pub fn relation_masks(g: &HierarchicalSemanticGraph) -> [Vec<bool>; 3] {
    Relation::ALL.map(|r| g.adjacency(r))
}

pub fn init_scl(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, layers: usize) {
    for l in 0..layers {
        for tag in RELATION_TAGS {
            store.insert(format!("{prefix}.scl.{l}.{tag}.w"), scaled_normal(rng, d, d, 1.0));
            store.insert(format!("{prefix}.scl.{l}.{tag}.u"), scaled_normal(rng, d, d, 0.5));
        }
    }
}

pub fn init_vcl(store: &mut ParamStore, rng: &mut impl Rng, d: usize, frame_dim: usize) {
    store.insert("video.vcl.gs", scaled_normal(rng, d, frame_dim, 1.0));
    store.insert("video.vcl.gf", scaled_normal(rng, frame_dim, frame_dim, 1.0));
    store.insert("video.vcl.gj", scaled_normal(rng, frame_dim, frame_dim, 1.0));
    store.insert("video.vcl.bg", Tensor::zeros(1, frame_dim));
    store.insert("video.vcl.wv", scaled_normal(rng, d + frame_dim, d, 1.0));
}

pub fn init_hsa(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, layers: usize, n_events: usize) {
    store.insert(format!("{prefix}.hsa.queries"), scaled_normal(rng, n_events, d, (n_events as f64 / d as f64).sqrt()));
    for l in 0..layers {
        store.insert(format!("{prefix}.hsa.{l}.e1"), scaled_normal(rng, d, d, 1.0));
        store.insert(format!("{prefix}.hsa.{l}.e2"), scaled_normal(rng, d, d, 1.0));
    }
}

/// Relation-typed neighbor attention, `layers` rounds. Each round adds, for
/// every relation, the attention-weighted transformed neighbors to the
/// node's own features.
pub fn semantic_contextualize<T: Real>(
    ctx: &mut Ctx<'_, T>,
    s: Var,
    masks: &[Vec<bool>; 3],
    prefix: &str,
    layers: usize,
) -> Result<Var> {
    let mut s = s;
    for l in 0..layers {
        let mut out = s;
        for (r, tag) in RELATION_TAGS.iter().enumerate() {
            if !masks[r].iter().any(|&b| b) {
                continue;
            }
            let a = ctx.linear(s, &format!("{prefix}.scl.{l}.{tag}.w"))?;
            let logits = ctx.tape.matmul_nt(a, a)?;
            let alpha = ctx.tape.masked_softmax_rows(logits, &masks[r])?;
            ctx.record(|| format!("{prefix}.scl.{l}.{tag}"), alpha);
            let msg = ctx.linear(s, &format!("{prefix}.scl.{l}.{tag}.u"))?;
            let msg = ctx.tape.matmul(alpha, msg)?;
            out = ctx.tape.add(out, msg)?;
        }
        s = out;
    }
    Ok(s)
}

/// Frame-gated visual context. Node `i` owned by segment `t` filters each
/// frame `f_j` of `t` with `σ(s_i G_s + f̄_t G_f + f_j G_j + b)`, max-pools the
/// filtered frames into `F_i`, and maps `[s_i, F_i]` back to width `d`.
/// Returns the refined features and the gate matrix.
pub fn visual_contextualize<T: Real>(
    ctx: &mut Ctx<'_, T>,
    s: Var,
    owners: &[usize],
    frames: &VideoFrames,
) -> Result<(Var, Var)> {
    let fr = ctx.constant(&frames.frames);
    let fbar = ctx.tape.pool_rows(fr, &frames.ranges, PoolKind::Mean)?;
    let a = ctx.linear(s, "video.vcl.gs")?;
    let b = ctx.linear(fbar, "video.vcl.gf")?;
    let c = ctx.linear(fr, "video.vcl.gj")?;
    let (mut ia, mut ib, mut ic, mut groups) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, &t) in owners.iter().enumerate() {
        let (start, end) = *frames.ranges.get(t).ok_or_else(|| {
            Error::InvalidAnnotation(format!("node {i} owned by missing segment {t}"))
        })?;
        groups.push((ia.len(), ia.len() + end - start));
        for j in start..end {
            ia.push(i);
            ib.push(t);
            ic.push(j);
        }
    }
    let ga = ctx.tape.gather_rows(a, &ia)?;
    let gb = ctx.tape.gather_rows(b, &ib)?;
    let gc = ctx.tape.gather_rows(c, &ic)?;
    let pre = ctx.tape.add(ga, gb)?;
    let pre = ctx.tape.add(pre, gc)?;
    let bias = ctx.p("video.vcl.bg")?;
    let pre = ctx.tape.add_row(pre, bias)?;
    let gate = ctx.tape.sigmoid(pre)?;
    let fj = ctx.tape.gather_rows(fr, &ic)?;
    let filtered = ctx.tape.mul(gate, fj)?;
    let pooled = ctx.tape.pool_rows(filtered, &groups, PoolKind::Max)?;
    let joint = ctx.tape.concat_cols(&[s, pooled])?;
    Ok((ctx.linear(joint, "video.vcl.wv")?, gate))
}

/// Event aggregation: each round the event queries attend over the
/// contextualized nodes `s`. Returns `[s; events]`.
pub fn aggregate_events<T: Real>(ctx: &mut Ctx<'_, T>, s: Var, prefix: &str, layers: usize) -> Result<Var> {
    let mut p = ctx.p(&format!("{prefix}.hsa.queries"))?;
    for l in 0..layers {
        let q = ctx.linear(p, &format!("{prefix}.hsa.{l}.e1"))?;
        let k = ctx.linear(s, &format!("{prefix}.hsa.{l}.e2"))?;
        let logits = ctx.tape.matmul_nt(q, k)?;
        let alpha = ctx.tape.softmax_rows(logits)?;
        ctx.record(|| format!("{prefix}.hsa.{l}"), alpha);
        p = ctx.tape.matmul(alpha, s)?;
    }
    Ok(ctx.tape.concat_rows(&[s, p])?)
}
