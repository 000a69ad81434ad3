//! Cross-graph convolution, prior and posterior correspondence, and the
//! interval likelihood head.

use compground_tensor::{ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::NodeKind;
use crate::nn::{scaled_normal, Ctx};

/// Count of fixed temporal features appended to each segment row.
pub const TEMPORAL_FEATURES: usize = 11;

pub fn init_cross(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.c1"), scaled_normal(rng, d, d, 1.0));
    store.insert(format!("{prefix}.c2"), scaled_normal(rng, d, d, 1.0));
    store.insert(format!("{prefix}.ug"), scaled_normal(rng, d, d, 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, d));
}

pub fn init_correspondence(store: &mut ParamStore, rng: &mut impl Rng, d: usize) {
    for name in ["prior.s1", "prior.s2", "post.s3", "post.s4"] {
        store.insert(name, scaled_normal(rng, d, d, 1.0));
    }
}

pub fn init_likelihood(store: &mut ParamStore, rng: &mut impl Rng, d: usize, frame_dim: usize, hidden: usize) {
    store.insert("lik.j", scaled_normal(rng, 2 * d, d, 1.0));
    store.insert("lik.x", scaled_normal(rng, frame_dim + TEMPORAL_FEATURES, d, 1.0));
    for name in ["lik.att.q", "lik.att.k", "lik.att.v", "lik.att.o"] {
        store.insert(name, scaled_normal(rng, d, d, 1.0));
    }
    store.insert("lik.q1", scaled_normal(rng, d, d, 1.0));
    store.insert("lik.q2", scaled_normal(rng, d, d, 1.0));
    store.insert("lik.mlp1.w", scaled_normal(rng, d + TEMPORAL_FEATURES, hidden, 2f64.sqrt()));
    store.insert("lik.mlp1.b", Tensor::zeros(1, hidden));
    store.insert("lik.mlp2.w", scaled_normal(rng, hidden, 2, 0.5));
    store.insert("lik.mlp2.b", Tensor::zeros(1, 2));
}

/// Same-level mask between the rows of two graphs, and whether each row has
/// any same-level partner.
pub fn level_mask(rows: &[NodeKind], cols: &[NodeKind]) -> (Vec<bool>, Vec<bool>) {
    let mut mask = Vec::with_capacity(rows.len() * cols.len());
    let mut any = Vec::with_capacity(rows.len());
    for r in rows {
        let start = mask.len();
        mask.extend(cols.iter().map(|c| c == r));
        any.push(mask[start..].iter().any(|&b| b));
    }
    (mask, any)
}

/// Updates `m` with same-level information from `h`:
/// `m̃ = m + β ⊙ (α h − m)`, `β = σ(m U + b)`. Rows whose level is absent from
/// `h` pass through unchanged. Returns `(m̃, α)`.
pub fn cross_graph_convolve<T: Real>(
    ctx: &mut Ctx<'_, T>,
    m: Var,
    m_kinds: &[NodeKind],
    h: Var,
    h_kinds: &[NodeKind],
    prefix: &str,
) -> Result<(Var, Var)> {
    let (mask, any) = level_mask(m_kinds, h_kinds);
    let a = ctx.linear(m, &format!("{prefix}.c1"))?;
    let b = ctx.linear(h, &format!("{prefix}.c2"))?;
    let logits = ctx.tape.matmul_nt(a, b)?;
    let alpha = ctx.tape.masked_softmax_rows(logits, &mask)?;
    ctx.record(|| prefix.to_string(), alpha);
    let cross = ctx.tape.matmul(alpha, h)?;
    let gate = ctx.linear(m, &format!("{prefix}.ug"))?;
    let bias = ctx.p(&format!("{prefix}.b"))?;
    let gate = ctx.tape.add_row(gate, bias)?;
    let gate = ctx.tape.sigmoid(gate)?;
    let d = ctx.tape.shape(m).cols;
    let keep: Vec<f32> = any
        .iter()
        .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, d))
        .collect();
    let keep = ctx.constant(&Tensor::from_vec(any.len(), d, keep)?);
    let gate = ctx.tape.mul(gate, keep)?;
    let delta = ctx.tape.sub(cross, m)?;
    let delta = ctx.tape.mul(gate, delta)?;
    Ok((ctx.tape.add(m, delta)?, alpha))
}

/// Mean of the content rows (actions and objects).
pub fn content_mean<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, kinds: &[NodeKind]) -> Result<Var> {
    let idx: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] != NodeKind::Event).collect();
    if idx.is_empty() {
        return Err(Error::InvalidAnnotation("graph has no action or object nodes".into()));
    }
    let rows = ctx.tape.gather_rows(x, &idx)?;
    Ok(ctx.tape.mean_pool_all(rows)?)
}

/// `z_ij = softmax_j((m̃_i S1) · ((q S2) ⊙ h̃_j))`.
pub fn infer_prior<T: Real>(ctx: &mut Ctx<'_, T>, m: Var, h: Var, q: Var) -> Result<Var> {
    let left = ctx.linear(m, "prior.s1")?;
    let qs = ctx.linear(q, "prior.s2")?;
    let right = ctx.tape.mul_row(h, qs)?;
    let logits = ctx.tape.matmul_nt(left, right)?;
    let z = ctx.tape.softmax_rows(logits)?;
    ctx.record(|| "z.prior".into(), z);
    Ok(z)
}

/// Segments whose span `[t/T, (t+1)/T]` overlaps `[s, e]` by a positive
/// amount; a zero-length interval selects the segment containing it.
pub fn segments_in_interval(num_segments: usize, s: f64, e: f64) -> Result<Vec<usize>> {
    if !(0.0 <= s && s <= e && e <= 1.0) {
        return Err(Error::InvalidInterval(s, e));
    }
    let n = num_segments as f64;
    if s == e {
        let t = ((s * n).floor() as usize).min(num_segments - 1);
        return Ok(vec![t]);
    }
    Ok((0..num_segments)
        .filter(|&t| {
            let (a, b) = (t as f64 / n, (t + 1) as f64 / n);
            b.min(e) - a.max(s) > 0.0
        })
        .collect())
}

/// `z_ij = softmax_j((m̃_i ⊙ m* S3) · ((q S4) ⊙ h̃_j))` where `m*` is the mean of
/// the content nodes of segments inside the ground-truth interval.
pub fn infer_posterior<T: Real>(
    ctx: &mut Ctx<'_, T>,
    m: Var,
    owners: &[Option<usize>],
    num_segments: usize,
    h: Var,
    q: Var,
    interval: (f64, f64),
) -> Result<Var> {
    let inside = segments_in_interval(num_segments, interval.0, interval.1)?;
    let idx: Vec<usize> = (0..owners.len())
        .filter(|&i| owners[i].is_some_and(|t| inside.contains(&t)))
        .collect();
    if idx.is_empty() {
        return Err(Error::InvalidAnnotation("no nodes inside the ground-truth interval".into()));
    }
    let rows = ctx.tape.gather_rows(m, &idx)?;
    let mstar = ctx.tape.mean_pool_all(rows)?;
    let ms = ctx.linear(mstar, "post.s3")?;
    let left = ctx.tape.mul_row(m, ms)?;
    let qs = ctx.linear(q, "post.s4")?;
    let right = ctx.tape.mul_row(h, qs)?;
    let logits = ctx.tape.matmul_nt(left, right)?;
    let z = ctx.tape.softmax_rows(logits)?;
    ctx.record(|| "z.posterior".into(), z);
    Ok(z)
}

/// Average-pooled frames of each segment followed by fixed temporal
/// features of the segment's position in the video.
pub fn segment_rows(frames: &crate::encoder::VideoFrames) -> Tensor<f32> {
    let n = frames.num_segments();
    let df = frames.dim();
    let width = df + TEMPORAL_FEATURES;
    let mut data = Vec::with_capacity(n * width);
    for (t, &(a, b)) in frames.ranges.iter().enumerate() {
        for c in 0..df {
            let sum: f32 = (a..b).map(|r| frames.frames.get(r, c)).sum();
            data.push(sum / (b - a) as f32);
        }
        data.extend(temporal_features(t, n));
    }
    Tensor::from_vec(n, width, data).expect("segment rows")
}

fn temporal_features(t: usize, n: usize) -> [f32; TEMPORAL_FEATURES] {
    use std::f64::consts::PI;
    let nf = n as f64;
    let (start, end) = (t as f64 / nf, (t + 1) as f64 / nf);
    let c = 0.5 * (start + end);
    let mut out = [0f32; TEMPORAL_FEATURES];
    let base = [c, c * c, start, end, 1.0 / nf];
    for (o, v) in out.iter_mut().zip(base) {
        *o = v as f32;
    }
    for k in 0..3 {
        let w = (k + 1) as f64 * PI * c;
        out[5 + 2 * k] = w.sin() as f32;
        out[6 + 2 * k] = w.cos() as f32;
    }
    out
}

/// Output of the likelihood head.
pub struct IntervalHead {
    /// `[1, 2]` interval before clamping, used by the regression loss.
    pub raw: Var,
    /// `[1, 2]` interval clamped to `[0, 1]`.
    pub interval: Var,
    /// `[1, T]` segment pooling weights.
    pub pooling: Var,
}

/// Multi-head attention from `x` (queries) to `kv` (keys and values).
pub fn cross_attention<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, kv: Var, heads: usize, prefix: &str) -> Result<Var> {
    let q = ctx.linear(x, &format!("{prefix}.q"))?;
    let k = ctx.linear(kv, &format!("{prefix}.k"))?;
    let v = ctx.linear(kv, &format!("{prefix}.v"))?;
    let d = ctx.tape.shape(q).cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (a, b) = (hd * dh, (hd + 1) * dh);
        let qh = ctx.tape.slice_cols(q, a, b)?;
        let kh = ctx.tape.slice_cols(k, a, b)?;
        let vh = ctx.tape.slice_cols(v, a, b)?;
        let logits = ctx.tape.matmul_nt(qh, kh)?;
        let logits = ctx.tape.scale(logits, scale)?;
        let att = ctx.tape.softmax_rows(logits)?;
        ctx.record(|| format!("{prefix}.{hd}"), att);
        outs.push(ctx.tape.matmul(att, vh)?);
    }
    let joined = ctx.tape.concat_cols(&outs)?;
    ctx.linear(joined, &format!("{prefix}.o"))
}

/// Interval prediction from the correspondence-guided graphs.
#[allow(clippy::too_many_arguments)]
pub fn predict_interval<T: Real>(
    ctx: &mut Ctx<'_, T>,
    m: Var,
    h: Var,
    z: Var,
    segments: &Tensor<f32>,
    q: Var,
    heads: usize,
) -> Result<IntervalHead> {
    let aligned = ctx.tape.matmul(z, h)?;
    let joint = ctx.tape.concat_cols(&[m, aligned])?;
    let mj = ctx.linear(joint, "lik.j")?;
    let x0 = ctx.constant(segments);
    let x = ctx.linear(x0, "lik.x")?;
    let att = cross_attention(ctx, x, mj, heads, "lik.att")?;
    let xs = ctx.tape.add(x, att)?;
    let qa = ctx.linear(q, "lik.q1")?;
    let xa = ctx.linear(xs, "lik.q2")?;
    let logits = ctx.tape.matmul_nt(qa, xa)?;
    let pooling = ctx.tape.softmax_rows(logits)?;
    ctx.record(|| "pooling".into(), pooling);
    let v = ctx.tape.matmul(pooling, xs)?;
    // The pooled position features reach the head directly as well as
    // through the projected segment rows.
    let df = segments.cols() - TEMPORAL_FEATURES;
    let tf = ctx.tape.slice_cols(x0, df, segments.cols())?;
    let pooled_tf = ctx.tape.matmul(pooling, tf)?;
    let v = ctx.tape.concat_cols(&[v, pooled_tf])?;
    let hid = ctx.affine(v, "lik.mlp1")?;
    let hid = ctx.tape.relu(hid)?;
    let out = ctx.affine(hid, "lik.mlp2")?;
    let cw = ctx.tape.sigmoid(out)?;
    let to_bounds = ctx.constant(&Tensor::from_rows(&[&[1.0, 1.0], &[-0.5, 0.5]]));
    let raw = ctx.tape.matmul(cw, to_bounds)?;
    let interval = ctx.tape.clamp(raw, 0.0, 1.0)?;
    Ok(IntervalHead { raw, interval, pooling })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_rule() {
        assert_eq!(segments_in_interval(4, 0.5, 1.0).unwrap(), vec![2, 3]);
        assert_eq!(segments_in_interval(4, 0.0, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(segments_in_interval(4, 0.3, 0.3).unwrap(), vec![1]);
        assert_eq!(segments_in_interval(4, 1.0, 1.0).unwrap(), vec![3]);
        assert_eq!(segments_in_interval(4, 0.2, 0.26).unwrap(), vec![0, 1]);
        assert!(segments_in_interval(4, 0.5, 1.2).is_err());
        assert!(segments_in_interval(4, 0.6, 0.5).is_err());
    }

    #[test]
    fn level_mask_blocks_other_levels() {
        use NodeKind::*;
        let (mask, any) = level_mask(&[Action, Event, Object], &[Action, Object]);
        assert_eq!(mask, vec![true, false, false, false, false, true]);
        assert_eq!(any, vec![true, false, true]);
    }
}
