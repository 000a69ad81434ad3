//! Training objectives and their closed-form building blocks.

use compground_tensor::{ParamStore, Real, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};
use crate::nn::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub eta: f64,
    pub u: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { eta: 0.4, u: 10.0 }
    }
}

/// Per-batch loss components, all averaged over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub regression: f64,
    pub kl: f64,
    pub elbo: f64,
    pub msm: f64,
    pub sc: f64,
    pub sism: f64,
    pub sam: f64,
    pub total: f64,
}

impl LossReport {
    /// Fills the derived fields from the primary components.
    pub fn finish(mut self, lambda: f64) -> Self {
        self.elbo = self.regression + self.kl;
        self.sism = sism(self.msm, self.sc, lambda).unwrap_or(f64::NAN);
        self.total = total_loss(self.elbo, self.sism, self.sam);
        self
    }

    pub fn accumulate(&mut self, other: &LossReport, weight: f64) {
        self.regression += weight * other.regression;
        self.kl += weight * other.kl;
        self.msm += weight * other.msm;
        self.sc += weight * other.sc;
        self.sam += weight * other.sam;
    }
}

/// Smooth-L1 regression plus row-wise `KL(z_post ‖ z_prior)`. Returns
/// `(loss, regression, kl)`.
pub fn elbo_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    z_post: Var,
    z_prior: Var,
) -> Result<(Var, Var, Var)> {
    if tape.shape(z_post) != tape.shape(z_prior) {
        return Err(TensorError::ShapeMismatch {
            op: "elbo",
            left: tape.shape(z_post),
            right: tape.shape(z_prior),
        }
        .into());
    }
    let reg = tape.smooth_l1(pred, gt)?;
    let kl = tape.kl_rows(z_post, z_prior)?;
    Ok((tape.add(reg, kl)?, reg, kl))
}

/// Cross-entropy of the classifier on the masked rows of `features`; zero
/// when nothing is masked.
pub fn msm_loss<T: Real>(ctx: &mut Ctx<'_, T>, features: Var, masked: &[usize], targets: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        return Ok(ctx.zero_scalar());
    }
    let rows = ctx.tape.gather_rows(features, masked)?;
    let logits = ctx.affine(rows, "msm")?;
    let classes = ctx.tape.shape(logits).cols;
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::UnknownLabel(format!("class index {bad}")));
    }
    Ok(ctx.tape.cross_entropy(logits, targets)?)
}

/// `ξ ← ωξ + (1−ω)θ`.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, omega: f64) -> Result<()> {
    check_unit("omega", omega)?;
    if !target.same_layout(online) {
        return Err(Error::Checkpoint("target and online parameters differ in layout".into()));
    }
    let w = omega as f32;
    for (t, o) in target.tensors_mut().zip(online.tensors()) {
        for (x, &y) in t.data_mut().iter_mut().zip(o.data()) {
            *x = w * *x + (1.0 - w) * y;
        }
    }
    Ok(())
}

/// Rows `softmax_j(s•_i · s_j)` for the masked nodes `masked` over all rows of
/// `features`.
pub fn relationship_distribution<T: Real>(tape: &mut Tape<T>, features: Var, masked: &[usize]) -> Result<Var> {
    let rows = tape.gather_rows(features, masked)?;
    let logits = tape.matmul_nt(rows, features)?;
    Ok(tape.softmax_rows(logits)?)
}

/// `P̃_j ∝ P_j^{1/τ}` per row.
pub fn sharpen<T: Real>(p: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if !(tau > 0.0) {
        return Err(Error::OutOfRange {
            name: "tau",
            value: tau,
            range: "(0, inf)",
        });
    }
    let mut out = p.clone();
    let inv = T::of(1.0 / tau);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        // Raising to 1/τ is done relative to the row max to keep small
        // entries from underflowing before renormalization.
        let mx = row.iter().copied().fold(T::zero(), T::max);
        if mx <= T::zero() {
            continue;
        }
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v / mx).powf(inv);
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Row-wise `KL(P̃ᵀ ‖ Pᴼ)` with the target side held constant.
pub fn structure_consistency_loss<T: Real>(tape: &mut Tape<T>, target: &Tensor<T>, online: Var) -> Result<Var> {
    if target.rows() != tape.shape(online).rows {
        return Err(TensorError::ShapeMismatch {
            op: "structure_consistency",
            left: target.shape(),
            right: tape.shape(online),
        }
        .into());
    }
    let t = tape.constant(target.clone());
    Ok(tape.kl_rows(t, online)?)
}

pub fn sism(l_msm: f64, l_sc: f64, lambda: f64) -> Result<f64> {
    check_unit("lambda", lambda)?;
    Ok((1.0 - lambda) * l_msm + lambda * l_sc)
}

/// `(1−λ)·msm + λ·sc` on the tape.
pub fn sism_on_tape<T: Real>(tape: &mut Tape<T>, l_msm: Var, l_sc: Var, lambda: f64) -> Result<Var> {
    check_unit("lambda", lambda)?;
    let a = tape.scale(l_msm, 1.0 - lambda)?;
    let b = tape.scale(l_sc, lambda)?;
    Ok(tape.add(a, b)?)
}

/// Linear adaptation of each graph's node rows.
pub fn adapt_graphs<T: Real>(ctx: &mut Ctx<'_, T>, m: Var, h: Var) -> Result<(Var, Var)> {
    Ok((ctx.linear(m, "adapt.video")?, ctx.linear(h, "adapt.lang")?))
}

/// Mean over rows of the row maximum.
pub fn semantic_overlap<T: Real>(z: &Tensor<T>) -> f64 {
    let total: f64 = (0..z.rows())
        .map(|r| z.row(r).iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / z.rows() as f64
}

/// `η* = (u^ẑ − 1)/(u − 1)·η`.
pub fn soft_margin(zhat: f64, cfg: &MarginConfig) -> Result<f64> {
    if !(cfg.u > 1.0) {
        return Err(Error::OutOfRange {
            name: "u",
            value: cfg.u,
            range: "(1, inf)",
        });
    }
    check_unit("semantic overlap", zhat)?;
    Ok((cfg.u.powf(zhat) - 1.0) / (cfg.u - 1.0) * cfg.eta)
}

/// One in-batch pair for the margin loss: item `b` contrasted with the video
/// graph of `neg_video` and the language graph of `neg_lang`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamPair {
    pub neg_video: usize,
    pub neg_lang: usize,
    pub margin: f64,
}

/// Result of the margin loss with gradients for each pooled vector.
pub struct SamOutput<T: Real> {
    pub loss: f64,
    pub grad_video: Vec<Tensor<T>>,
    pub grad_lang: Vec<Tensor<T>>,
}

/// Mean over the batch of
/// `[η* − S(M,H) + S(M̄,H)]₊ + [η* − S(M,H) + S(M,H̄)]₊` with cosine `S` on
/// average-pooled graphs. Batches of one give zero.
pub fn sam_loss<T: Real>(video: &[Tensor<T>], lang: &[Tensor<T>], pairs: &[SamPair]) -> Result<SamOutput<T>> {
    let n = video.len();
    let zeros = |xs: &[Tensor<T>]| xs.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    if n < 2 {
        return Ok(SamOutput {
            loss: 0.0,
            grad_video: zeros(video),
            grad_lang: zeros(lang),
        });
    }
    let mut tape = Tape::<T>::new();
    let vs: Vec<Var> = video.iter().map(|t| tape.param(t.clone())).collect();
    let ls: Vec<Var> = lang.iter().map(|t| tape.param(t.clone())).collect();
    let loss = sam_on_tape(&mut tape, &vs, &ls, pairs)?;
    let grads = tape.backward(loss)?;
    Ok(SamOutput {
        loss: tape.value(loss).item().f64(),
        grad_video: vs.iter().map(|&v| grads.get(v)).collect(),
        grad_lang: ls.iter().map(|&v| grads.get(v)).collect(),
    })
}

/// The margin loss over pooled vectors already on `tape`.
pub fn sam_on_tape<T: Real>(tape: &mut Tape<T>, video: &[Var], lang: &[Var], pairs: &[SamPair]) -> Result<Var> {
    if pairs.len() != video.len() || video.len() != lang.len() {
        return Err(Error::Config(format!(
            "{} pairs for {} videos and {} queries",
            pairs.len(),
            video.len(),
            lang.len()
        )));
    }
    let vn: Vec<Var> = video.iter().map(|&v| tape.normalize_rows(v)).collect::<std::result::Result<_, _>>()?;
    let ln: Vec<Var> = lang.iter().map(|&v| tape.normalize_rows(v)).collect::<std::result::Result<_, _>>()?;
    let cos = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var> {
        let p = tape.mul(a, b)?;
        Ok(tape.sum(p)?)
    };
    let mut terms = Vec::new();
    for (b, pair) in pairs.iter().enumerate() {
        let pos = cos(tape, vn[b], ln[b])?;
        for neg in [cos(tape, vn[pair.neg_video], ln[b])?, cos(tape, vn[b], ln[pair.neg_lang])?] {
            let diff = tape.sub(neg, pos)?;
            let margin = tape.constant(Tensor::scalar(T::of(pair.margin)));
            let arg = tape.add(diff, margin)?;
            terms.push(tape.relu(arg)?);
        }
    }
    let all = tape.concat_cols(&terms)?;
    let s = tape.sum(all)?;
    Ok(tape.scale(s, 1.0 / pairs.len() as f64)?)
}

pub fn total_loss(elbo: f64, sism: f64, sam: f64) -> f64 {
    elbo + sism + sam
}
