//! Mini-batch trainer with an EMA target network and checkpointing.
//!
//! Each batch item runs its forward pass on its own tape. The margin loss
//! couples items through their pooled graph vectors, so it is evaluated on a
//! separate small tape once every item has been encoded, and its gradients
//! are injected back into the item tapes as extra backward seeds.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use compground_tensor::{adam_step, AdamConfig, AdamState, ParamStore, Real, Tensor, Var};

use crate::annotation::{QueryAnnotation, VideoAnnotation};
use crate::config::{LossConfig, RunConfig};
use crate::embedding::{fnv1a, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::{HierarchicalSemanticGraph, MaskRecord};
use crate::model::{Mode, Model, QueryInput, VideoInput};
use crate::nn::Ctx;
use crate::objectives::{self, LossReport, MarginConfig, SamPair};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Videos and queries converted to model inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub videos: Vec<VideoInput>,
    pub queries: Vec<QueryInput>,
    /// Index into `videos` for each query.
    pub query_video: Vec<usize>,
}

impl Prepared {
    pub fn new(model: &Model, videos: &[VideoAnnotation], queries: &[QueryAnnotation]) -> Result<Self> {
        let table = model.embedding_table()?;
        let quotas = model.quotas();
        let inputs: Vec<VideoInput> = videos
            .par_iter()
            .map(|v| VideoInput::new(v, quotas, &table))
            .collect::<Result<_>>()?;
        let index: HashMap<&str, usize> = videos.iter().enumerate().map(|(i, v)| (v.video_id.as_str(), i)).collect();
        let mut query_video = Vec::with_capacity(queries.len());
        let mut prepared = Vec::with_capacity(queries.len());
        for q in queries {
            let &vi = index
                .get(q.video_id.as_str())
                .ok_or_else(|| Error::NotFound(format!("video `{}` of query `{}`", q.video_id, q.query_id)))?;
            prepared.push(QueryInput::new(q, &videos[vi], &table)?);
            query_video.push(vi);
        }
        Ok(Self {
            videos: inputs,
            queries: prepared,
            query_video,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn item(&self, i: usize) -> (&VideoInput, &QueryInput) {
        (&self.videos[self.query_video[i]], &self.queries[i])
    }
}

/// Seed for one random draw, derived from the run seed and a position.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fnv1a(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
}

pub struct Trainer {
    pub model: Model,
    /// Moving-average copy of the parameters.
    pub target: ParamStore,
    pub adam: AdamState,
    pub adam_config: AdamConfig,
    pub run: RunConfig,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochLog>,
    table: EmbeddingTable,
}

/// Forward state of one batch item kept alive until its backward sweep.
struct ItemPass<'p> {
    ctx: Ctx<'p, f32>,
    loss: Var,
    pooled_video: Var,
    pooled_language: Var,
    overlap: f64,
    report: LossReport,
}

impl Trainer {
    pub fn new(run: RunConfig, frame_dim: usize, vocab: Vec<String>) -> Result<Self> {
        run.validate()?;
        let model = Model::init(run.model.clone(), run.toggles, frame_dim, vocab, run.train.seed);
        Self::from_model(run, model)
    }

    fn from_model(run: RunConfig, model: Model) -> Result<Self> {
        let table = model.embedding_table()?;
        Ok(Self {
            target: model.params.clone(),
            adam: AdamState::new(&model.params),
            adam_config: AdamConfig {
                lr: run.train.lr,
                ..AdamConfig::default()
            },
            run,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            model,
            table,
        })
    }

    fn loss_config(&self) -> &LossConfig {
        &self.run.loss
    }

    /// Forward pass and local losses of one item.
    fn item_pass<'p>(&'p self, data: &Prepared, index: usize, slot: usize) -> Result<ItemPass<'p>> {
        let (video, query) = data.item(index);
        let toggles = self.model.toggles;
        let lc = self.loss_config();
        let masked = if toggles.sism() {
            let seed = derive_seed(self.run.train.seed, &[1, self.step, slot as u64]);
            Some(video.graph.mask_nodes(lc.mask_p, seed, &self.table)?)
        } else {
            None
        };
        let masked = masked.as_ref().map(|(g, r)| (g, r));
        let target = match masked {
            Some((g, record)) if toggles.sc && !record.is_empty() => {
                let mut tctx = Ctx::new(&self.target, false);
                let (mt, _) = self.model.encode_video(&mut tctx, g, &video.frames)?;
                let pt = objectives::relationship_distribution(&mut tctx.tape, mt, &record.indices)?;
                Some(objectives::sharpen(tctx.value(pt), lc.tau)?)
            }
            _ => None,
        };
        let mut ctx = Ctx::new(&self.model.params, true);
        let out = item_objective(&self.model, &mut ctx, video, query, masked, target.as_ref(), lc)?;
        Ok(ItemPass {
            loss: out.loss,
            pooled_video: out.pooled_video,
            pooled_language: out.pooled_language,
            overlap: out.overlap,
            report: out.report,
            ctx,
        })
    }

    /// One optimizer step over the queries `batch`.
    pub fn train_step(&mut self, data: &Prepared, batch: &[usize]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let n = batch.len();
        let lc = self.run.loss.clone();
        let margin_cfg = MarginConfig { eta: lc.eta, u: lc.u };
        let passes: Vec<ItemPass> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| self.item_pass(data, i, slot))
            .collect::<Result<_>>()?;

        let mut report = LossReport::default();
        for p in &passes {
            report.accumulate(&p.report, 1.0 / n as f64);
        }
        let sam = if self.model.toggles.sam && n > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.run.train.seed, &[2, self.step]));
            let mut pairs = Vec::with_capacity(n);
            for p in &passes {
                let b = pairs.len();
                let pick = |rng: &mut ChaCha8Rng| (b + 1 + rng.random_range(0..n - 1)) % n;
                pairs.push(SamPair {
                    neg_video: pick(&mut rng),
                    neg_lang: pick(&mut rng),
                    margin: objectives::soft_margin(p.overlap, &margin_cfg)?,
                });
            }
            let video: Vec<Tensor<f32>> = passes.iter().map(|p| p.ctx.value(p.pooled_video).clone()).collect();
            let lang: Vec<Tensor<f32>> = passes.iter().map(|p| p.ctx.value(p.pooled_language).clone()).collect();
            Some(objectives::sam_loss(&video, &lang, &pairs)?)
        } else {
            None
        };
        if let Some(s) = &sam {
            report.sam = s.loss;
        }

        let weight = Tensor::scalar(1.0 / n as f32);
        let grads: Vec<Vec<Tensor<f32>>> = passes
            .par_iter()
            .enumerate()
            .map(|(b, p)| {
                let mut seeds = vec![(p.loss, weight.clone())];
                if let Some(s) = &sam {
                    seeds.push((p.pooled_video, s.grad_video[b].clone()));
                    seeds.push((p.pooled_language, s.grad_lang[b].clone()));
                }
                let g = p.ctx.tape.backward_seeded(&seeds)?;
                Ok(p.ctx.binder.collect(&g))
            })
            .collect::<Result<_>>()?;
        drop(passes);
        let mut total = self.model.params.zeros_like();
        for item in &grads {
            for (acc, g) in total.iter_mut().zip(item) {
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
        }
        adam_step(&mut self.model.params, &total, &mut self.adam, &self.adam_config)?;
        objectives::ema_update(&mut self.target, &self.model.params, lc.omega)?;
        self.step += 1;
        Ok(report.finish(lc.lambda))
    }

    /// One pass over `data` in a seeded order.
    pub fn train_epoch(&mut self, data: &Prepared) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::Config("no training queries".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.run.train.seed, &[0, self.epoch as u64]));
        order.shuffle(&mut rng);
        let batch = self.run.train.batch.max(1);
        let mut mean = LossReport::default();
        let batches = order.len().div_ceil(batch);
        for chunk in order.chunks(batch) {
            let r = self.train_step(data, chunk)?;
            mean.accumulate(&r, 1.0 / batches as f64);
        }
        self.epoch += 1;
        let mean = mean.finish(self.run.loss.lambda);
        self.history.push(EpochLog {
            epoch: self.epoch,
            loss: mean,
        });
        log::info!(
            "epoch {} total={:.5} reg={:.5} kl={:.5} msm={:.5} sc={:.5} sam={:.5}",
            self.epoch,
            mean.total,
            mean.regression,
            mean.kl,
            mean.msm,
            mean.sc,
            mean.sam
        );
        Ok(mean)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            run: self.run.clone(),
            model: self.model.clone(),
            target: self.target.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            step: self.step,
            history: self.history.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if !ck.model.params.same_layout(&ck.target) || !ck.adam.matches(&ck.model.params) {
            return Err(Error::Checkpoint("parameter, target, and optimizer layouts differ".into()));
        }
        let mut t = Self::from_model(ck.run, ck.model)?;
        t.target = ck.target;
        t.adam = ck.adam;
        t.epoch = ck.epoch;
        t.step = ck.step;
        t.history = ck.history;
        Ok(t)
    }
}

/// Handles and values from [`item_objective`].
pub struct ItemObjective {
    /// ELBO plus the weighted masked-modeling terms of one item.
    pub loss: Var,
    pub pooled_video: Var,
    pub pooled_language: Var,
    /// Semantic overlap of the correspondence used by the head.
    pub overlap: f64,
    pub report: LossReport,
}

/// The per-item part of the training objective on `ctx`. `masked` is the
/// masked video graph with its record; `target` is the sharpened target
/// distribution of the masked rows.
pub fn item_objective<T: Real>(
    model: &Model,
    ctx: &mut Ctx<'_, T>,
    video: &VideoInput,
    query: &QueryInput,
    masked: Option<(&HierarchicalSemanticGraph, &MaskRecord)>,
    target: Option<&Tensor<T>>,
    lc: &LossConfig,
) -> Result<ItemObjective> {
    let toggles = model.toggles;
    let graph = masked.map_or(&video.graph, |(g, _)| g);
    let fwd = model.forward(ctx, video, graph, query, Mode::Training)?;
    let gt = ctx.constant(&Tensor::row_vector(&[query.interval.0, query.interval.1]));
    let mut report = LossReport::default();
    let reg = ctx.tape.smooth_l1(fwd.head.raw, gt)?;
    report.regression = ctx.value(reg).item().f64();
    let mut loss = reg;
    if let (Some(post), Some(prior)) = (fwd.z_posterior, fwd.z_prior) {
        let kl = ctx.tape.kl_rows(post, prior)?;
        report.kl = ctx.value(kl).item().f64();
        loss = ctx.tape.add(loss, kl)?;
    }
    if let Some((_, record)) = masked.filter(|(_, r)| !r.is_empty()) {
        if toggles.msm {
            let targets = model.class_targets(&record.original_labels)?;
            let l = objectives::msm_loss(ctx, fwd.video, &record.indices, &targets)?;
            report.msm = ctx.value(l).item().f64();
            let w = ctx.tape.scale(l, 1.0 - lc.lambda)?;
            loss = ctx.tape.add(loss, w)?;
        }
        if let (true, Some(t)) = (toggles.sc, target) {
            let po = objectives::relationship_distribution(&mut ctx.tape, fwd.video, &record.indices)?;
            let l = objectives::structure_consistency_loss(&mut ctx.tape, t, po)?;
            report.sc = ctx.value(l).item().f64();
            let w = ctx.tape.scale(l, lc.lambda)?;
            loss = ctx.tape.add(loss, w)?;
        }
    }
    let overlap = objectives::semantic_overlap(ctx.value(fwd.z)).clamp(0.0, 1.0);
    Ok(ItemObjective {
        loss,
        pooled_video: fwd.pooled_video,
        pooled_language: fwd.pooled_language,
        overlap,
        report,
    })
}

/// Everything needed to resume training or run inference. Random draws are
/// derived from the run seed and the epoch and step counters, so those
/// counters are the random state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub run: RunConfig,
    pub model: Model,
    pub target: ParamStore,
    pub adam: AdamState,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        if ck.model.params.tensors().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(ck)
    }
}

/// Loss history as CSV.
pub fn loss_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,total,regression,kl,msm,sc,sism,sam\n");
    for h in history {
        let l = &h.loss;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            h.epoch, l.total, l.regression, l.kl, l.msm, l.sc, l.sism, l.sam
        );
    }
    out
}

/// Static line plot of the total loss.
pub fn loss_svg(history: &[EpochLog]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let ys: Vec<f64> = history.iter().map(|e| e.loss.total).collect();
    let max = ys.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let n = ys.len().max(2) - 1;
    let points: Vec<String> = ys
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let x = pad + (w - 2.0 * pad) * i as f64 / n as f64;
            let y = h - pad - (h - 2.0 * pad) * (y / max);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<line x1=\"{p}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{p}\" y1=\"{p}\" x2=\"{p}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<text x=\"{p}\" y=\"{t}\" font-size=\"12\">total loss, max {max:.4}, {e} epochs</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        p = pad,
        b = h - pad,
        r = w - pad,
        t = pad - 10.0,
        max = max,
        e = ys.len(),
        pts = points.join(" ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_position() {
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let h = vec![EpochLog {
            epoch: 1,
            loss: LossReport::default(),
        }];
        let csv = loss_csv(&h);
        assert_eq!(csv.lines().count(), 2);
        assert!(loss_svg(&h).contains("<polyline"));
    }
}
