//! Gradient checks of the primitives and of the whole model on a tiny
//! instance, plus builders for small random model inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use compground_tensor::gradcheck::{finite_difference_check, primitive_suite, FdOptions, FdReport};
use compground_tensor::{Binder, ParamStore, Tape, Tensor, TensorError, Var};

use crate::annotation::{Detection, QueryAnnotation, Segment, SemanticStructure, VideoAnnotation};
use crate::config::{LossConfig, ModelConfig, Toggles};
use crate::error::Result;
use crate::graph::{HierarchicalSemanticGraph, MaskRecord};
use crate::model::{detection_vocab, Model, QueryInput, VideoInput};
use crate::nn::Ctx;
use crate::objectives::{self, SamPair};
use crate::train::item_objective;

const ACTIONS: [&str; 4] = ["open", "hold", "wash", "throw"];
const OBJECTS: [&str; 5] = ["door", "cup", "box", "flower", "window"];

/// Shape of a random instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceShape {
    pub segments: usize,
    pub frames_per_segment: usize,
    pub frame_dim: usize,
    pub d: usize,
}

impl InstanceShape {
    /// Two segments and width 8.
    pub fn tiny() -> Self {
        Self {
            segments: 2,
            frames_per_segment: 2,
            frame_dim: 4,
            d: 8,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            d_word: self.d,
            n_objects: 2,
            n_actions: 2,
            n_events: 2,
            scl_layers: 1,
            hsa_layers: 1,
            heads: 2,
            mlp_hidden: self.d,
            ..ModelConfig::default()
        }
    }
}

/// A random annotated video and a query over it.
pub fn random_annotations(shape: InstanceShape, rng: &mut impl Rng) -> (VideoAnnotation, QueryAnnotation) {
    let segments: Vec<Segment> = (0..shape.segments)
        .map(|_| Segment {
            frames: (0..shape.frames_per_segment)
                .map(|_| (0..shape.frame_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            actions: (0..3)
                .map(|_| Detection::new(ACTIONS[rng.random_range(0..ACTIONS.len())], rng.random()))
                .collect(),
            objects: (0..3)
                .map(|_| Detection::new(OBJECTS[rng.random_range(0..OBJECTS.len())], rng.random()))
                .collect(),
        })
        .collect();
    let duration = 2.0 * shape.segments as f64;
    let video = VideoAnnotation {
        video_id: "v".into(),
        duration,
        segments,
    };
    let n = rng.random_range(1..3);
    let structures = (0..n)
        .map(|_| {
            let args: Vec<&str> = (0..rng.random_range(1..3))
                .map(|_| OBJECTS[rng.random_range(0..OBJECTS.len())])
                .collect();
            SemanticStructure::new(ACTIONS[rng.random_range(0..ACTIONS.len())], &args)
        })
        .collect();
    let s = rng.random_range(0.0..duration * 0.6);
    let e = rng.random_range(s + 0.1..duration);
    let query = QueryAnnotation {
        query_id: "q".into(),
        video_id: "v".into(),
        structures,
        tokens: Vec::new(),
        gt_interval: (s, e),
    };
    (video, query)
}

/// A fresh model with its inputs and one masking draw.
pub struct Instance {
    pub model: Model,
    pub video: VideoInput,
    pub query: QueryInput,
    pub masked: HierarchicalSemanticGraph,
    pub record: MaskRecord,
    /// A perturbed copy of the parameters acting as the target network.
    pub target: ParamStore,
}

pub fn random_instance(shape: InstanceShape, toggles: Toggles, seed: u64, mask_p: f64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (va, qa) = random_annotations(shape, &mut rng);
    let vocab = detection_vocab([&va]);
    let model = Model::init(shape.model_config(), toggles, shape.frame_dim, vocab, seed);
    let table = model.embedding_table()?;
    let video = VideoInput::new(&va, model.quotas(), &table)?;
    let query = QueryInput::new(&qa, &va, &table)?;
    let (masked, record) = video.graph.mask_nodes(mask_p, seed ^ 0x9e37, &table)?;
    let mut target = model.params.clone();
    for t in target.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    Ok(Instance {
        model,
        video,
        query,
        masked,
        record,
        target,
    })
}

fn tensor_err(e: crate::Error) -> TensorError {
    TensorError::InvalidArgument {
        op: "model",
        msg: e.to_string(),
    }
}

/// Finite-difference check of the per-item objective with respect to every
/// parameter, at `f64`.
pub fn model_gradient_check(inst: &Instance, loss: &LossConfig, opts: &FdOptions) -> Result<FdReport> {
    let store: ParamStore<f64> = inst.model.params.cast();
    let target_store: ParamStore<f64> = inst.target.cast();
    let masked = Some((&inst.masked, &inst.record)).filter(|_| inst.model.toggles.sism());
    let target = match masked {
        Some((g, r)) if inst.model.toggles.sc && !r.is_empty() => {
            let mut tctx = Ctx::new(&target_store, false);
            let (mt, _) = inst.model.encode_video(&mut tctx, g, &inst.video.frames)?;
            let pt = objectives::relationship_distribution(&mut tctx.tape, mt, &r.indices)?;
            Some(objectives::sharpen(tctx.value(pt), loss.tau)?)
        }
        _ => None,
    };
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> compground_tensor::Result<Var> {
        let binder = Binder::prebound(&store, vars, true)?;
        let mut ctx = Ctx::from_parts(std::mem::take(tape), binder);
        let out = item_objective(&inst.model, &mut ctx, &inst.video, &inst.query, masked, target.as_ref(), loss);
        *tape = ctx.tape;
        out.map(|o| o.loss).map_err(tensor_err)
    };
    let inputs: Vec<Tensor<f64>> = store.tensors().cloned().collect();
    Ok(finite_difference_check(f, &inputs, opts)?)
}

/// Finite-difference check of the margin loss over random pooled vectors.
pub fn sam_gradient_check(seed: u64, batch: usize, d: usize, opts: &FdOptions) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * batch);
    for _ in 0..2 * batch {
        let data = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        inputs.push(Tensor::from_vec(1, d, data)?);
    }
    let pairs: Vec<SamPair> = (0..batch)
        .map(|b| SamPair {
            neg_video: (b + 1 + rng.random_range(0..batch - 1)) % batch,
            neg_lang: (b + 1 + rng.random_range(0..batch - 1)) % batch,
            // Large margins keep every hinge active, so the check sees the
            // cosine terms rather than zero gradients.
            margin: 2.0 + rng.random::<f64>(),
        })
        .collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> compground_tensor::Result<Var> {
        objectives::sam_on_tape(tape, &vars[..batch], &vars[batch..], &pairs).map_err(tensor_err)
    };
    Ok(finite_difference_check(f, &inputs, opts)?)
}

/// One row of the gradient-check table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub name: String,
    /// Worst relative error over all seeds.
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradRow {
    fn merge(&mut self, r: &FdReport) {
        self.max_rel_err = self.max_rel_err.max(r.max_rel_err());
        self.checked += r.checked();
        self.skipped += r.skipped();
    }
}

fn row(rows: &mut Vec<GradRow>, name: &str) -> usize {
    match rows.iter().position(|r| r.name == name) {
        Some(i) => i,
        None => {
            rows.push(GradRow {
                name: name.to_string(),
                max_rel_err: 0.0,
                checked: 0,
                skipped: 0,
            });
            rows.len() - 1
        }
    }
}

/// Primitive suite, the margin loss, and the tiny model under every seed.
pub fn gradient_table(seeds: &[u64], opts: &FdOptions) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for case in primitive_suite(seed) {
            let r = finite_difference_check(|t, v| (case.f)(t, v), &case.inputs, opts)?;
            let i = row(&mut rows, case.name);
            rows[i].merge(&r);
        }
        let r = sam_gradient_check(seed, 3, 5, opts)?;
        let i = row(&mut rows, "margin_loss");
        rows[i].merge(&r);
        let inst = random_instance(InstanceShape::tiny(), Toggles::default(), seed, 0.5)?;
        let r = model_gradient_check(&inst, &LossConfig::default(), opts)?;
        let i = row(&mut rows, "model");
        rows[i].merge(&r);
    }
    Ok(rows)
}

pub fn gradient_table_text(rows: &[GradRow]) -> String {
    let mut out = format!("{:<16} {:>12} {:>8} {:>8}\n", "op", "max rel err", "checked", "skipped");
    for r in rows {
        out.push_str(&format!("{:<16} {:>12.3e} {:>8} {:>8}\n", r.name, r.max_rel_err, r.checked, r.skipped));
    }
    out
}
