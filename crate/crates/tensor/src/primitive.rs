use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tape::{PoolKind, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Catalog of tape primitives, for code that selects an operation at run
/// time (the gradient suite, the `grad-check` command).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    MatMul,
    MatMulNt,
    Add,
    Sub,
    Hadamard,
    Scale(f64),
    AddRow,
    MulRow,
    ConcatCols,
    ConcatRows,
    Sigmoid,
    Relu,
    Abs,
    Exp,
    Clamp(f64, f64),
    Softmax,
    MaskedSoftmax(Vec<bool>),
    Pool(Vec<(usize, usize)>, PoolKind),
    Transpose,
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(Vec<usize>),
    Sum,
    Mean,
    SmoothL1,
    KlRows,
    CrossEntropy(Vec<usize>),
    NormalizeRows,
}

impl Serialize for PoolKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            PoolKind::Mean => "mean",
            PoolKind::Max => "max",
        })
    }
}

impl<'de> Deserialize<'de> for PoolKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match String::deserialize(d)?.as_str() {
            "mean" => Ok(PoolKind::Mean),
            "max" => Ok(PoolKind::Max),
            other => Err(serde::de::Error::unknown_variant(other, &["mean", "max"])),
        }
    }
}

impl Primitive {
    pub fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::MatMulNt
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Hadamard
            | Primitive::AddRow
            | Primitive::MulRow
            | Primitive::SmoothL1
            | Primitive::KlRows => 2,
            Primitive::ConcatCols | Primitive::ConcatRows => usize::MAX,
            _ => 1,
        }
    }
}

/// Applies `prim` to `inputs` on `tape`.
pub fn evaluate<T: Real>(tape: &mut Tape<T>, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
    let arity = prim.arity();
    if arity != usize::MAX && inputs.len() != arity {
        return Err(TensorError::InvalidArgument {
            op: "evaluate",
            msg: format!("{prim:?} takes {arity} inputs, got {}", inputs.len()),
        });
    }
    let a = inputs.first().copied();
    let x = || a.expect("arity checked");
    let y = || inputs[1];
    match prim {
        Primitive::MatMul => tape.matmul(x(), y()),
        Primitive::MatMulNt => tape.matmul_nt(x(), y()),
        Primitive::Add => tape.add(x(), y()),
        Primitive::Sub => tape.sub(x(), y()),
        Primitive::Hadamard => tape.mul(x(), y()),
        Primitive::Scale(s) => tape.scale(x(), *s),
        Primitive::AddRow => tape.add_row(x(), y()),
        Primitive::MulRow => tape.mul_row(x(), y()),
        Primitive::ConcatCols => tape.concat_cols(inputs),
        Primitive::ConcatRows => tape.concat_rows(inputs),
        Primitive::Sigmoid => tape.sigmoid(x()),
        Primitive::Relu => tape.relu(x()),
        Primitive::Abs => tape.abs(x()),
        Primitive::Exp => tape.exp(x()),
        Primitive::Clamp(lo, hi) => tape.clamp(x(), *lo, *hi),
        Primitive::Softmax => tape.softmax_rows(x()),
        Primitive::MaskedSoftmax(m) => tape.masked_softmax_rows(x(), m),
        Primitive::Pool(groups, kind) => tape.pool_rows(x(), groups, *kind),
        Primitive::Transpose => tape.transpose(x()),
        Primitive::SliceRows(s, e) => tape.slice_rows(x(), *s, *e),
        Primitive::SliceCols(s, e) => tape.slice_cols(x(), *s, *e),
        Primitive::GatherRows(idx) => tape.gather_rows(x(), idx),
        Primitive::Sum => tape.sum(x()),
        Primitive::Mean => tape.mean(x()),
        Primitive::SmoothL1 => tape.smooth_l1(x(), y()),
        Primitive::KlRows => tape.kl_rows(x(), y()),
        Primitive::CrossEntropy(t) => tape.cross_entropy(x(), t),
        Primitive::NormalizeRows => tape.normalize_rows(x()),
    }
}

/// Evaluates `prim` on constant inputs and returns the output value.
pub fn evaluate_values<T: Real>(prim: &Primitive, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = evaluate(&mut tape, prim, &vars)?;
    Ok(tape.value(out).clone())
}
