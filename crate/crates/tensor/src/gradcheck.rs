//! Central finite-difference verification of analytic gradients.
//!
//! Everything here runs at `f64`. Non-scalar outputs are reduced to a
//! scalar with a fixed pseudo-random projection so every output entry
//! contributes to the checked gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::primitive::{evaluate, Primitive};
use crate::tape::{PoolKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    pub h: f64,
    pub rel_tol: f64,
    /// Absolute differences at or below this count as exact agreement.
    pub abs_floor: f64,
    /// One-sided slopes disagreeing by more than this (relative to
    /// `max(1, |slope|)`) mark the entry as sitting on a kink.
    pub kink_tol: f64,
    pub projection_seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-5,
            kink_tol: 1e-2,
            projection_seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub skipped_nondifferentiable: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub inputs: Vec<InputCheck>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|i| i.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|i| i.skipped_nondifferentiable).sum()
    }

    pub fn passed(&self, rel_tol: f64) -> bool {
        self.max_rel_err() <= rel_tol
    }
}

/// Relative error with an absolute floor: differences within `abs_floor`
/// are reported as zero.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn objective<F>(f: &F, inputs: &[Tensor<f64>], seed: u64, track: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    let s = tape.shape(out);
    let loss = if s.rows == 1 && s.cols == 1 {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..s.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = tape.constant(Tensor::from_vec(s.rows, s.cols, w)?);
        let prod = tape.mul(out, w)?;
        tape.sum(prod)?
    };
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences, entry by entry.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor<f64>], opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, vars, loss) = objective(&f, inputs, opts.projection_seed, true)?;
    let grads = tape.backward(loss)?;
    let base = tape.value(loss).item();
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let (t, _, l) = objective(&f, ins, opts.projection_seed, false)?;
        Ok(t.value(l).item())
    };

    let mut report = FdReport::default();
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut check = InputCheck::default();
        for e in 0..work[k].len() {
            let x0 = work[k].data()[e];
            work[k].data_mut()[e] = x0 + opts.h;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = x0 - opts.h;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = x0;

            let fwd = (plus - base) / opts.h;
            let bwd = (base - minus) / opts.h;
            let scale = 1f64.max(fwd.abs()).max(bwd.abs());
            if (fwd - bwd).abs() > opts.kink_tol * scale {
                check.skipped_nondifferentiable += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.data()[e];
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric, opts.abs_floor));
            check.checked += 1;
        }
        report.inputs.push(check);
    }
    Ok(report)
}

/// Checks one primitive applied directly to `inputs`.
pub fn check_primitive(prim: &Primitive, inputs: &[Tensor<f64>], opts: &FdOptions) -> Result<FdReport> {
    finite_difference_check(|t, v| evaluate(t, prim, v), inputs, opts)
}

/// A named entry of the differentiable primitive suite.
pub struct SuiteCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    #[allow(clippy::type_complexity)]
    pub f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>,
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::from_vec(rows, cols, data).expect("positive extents")
}

fn case(name: &'static str, prim: Primitive, inputs: Vec<Tensor<f64>>) -> SuiteCase {
    SuiteCase {
        name,
        inputs,
        f: Box::new(move |t, v| evaluate(t, &prim, v)),
    }
}

/// Every differentiable primitive at randomized inputs drawn from `seed`.
pub fn primitive_suite(seed: u64) -> Vec<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    let mut cases = vec![
        case("matmul", Primitive::MatMul, vec![randn(r, 3, 3), randn(r, 3, 3)]),
        case("matmul_nt", Primitive::MatMulNt, vec![randn(r, 2, 4), randn(r, 3, 4)]),
        case("add", Primitive::Add, vec![randn(r, 2, 3), randn(r, 2, 3)]),
        case("sub", Primitive::Sub, vec![randn(r, 2, 3), randn(r, 2, 3)]),
        case("hadamard", Primitive::Hadamard, vec![randn(r, 2, 3), randn(r, 2, 3)]),
        case("scale", Primitive::Scale(-1.7), vec![randn(r, 2, 3)]),
        case("broadcast_add", Primitive::AddRow, vec![randn(r, 3, 4), randn(r, 1, 4)]),
        case("broadcast_mul", Primitive::MulRow, vec![randn(r, 3, 4), randn(r, 1, 4)]),
        case("concat", Primitive::ConcatCols, vec![randn(r, 2, 3), randn(r, 2, 2)]),
        case("concat_rows", Primitive::ConcatRows, vec![randn(r, 2, 3), randn(r, 1, 3)]),
        case("sigmoid", Primitive::Sigmoid, vec![randn(r, 2, 4)]),
        case("relu", Primitive::Relu, vec![randn(r, 2, 4)]),
        case("exp", Primitive::Exp, vec![randn(r, 2, 3)]),
        case("clamp", Primitive::Clamp(-0.5, 0.5), vec![randn(r, 2, 4)]),
        case("row_softmax", Primitive::Softmax, vec![randn(r, 2, 5)]),
        case("masked_softmax", Primitive::MaskedSoftmax(mask), vec![randn(r, 3, 4)]),
        case(
            "avg_pool",
            Primitive::Pool(vec![(0, 2), (2, 5)], PoolKind::Mean),
            vec![randn(r, 5, 3)],
        ),
        case(
            "max_pool",
            Primitive::Pool(vec![(0, 3), (3, 5)], PoolKind::Max),
            vec![randn(r, 5, 3)],
        ),
        case("transpose", Primitive::Transpose, vec![randn(r, 2, 3)]),
        case("slice_rows", Primitive::SliceRows(1, 3), vec![randn(r, 4, 2)]),
        case("slice_cols", Primitive::SliceCols(0, 2), vec![randn(r, 2, 4)]),
        case("gather", Primitive::GatherRows(vec![2, 0, 2]), vec![randn(r, 3, 2)]),
        case("sum", Primitive::Sum, vec![randn(r, 2, 3)]),
        case("mean", Primitive::Mean, vec![randn(r, 2, 3)]),
        case("smooth_l1", Primitive::SmoothL1, vec![randn(r, 2, 3), randn(r, 2, 3)]),
        case("cross_entropy", Primitive::CrossEntropy(vec![1, 0, 3]), vec![randn(r, 3, 4)]),
        case("normalize", Primitive::NormalizeRows, vec![randn(r, 2, 4)]),
    ];
    // kl_rows needs distributions; feed it softmax outputs.
    cases.push(SuiteCase {
        name: "kl_rows",
        inputs: vec![randn(r, 3, 4), randn(r, 3, 4)],
        f: Box::new(|t, v| {
            let p = t.softmax_rows(v[0])?;
            let q = t.softmax_rows(v[1])?;
            t.kl_rows(p, q)
        }),
    });
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_random_three_by_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![randn(&mut rng, 3, 3), randn(&mut rng, 3, 3)];
        let rep = check_primitive(&Primitive::MatMul, &ins, &FdOptions::default()).unwrap();
        assert!(rep.passed(1e-3), "{rep:?}");
        assert_eq!(rep.checked(), 18);
    }

    #[test]
    fn softmax_random_two_by_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![randn(&mut rng, 2, 5)];
        let rep = check_primitive(&Primitive::Softmax, &ins, &FdOptions::default()).unwrap();
        assert!(rep.passed(1e-3), "{rep:?}");
    }

    #[test]
    fn abs_at_zero_is_skipped() {
        let ins = vec![Tensor::row_vector(&[0.0, 0.7])];
        let rep = check_primitive(&Primitive::Abs, &ins, &FdOptions::default()).unwrap();
        assert_eq!(rep.inputs[0].skipped_nondifferentiable, 1);
        assert_eq!(rep.inputs[0].checked, 1);
        assert!(rep.passed(1e-3));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x * stop_grad(x) has true gradient x but flows only through one side.
        let ins = vec![Tensor::row_vector(&[0.5, -1.2])];
        let rep = finite_difference_check(
            |t, v| {
                let c = t.constant(t.value(v[0]).clone());
                t.mul(v[0], c)
            },
            &ins,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed(1e-3));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-7, 2e-7, 1e-5), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-5) - 0.1 / 1.1).abs() < 1e-12);
    }
}
