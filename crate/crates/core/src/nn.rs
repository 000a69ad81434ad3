//! Tape plus parameter binder, and small layer helpers shared by the model
//! components.

use compground_tensor::{Binder, ParamStore, Real, Tape, Tensor, Var};

use crate::error::Result;

pub struct Ctx<'p, T: Real> {
    pub tape: Tape<T>,
    pub binder: Binder<'p, T>,
    /// Named row-stochastic matrices recorded during the forward pass, for
    /// inspection and invariant checks.
    pub trace: Vec<(String, Var)>,
    tracing: bool,
}

impl<'p, T: Real> Ctx<'p, T> {
    pub fn new(store: &'p ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            binder: Binder::new(store, trainable),
            trace: Vec::new(),
            tracing: false,
        }
    }

    /// Wraps an existing tape and binder.
    pub fn from_parts(tape: Tape<T>, binder: Binder<'p, T>) -> Self {
        Self {
            tape,
            binder,
            trace: Vec::new(),
            tracing: false,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.tracing = true;
        self
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        Ok(self.binder.get(&mut self.tape, name)?)
    }

    pub fn constant(&mut self, t: &Tensor<f32>) -> Var {
        self.tape.constant(t.cast())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn record(&mut self, name: impl FnOnce() -> String, v: Var) {
        if self.tracing {
            self.trace.push((name(), v));
        }
    }

    /// `x · W[name]`.
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(name)?;
        Ok(self.tape.matmul(x, w)?)
    }

    /// `x · W[name.w] + b[name.b]`.
    pub fn affine(&mut self, x: Var, name: &str) -> Result<Var> {
        let y = self.linear(x, &format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        Ok(self.tape.add_row(y, b)?)
    }

    pub fn zero_scalar(&mut self) -> Var {
        self.tape.constant(Tensor::zeros(1, 1))
    }
}

/// Gaussian init with standard deviation `gain / sqrt(rows)`.
pub fn scaled_normal(rng: &mut impl rand::Rng, rows: usize, cols: usize, gain: f64) -> Tensor<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let std = gain / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("positive extents")
}
