use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

/// Scalar element type. The model runs on `f32`; gradient checks run the
/// same code on `f64`.
pub trait Real:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}

/// Dense row-major matrix. Vectors are `[1, n]`, scalars `[1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor<T>", into = "RawTensor<T>")]
#[serde(bound(
    serialize = "T: Real + Serialize",
    deserialize = "T: Real + Deserialize<'de>"
))]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> TryFrom<RawTensor<T>> for Tensor<T> {
    type Error = TensorError;

    fn try_from(raw: RawTensor<T>) -> Result<Self> {
        let shape = match raw.shape.as_slice() {
            [n] => Shape::new(1, *n),
            [r, c] => Shape::new(*r, *c),
            other => {
                return Err(TensorError::InvalidArgument {
                    op: "tensor",
                    msg: format!("unsupported rank {}", other.len()),
                })
            }
        };
        Tensor::from_vec(shape.rows, shape.cols, raw.values)
    }
}

impl<T: Real> From<Tensor<T>> for RawTensor<T> {
    fn from(t: Tensor<T>) -> Self {
        RawTensor {
            shape: vec![t.shape.rows, t.shape.cols],
            values: t.data,
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                msg: format!("extents must be positive, got [{rows}, {cols}]"),
            });
        }
        if rows * cols != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                msg: format!(
                    "buffer of length {} does not match shape [{rows}, {cols}]",
                    data.len()
                ),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape: Shape::new(rows, cols),
            data,
        })
    }

    /// Builds from nested rows. Panics on ragged input; intended for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::from_vec(rows.len(), cols, data).expect("valid literal")
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_rows(&[values])
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Shape::new(1, 1),
            data: vec![v],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, T::zero())
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        assert!(rows > 0 && cols > 0, "extents must be positive");
        Self {
            shape: Shape::new(rows, cols),
            data: vec![v; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Unchecked construction for internal kernels whose output shape is
    /// correct by construction.
    pub(crate) fn raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.shape.cols;
        self.data[r * cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape.cols;
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.shape.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::raw(self.shape, self.data.iter().map(|v| U::of(v.f64())).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::raw(Shape::new(c, r), out)
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.cols() != other.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(matmul_raw(self, other))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    let bd = b.data();
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::raw(Shape::new(m, n), out)
}

/// `aᵀ · b` without materializing the transpose.
pub(crate) fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::raw(Shape::new(m, n), out)
}

/// `a · bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out.push(acc);
        }
    }
    Tensor::raw(Shape::new(m, n), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(Tensor::<f32>::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(0, 2, vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = Tensor::<f64>::from_rows(&[&[1.0, 0.5], &[-1.0, 2.0]]);
        assert_eq!(matmul_tn(&a, &b), a.transpose().matmul(&b).unwrap());
        let c = Tensor::<f64>::from_rows(&[&[1.0, 0.0, 2.0]]);
        assert_eq!(matmul_nt(&a, &c), a.matmul(&c.transpose()).unwrap());
    }

    #[test]
    fn serde_shape_and_values() {
        let t = Tensor::<f32>::from_rows(&[&[1.5, -2.0], &[0.25, 3.0]]);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"shape":[2,2],"values":[1.5,-2.0,0.25,3.0]}"#);
        let back: Tensor<f32> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"shape":[2,2],"values":[1.0]}"#;
        assert!(serde_json::from_str::<Tensor<f32>>(bad).is_err());
    }
}
