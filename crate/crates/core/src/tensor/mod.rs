//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! Values are plain [`Tensor`]s. Differentiable computation is recorded on a
//! [`Tape`], which hands out [`Var`] handles; [`Tape::backward`] walks the
//! recorded nodes in reverse and accumulates gradients into every node that
//! requires them. Everything is generic over [`Float`] so that the same layer
//! code runs in `f32` for training and in `f64` for finite-difference checks.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use ops::{column_max, column_mean, column_std};
pub use tape::{ReduceKind, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use rand::Rng;

use crate::error::{Error, Result};


/// Scalar element type of a tensor.
pub trait Float:
    num_traits::Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha * a @ b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the given sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Float for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense row-major tensor. Scalars have shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "shape must be a nonempty list of positive sizes, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
        }
    }

    /// Plain (non-recorded) matrix product.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![F::zero(); m * n];
        // SAFETY: row-major buffers sized m*k, k*n and m*n.
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                F::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (r, c) = self.dims2()?;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1 / (1 - p)`; evaluation
/// mode is the identity.
pub fn dropout<F: Float, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    x: Var,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = F::of(1.0 / (1.0 - p));
    let mask = (0..tape.value(x).numel())
        .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
        .collect();
    tape.mul_const(x, mask)
}
