//! Column statistics over plain (unrecorded) tensors.

use super::tape::{mean_of, std_of};
use super::{Float, Tensor};
use crate::error::{Error, Result};

fn columns<F: Float>(x: &Tensor<F>) -> Result<Vec<Vec<F>>> {
    let (t, d) = x.dims2()?;
    if t == 0 {
        return Err(Error::Degenerate("empty sequence".into()));
    }
    Ok((0..d)
        .map(|j| (0..t).map(|i| x.data()[i * d + j]).collect())
        .collect())
}

/// Per-column mean of `x[T, D]`, shape `[D]`.
pub fn column_mean<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let cols = columns(x)?;
    Tensor::new(&[cols.len()], cols.iter().map(|c| mean_of(c)).collect())
}

/// Per-column population standard deviation of `x[T, D]`; needs `T >= 2`.
pub fn column_std<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.dims2()?.0 < 2 {
        return Err(Error::Degenerate(
            "standard deviation needs at least 2 timesteps".into(),
        ));
    }
    let cols = columns(x)?;
    Tensor::new(&[cols.len()], cols.iter().map(|c| std_of(c)).collect())
}

/// Per-column maximum of `x[T, D]`.
pub fn column_max<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let cols = columns(x)?;
    Tensor::new(
        &[cols.len()],
        cols.iter()
            .map(|c| c.iter().copied().fold(F::neg_infinity(), F::max))
            .collect(),
    )
}
