use rand::Rng;

use super::{glorot, Forward, Module, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::without_bias(store, name, in_features, out_features, rng);
        layer.bias = Some(store.add(
            format!("{name}.bias"),
            Tensor::zeros(&[out_features]),
            true,
        ));
        layer
    }

    /// For projections whose bias would be cancelled downstream (a
    /// following batch norm, or attention keys under the row softmax).
    pub fn without_bias<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let w = glorot(rng, in_features, out_features, &[in_features, out_features]);
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: None,
            in_features,
            out_features,
        }
    }

    pub fn forward<F: Float>(&self, fw: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let cols = *fw.tape.shape(x).last().unwrap();
        if cols != self.in_features {
            return Err(Error::dim(
                "linear",
                fw.tape.shape(x),
                &[self.in_features, self.out_features],
            ));
        }
        let w = fw.param(self.weight);
        let h = fw.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = fw.param(b);
                fw.tape.add_row(h, b)
            }
            None => Ok(h),
        }
    }
}

impl Module for Linear {
    fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}
