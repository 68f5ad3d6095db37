use super::{BatchStats, Forward, Module, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Float, Tensor, Var};

/// Batch normalization with running statistics for evaluation mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize, momentum: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], F::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[dim]), false),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[dim], F::one()),
                false,
            ),
            momentum,
            eps: 1e-5,
        }
    }

    /// Training mode normalizes by batch statistics (and records them for
    /// the running update); evaluation mode uses the running statistics.
    pub fn forward<F: Float>(&self, fw: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let gamma = fw.param(self.gamma);
        let beta = fw.param(self.beta);
        let eps = F::of(self.eps);
        if fw.training {
            let (y, stats) = fw.tape.batch_norm(x, gamma, beta, eps, None)?;
            let (mean, var) = stats.expect("training mode returns batch statistics");
            fw.record_stats(BatchStats {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                var,
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            let mean = fw.store().get(self.running_mean).data().to_vec();
            let var = fw.store().get(self.running_var).data().to_vec();
            Ok(fw.tape.batch_norm(x, gamma, beta, eps, Some((&mean, &var)))?.0)
        }
    }
}

impl Module for BatchNorm {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Per-row layer normalization with a learned affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], F::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            eps: 1e-5,
        }
    }

    pub fn forward<F: Float>(&self, fw: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let gamma = fw.param(self.gamma);
        let beta = fw.param(self.beta);
        fw.tape.layer_norm(x, gamma, beta, F::of(self.eps))
    }
}

impl Module for LayerNorm {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}
