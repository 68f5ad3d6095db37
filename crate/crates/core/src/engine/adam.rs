use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer and bookkeeping state of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState<F: Float = f32> {
    pub step: u64,
    pub epoch: usize,
    pub adam: AdamConfig,
    /// First and second moments, indexed like the parameter store
    /// (`None` for non-trainable entries).
    pub m: Vec<Option<Tensor<F>>>,
    pub v: Vec<Option<Tensor<F>>>,
    pub best_val_recall: Option<f64>,
    /// Source of batch orders and dropout seeds.
    pub rng: ChaCha8Rng,
}

impl<F: Float> TrainerState<F> {
    pub fn new(store: &ParamStore<F>, adam: AdamConfig, seed: u64) -> Self {
        let zeros: Vec<Option<Tensor<F>>> = store
            .iter()
            .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.value.shape())))
            .collect();
        Self {
            step: 0,
            epoch: 0,
            adam,
            m: zeros.clone(),
            v: zeros,
            best_val_recall: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// `grads[i]` is the gradient of parameter `i` of the store; a missing
/// gradient for a trainable parameter is an error and leaves the store
/// untouched.
pub fn adam_step<F: Float>(
    state: &mut TrainerState<F>,
    store: &mut ParamStore<F>,
    grads: &[Option<Tensor<F>>],
) -> Result<()> {
    let trainable: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for &id in &trainable {
        let p = store.param(id);
        match grads.get(id.index()).and_then(Option::as_ref) {
            None => {
                return Err(Error::Training(format!(
                    "no gradient for parameter {}",
                    p.name
                )))
            }
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::dim("adam_step", g.shape(), p.value.shape()))
            }
            Some(_) => {}
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.adam;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for id in trainable {
        let g = grads[id.index()].as_ref().expect("checked above").data();
        let m = state.m[id.index()].get_or_insert_with(|| Tensor::zeros(store.get(id).shape()));
        let v = state.v[id.index()].get_or_insert_with(|| Tensor::zeros(store.get(id).shape()));
        let w = store.get_mut(id).data_mut();
        for (((w, m), v), &g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
            let g = g.as_f64();
            let mn = beta1 * m.as_f64() + (1.0 - beta1) * g;
            let vn = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
            *m = F::of(mn);
            *v = F::of(vn);
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *w = F::of(w.as_f64() - step);
        }
    }
    Ok(())
}
