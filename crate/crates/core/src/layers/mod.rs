//! Neural building blocks.
//!
//! Layers do not own their weights: they hold [`ParamId`]s into a
//! [`ParamStore`], and a forward pass reads the store through a [`Forward`]
//! context that lazily binds each parameter onto the tape. Keeping values
//! out of the layers lets the same model be bound to leaves of a
//! gradient-check tape, cast between `f32` and `f64`, and serialized by
//! name.

mod attention;
mod linear;
mod lstm;
mod norm;

pub use attention::{
    positional_encoding, MultiHeadAttention, TransformerEncoder, TransformerEncoderLayer,
};
pub use linear::Linear;
pub use lstm::{BiLstmStack, LstmDirection};
pub use norm::{BatchNorm, LayerNorm};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{dropout, finite_diff_check_many, Float, GradCheckReport, Tape, Tensor, Var};

#[cfg(test)]
mod tests;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Float> {
    pub name: String,
    pub value: Tensor<F>,
    /// Running statistics are stored alongside weights but never trained.
    pub trainable: bool,
}

/// Flat, ordered collection of named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Float> {
    params: Vec<Param<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Add `uniform(-scale, scale)` noise to every trainable scalar.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            for v in p.value.data_mut() {
                *v = *v + F::of(rng.gen_range(-scale..scale));
            }
        }
    }

    /// Fold batch statistics from a training forward pass into the running
    /// estimates: `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_batch_stats(&mut self, updates: &[BatchStats<F>]) {
        for u in updates {
            let m = F::of(u.momentum);
            let keep = F::one() - m;
            for (id, batch) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
                self.get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .zip(batch)
                    .for_each(|(r, &b)| *r = keep * *r + m * b);
            }
        }
    }
}

/// Batch statistics observed by a batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub momentum: f64,
}

/// Anything that owns parameters.
pub trait Module {
    fn param_ids(&self) -> Vec<ParamId>;

    /// Exact number of trainable scalars.
    fn param_count<F: Float>(&self, store: &ParamStore<F>) -> usize {
        self.param_ids()
            .into_iter()
            .map(|id| store.param(id))
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

/// State of one forward pass.
pub struct Forward<'a, F: Float> {
    pub tape: &'a mut Tape<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    grad: bool,
    pub training: bool,
    pub rng: ChaCha8Rng,
    stats: Vec<BatchStats<F>>,
}

impl<'a, F: Float> Forward<'a, F> {
    /// `grad` controls whether trainable parameters become gradient leaves;
    /// `seed` drives dropout masks.
    pub fn new(
        tape: &'a mut Tape<F>,
        store: &'a ParamStore<F>,
        training: bool,
        grad: bool,
        seed: u64,
    ) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            grad,
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: Vec::new(),
        }
    }

    /// Use pre-existing tape variables for some parameters (gradient checks
    /// bind parameters to the checker's own leaves).
    pub fn bind(&mut self, id: ParamId, var: Var) -> Result<()> {
        if self.tape.shape(var) != self.store.get(id).shape() {
            return Err(Error::dim(
                "bind",
                self.tape.shape(var),
                self.store.get(id).shape(),
            ));
        }
        self.bound[id.0] = Some(var);
        Ok(())
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let v = if self.grad && p.trainable {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameter variables bound so far, for reading gradients.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        dropout(self.tape, x, p, self.training, &mut self.rng)
    }

    pub(crate) fn record_stats(&mut self, stats: BatchStats<F>) {
        self.stats.push(stats);
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<F>> {
        std::mem::take(&mut self.stats)
    }
}

/// Finite-difference check of `f` with respect to `inputs` and every
/// trainable parameter in `store`.
///
/// `f` receives a forward context whose parameters are bound to the
/// checker's leaves, plus one variable per input tensor. The forward RNG is
/// reseeded with `seed` on every evaluation, so dropout masks are identical
/// across perturbations.
pub fn check_param_gradients(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    training: bool,
    seed: u64,
    eps: f64,
    f: impl Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut all: Vec<Tensor<f64>> = inputs.to_vec();
    all.extend(ids.iter().map(|&id| store.get(id).clone()));
    let n_inputs = inputs.len();
    finite_diff_check_many(
        |tape, vars| {
            let mut fw = Forward::new(tape, store, training, true, seed);
            for (&id, &v) in ids.iter().zip(&vars[n_inputs..]) {
                fw.bind(id, v)?;
            }
            f(&mut fw, &vars[..n_inputs])
        },
        &all,
        eps,
    )
}

/// Glorot/Xavier uniform bound.
pub(crate) fn glorot<F: Float, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| F::of(rng.gen_range(-a..a))).collect())
        .expect("shape matches element count")
}
