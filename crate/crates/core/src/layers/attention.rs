use rand::Rng;

use super::{Forward, LayerNorm, Linear, Module, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Sinusoidal position table `[T, d]`:
/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding<F: Float>(len: usize, d: usize) -> Result<Tensor<F>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "positional encoding needs an even model width, got {d}"
        )));
    }
    if len == 0 {
        return Err(Error::Parameter("positional encoding needs T >= 1".into()));
    }
    let mut table = vec![F::zero(); len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            table[pos * d + 2 * i] = F::of(angle.sin());
            table[pos * d + 2 * i + 1] = F::of(angle.cos());
        }
    }
    Tensor::new(&[len, d], table)
}

/// Multi-head self-attention without masking.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Parameter(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            dim,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::without_bias(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
        })
    }

    /// Attend within each block of `seq_len` rows of `x[S*T, d]`. Returns the
    /// projected output and the raw attention node (for
    /// [`crate::tensor::Tape::attention_weights`]).
    pub fn forward_with_weights<F: Float>(
        &self,
        fw: &mut Forward<'_, F>,
        x: Var,
        seq_len: usize,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(fw, x)?;
        let k = self.key.forward(fw, x)?;
        let v = self.value.forward(fw, x)?;
        let attended = fw.tape.attention(q, k, v, seq_len, self.heads)?;
        Ok((self.output.forward(fw, attended)?, attended))
    }

    pub fn forward<F: Float>(&self, fw: &mut Forward<'_, F>, x: Var, seq_len: usize) -> Result<Var> {
        Ok(self.forward_with_weights(fw, x, seq_len)?.0)
    }
}

impl Module for MultiHeadAttention {
    fn param_ids(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }
}

/// Post-norm encoder block: `LN(x + Drop(MHA(x)))` then
/// `LN(h + Drop(W2 Drop(ReLU(W1 h))))`.
#[derive(Debug, Clone)]
pub struct TransformerEncoderLayer {
    pub attention: MultiHeadAttention,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl TransformerEncoderLayer {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_width: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, ff_width, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_width, dim, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            dropout,
        })
    }

    pub fn forward<F: Float>(&self, fw: &mut Forward<'_, F>, x: Var, seq_len: usize) -> Result<Var> {
        let a = self.attention.forward(fw, x, seq_len)?;
        let a = fw.dropout(a, self.dropout)?;
        let h = fw.tape.add(x, a)?;
        let h = self.norm1.forward(fw, h)?;

        let f = self.ff_in.forward(fw, h)?;
        let f = fw.tape.relu(f);
        let f = fw.dropout(f, self.dropout)?;
        let f = self.ff_out.forward(fw, f)?;
        let f = fw.dropout(f, self.dropout)?;
        let out = fw.tape.add(h, f)?;
        self.norm2.forward(fw, out)
    }
}

impl Module for TransformerEncoderLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attention.param_ids();
        for m in [&self.ff_in, &self.ff_out] {
            ids.extend(m.param_ids());
        }
        for m in [&self.norm1, &self.norm2] {
            ids.extend(m.param_ids());
        }
        ids
    }
}

/// Stack of encoder blocks with an optional sinusoidal position signal added
/// once before the first block.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerEncoderLayer>,
    pub dim: usize,
    pub positional: bool,
}

impl TransformerEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ff_width: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "transformer width must be even, got {dim}"
            )));
        }
        let layers = (0..depth)
            .map(|i| {
                TransformerEncoderLayer::new(
                    store,
                    &format!("{name}.layer{i}"),
                    dim,
                    heads,
                    ff_width,
                    dropout,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            dim,
            positional: true,
        })
    }

    /// Encode `x[S*T, d]`, treating each block of `seq_len` rows as one
    /// sequence.
    pub fn forward<F: Float>(&self, fw: &mut Forward<'_, F>, x: Var, seq_len: usize) -> Result<Var> {
        let (rows, d) = fw.tape.value(x).dims2()?;
        if d != self.dim {
            return Err(Error::dim("transformer", &[rows, d], &[seq_len, self.dim]));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!(
                "{rows} rows do not split into sequences of length {seq_len}"
            )));
        }
        let mut h = x;
        if self.positional {
            let table = positional_encoding::<F>(seq_len, d)?;
            let tiled: Vec<F> = table
                .data()
                .iter()
                .copied()
                .cycle()
                .take(rows * d)
                .collect();
            let pe = fw.tape.constant(Tensor::new(&[rows, d], tiled)?);
            h = fw.tape.add(h, pe)?;
        }
        for layer in &self.layers {
            h = layer.forward(fw, h, seq_len)?;
        }
        Ok(h)
    }
}

impl Module for TransformerEncoder {
    fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }
}
