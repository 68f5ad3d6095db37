use rand::Rng;

use super::{glorot, Forward, Linear, Module, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

/// One direction of an LSTM layer. Gate columns are ordered
/// `[input, forget, candidate, output]`, each `hidden` wide.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    /// Input-to-gates map, including the gate bias.
    pub input: Linear,
    /// Hidden-to-gates weights `[hidden, 4 * hidden]`.
    pub recurrent: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), input_dim, 4 * hidden, rng);
        // forget-gate bias starts at 1
        let bias = input.bias.expect("gate projection has a bias");
        store.get_mut(bias).data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|b| *b = F::one());
        let recurrent = store.add(
            format!("{name}.recurrent"),
            glorot(rng, hidden, 4 * hidden, &[hidden, 4 * hidden]),
            true,
        );
        Self {
            input,
            recurrent,
            hidden,
        }
    }

    /// Run over every sequence in `x[S*T, in]`; `reverse` consumes each
    /// sequence from its last step to its first. Output rows stay aligned
    /// with input rows.
    pub fn forward<F: Float>(
        &self,
        fw: &mut Forward<'_, F>,
        x: Var,
        seq_len: usize,
        reverse: bool,
    ) -> Result<Var> {
        let rows = fw.tape.value(x).dims2()?.0;
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!(
                "{rows} rows do not split into sequences of length {seq_len}"
            )));
        }
        let seqs = rows / seq_len;
        let h = self.hidden;
        let gates_x = self.input.forward(fw, x)?;
        let u = fw.param(self.recurrent);

        let steps: Vec<usize> = if reverse {
            (0..seq_len).rev().collect()
        } else {
            (0..seq_len).collect()
        };
        let mut state: Option<(Var, Var)> = None;
        let mut outputs = vec![None; seq_len];
        for t in steps {
            let idx: Vec<usize> = (0..seqs).map(|s| s * seq_len + t).collect();
            let mut g = fw.tape.select_rows(gates_x, &idx)?;
            if let Some((h_prev, _)) = state {
                let r = fw.tape.matmul(h_prev, u)?;
                g = fw.tape.add(g, r)?;
            }
            let i = fw.tape.slice_cols(g, 0, h)?;
            let i = fw.tape.sigmoid(i);
            let f = fw.tape.slice_cols(g, h, 2 * h)?;
            let f = fw.tape.sigmoid(f);
            let cand = fw.tape.slice_cols(g, 2 * h, 3 * h)?;
            let cand = fw.tape.tanh(cand);
            let o = fw.tape.slice_cols(g, 3 * h, 4 * h)?;
            let o = fw.tape.sigmoid(o);

            let mut c = fw.tape.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let kept = fw.tape.mul(f, c_prev)?;
                c = fw.tape.add(c, kept)?;
            }
            let tc = fw.tape.tanh(c);
            let h_t = fw.tape.mul(o, tc)?;
            outputs[t] = Some(h_t);
            state = Some((h_t, c));
        }
        let outputs: Vec<Var> = outputs.into_iter().map(|o| o.unwrap()).collect();
        // time-major [T*S, h] -> sequence-major [S*T, h]
        let stacked = fw.tape.concat_rows(&outputs)?;
        let perm: Vec<usize> = (0..seqs)
            .flat_map(|s| (0..seq_len).map(move |t| t * seqs + s))
            .collect();
        fw.tape.select_rows(stacked, &perm)
    }
}

impl Module for LstmDirection {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.input.param_ids();
        ids.push(self.recurrent);
        ids
    }
}

/// Stacked bidirectional LSTM; each layer emits `[forward | backward]`
/// hidden states, `2 * hidden` wide, with dropout between layers.
#[derive(Debug, Clone)]
pub struct BiLstmStack {
    pub layers: Vec<(LstmDirection, LstmDirection)>,
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl BiLstmStack {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        depth: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let width = if l == 0 { input_dim } else { 2 * hidden };
                (
                    LstmDirection::new(store, &format!("{name}.layer{l}.fwd"), width, hidden, rng),
                    LstmDirection::new(store, &format!("{name}.layer{l}.bwd"), width, hidden, rng),
                )
            })
            .collect();
        Self {
            layers,
            input_dim,
            hidden,
            dropout,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn forward<F: Float>(&self, fw: &mut Forward<'_, F>, x: Var, seq_len: usize) -> Result<Var> {
        let width = *fw.tape.shape(x).last().unwrap();
        if width != self.input_dim {
            return Err(Error::dim("bilstm", fw.tape.shape(x), &[seq_len, self.input_dim]));
        }
        let mut h = x;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                h = fw.dropout(h, self.dropout)?;
            }
            let a = fwd.forward(fw, h, seq_len, false)?;
            let b = bwd.forward(fw, h, seq_len, true)?;
            h = fw.tape.concat_cols(&[a, b])?;
        }
        Ok(h)
    }
}

impl Module for BiLstmStack {
    fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|(a, b)| a.param_ids().into_iter().chain(b.param_ids()))
            .collect()
    }
}
