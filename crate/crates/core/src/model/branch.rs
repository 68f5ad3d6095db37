use rand::Rng;

use super::{Aggregation, EncoderKind, ModelConfig};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm, BiLstmStack, Forward, Linear, Module, ParamId, ParamStore, TransformerEncoder,
};
use crate::tensor::{Float, ReduceKind, Var};

/// One modality's path from features to a unit-norm embedding.
#[derive(Debug, Clone)]
pub struct Branch {
    pub modality: Modality,
    pub input_dim: usize,
    pub embed_dim: usize,
    dropout: f64,
    raw: bool,
    body: Body,
}

#[derive(Debug, Clone)]
enum Body {
    /// `(linear -> batch norm -> relu -> dropout)*` then a linear layer to
    /// the embedding width.
    Dense { blocks: Vec<(Linear, BatchNorm)>, out: Linear },
    /// Input projection, temporal encoder, max-pool over time, then a
    /// `linear -> relu -> dropout` head.
    Encoded {
        proj: Linear,
        encoder: SeqEncoder,
        head: Linear,
    },
}

#[derive(Debug, Clone)]
enum SeqEncoder {
    Transformer(TransformerEncoder),
    Lstm(BiLstmStack),
}

impl Branch {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &ModelConfig,
        modality: Modality,
        rng: &mut R,
    ) -> Result<Self> {
        let name = modality.to_string();
        let input_dim = cfg.input_width(modality);
        let e = &cfg.encoder_params;
        let body = match cfg.encoder {
            EncoderKind::None => {
                let mut width = input_dim;
                let mut blocks = Vec::with_capacity(cfg.hidden.len());
                for (i, &h) in cfg.hidden.iter().enumerate() {
                    let linear = Linear::without_bias(store, &format!("{name}.fc{i}"), width, h, rng);
                    let bn = BatchNorm::new(store, &format!("{name}.bn{i}"), h, cfg.bn_momentum);
                    blocks.push((linear, bn));
                    width = h;
                }
                let out = Linear::new(store, &format!("{name}.out"), width, cfg.embed_dim, rng);
                Body::Dense { blocks, out }
            }
            EncoderKind::Transformer | EncoderKind::Lstm => {
                let proj = Linear::new(store, &format!("{name}.proj"), input_dim, e.width, rng);
                let (encoder, width) = if cfg.encoder == EncoderKind::Transformer {
                    let t = TransformerEncoder::new(
                        store,
                        &format!("{name}.transformer"),
                        e.layers,
                        e.width,
                        e.heads,
                        e.ff_width,
                        cfg.dropout,
                        rng,
                    )?;
                    (SeqEncoder::Transformer(t), e.width)
                } else {
                    let l = BiLstmStack::new(
                        store,
                        &format!("{name}.lstm"),
                        e.width,
                        e.lstm_hidden,
                        e.layers,
                        cfg.dropout,
                        rng,
                    );
                    let w = l.output_dim();
                    (SeqEncoder::Lstm(l), w)
                };
                let head = Linear::new(store, &format!("{name}.head"), width, cfg.embed_dim, rng);
                Body::Encoded {
                    proj,
                    encoder,
                    head,
                }
            }
        };
        Ok(Self {
            modality,
            input_dim,
            embed_dim: cfg.embed_dim,
            dropout: cfg.dropout,
            raw: cfg.aggregation == Aggregation::Raw,
            body,
        })
    }

    /// Map branch input to `[N, embed_dim]` unit rows.
    ///
    /// Aggregated input is `[N, input_dim]`; raw input is `[N*seq_len,
    /// input_dim]` with each clip's frames in consecutive rows.
    pub fn forward<F: Float>(&self, fw: &mut Forward<'_, F>, x: Var, seq_len: usize) -> Result<Var> {
        let (rows, width) = fw.tape.value(x).dims2()?;
        if width != self.input_dim || (self.raw && rows % seq_len != 0) {
            return Err(Error::dim(
                "branch input",
                &[rows, width],
                &[if self.raw { seq_len } else { 1 }, self.input_dim],
            ));
        }
        let pooled = match &self.body {
            Body::Dense { blocks, out } => {
                let mut h = x;
                for (linear, bn) in blocks {
                    h = linear.forward(fw, h)?;
                    h = bn.forward(fw, h)?;
                    h = fw.tape.relu(h);
                    h = fw.dropout(h, self.dropout)?;
                }
                let h = out.forward(fw, h)?;
                if self.raw {
                    fw.tape.reduce_seq(h, seq_len, ReduceKind::Max)?
                } else {
                    h
                }
            }
            Body::Encoded {
                proj,
                encoder,
                head,
            } => {
                let h = proj.forward(fw, x)?;
                let h = match encoder {
                    SeqEncoder::Transformer(t) => t.forward(fw, h, seq_len)?,
                    SeqEncoder::Lstm(l) => l.forward(fw, h, seq_len)?,
                };
                let h = fw.tape.reduce_seq(h, seq_len, ReduceKind::Max)?;
                let h = head.forward(fw, h)?;
                let h = fw.tape.relu(h);
                fw.dropout(h, self.dropout)?
            }
        };
        Ok(fw.tape.l2_normalize_rows(pooled))
    }
}

impl Module for Branch {
    fn param_ids(&self) -> Vec<ParamId> {
        match &self.body {
            Body::Dense { blocks, out } => blocks
                .iter()
                .flat_map(|(l, b)| l.param_ids().into_iter().chain(b.param_ids()))
                .chain(out.param_ids())
                .collect(),
            Body::Encoded {
                proj,
                encoder,
                head,
            } => {
                let enc = match encoder {
                    SeqEncoder::Transformer(t) => t.param_ids(),
                    SeqEncoder::Lstm(l) => l.param_ids(),
                };
                proj.param_ids()
                    .into_iter()
                    .chain(enc)
                    .chain(head.param_ids())
                    .collect()
            }
        }
    }
}
