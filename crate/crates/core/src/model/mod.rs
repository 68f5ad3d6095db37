//! The dual-branch embedding network and its named configurations.
//!
//! Audio and video each get a [`Branch`] that maps clip features to
//! unit-norm embeddings of a shared width; matching quality is the cosine
//! similarity between an audio and a video embedding.

mod branch;
mod config;

pub use branch::Branch;
pub use config::{
    build_preset, Aggregation, EncoderConfig, EncoderKind, LossKind, ModelConfig, Preset,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ClipPair, FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::layers::{Forward, Module, ParamStore};
use crate::losses::{cosine_similarity_matrix, infonce_loss, vmnet_combined_loss, LossConfig};
use crate::tensor::{column_mean, column_std, Float, Tape, Tensor, Var};


/// Clips embedded with one model, row `i` of both tensors being
/// `clip_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub audio: Tensor<f32>,
    pub video: Tensor<f32>,
    pub clip_ids: Vec<String>,
}

/// Reduce one sequence to what a branch consumes: `[D]` for mean, `[2D]`
/// for mean then standard deviation, `[T, D]` unchanged for raw.
pub fn aggregate_features(seq: &FeatureSequence, mode: Aggregation) -> Result<Tensor<f32>> {
    let x = seq.values().cast::<f64>();
    Ok(match mode {
        Aggregation::Raw => seq.values().clone(),
        Aggregation::Mean => column_mean(&x)?.cast(),
        Aggregation::MeanStd => {
            let mut v = column_mean(&x)?.into_data();
            v.extend(column_std(&x)?.into_data());
            Tensor::new(&[v.len()], v)?.cast()
        }
    })
}

/// Branch inputs for a batch of clips.
#[derive(Debug, Clone)]
pub struct BatchInputs<F: Float> {
    pub audio: Tensor<F>,
    pub video: Tensor<F>,
    /// Time-mean features, where the structure term looks for neighbours.
    pub audio_mean: Tensor<F>,
    pub video_mean: Tensor<F>,
    pub seq_len: usize,
    pub len: usize,
}

impl<F: Float> BatchInputs<F> {
    pub fn new(cfg: &ModelConfig, pairs: &[&ClipPair]) -> Result<Self> {
        let seq_len = check_batch(cfg, pairs.iter().map(|p| &p.audio))?;
        check_batch(cfg, pairs.iter().map(|p| &p.video))?;
        Ok(Self {
            audio: stack(cfg.aggregation, pairs.iter().map(|p| &p.audio))?,
            video: stack(cfg.aggregation, pairs.iter().map(|p| &p.video))?,
            audio_mean: stack(Aggregation::Mean, pairs.iter().map(|p| &p.audio))?,
            video_mean: stack(Aggregation::Mean, pairs.iter().map(|p| &p.video))?,
            seq_len,
            len: pairs.len(),
        })
    }

    pub fn input(&self, modality: Modality) -> &Tensor<F> {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }
}

/// Frames per sequence, after checking that every sequence in a batch has
/// the same shape and the configured feature width.
fn check_batch<'a>(
    cfg: &ModelConfig,
    seqs: impl Iterator<Item = &'a FeatureSequence>,
) -> Result<usize> {
    let mut shape = None;
    for s in seqs {
        let here = (s.len(), s.dim());
        match shape {
            None => shape = Some(here),
            Some(first) if first != here => {
                return Err(Error::Shape(format!(
                    "ragged batch: clip {} has shape {here:?}, expected {first:?}",
                    s.clip_id
                )))
            }
            _ => {}
        }
        let want = cfg.feature_dim(s.modality);
        if s.dim() != want {
            return Err(Error::Config(format!(
                "{} features of clip {} are {} wide but the {} model expects {want}",
                s.modality,
                s.clip_id,
                s.dim(),
                cfg.preset
            )));
        }
        if cfg.aggregation == Aggregation::MeanStd && s.len() < 2 {
            return Err(Error::Degenerate(format!(
                "mean_std aggregation of clip {} needs at least 2 frames",
                s.clip_id
            )));
        }
    }
    shape
        .map(|(t, _)| t)
        .ok_or_else(|| Error::Shape("empty batch".into()))
}

fn stack<'a, F: Float>(
    mode: Aggregation,
    seqs: impl Iterator<Item = &'a FeatureSequence>,
) -> Result<Tensor<F>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = 0;
    for s in seqs {
        let a = aggregate_features(s, mode)?;
        width = *a.shape().last().unwrap();
        rows += a.numel() / width;
        data.extend(a.data().iter().map(|v| F::of(*v as f64)));
    }
    Tensor::new(&[rows, width], data)
}

/// Output of a training-mode forward pass with its loss.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub loss: Var,
    pub audio: Var,
    pub video: Var,
}

/// Audio and video branches plus their parameters.
#[derive(Debug, Clone)]
pub struct DualBranchModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub audio: Branch,
    pub video: Branch,
}

impl DualBranchModel {
    /// Fresh model with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let audio = Branch::new(&mut params, &config, Modality::Audio, &mut rng)?;
        let video = Branch::new(&mut params, &config, Modality::Video, &mut rng)?;
        Ok(Self {
            config,
            params,
            audio,
            video,
        })
    }

    pub fn branch(&self, modality: Modality) -> &Branch {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.audio.param_count(&self.params) + self.video.param_count(&self.params)
    }

    pub fn branch_forward<F: Float>(
        &self,
        fw: &mut Forward<'_, F>,
        modality: Modality,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        self.branch(modality).forward(fw, x, seq_len)
    }

    /// Embed both modalities of a batch and compute the configured loss.
    /// `fw` must be bound to a store with this model's layout.
    pub fn forward_loss<F: Float>(
        &self,
        fw: &mut Forward<'_, F>,
        batch: &BatchInputs<F>,
    ) -> Result<BatchLoss> {
        let a = fw.tape.constant(batch.audio.clone());
        let v = fw.tape.constant(batch.video.clone());
        let audio = self.audio.forward(fw, a, batch.seq_len)?;
        let video = self.video.forward(fw, v, batch.seq_len)?;
        let sim = cosine_similarity_matrix(fw.tape, audio, video)?;
        let cfg = &self.config.loss;
        let loss = match self.config.loss_kind {
            LossKind::InfoNce => infonce_loss(fw.tape, &sim, cfg.temperature, cfg.symmetric)?,
            LossKind::TripletStruct => {
                // small batches cannot supply K neighbours per anchor
                let cfg = LossConfig {
                    intra_k: cfg.intra_k.min(batch.len.saturating_sub(1)).max(1),
                    ..*cfg
                };
                vmnet_combined_loss(
                    fw.tape,
                    &sim,
                    &batch.audio_mean,
                    &batch.video_mean,
                    audio,
                    video,
                    &cfg,
                )?
            }
        };
        Ok(BatchLoss { loss, audio, video })
    }

    /// Eval-mode embeddings of sequences of one modality, `[N, embed_dim]`.
    pub fn embed_sequences(
        &self,
        modality: Modality,
        seqs: &[&FeatureSequence],
    ) -> Result<Tensor<f32>> {
        const CHUNK: usize = 256;
        let mut data = Vec::with_capacity(seqs.len() * self.config.embed_dim);
        for chunk in seqs.chunks(CHUNK) {
            let seq_len = check_batch(&self.config, chunk.iter().copied())?;
            if let Some(s) = chunk.iter().find(|s| s.modality != modality) {
                return Err(Error::Config(format!(
                    "clip {} holds {} features, expected {modality}",
                    s.clip_id, s.modality
                )));
            }
            let x: Tensor<f32> = stack(self.config.aggregation, chunk.iter().copied())?;
            let mut tape = Tape::new();
            let mut fw = Forward::new(&mut tape, &self.params, false, false, 0);
            let xv = fw.tape.constant(x);
            let e = self.branch(modality).forward(&mut fw, xv, seq_len)?;
            data.extend_from_slice(fw.tape.value(e).data());
        }
        if seqs.is_empty() {
            return Err(Error::Shape("nothing to embed".into()));
        }
        Tensor::new(&[seqs.len(), self.config.embed_dim], data)
    }

    /// Eval-mode embeddings of both modalities of every pair.
    pub fn embed_pair_batch(&self, pairs: &[ClipPair]) -> Result<EmbeddingBatch> {
        let audio: Vec<&FeatureSequence> = pairs.iter().map(|p| &p.audio).collect();
        let video: Vec<&FeatureSequence> = pairs.iter().map(|p| &p.video).collect();
        Ok(EmbeddingBatch {
            audio: self.embed_sequences(Modality::Audio, &audio)?,
            video: self.embed_sequences(Modality::Video, &video)?,
            clip_ids: pairs.iter().map(|p| p.clip_id.clone()).collect(),
        })
    }
}
