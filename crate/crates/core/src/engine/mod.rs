//! Training, persistence, evaluation and recommendation.
//!
//! [`train`] fits a [`DualBranchModel`] with Adam on the training part of a
//! [`DatasetSplit`](crate::data::DatasetSplit), keeping the weights of the
//! epoch with the best validation recall@10. Trained models are saved as
//! CMCK files ([`checkpoint`]) and scored with top-k recall
//! ([`evaluate_topk_recall`]) or used to rank candidate soundtracks for a
//! video ([`recommend`]).

mod adam;
pub mod checkpoint;
pub mod gradsuite;
mod recall;
mod report;
mod train;

pub use adam::{adam_step, AdamConfig, TrainerState};
pub use gradsuite::{gradient_suite, GradCase};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use recall::{
    cosine_matrix, evaluate_topk_recall, positive_ranks, random_baseline, recall_from_similarity,
    Direction, RecallReport, DEFAULT_KS,
};
pub use report::{format_table, RunReport};
pub use train::{evaluate, train, EpochLog, TrainConfig, TrainOutput, Trainer, SELECTION_K};

use crate::data::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::model::DualBranchModel;


/// A ranked candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub clip_id: String,
    pub similarity: f64,
}

/// The `top_k` audio candidates most similar to a video query, best first;
/// equal similarities keep candidate order.
pub fn recommend(
    model: &DualBranchModel,
    query: &FeatureSequence,
    candidates: &[FeatureSequence],
    top_k: usize,
) -> Result<Vec<Recommendation>> {
    if query.modality != Modality::Video {
        return Err(Error::Config(format!(
            "query {} holds {} features, expected video",
            query.clip_id, query.modality
        )));
    }
    if top_k == 0 || top_k > candidates.len() {
        return Err(Error::Parameter(format!(
            "top_k must be in 1..={}, got {top_k}",
            candidates.len()
        )));
    }
    let q = model.embed_sequences(Modality::Video, &[query])?;
    let refs: Vec<&FeatureSequence> = candidates.iter().collect();
    let c = model.embed_sequences(Modality::Audio, &refs)?;
    let sim = cosine_matrix(&q, &c)?;
    let row = sim.row(0);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(top_k)
        .map(|i| Recommendation {
            clip_id: candidates[i].clip_id.clone(),
            similarity: row[i],
        })
        .collect())
}
