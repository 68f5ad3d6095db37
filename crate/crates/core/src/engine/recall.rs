use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingBatch;
use crate::tensor::Tensor;

/// The k grid of the evaluation table.
pub const DEFAULT_KS: [usize; 5] = [1, 5, 10, 25, 50];

/// Which modality is the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Video queries ranked against audio candidates (recommending music
    /// for a video).
    #[default]
    VideoToAudio,
    AudioToVideo,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::VideoToAudio => "video-to-audio",
            Direction::AudioToVideo => "audio-to-video",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().replace('_', "-").as_str() {
            "video-to-audio" | "v2a" => Ok(Direction::VideoToAudio),
            "audio-to-video" | "a2v" => Ok(Direction::AudioToVideo),
            _ => Err(Error::Config(format!(
                "unknown direction {s:?}; use video-to-audio or audio-to-video"
            ))),
        }
    }
}

/// Top-k recall of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    /// Fraction of queries whose positive ranks within the top `ks[i]`.
    pub recall: Vec<f64>,
    /// `ks[i] / n`.
    pub random_baseline: Vec<f64>,
    /// Number of candidates (and queries).
    pub n: usize,
    pub direction: Direction,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

/// Probability that the positive lands in a uniformly random top-k of `n`.
pub fn random_baseline(k: usize, n: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Parameter(format!(
            "random baseline needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    Ok(k as f64 / n as f64)
}

/// 0-based rank of each query's positive (the diagonal entry) in its row,
/// with ties broken by ascending candidate index.
pub fn positive_ranks(sim: &Tensor<f64>) -> Result<Vec<usize>> {
    let (n, m) = sim.dims2()?;
    if n != m {
        return Err(Error::Shape(format!(
            "ranking needs aligned queries and candidates, got {n}x{m}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let row = sim.row(i);
            let s = row[i];
            row.iter()
                .enumerate()
                .filter(|&(j, &x)| x > s || (x == s && j < i))
                .count()
        })
        .collect())
}

/// Recall at each k from a query-by-candidate similarity matrix whose
/// diagonal holds the positives.
pub fn recall_from_similarity(
    sim: &Tensor<f64>,
    ks: &[usize],
    direction: Direction,
) -> Result<RecallReport> {
    let ranks = positive_ranks(sim)?;
    let n = ranks.len();
    let baseline = ks
        .iter()
        .map(|&k| random_baseline(k, n))
        .collect::<Result<Vec<_>>>()?;
    let recall = ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
        .collect();
    Ok(RecallReport {
        ks: ks.to_vec(),
        recall,
        random_baseline: baseline,
        n,
        direction,
    })
}

/// Cosine similarity of every query row against every candidate row,
/// in 64-bit.
pub fn cosine_matrix(queries: &Tensor<f32>, candidates: &Tensor<f32>) -> Result<Tensor<f64>> {
    let unit = |t: &Tensor<f32>| -> Result<Tensor<f64>> {
        let (n, d) = t.dims2()?;
        let mut out = t.cast::<f64>();
        for r in out.data_mut().chunks_mut(d) {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm >= 1e-12 {
                r.iter_mut().for_each(|x| *x /= norm);
            }
        }
        debug_assert_eq!(out.shape(), &[n, d]);
        Ok(out)
    };
    let (_, dq) = queries.dims2()?;
    let (_, dc) = candidates.dims2()?;
    if dq != dc {
        return Err(Error::dim("cosine_matrix", queries.shape(), candidates.shape()));
    }
    unit(queries)?.matmul(&unit(candidates)?.transpose()?)
}

/// Rank every candidate of the other modality for each query and report
/// the recall of the aligned positive.
pub fn evaluate_topk_recall(
    emb: &EmbeddingBatch,
    ks: &[usize],
    direction: Direction,
) -> Result<RecallReport> {
    let (queries, candidates) = match direction {
        Direction::VideoToAudio => (&emb.video, &emb.audio),
        Direction::AudioToVideo => (&emb.audio, &emb.video),
    };
    let sim = cosine_matrix(queries, candidates)?;
    recall_from_similarity(&sim, ks, direction)
}
