//! Training objectives over a batch of aligned audio/video embeddings.
//!
//! All losses are recorded on a [`Tape`] so they can be differentiated. Row
//! `i` of the audio embeddings and row `i` of the video embeddings are
//! assumed to be a matched pair; every other row in the batch is a negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};


/// Hyperparameters shared by the three objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Average the audio-to-video and video-to-audio InfoNCE terms instead
    /// of using rows only.
    pub symmetric: bool,
    pub margin: f64,
    /// Number of most violated (anchor, negative) pairs kept per direction.
    pub top_q: usize,
    /// Neighbourhood size of the intra-modal structure term.
    pub intra_k: usize,
    pub structure_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            symmetric: true,
            margin: 0.2,
            top_q: 200,
            intra_k: 10,
            structure_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Parameter(format!(
                "margin must be nonnegative, got {}",
                self.margin
            )));
        }
        if self.top_q == 0 {
            return Err(Error::Parameter("top_q must be at least 1".into()));
        }
        if self.intra_k == 0 {
            return Err(Error::Parameter("intra_k must be at least 1".into()));
        }
        if !self.structure_weight.is_finite() {
            return Err(Error::Parameter("structure_weight must be finite".into()));
        }
        Ok(())
    }
}

/// Cosine similarities between two sets of rows, recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimilarityMatrix {
    pub values: Var,
    pub rows: usize,
    pub cols: usize,
}

/// `S[i][j] = <u_i, v_j> / (|u_i| |v_j|)`.
///
/// Rows with norm below `1e-12` are left unnormalized, so an all-zero row
/// has similarity zero with everything.
pub fn cosine_similarity_matrix<F: Float>(
    tape: &mut Tape<F>,
    u: Var,
    v: Var,
) -> Result<SimilarityMatrix> {
    let (rows, du) = tape.value(u).dims2()?;
    let (cols, dv) = tape.value(v).dims2()?;
    if du != dv {
        return Err(Error::dim("cosine_similarity", tape.shape(u), tape.shape(v)));
    }
    let un = tape.l2_normalize_rows(u);
    let vn = tape.l2_normalize_rows(v);
    let vt = tape.transpose(vn)?;
    let values = tape.matmul(un, vt)?;
    Ok(SimilarityMatrix { values, rows, cols })
}

fn require_square(sim: &SimilarityMatrix, op: &str) -> Result<usize> {
    if sim.rows != sim.cols {
        return Err(Error::Shape(format!(
            "{op} needs a square similarity matrix, got {}x{}",
            sim.rows, sim.cols
        )));
    }
    Ok(sim.rows)
}

/// Mean over rows of `-log softmax(S_i / tau)[i]`. In symmetric mode the
/// same quantity over columns is averaged in.
pub fn infonce_loss<F: Float>(
    tape: &mut Tape<F>,
    sim: &SimilarityMatrix,
    temperature: f64,
    symmetric: bool,
) -> Result<Var> {
    require_square(sim, "infonce_loss")?;
    let rows = infonce_rows(tape, sim.values, temperature)?;
    if !symmetric {
        return Ok(rows);
    }
    let t = tape.transpose(sim.values)?;
    let cols = infonce_rows(tape, t, temperature)?;
    let both = tape.add(rows, cols)?;
    Ok(tape.scale(both, F::of(0.5)))
}

fn infonce_rows<F: Float>(tape: &mut Tape<F>, s: Var, temperature: f64) -> Result<Var> {
    let ls = tape.log_softmax_rows(s, F::of(temperature))?;
    let d = tape.diag(ls)?;
    let m = tape.mean(d);
    Ok(tape.scale(m, -F::one()))
}

/// Bidirectional hinge loss over the `top_q` most violated negatives.
///
/// For the audio-anchored direction the violation of negative `j` for
/// anchor `i` is `max(0, margin - S[i][i] + S[i][j])`; the video-anchored
/// direction uses columns. Within each direction the `top_q` largest
/// violations across the whole batch are averaged (at least one term, at
/// most the number of strictly positive violations), and the two directions
/// are averaged.
pub fn triplet_loss_mined<F: Float>(
    tape: &mut Tape<F>,
    sim: &SimilarityMatrix,
    margin: f64,
    top_q: usize,
) -> Result<Var> {
    let n = require_square(sim, "triplet_loss_mined")?;
    if n < 2 {
        return Err(Error::Degenerate(
            "triplet loss needs at least two pairs for negatives".into(),
        ));
    }
    if top_q == 0 {
        return Err(Error::Parameter("top_q must be at least 1".into()));
    }
    let a2v = mined_direction(tape, sim.values, n, margin, top_q)?;
    let t = tape.transpose(sim.values)?;
    let v2a = mined_direction(tape, t, n, margin, top_q)?;
    let both = tape.add(a2v, v2a)?;
    Ok(tape.scale(both, F::of(0.5)))
}

fn mined_direction<F: Float>(
    tape: &mut Tape<F>,
    s: Var,
    n: usize,
    margin: f64,
    top_q: usize,
) -> Result<Var> {
    let mut negatives = Vec::with_capacity(n * (n - 1));
    let mut anchors = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            negatives.push(i * n + j);
            anchors.push(i * n + i);
        }
    }
    let neg = tape.gather(s, &negatives)?;
    let pos = tape.gather(s, &anchors)?;
    let diff = tape.sub(neg, pos)?;
    let shifted = tape.add_scalar(diff, F::of(margin));
    let hinge = tape.relu(shifted);

    let values = tape.value(hinge).data();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let violated = values.iter().filter(|&&v| v > F::zero()).count();
    let q = top_q.min(violated).max(1);
    order.truncate(q);
    tape.note_branch(order.iter().copied());
    let picked = tape.gather(hinge, &order)?;
    Ok(tape.mean(picked))
}

/// Ranking hinge that keeps each anchor's nearest input-space neighbours in
/// the same distance order in embedding space.
///
/// For anchor `i` with input neighbours `N_K(i)` (Euclidean, ties broken by
/// index), every ordered pair `j, k` in `N_K(i)` with `d_in(i,j) <
/// d_in(i,k)` contributes `max(0, d_emb(i,j) - d_emb(i,k))`. The loss is the
/// mean over all contributing terms, or zero if there are none.
pub fn intra_modal_structure_loss<F: Float>(
    tape: &mut Tape<F>,
    inputs: &Tensor<F>,
    embeddings: Var,
    k: usize,
) -> Result<Var> {
    let (n, _) = inputs.dims2()?;
    let (ne, _) = tape.value(embeddings).dims2()?;
    if ne != n {
        return Err(Error::dim(
            "intra_modal_structure_loss",
            inputs.shape(),
            tape.shape(embeddings),
        ));
    }
    if k == 0 || n <= k {
        return Err(Error::Parameter(format!(
            "structure loss needs 1 <= K < N, got K={k} with N={n}"
        )));
    }
    let d_in = euclidean_distances(inputs);
    let d_emb = tape.pairwise_distances(embeddings)?;
    structure_loss_from_distances(tape, &d_in, d_emb, n, k)
}

/// Core of [`intra_modal_structure_loss`] on precomputed distance matrices.
pub(crate) fn structure_loss_from_distances<F: Float>(
    tape: &mut Tape<F>,
    d_in: &[f64],
    d_emb: Var,
    n: usize,
    k: usize,
) -> Result<Var> {
    let mut near = Vec::new();
    let mut far = Vec::new();
    for i in 0..n {
        let row = &d_in[i * n..(i + 1) * n];
        let mut nbrs: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        nbrs.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
        nbrs.truncate(k);
        for &j in &nbrs {
            for &l in &nbrs {
                if row[j] < row[l] {
                    near.push(i * n + j);
                    far.push(i * n + l);
                }
            }
        }
    }
    if near.is_empty() {
        return Ok(tape.constant(Tensor::scalar(F::zero())));
    }
    let a = tape.gather(d_emb, &near)?;
    let b = tape.gather(d_emb, &far)?;
    let diff = tape.sub(a, b)?;
    let hinge = tape.relu(diff);
    Ok(tape.mean(hinge))
}

fn euclidean_distances<F: Float>(x: &Tensor<F>) -> Vec<f64> {
    let (n, _) = x.dims2().expect("checked rank-2");
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt();
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    out
}

/// Mined triplet loss plus the weighted audio and video structure terms.
///
/// `audio_inputs` and `video_inputs` are the per-clip features in which
/// neighbours are searched (time means for sequence inputs). A zero
/// structure weight skips the structure terms entirely.
pub fn vmnet_combined_loss<F: Float>(
    tape: &mut Tape<F>,
    sim: &SimilarityMatrix,
    audio_inputs: &Tensor<F>,
    video_inputs: &Tensor<F>,
    audio_emb: Var,
    video_emb: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let triplet = triplet_loss_mined(tape, sim, cfg.margin, cfg.top_q)?;
    if cfg.structure_weight == 0.0 {
        return Ok(triplet);
    }
    let sa = intra_modal_structure_loss(tape, audio_inputs, audio_emb, cfg.intra_k)?;
    let sv = intra_modal_structure_loss(tape, video_inputs, video_emb, cfg.intra_k)?;
    let s = tape.add(sa, sv)?;
    let s = tape.scale(s, F::of(cfg.structure_weight));
    tape.add(triplet, s)
}
