//! The finite-difference gradient suite behind `avmatch gradcheck`.
//!
//! Every differentiable tape operation and loss is checked on small random
//! inputs, reduced to a scalar through a fixed random weighting, and every
//! preset is checked end to end (forward pass plus its loss) at micro
//! widths. All checks run in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ClipPair, FeatureSequence, Modality};
use crate::error::Result;
use crate::layers::check_param_gradients;
use crate::losses::{
    cosine_similarity_matrix, infonce_loss, intra_modal_structure_loss, triplet_loss_mined,
};
use crate::model::{BatchInputs, DualBranchModel, EncoderKind, ModelConfig, Preset};
use crate::tensor::{finite_diff_check_many, GradCheckReport, ReduceKind, Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// `sum(w * y)` for a fixed random `w`, so every output coordinate
/// contributes with a distinct weight.
fn weigh(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(uniform(tape.shape(y), seed ^ 0x5eed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_scalar", vec![vec![3, 4]], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        ("mul_const", vec![vec![2, 3]], |t, v| {
            t.mul_const(v[0], vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0])
        }),
        ("relu", vec![vec![3, 4]], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", vec![vec![3, 4]], |t, v| Ok(t.sigmoid(v[0]))),
        ("tanh", vec![vec![3, 4]], |t, v| Ok(t.tanh(v[0]))),
        ("softmax_rows", vec![vec![3, 4]], |t, v| t.softmax_rows(v[0], 0.5)),
        ("log_softmax_rows", vec![vec![3, 4]], |t, v| t.log_softmax_rows(v[0], 0.07)),
        ("l2_normalize_rows", vec![vec![3, 4]], |t, v| Ok(t.l2_normalize_rows(v[0]))),
        ("batch_norm", vec![vec![5, 3], vec![3], vec![3]], |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, None)?.0)
        }),
        ("layer_norm", vec![vec![4, 5], vec![5], vec![5]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("reduce_seq_mean", vec![vec![6, 3]], |t, v| t.reduce_seq(v[0], 3, ReduceKind::Mean)),
        ("reduce_seq_std", vec![vec![6, 3]], |t, v| t.reduce_seq(v[0], 3, ReduceKind::Std)),
        ("reduce_seq_max", vec![vec![6, 3]], |t, v| t.reduce_seq(v[0], 3, ReduceKind::Max)),
        ("attention", vec![vec![6, 4], vec![6, 4], vec![6, 4]], |t, v| {
            t.attention(v[0], v[1], v[2], 3, 2)
        }),
        ("select_rows", vec![vec![4, 3]], |t, v| t.select_rows(v[0], &[2, 0, 2])),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| t.concat_rows(&[v[0], v[1]])),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("slice_cols", vec![vec![3, 5]], |t, v| t.slice_cols(v[0], 1, 4)),
        ("gather", vec![vec![3, 3]], |t, v| t.gather(v[0], &[0, 4, 4, 8, 2])),
        ("diag", vec![vec![3, 3]], |t, v| t.diag(v[0])),
        ("mean", vec![vec![3, 4]], |t, v| Ok(t.mean(v[0]))),
        ("pairwise_distances", vec![vec![4, 3]], |t, v| t.pairwise_distances(v[0])),
        ("infonce_loss", vec![vec![4, 3], vec![4, 3]], |t, v| {
            let s = cosine_similarity_matrix(t, v[0], v[1])?;
            infonce_loss(t, &s, 0.07, true)
        }),
        ("triplet_loss_mined", vec![vec![4, 3], vec![4, 3]], |t, v| {
            let s = cosine_similarity_matrix(t, v[0], v[1])?;
            triplet_loss_mined(t, &s, 0.2, 5)
        }),
        ("intra_modal_structure_loss", vec![vec![5, 3]], |t, v| {
            let inputs = uniform(&[5, 4], 99);
            intra_modal_structure_loss(t, &inputs, v[0], 2)
        }),
    ]
}

/// Check every primitive operation and loss.
pub fn op_suite(seed: u64) -> Result<Vec<GradCase>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| {
            let s = seed.wrapping_mul(1000).wrapping_add(10 * i as u64);
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(j, sh)| uniform(sh, s + j as u64))
                .collect();
            let report = finite_diff_check_many(
                |tape, vars| {
                    let y = f(tape, vars)?;
                    if tape.value(y).is_scalar() {
                        Ok(y)
                    } else {
                        weigh(tape, y, s)
                    }
                },
                &inputs,
                EPS,
            )?;
            Ok(GradCase {
                name: name.to_string(),
                tolerance: OP_TOLERANCE,
                report,
            })
        })
        .collect()
}

fn random_pairs(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<ClipPair>> {
    (0..n)
        .map(|i| {
            let id = format!("c{i}");
            let s = seed * 1000 + 2 * i as u64;
            let seq = |m: Modality, d: usize, s: u64| {
                FeatureSequence::new(&id, m, uniform(&[cfg.seq_len, d], s).cast())
            };
            ClipPair::new(
                &id,
                format!("s{i}"),
                seq(Modality::Audio, cfg.audio_dim, s)?,
                seq(Modality::Video, cfg.video_dim, s + 1)?,
            )
        })
        .collect()
}

/// Gradient of one micro-width preset's training loss with respect to
/// every trainable parameter, on `n` random pairs.
///
/// Parameters are moved off their initial values first: zero biases and
/// unit batch-norm scales can make single coordinates exactly stationary,
/// and a stationary coordinate has nothing but rounding noise to compare.
pub fn preset_check(preset: Preset, n: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::micro(preset);
    let model = DualBranchModel::new(cfg.clone())?;
    let mut store = model.params.cast::<f64>();
    store.perturb(0.2, seed);
    let pairs = random_pairs(&cfg, n, seed)?;
    let refs: Vec<&ClipPair> = pairs.iter().collect();
    let batch = BatchInputs::<f64>::new(&cfg, &refs)?;
    check_param_gradients(&store, &[], true, seed, EPS, |fw, _| {
        Ok(model.forward_loss(fw, &batch)?.loss)
    })
}

/// Every preset on two batch sizes. Batch norm over two rows outputs
/// about +-1 whatever its input, which leaves upstream gradients below
/// finite-difference resolution, so presets with batch norm use 3 and 4
/// pairs.
pub fn preset_suite() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for p in Preset::ALL {
        let sizes: [(usize, u64); 2] = match p.encoder() {
            EncoderKind::None => [(3, 12), (4, 11)],
            _ => [(2, 10), (4, 11)],
        };
        for (n, seed) in sizes {
            out.push(GradCase {
                name: format!("{} (micro, {n} pairs)", p.label()),
                tolerance: COMPOSITE_TOLERANCE,
                report: preset_check(p, n, seed)?,
            });
        }
    }
    Ok(out)
}

/// Operations then presets.
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let mut cases = op_suite(0)?;
    cases.extend(preset_suite()?);
    Ok(cases)
}
