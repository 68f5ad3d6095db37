use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::ReduceKind;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w = tape.constant(random(tape.shape(y), 1234));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn eval<F: Float>(store: &ParamStore<F>, x: Tensor<F>, f: impl Fn(&mut Forward<'_, F>, Var) -> Result<Var>) -> Tensor<F> {
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, store, false, false, 0);
    let xv = fw.tape.constant(x);
    let y = f(&mut fw, xv).unwrap();
    fw.tape.value(y).clone()
}

#[test]
fn linear_examples() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::new(&mut store, "l", 2, 2, &mut rng);
    *store.get_mut(lin.weight) = Tensor::identity(2);
    let x = random(&[3, 2], 1);
    assert_eq!(eval(&store, x.clone(), |fw, v| lin.forward(fw, v)), x);

    let lin = Linear::new(&mut store, "m", 2, 1, &mut rng);
    *store.get_mut(lin.weight) = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
    *store.get_mut(lin.bias.unwrap()) = Tensor::new(&[1], vec![0.5]).unwrap();
    let y = eval(&store, Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap(), |fw, v| {
        lin.forward(fw, v)
    });
    assert_eq!(y.data(), &[3.5]);

    let err = {
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store, false, false, 0);
        let x = fw.tape.constant(Tensor::zeros(&[1, 3]));
        lin.forward(&mut fw, x).unwrap_err()
    };
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn linear_param_count_and_init() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::new(&mut store, "l", 128, 512, &mut rng);
    assert_eq!(lin.param_count(&store), 66_048);
    let bound = (6.0f32 / 640.0).sqrt();
    assert!(store.get(lin.weight).data().iter().all(|w| w.abs() <= bound));
    assert!(store.get(lin.bias.unwrap()).data().iter().all(|&b| b == 0.0));
}

#[test]
fn linear_gradient_check() {
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "l", 4, 3, &mut ChaCha8Rng::seed_from_u64(2));
    let r = check_param_gradients(&store, &[random(&[5, 4], 3)], true, 0, 1e-5, |fw, x| {
        let y = lin.forward(fw, x[0])?;
        probe(fw.tape, y)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn batchnorm_training_standardizes_columns() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 3, 0.1);
    let x = random(&[16, 3], 4).map(|v| 5.0 * v + 2.0);
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, &store, true, false, 0);
    let xv = fw.tape.constant(x);
    let y = bn.forward(&mut fw, xv).unwrap();
    let y = fw.tape.value(y).clone();
    for j in 0..3 {
        let col: Vec<f64> = (0..16).map(|i| y.data()[i * 3 + j]).collect();
        let m = col.iter().sum::<f64>() / 16.0;
        let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((v - 1.0).abs() < 1e-4, "var {v}");
    }
}

#[test]
fn batchnorm_eval_with_unit_stats_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 4, 0.1);
    let x = random(&[3, 4], 5);
    let y = eval(&store, x.clone(), |fw, v| bn.forward(fw, v));
    // only the eps term separates the output from the input
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b * scale).abs() < 1e-12);
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batchnorm_momentum_update_matches_hand_computation() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 1, 0.1);
    let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let stats = {
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, &store, true, false, 0);
        let xv = fw.tape.constant(x);
        bn.forward(&mut fw, xv).unwrap();
        fw.take_batch_stats()
    };
    store.apply_batch_stats(&stats);
    // batch mean 3, population variance (4 + 1 + 0 + 9) / 4 = 3.5
    let rm = store.get(bn.running_mean).data()[0];
    let rv = store.get(bn.running_var).data()[0];
    assert!((rm - 0.3).abs() < 1e-12, "{rm}");
    assert!((rv - (0.9 + 0.35)).abs() < 1e-12, "{rv}");
    assert!(rv >= 0.0);
}

#[test]
fn batchnorm_single_row_training_is_degenerate() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 2, 0.1);
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, &store, true, false, 0);
    let x = fw.tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(bn.forward(&mut fw, x), Err(Error::Degenerate(_))));
}

#[test]
fn positional_encoding_examples() {
    let pe = positional_encoding::<f64>(15, 8).unwrap();
    for j in 0..8 {
        assert_eq!(pe.data()[j], if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!((pe.data()[8] - 1f64.sin()).abs() < 1e-12);
    assert!((pe.data()[8] - 0.8415).abs() < 1e-4);
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(matches!(
        positional_encoding::<f64>(4, 7),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn attention_single_step_reduces_to_projections() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
    let x = random(&[1, 4], 7);
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, &store, false, false, 0);
    let xv = fw.tape.constant(x.clone());
    let (y, attn) = mha.forward_with_weights(&mut fw, xv, 1).unwrap();
    assert!(fw.tape.attention_weights(attn).unwrap().iter().all(|&p| p == 1.0));
    let direct = {
        let v = mha.value.forward(&mut fw, xv).unwrap();
        mha.output.forward(&mut fw, v).unwrap()
    };
    assert!(fw.tape.value(y).max_abs_diff(fw.tape.value(direct)) < 1e-12);
}

#[test]
fn attention_maps_identical_rows_to_identical_rows() {
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 6, 3, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let row = random(&[1, 6], 2).into_data();
    let x = Tensor::new(&[4, 6], row.repeat(4)).unwrap();
    let y = eval(&store, x, |fw, v| mha.forward(fw, v, 4));
    for r in 1..4 {
        for (a, b) in y.row(r).iter().zip(y.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(matches!(
        MultiHeadAttention::new(&mut store, "b", 6, 4, &mut ChaCha8Rng::seed_from_u64(1)),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn attention_weight_rows_sum_to_one() {
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, &store, false, false, 0);
    let xv = fw.tape.constant(random(&[10, 8], 4));
    let (_, attn) = mha.forward_with_weights(&mut fw, xv, 5).unwrap();
    for row in fw.tape.attention_weights(attn).unwrap().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

fn small_encoder(store: &mut ParamStore<f64>, depth: usize, positional: bool) -> TransformerEncoder {
    let mut enc = TransformerEncoder::new(
        store,
        "enc",
        depth,
        8,
        2,
        16,
        0.1,
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .unwrap();
    enc.positional = positional;
    enc
}

#[test]
fn encoder_without_layers_adds_positions() {
    let mut store = ParamStore::<f64>::new();
    let enc = small_encoder(&mut store, 0, true);
    let x = random(&[3, 8], 1);
    let y = eval(&store, x.clone(), |fw, v| enc.forward(fw, v, 3));
    let pe = positional_encoding::<f64>(3, 8).unwrap();
    for i in 0..24 {
        assert!((y.data()[i] - x.data()[i] - pe.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn encoder_preserves_shape_at_full_width() {
    let mut store = ParamStore::<f32>::new();
    let enc = TransformerEncoder::new(
        &mut store,
        "enc",
        2,
        512,
        8,
        2048,
        0.1,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let y = eval(&store, random(&[15, 512], 1).cast(), |fw, v| enc.forward(fw, v, 15));
    assert_eq!(y.shape(), &[15, 512]);
    assert_eq!(enc.param_count(&store), 2 * 3_151_872);
}

#[test]
fn encoder_gradient_check_micro() {
    let mut store = ParamStore::<f64>::new();
    let enc = small_encoder(&mut store, 2, true);
    let r = check_param_gradients(&store, &[random(&[6, 8], 2)], true, 11, 1e-5, |fw, x| {
        let y = enc.forward(fw, x[0], 3)?;
        probe(fw.tape, y)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn encoder_without_positions_is_permutation_equivariant() {
    let mut store = ParamStore::<f64>::new();
    let enc = small_encoder(&mut store, 2, false);
    let x = random(&[4, 8], 3);
    let perm = [2usize, 0, 3, 1];
    let xp = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>())
        .unwrap();
    let y = eval(&store, x, |fw, v| enc.forward(fw, v, 4));
    let yp = eval(&store, xp, |fw, v| enc.forward(fw, v, 4));
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in yp.row(i).iter().zip(y.row(p)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn encoder_with_positions_is_order_sensitive() {
    let mut store = ParamStore::<f64>::new();
    let enc = small_encoder(&mut store, 2, true);
    let x = random(&[4, 8], 3);
    let perm = [2usize, 0, 3, 1];
    let xp = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>())
        .unwrap();
    let pooled = |x: Tensor<f64>| {
        eval(&store, x, |fw, v| {
            let h = enc.forward(fw, v, 4)?;
            fw.tape.reduce_seq(h, 4, ReduceKind::Max)
        })
    };
    assert!(pooled(x).max_abs_diff(&pooled(xp)) > 1e-3);
}

#[test]
fn bilstm_zero_weights_give_zero_output() {
    let mut store = ParamStore::<f64>::new();
    let lstm = BiLstmStack::new(&mut store, "lstm", 3, 4, 2, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    for id in lstm.param_ids() {
        store.get_mut(id).data_mut().iter_mut().for_each(|w| *w = 0.0);
    }
    let y = eval(&store, random(&[5, 3], 1), |fw, v| lstm.forward(fw, v, 5));
    assert_eq!(y.shape(), &[5, 8]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_single_step_matches_hand_cell() {
    let mut store = ParamStore::<f64>::new();
    let dir = LstmDirection::new(&mut store, "d", 1, 1, &mut ChaCha8Rng::seed_from_u64(0));
    // gate pre-activations [i, f, g, o] = [0, 0, x, 0] for input x
    *store.get_mut(dir.input.weight) = Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    *store.get_mut(dir.input.bias.unwrap()) = Tensor::zeros(&[4]);
    for g in [-2.0, 0.3, 1.7] {
        let y = eval(&store, Tensor::new(&[1, 1], vec![g]).unwrap(), |fw, v| {
            dir.forward(fw, v, 1, false)
        });
        let expected = 0.5 * (0.5 * f64::tanh(g)).tanh();
        assert!((y.data()[0] - expected).abs() < 1e-12);
    }
}

#[test]
fn lstm_forget_bias_starts_at_one() {
    let mut store = ParamStore::<f32>::new();
    let dir = LstmDirection::new(&mut store, "d", 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(
        store.get(dir.input.bias.unwrap()).data(),
        &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn bilstm_gradient_check_micro() {
    let mut store = ParamStore::<f64>::new();
    let lstm = BiLstmStack::new(&mut store, "lstm", 3, 4, 2, 0.2, &mut ChaCha8Rng::seed_from_u64(1));
    let r = check_param_gradients(&store, &[random(&[6, 3], 2)], true, 5, 1e-5, |fw, x| {
        let y = lstm.forward(fw, x[0], 3)?;
        probe(fw.tape, y)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn bilstm_reversal_swaps_directions_with_tied_weights() {
    let mut store = ParamStore::<f64>::new();
    let lstm = BiLstmStack::new(&mut store, "lstm", 3, 4, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(2));
    let (fwd, bwd) = &lstm.layers[0];
    for (a, b) in fwd.param_ids().into_iter().zip(bwd.param_ids()) {
        let v = store.get(a).clone();
        *store.get_mut(b) = v;
    }
    let x = random(&[5, 3], 3);
    let rev = Tensor::from_rows(&(0..5).rev().map(|t| x.row(t).to_vec()).collect::<Vec<_>>())
        .unwrap();
    let y = eval(&store, x, |fw, v| lstm.forward(fw, v, 5));
    let yr = eval(&store, rev, |fw, v| lstm.forward(fw, v, 5));
    for t in 0..5 {
        let (f, b) = y.row(t).split_at(4);
        let (fr, br) = yr.row(4 - t).split_at(4);
        for (p, q) in f.iter().zip(br).chain(b.iter().zip(fr)) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn bilstm_rejects_wrong_width() {
    let mut store = ParamStore::<f64>::new();
    let lstm = BiLstmStack::new(&mut store, "lstm", 3, 4, 2, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, &store, false, false, 0);
    let x = fw.tape.constant(Tensor::zeros(&[4, 5]));
    assert!(matches!(lstm.forward(&mut fw, x, 4), Err(Error::Dimension { .. })));
}
