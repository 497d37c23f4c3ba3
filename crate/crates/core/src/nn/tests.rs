use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::nn::functional::{self, AttentionParams, Conv1dParams, RunningStats};
use crate::nn::gradcheck::grad_check;
use crate::nn::ops::attention::attention_probs;
use crate::nn::ops::conv::ConvGeometry;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn geo(cin: usize, cout: usize, k: usize, s: usize, p: usize, g: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride: s,
        padding: p,
        groups: g,
    }
}

fn check<F>(op: F, inputs: &[Tensor], tol: f64)
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    let err = grad_check(op, inputs, EPS).unwrap();
    assert!(err < tol, "relative error {err} >= {tol}");
}

#[test]
fn conv_output_lengths_follow_the_pyramid() {
    assert_eq!(geo(1, 8, 15, 7, 7, 1).output_len(1920).unwrap(), 275);
    assert_eq!(geo(8, 16, 11, 5, 5, 1).output_len(275).unwrap(), 55);
    assert_eq!(geo(16, 32, 7, 3, 3, 1).output_len(55).unwrap(), 19);
    assert_eq!(geo(32, 64, 5, 2, 2, 1).output_len(19).unwrap(), 10);
}

#[test]
fn conv_zero_input_yields_bias() {
    let g = geo(2, 3, 5, 2, 2, 1);
    let p = Conv1dParams {
        geometry: g,
        weight: randn(&g.weight_shape(), 1),
        bias: Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(),
    };
    let y = functional::conv1d_forward(&Tensor::zeros(&[2, 2, 9]), &p).unwrap();
    assert_eq!(y.shape(), &[2, 3, 5]);
    for b in 0..2 {
        for c in 0..3 {
            for l in 0..5 {
                assert_eq!(y.data()[(b * 3 + c) * 5 + l], p.bias.data()[c]);
            }
        }
    }
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let err = geo(3, 4, 3, 1, 1, 2).validate().unwrap_err();
    assert!(err.to_string().contains("in_channels"), "{err}");
    let err = geo(4, 3, 3, 1, 1, 2).validate().unwrap_err();
    assert!(err.to_string().contains("out_channels"), "{err}");
    let err = geo(1, 1, 9, 1, 1, 1).output_len(4).unwrap_err();
    assert!(err.to_string().contains("kernel"), "{err}");

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 8]));
    let w = tape.constant(Tensor::zeros(&[2, 2, 3]));
    let err = tape.conv1d(x, w, None, geo(2, 2, 3, 1, 1, 1)).unwrap_err();
    assert!(err.to_string().contains("channel"), "{err}");
}

#[test]
fn conv_unit_kernel_identity_passes_gradient_through() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[1, 2, 6], 2));
    let w = tape.constant(Tensor::new(&[2, 1, 1], vec![1.0, 1.0]).unwrap());
    let y = tape.conv1d(x, w, None, geo(2, 2, 1, 1, 0, 2)).unwrap();
    let seed: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
    let grads = tape.backward_with(y, seed.clone()).unwrap();
    assert_eq!(grads.get(x).unwrap(), seed.as_slice());
}

#[test]
fn conv_gradients_match_finite_differences() {
    let g = geo(2, 2, 3, 1, 1, 1);
    let inputs = [randn(&[1, 2, 8], 3), randn(&g.weight_shape(), 4), randn(&[2], 5)];
    check(
        |t, v| t.conv1d(v[0], v[1], Some(v[2]), g),
        &inputs,
        TOL,
    );
}

#[test]
fn grouped_conv_never_mixes_groups() {
    let g = geo(4, 4, 3, 1, 1, 2);
    let mut tape = Tape::new();
    let mut x = randn(&[2, 4, 7], 6);
    // Zero the first group's input channels: the first group's weight
    // gradient must vanish while the second group's does not.
    for b in 0..2 {
        for c in 0..2 {
            for l in 0..7 {
                x.data_mut()[(b * 4 + c) * 7 + l] = 0.0;
            }
        }
    }
    let xv = tape.leaf(x);
    let w = tape.leaf(randn(&g.weight_shape(), 7));
    let y = tape.conv1d(xv, w, None, g).unwrap();
    let s = tape.sum(y);
    let grads = tape.backward(s).unwrap();
    let gw = grads.get(w).unwrap();
    let per_group = 2 * 2 * 3;
    assert!(gw[..per_group].iter().all(|&v| v == 0.0));
    assert!(gw[per_group..].iter().any(|&v| v != 0.0));

    // Output channels of group 0 depend only on input channels of group 0.
    let mut tape = Tape::new();
    let xv = tape.leaf(randn(&[1, 4, 7], 8));
    let w = tape.constant(randn(&g.weight_shape(), 9));
    let y = tape.conv1d(xv, w, None, g).unwrap();
    let mut seed = vec![0.0; 4 * 7];
    seed[..2 * 7].iter_mut().for_each(|v| *v = 1.0);
    let grads = tape.backward_with(y, seed).unwrap();
    let gx = grads.get(xv).unwrap();
    assert!(gx[2 * 7..].iter().all(|&v| v == 0.0));
}

#[test]
fn grouped_strided_conv_gradients() {
    let g = geo(4, 6, 5, 2, 2, 2);
    let inputs = [randn(&[2, 4, 11], 10), randn(&g.weight_shape(), 11), randn(&[6], 12)];
    check(|t, v| t.conv1d(v[0], v[1], Some(v[2]), g), &inputs, TOL);
}

#[test]
fn conv_backward_without_history_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(randn(&[1, 1, 4], 1));
    let w = tape.constant(randn(&[1, 1, 3], 2));
    let y = tape.conv1d(x, w, None, geo(1, 1, 3, 1, 1, 1)).unwrap();
    let s = tape.sum(y);
    assert!(matches!(tape.backward(s), Err(Error::NoForward(_))));
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let x = Tensor::full(&[2, 3, 4], 3.5);
    let mut rs = RunningStats::new(3);
    let y = functional::batch_norm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), &mut rs, true).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_two_sample_closed_form() {
    let x = Tensor::new(&[2, 1, 1], vec![-1.0, 1.0]).unwrap();
    let mut rs = RunningStats::new(1);
    let y = functional::batch_norm(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut rs, true).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] + expect).abs() < 1e-15);
    assert!((y.data()[1] - expect).abs() < 1e-15);
    // Running stats: mean 0, unbiased variance 2.
    assert!((rs.mean[0]).abs() < 1e-15);
    assert!((rs.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
}

#[test]
fn batch_norm_eval_with_unit_stats_is_affine() {
    let x = randn(&[2, 2, 3], 13);
    let gamma = Tensor::new(&[2], vec![2.0, -1.0]).unwrap();
    let beta = Tensor::new(&[2], vec![0.5, 0.25]).unwrap();
    let mut rs = RunningStats::new(2);
    let y = functional::batch_norm(&x, &gamma, &beta, &mut rs, false).unwrap();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (i, (&a, &b)) in x.data().iter().zip(y.data()).enumerate() {
        let c = (i / 3) % 2;
        let want = a * s * gamma.data()[c] + beta.data()[c];
        assert!((b - want).abs() < 1e-12);
    }
    assert_eq!(rs.mean, vec![0.0; 2]);
}

#[test]
fn batch_norm_single_value_per_channel_errors_in_training() {
    let x = randn(&[1, 2, 1], 14);
    let mut rs = RunningStats::new(2);
    let g = Tensor::full(&[2], 1.0);
    let b = Tensor::zeros(&[2]);
    assert!(matches!(
        functional::batch_norm(&x, &g, &b, &mut rs, true),
        Err(Error::BatchTooSmall(1))
    ));
    assert!(functional::batch_norm(&x, &g, &b, &mut rs, false).is_ok());
}

#[test]
fn batch_norm_gradients() {
    let inputs = [randn(&[3, 2, 4], 15), randn(&[2], 16), randn(&[2], 17)];
    let (rm, rv) = (vec![0.0; 2], vec![1.0; 2]);
    check(
        |t, v| Ok(t.batch_norm(v[0], v[1], v[2], (&rm, &rv), true, 1e-5)?.0),
        &inputs,
        TOL,
    );
    check(
        |t, v| Ok(t.batch_norm(v[0], v[1], v[2], (&rm, &rv), false, 1e-5)?.0),
        &inputs,
        TOL,
    );
}

#[test]
fn gelu_and_log_softmax_closed_forms() {
    let y = functional::gelu(&Tensor::new(&[3], vec![0.0, 10.0, -10.0]).unwrap());
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 10.0).abs() < 1e-12);
    assert!(y.data()[2].abs() < 1e-12);

    let l = functional::log_softmax(&Tensor::full(&[1, 3], 4.2));
    for &v in l.data() {
        assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }
    let l = functional::log_softmax(&randn(&[5, 7], 18));
    for r in 0..5 {
        let s: f64 = l.row(r).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn dropout_rules() {
    let x = randn(&[4, 5], 19);
    assert_eq!(functional::dropout(&x, 0.0, true, 1).unwrap(), x);
    assert_eq!(functional::dropout(&x, 0.5, false, 1).unwrap(), x);
    assert!(functional::dropout(&x, 1.0, true, 1).is_err());
    assert!(functional::dropout(&x, -0.1, true, 1).is_err());
    let a = functional::dropout(&x, 0.5, true, 42).unwrap();
    let b = functional::dropout(&x, 0.5, true, 42).unwrap();
    assert_eq!(a, b);
    for (&o, &i) in a.data().iter().zip(x.data()) {
        assert!(o == 0.0 || (o - 2.0 * i).abs() < 1e-15);
    }
}

#[test]
fn elementwise_gradients() {
    let a = randn(&[3, 4], 20);
    let b = randn(&[3, 4], 21);
    let pos = Tensor::new(&[3], vec![0.5, 1.5, 2.5]).unwrap();
    check(|t, v| t.add(v[0], v[1]), &[a.clone(), b.clone()], 1e-6);
    check(|t, v| t.sub(v[0], v[1]), &[a.clone(), b.clone()], 1e-6);
    check(|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()], TOL);
    check(|t, v| Ok(t.scale(v[0], -2.5)), &[a.clone()], 1e-6);
    check(|t, v| Ok(t.exp(v[0])), &[a.clone()], TOL);
    check(|t, v| Ok(t.log_clamped(v[0], 1e-12)), &[pos], TOL);
    check(|t, v| Ok(t.mean(v[0])), &[a.clone()], 1e-6);
    check(|t, v| Ok(t.sum(v[0])), &[a.clone()], 1e-6);
    check(|t, v| t.add_row(v[0], v[1]), &[a.clone(), randn(&[4], 22)], 1e-6);
    check(|t, v| t.add_all(&[v[0], v[1], v[0]]), &[a.clone(), b], 1e-6);
    check(|t, v| t.reshape(v[0], &[2, 6]), &[a], 1e-6);
}

#[test]
fn activation_gradients() {
    let a = randn(&[3, 5], 23);
    check(|t, v| Ok(t.gelu(v[0])), &[a.clone()], TOL);
    check(|t, v| Ok(t.sigmoid(v[0])), &[a.clone()], TOL);
    check(|t, v| Ok(t.softmax(v[0])), &[a.clone()], TOL);
    check(|t, v| Ok(t.log_softmax(v[0])), &[a.clone()], TOL);
    check(|t, v| t.dropout(v[0], 0.3, true, 9), &[a], 1e-6);
}

#[test]
fn softmax_nll_composite_gradient() {
    let logits = randn(&[4, 6], 24);
    let targets = [1usize, 5, 0, 3];
    check(
        |t, v| {
            let lp = t.log_softmax(v[0]);
            let mut w = vec![0.0; 24];
            for (r, &c) in targets.iter().enumerate() {
                w[r * 6 + c] = -0.25;
            }
            t.dot_const(lp, w)
        },
        &[logits],
        TOL,
    );
}

#[test]
fn linear_gradients_are_near_exact() {
    let inputs = [randn(&[2, 3, 4], 25), randn(&[5, 4], 26), randn(&[5], 27)];
    check(|t, v| t.linear(v[0], v[1], Some(v[2])), &inputs, 1e-6);
    check(|t, v| t.linear(v[0], v[1], None), &inputs[..2], 1e-6);
    check(|t, v| t.matmul(v[0], v[1]), &[randn(&[3, 4], 28), randn(&[4, 2], 29)], 1e-6);
}

#[test]
fn layer_norm_gradients_and_moments() {
    let x = randn(&[2, 3, 6], 30);
    let y = functional::layer_norm(&x, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6])).unwrap();
    for r in 0..6 {
        let row = &y.data()[r * 6..(r + 1) * 6];
        let m: f64 = row.iter().sum::<f64>() / 6.0;
        let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-3);
    }
    check(
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        &[x, randn(&[6], 31), randn(&[6], 32)],
        TOL,
    );
}

#[test]
fn shape_op_gradients() {
    let x = randn(&[2, 3, 4], 33);
    check(|t, v| t.transpose12(v[0]), &[x.clone()], 1e-6);
    check(|t, v| t.mean_last(v[0]), &[x.clone()], 1e-6);
    check(|t, v| t.mul_channel(v[0], v[1]), &[x.clone(), randn(&[2, 3], 34)], TOL);
    check(
        |t, v| t.concat_grouped(v[0], v[1], 2),
        &[randn(&[2, 4, 3], 35), randn(&[2, 6, 3], 36)],
        1e-6,
    );
    let rows = randn(&[5, 3], 37);
    check(|t, v| t.gather_rows(v[0], &[4, 0, 4, 2]), &[rows.clone()], 1e-6);
    check(|t, v| t.slice_first(v[0], 1, 4), &[rows.clone()], 1e-6);
    check(
        |t, v| t.replace_rows(v[0], v[1], &[true, false, true, false, false]),
        &[rows.clone(), randn(&[3], 38)],
        1e-6,
    );
    check(|t, v| t.pick(v[0], &[2, 0, 1, 1, 0]), &[rows.clone()], 1e-6);
    check(|t, v| t.select_column(v[0], 1), &[rows.clone()], 1e-6);
    check(|t, v| t.take_columns(v[0], &[0, 2, 1, 1, 2, 0, 0, 0, 1, 2], 2), &[rows.clone()], 1e-6);
    check(|t, v| Ok(t.normalize_rows(v[0], 1e-8)), &[rows], TOL);
}

#[test]
fn concat_grouped_interleaves_groups() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::new(&[1, 4, 1], vec![10.0, 11.0, 20.0, 21.0]).unwrap());
    let c = tape.concat_grouped(a, b, 2).unwrap();
    assert_eq!(tape.data(c), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
}

fn attention_params(dim: usize, heads: usize, seed: u64) -> AttentionParams {
    let mut r = rng(seed);
    let s = 1.0 / (dim as f64).sqrt();
    let mut w = || Tensor::randn(&[dim, dim], s, &mut r);
    let weights = [w(), w(), w(), w()];
    let mut r = rng(seed + 1);
    let mut b = || Tensor::randn(&[dim], 0.1, &mut r);
    let biases = [b(), b(), b(), b()];
    AttentionParams {
        model_dim: dim,
        heads,
        norm_gamma: Tensor::full(&[dim], 1.0),
        norm_beta: Tensor::zeros(&[dim]),
        weights,
        biases,
        dropout_rate: 0.25,
    }
}

#[test]
fn attention_single_frame_has_unit_weight() {
    let q = randn(&[2, 1, 8], 40);
    let k = randn(&[2, 1, 8], 41);
    let p = attention_probs(q.data(), k.data(), 2, 1, 8, 4);
    assert!(p.iter().all(|&v| v == 1.0));
}

#[test]
fn attention_rows_are_distributions() {
    let q = randn(&[2, 5, 8], 42);
    let k = randn(&[2, 5, 8], 43);
    let p = attention_probs(q.data(), k.data(), 2, 5, 8, 2);
    for row in p.chunks(5) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn attention_identical_frames_give_identical_outputs() {
    let frame: Vec<f64> = randn(&[8], 44).into_data();
    let x = Tensor::new(&[1, 4, 8], frame.repeat(4)).unwrap();
    let p = attention_params(8, 2, 45);
    let y = functional::multi_head_self_attention(&x, &p, false, 0).unwrap();
    assert_eq!(y.shape(), &[1, 4, 8]);
    for f in 1..4 {
        for d in 0..8 {
            assert!((y.data()[f * 8 + d] - y.data()[d]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_empty_and_bad_heads() {
    let p = attention_params(8, 2, 46);
    let x = Tensor::zeros(&[1, 0, 8]);
    assert!(matches!(
        functional::multi_head_self_attention(&x, &p, false, 0),
        Err(Error::Empty(_))
    ));
    let mut bad = p.clone();
    bad.heads = 3;
    assert!(functional::multi_head_self_attention(&randn(&[1, 2, 8], 1), &bad, false, 0).is_err());
}

#[test]
fn attention_gradients() {
    let x = randn(&[1, 4, 8], 47);
    let p = attention_params(8, 2, 48);
    // The key bias shifts every score in a row equally, so its true gradient
    // is zero and a relative check on it would only measure rounding noise.
    let mut inputs = vec![x, p.norm_gamma.clone(), p.norm_beta.clone()];
    inputs.extend([&p.weights[0], &p.biases[0], &p.weights[1], &p.weights[2], &p.biases[2], &p.weights[3], &p.biases[3]].map(|t| t.clone()));
    let key_bias = p.biases[1].clone();
    let block = |t: &mut Tape, v: &[Var], drop: Option<(f64, u64)>| {
        let bk = t.constant(key_bias.clone());
        let vars = [v[1], v[2], v[3], v[4], v[5], bk, v[6], v[7], v[8], v[9]];
        functional::attention_block(t, v[0], &vars, 2, drop)
    };
    check(|t, v| block(t, v, None), &inputs, TOL);
    check(|t, v| block(t, v, Some((0.25, 3))), &inputs, TOL);
    check(
        |t, v| t.attention(v[0], v[1], v[2], 4, None),
        &[randn(&[2, 3, 8], 49), randn(&[2, 3, 8], 50), randn(&[2, 3, 8], 51)],
        TOL,
    );
}

#[test]
fn forward_is_deterministic() {
    let x = randn(&[1, 6, 8], 52);
    let p = attention_params(8, 2, 53);
    let a = functional::multi_head_self_attention(&x, &p, true, 7).unwrap();
    let b = functional::multi_head_self_attention(&x, &p, true, 7).unwrap();
    assert_eq!(a, b);
    let c = functional::multi_head_self_attention(&x, &p, true, 8).unwrap();
    assert_ne!(a, c);
}

proptest! {
    #[test]
    fn conv_length_formula_holds(
        len in 1usize..64,
        kernel in 1usize..12,
        stride in 1usize..6,
        padding in 0usize..6,
        seed in 0u64..1000,
    ) {
        prop_assume!(len + 2 * padding >= kernel);
        let g = geo(1, 2, kernel, stride, padding, 1);
        let want = (len + 2 * padding - kernel) / stride + 1;
        prop_assert_eq!(g.output_len(len).unwrap(), want);
        let p = Conv1dParams { geometry: g, weight: randn(&g.weight_shape(), seed), bias: Tensor::zeros(&[2]) };
        let y = functional::conv1d_forward(&randn(&[1, 1, len], seed + 1), &p).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, want]);
    }
}
