//! Gradient checks for the tensor ops against central finite differences
//! (64-bit, step 1e-5, max relative error 1e-4 with a 1e-7 absolute floor
//! near zero).

mod util;

use lorck_core::tensor::{BatchNormState, ConvSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use util::*;

#[test]
fn conv2d_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..8 {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        let spec = ConvSpec::new(1 + case % 2, 1 + case % 3, case % 3);
        assert_grad_matches(&[x, w, b], "conv2d", &move |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), &spec).unwrap();
            tape.sum_all(y)
        });
    }
}

#[test]
fn conv2d_grad_flows_to_both_data_and_kernel_paths() {
    // sum(conv(x, w)) with all-ones upstream: dx and dw both checked
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    assert_grad_matches(&[x, w], "conv2d both paths", &|tape, vars| {
        let y = tape.conv2d(vars[0], vars[1], None, &ConvSpec::new(1, 1, 1)).unwrap();
        tape.sum_all(y)
    });
}

#[test]
fn delta_kernel_conv_passes_upstream_through() {
    // identity conv: dx equals the upstream gradient (here: weights of a
    // weighted sum)
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 2.0), true);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = tape.constant(Tensor::from_vec(vec![1, 1, 3, 3], k).unwrap());
    let y = tape.conv2d(x, w, None, &ConvSpec::new(1, 1, 1)).unwrap();
    let weights: Vec<f64> = (1..=9).map(|v| v as f64).collect();
    let wt = tape.constant(Tensor::from_vec(vec![1, 1, 3, 3], weights.clone()).unwrap());
    let prod = tape.mul(y, wt).unwrap();
    let loss = tape.sum_all(prod);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &weights[..]);
}

#[test]
fn elementwise_and_reduction_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..5 {
        let x = rand_tensor_off_kink(&mut rng, &[2, 3, 4, 4]);
        let s = rand_tensor(&mut rng, &[3], 0.05, 0.6);
        assert_grad_matches(&[x.clone()], "relu", &|tape, v| {
            let y = tape.relu(v[0]);
            tape.sum_all(y)
        });
        assert_grad_matches(&[x.clone()], "sigmoid*tanh", &|tape, v| {
            let a = tape.sigmoid(v[0]);
            let b = tape.tanh(v[0]);
            let p = tape.mul(a, b).unwrap();
            tape.sum_all(p)
        });
        assert_grad_matches(&[x.clone(), s.clone()], "prelu", &|tape, v| {
            let y = tape.prelu(v[0], v[1]).unwrap();
            tape.sum_all(y)
        });
        let pos = rand_tensor(&mut rng, &[6], 0.1, 2.0);
        assert_grad_matches(&[pos.clone()], "ln", &|tape, v| {
            let y = tape.ln(v[0]);
            tape.sum_all(y)
        });
        let a = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 5], 0.2, 1.5);
        assert_grad_matches(&[a, b], "div+mul", &|tape, v| {
            let q = tape.div(v[0], v[1]).unwrap();
            let m = tape.mul(q, v[0]).unwrap();
            tape.sum_all(m)
        });
    }
}

#[test]
fn concat_narrow_softmax_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
    assert_grad_matches(&[a, b], "concat/narrow", &|tape, v| {
        let c = tape.concat(v[0], v[1], 1).unwrap();
        let cut = tape.narrow(c, 1, 1, 4).unwrap();
        let sq = tape.mul(cut, cut).unwrap();
        tape.sum_all(sq)
    });
    let x = rand_tensor(&mut rng, &[5], -2.0, 2.0);
    let mix = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    assert_grad_matches(&[x, mix], "softmax", &|tape, v| {
        let y = tape.softmax_vec(v[0]).unwrap();
        let p = tape.mul(y, v[1]).unwrap();
        tape.sum_all(p)
    });
    let h = rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
    let c = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    assert_grad_matches(&[h, c], "channel_weighted_sum", &|tape, v| {
        let y = tape.channel_weighted_sum(v[0], v[1]).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.sum_all(sq)
    });
}

#[test]
fn maxpool_and_upsample_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    // distinct, well-separated values keep the argmax stable under the probe
    let n = 2 * 2 * 6 * 6;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::from_vec(vec![2, 2, 6, 6], vals).unwrap();
    assert_grad_matches(&[x.clone()], "maxpool2d", &|tape, v| {
        let y = tape.maxpool2d(v[0]).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.sum_all(sq)
    });
    assert_grad_matches(&[x], "upsample_nearest", &|tape, v| {
        let y = tape.upsample_nearest(v[0], 2).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.sum_all(sq)
    });
}

#[test]
fn batchnorm_grads_training_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    for &training in &[true, false] {
        let x = rand_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        let gamma = rand_tensor(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        assert_grad_matches(&[x, gamma, beta], "batchnorm2d", &move |tape, v| {
            let state = BatchNormState::new(2);
            let y = tape.batchnorm2d(v[0], v[1], v[2], &state, training).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum_all(sq)
        });
    }
}

#[test]
fn temporal_conv_grads_shared_and_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let x = rand_tensor(&mut rng, &[1, 4, 2, 4, 4], -1.0, 1.0);
    let w4 = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let w5 = rand_tensor(&mut rng, &[2, 2, 3, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    assert_grad_matches(&[x.clone(), w4, b.clone()], "temporal_conv shared", &|tape, v| {
        let y = tape.temporal_conv(v[0], v[1], v[2], (1, 1, 1)).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.sum_all(sq)
    });
    assert_grad_matches(&[x, w5, b], "temporal_conv per-channel", &|tape, v| {
        let y = tape.temporal_conv(v[0], v[1], v[2], (1, 1, 1)).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.sum_all(sq)
    });
}

#[test]
fn composite_conv_prelu_pipeline_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let slope = rand_tensor(&mut rng, &[3], 0.1, 0.4);
    assert_grad_matches(&[x, w, slope], "conv->prelu->mean", &|tape, v| {
        let y = tape.conv2d(v[0], v[1], None, &ConvSpec::new(1, 1, 1)).unwrap();
        let a = tape.prelu(y, v[2]).unwrap();
        let sq = tape.mul(a, a).unwrap();
        tape.mean_all(sq)
    });
}
