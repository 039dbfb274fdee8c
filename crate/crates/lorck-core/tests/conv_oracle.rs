//! Convolution implementations against brute-force nested-loop references on
//! randomized shape/stride/dilation/padding combinations.

mod util;

use lorck_core::tensor::{ConvSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use util::*;

fn random_conv_case(rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>, ConvSpec) {
    loop {
        let n = rng.gen_range(1..=2);
        let cin = rng.gen_range(1..=4);
        let cout = rng.gen_range(1..=4);
        let h = rng.gen_range(3..=10);
        let w = rng.gen_range(3..=10);
        let kh = rng.gen_range(1..=4);
        let kw = rng.gen_range(1..=4);
        let spec = ConvSpec {
            stride: (rng.gen_range(1..=2), rng.gen_range(1..=2)),
            dilation: (rng.gen_range(1..=2), rng.gen_range(1..=2)),
            padding: (rng.gen_range(0..=2), rng.gen_range(0..=2)),
        };
        let fits = |ext: usize, k: usize, s: usize, d: usize, p: usize| {
            ext + 2 * p >= d * (k - 1) + 1 && (ext + 2 * p - d * (k - 1) - 1) / s + 1 > 0
        };
        if !fits(h, kh, spec.stride.0, spec.dilation.0, spec.padding.0)
            || !fits(w, kw, spec.stride.1, spec.dilation.1, spec.padding.1)
        {
            continue;
        }
        let x = rand_tensor::<f32>(rng, &[n, cin, h, w], -1.0, 1.0);
        let wt = rand_tensor::<f32>(rng, &[cout, cin, kh, kw], -1.0, 1.0);
        let b = rand_tensor::<f32>(rng, &[cout], -0.5, 0.5);
        return (x, wt, b, spec);
    }
}

#[test]
fn conv2d_matches_loop_reference_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (x, w, b, spec) = random_conv_case(&mut rng);
        let tape: Tape<f32> = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let got = tape.value(tape.conv2d(xv, wv, Some(bv), &spec).unwrap());
        let want = conv2d_reference(&x, &w, Some(&b), &spec);
        let diff = max_abs_diff(&got, &want);
        assert!(diff < 1e-6, "case {}: |delta| = {}", case, diff);
    }
}

#[test]
fn conv2d_matches_loop_reference_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = rand_tensor::<f64>(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = rand_tensor::<f64>(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let spec = ConvSpec { stride: (1, 1), dilation: (2, 2), padding: (2, 2) };
    let tape: Tape<f64> = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let got = tape.value(tape.conv2d(xv, wv, None, &spec).unwrap());
    let want = conv2d_reference(&x, &w, None, &spec);
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

#[test]
fn temporal_conv_matches_loop_reference_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for case in 0..100 {
        let n = rng.gen_range(1..=2);
        let t = rng.gen_range(2..=6);
        let cin = rng.gen_range(1..=3);
        let cout = rng.gen_range(1..=3);
        let h = rng.gen_range(3..=6);
        let w = rng.gen_range(3..=6);
        let k1 = if t >= 3 && rng.gen_bool(0.5) { 3 } else { 1 };
        let k2 = if h >= 3 { [1, 3][rng.gen_range(0..2)] } else { 1 };
        let k3 = if w >= 3 { [1, 3][rng.gen_range(0..2)] } else { 1 };
        let pad = ((k1 - 1) / 2, (k2 - 1) / 2, (k3 - 1) / 2);
        let shared = rng.gen_bool(0.5);
        let x = rand_tensor::<f32>(&mut rng, &[n, t, cin, h, w], -1.0, 1.0);
        let wt = if shared {
            rand_tensor::<f32>(&mut rng, &[cout, k1, k2, k3], -1.0, 1.0)
        } else {
            rand_tensor::<f32>(&mut rng, &[cout, cin, k1, k2, k3], -1.0, 1.0)
        };
        let b = rand_tensor::<f32>(&mut rng, &[cout], -0.5, 0.5);
        let tape: Tape<f32> = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(wt.clone());
        let bv = tape.constant(b.clone());
        let got = tape.value(tape.temporal_conv(xv, wv, bv, pad).unwrap());
        let want = temporal_conv_reference(&x, &wt, &b, pad);
        let diff = max_abs_diff(&got, &want);
        assert!(diff < 1e-6, "case {}: |delta| = {}", case, diff);
    }
}

#[test]
fn determinism_same_seed_same_bits() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor::<f32>(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let w = rand_tensor::<f32>(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let tape: Tape<f32> = Tape::new();
        let xv = tape.leaf(x, true);
        let wv = tape.leaf(w, true);
        let y = tape.conv2d(xv, wv, None, &ConvSpec::new(1, 1, 1)).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        (
            tape.value(y),
            tape.grad(xv).unwrap(),
            tape.grad(wv).unwrap(),
        )
    };
    let (y1, dx1, dw1) = run();
    let (y2, dx2, dw2) = run();
    assert!(y1.bit_eq(&y2) && dx1.bit_eq(&dx2) && dw1.bit_eq(&dw2));
}
