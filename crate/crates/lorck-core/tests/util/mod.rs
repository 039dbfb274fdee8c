//! Shared oracles: central finite differences and brute-force loop
//! references. These stay independent of the implementation paths they
//! check — the references below index tensors directly and never call the
//! gemm-backed kernels.

use lorck_core::tensor::{ConvSpec, Element, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

/// Build-and-evaluate closure: binds the given inputs as grad-requiring
/// leaves and returns the scalar loss var.
pub type LossBuilder = dyn Fn(&Tape<f64>, &[Var]) -> Var;

fn eval_loss(inputs: &[Tensor<f64>], build: &LossBuilder) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&tape, &vars);
    tape.value(loss).data()[0]
}

/// Central finite differences of the loss w.r.t. every element of every
/// input, step 1e-5, in 64-bit.
pub fn finite_diff_grads(inputs: &[Tensor<f64>], build: &LossBuilder) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut g = vec![0.0; inputs[which].numel()];
        for j in 0..inputs[which].numel() {
            let mut probe = |delta: f64| {
                let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
                let mut data = perturbed[which].data().to_vec();
                data[j] += delta;
                perturbed[which] =
                    Tensor::from_vec(perturbed[which].shape().to_vec(), data).unwrap();
                eval_loss(&perturbed, build)
            };
            let plus = probe(FD_STEP);
            let minus = probe(-FD_STEP);
            g[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    grads
}

/// Assert that the tape gradient of `build`'s loss matches central finite
/// differences on every input element: |a - fd| <= max(1e-7, 1e-4 * scale).
pub fn assert_grad_matches(inputs: &[Tensor<f64>], label: &str, build: &LossBuilder) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&tape, &vars);
    tape.backward(loss).expect(label);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    let numeric = finite_diff_grads(inputs, build);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let scale = av.abs().max(nv.abs());
            let tol = ABS_FLOOR.max(MAX_REL_ERR * scale);
            assert!(
                (av - nv).abs() <= tol,
                "{}: input {} elem {}: analytic {} vs finite-diff {} (tol {})",
                label,
                i,
                j,
                av,
                nv,
                tol
            );
        }
    }
}

/// Uniform values in [lo, hi].
pub fn rand_tensor<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| E::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero (for kinked ops such as relu).
pub fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.05..1.0)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Direct six-nested-loop cross-correlation with symmetric padding; the
/// independent reference for conv2d.
pub fn conv2d_reference<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Tensor<E> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    assert_eq!(w.shape()[1], cin);
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let ho = (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
    let wo = (wd + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![E::ZERO; n * cout * ho * wo];
    for ni in 0..n {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.map(|b| b.data()[co]).unwrap_or(E::ZERO);
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oh * sh + ki * dh) as isize - ph as isize;
                                let iw = (ow * sw + kj * dw) as isize - pw as isize;
                                if ih < 0 || ih >= h as isize || iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ci) * h + ih as usize) * wd + iw as usize;
                                let wi = ((co * cin + ci) * kh + ki) * kw + kj;
                                acc += xv[xi] * wv[wi];
                            }
                        }
                    }
                    out[((ni * cout + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, cout, ho, wo], out).unwrap()
}

/// Direct seven-nested-loop temporal convolution reference over
/// [N, T, Cin, H, W]; weights [Cout, K1, K2, K3] (shared over Cin) or
/// [Cout, Cin, K1, K2, K3].
pub fn temporal_conv_reference<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: &Tensor<E>,
    pad: (usize, usize, usize),
) -> Tensor<E> {
    let s = x.shape();
    let (n, t, cin, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    let shared = w.rank() == 4;
    let ws = w.shape();
    let (cout, k1, k2, k3) = if shared {
        (ws[0], ws[1], ws[2], ws[3])
    } else {
        (ws[0], ws[2], ws[3], ws[4])
    };
    let to = t + 2 * pad.0 - k1 + 1;
    let ho = h + 2 * pad.1 - k2 + 1;
    let wo = wd + 2 * pad.2 - k3 + 1;
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![E::ZERO; n * to * cout * ho * wo];
    for ni in 0..n {
        for j in 0..cout {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.data()[j];
                        for k in 0..cin {
                            for kt in 0..k1 {
                                for ki in 0..k2 {
                                    for kj in 0..k3 {
                                        let it = (ot + kt) as isize - pad.0 as isize;
                                        let ih = (oh + ki) as isize - pad.1 as isize;
                                        let iw = (ow + kj) as isize - pad.2 as isize;
                                        if it < 0
                                            || it >= t as isize
                                            || ih < 0
                                            || ih >= h as isize
                                            || iw < 0
                                            || iw >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((ni * t + it as usize) * cin + k) * h
                                            + ih as usize)
                                            * wd
                                            + iw as usize;
                                        let wi = if shared {
                                            ((j * k1 + kt) * k2 + ki) * k3 + kj
                                        } else {
                                            (((j * cin + k) * k1 + kt) * k2 + ki) * k3 + kj
                                        };
                                        acc += xv[xi] * wv[wi];
                                    }
                                }
                            }
                        }
                        out[(((ni * to + ot) * cout + j) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, to, cout, ho, wo], out).unwrap()
}

pub fn max_abs_diff<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}
