//! Temporal convolution: 3-D cross-correlation over (T, H, W) linking the
//! slices of a stack.
//!
//! Input is [N, T, Cin, H, W]; the kernel tensor is either
//! [Cout, K1, K2, K3] (one kernel per output channel, shared across input
//! channels) or [Cout, Cin, K1, K2, K3] (per-input-channel kernels). Each
//! input channel's (T, H, W) volume is convolved and the results are summed
//! into an output of [N, T', Cout, H', W'].

use crate::error::{Error, Result};

use super::tape::{accumulate, Node, Tape, TapeOp, Var};
use super::{Element, Tensor};

#[derive(Clone, Copy, Debug)]
struct TempShapes {
    batch: usize,
    t: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: (usize, usize, usize),
    pad: (usize, usize, usize),
    to: usize,
    ho: usize,
    wo: usize,
    shared: bool,
}

fn temporal_shapes<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    pad: (usize, usize, usize),
) -> Result<TempShapes> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::shape("temporal_conv", format!("input must be [N,T,Cin,H,W], got {:?}", xs)));
    }
    let ws = weight.shape();
    let (cout, k, shared) = match ws.len() {
        4 => (ws[0], (ws[1], ws[2], ws[3]), true),
        5 => {
            if ws[1] != xs[2] {
                return Err(Error::shape(
                    "temporal_conv",
                    format!("channel axis: kernel Cin={} vs input Cin={}", ws[1], xs[2]),
                ));
            }
            (ws[0], (ws[2], ws[3], ws[4]), false)
        }
        _ => {
            return Err(Error::shape(
                "temporal_conv",
                format!("kernel must be rank 4 or 5, got {:?}", ws),
            ))
        }
    };
    if k.0 % 2 == 0 || k.1 % 2 == 0 || k.2 % 2 == 0 {
        return Err(Error::invalid(
            "temporal_conv",
            format!("even kernel extents {:?} break padding symmetry", k),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "temporal_conv",
            format!("bias shape {:?} vs Cout={}", bias.shape(), cout),
        ));
    }
    let ext = |n: usize, k: usize, p: usize| -> Result<usize> {
        (n + 2 * p).checked_sub(k - 1).filter(|&v| v > 0).ok_or_else(|| {
            Error::invalid("temporal_conv", format!("kernel {} exceeds padded extent {}", k, n + 2 * p))
        })
    };
    Ok(TempShapes {
        batch: xs[0],
        t: xs[1],
        cin: xs[2],
        h: xs[3],
        w: xs[4],
        cout,
        k,
        pad,
        to: ext(xs[1], k.0, pad.0)?,
        ho: ext(xs[3], k.1, pad.1)?,
        wo: ext(xs[4], k.2, pad.2)?,
        shared,
    })
}

fn x_index(s: &TempShapes, n: usize, t: usize, c: usize, h: usize, w: usize) -> usize {
    (((n * s.t + t) * s.cin + c) * s.h + h) * s.w + w
}

fn out_index(s: &TempShapes, n: usize, t: usize, j: usize, h: usize, w: usize) -> usize {
    (((n * s.to + t) * s.cout + j) * s.ho + h) * s.wo + w
}

fn w_index(s: &TempShapes, j: usize, c: usize, kt: usize, kh: usize, kw: usize) -> usize {
    let base = if s.shared { j } else { j * s.cin + c };
    ((base * s.k.0 + kt) * s.k.1 + kh) * s.k.2 + kw
}

struct TemporalConvOp {
    x: usize,
    w: usize,
    b: usize,
    pad: (usize, usize, usize),
}

/// Iterate all (output position, input position) pairs that a kernel offset
/// connects, calling `f(out_t, out_h, out_w, in_t, in_h, in_w)`.
fn for_valid<F: FnMut(usize, usize, usize, usize, usize, usize)>(
    s: &TempShapes,
    kt: usize,
    kh: usize,
    kw: usize,
    mut f: F,
) {
    for to in 0..s.to {
        let ti = to as isize + kt as isize - s.pad.0 as isize;
        if ti < 0 || ti >= s.t as isize {
            continue;
        }
        for ho in 0..s.ho {
            let hi = ho as isize + kh as isize - s.pad.1 as isize;
            if hi < 0 || hi >= s.h as isize {
                continue;
            }
            for wo in 0..s.wo {
                let wi = wo as isize + kw as isize - s.pad.2 as isize;
                if wi < 0 || wi >= s.w as isize {
                    continue;
                }
                f(to, ho, wo, ti as usize, hi as usize, wi as usize);
            }
        }
    }
}

pub(crate) fn temporal_conv_value<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    pad: (usize, usize, usize),
) -> Result<Tensor<E>> {
    let s = temporal_shapes(x, weight, bias, pad)?;
    let xv = x.data();
    let wv = weight.data();
    let bv = bias.data();
    let mut out = vec![E::ZERO; s.batch * s.to * s.cout * s.ho * s.wo];
    for n in 0..s.batch {
        for j in 0..s.cout {
            for to in 0..s.to {
                for ho in 0..s.ho {
                    for wo in 0..s.wo {
                        out[out_index(&s, n, to, j, ho, wo)] = bv[j];
                    }
                }
            }
            for c in 0..s.cin {
                for kt in 0..s.k.0 {
                    for kh in 0..s.k.1 {
                        for kw in 0..s.k.2 {
                            let wval = wv[w_index(&s, j, c, kt, kh, kw)];
                            for_valid(&s, kt, kh, kw, |to, ho, wo, ti, hi, wi| {
                                out[out_index(&s, n, to, j, ho, wo)] +=
                                    wval * xv[x_index(&s, n, ti, c, hi, wi)];
                            });
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![s.batch, s.to, s.cout, s.ho, s.wo], out)
}

impl<E: Element> TapeOp<E> for TemporalConvOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        let x = &nodes[self.x].value;
        let w = &nodes[self.w].value;
        let b = &nodes[self.b].value;
        let s = temporal_shapes(x, w, b, self.pad).expect("shapes validated at forward");
        let xv = x.data();
        let wv = w.data();

        if nodes[self.b].requires_grad {
            let mut db = vec![E::ZERO; s.cout];
            for n in 0..s.batch {
                for to in 0..s.to {
                    for j in 0..s.cout {
                        let base = ((n * s.to + to) * s.cout + j) * s.ho * s.wo;
                        db[j] += g[base..base + s.ho * s.wo].iter().fold(E::ZERO, |a, &v| a + v);
                    }
                }
            }
            accumulate(slots, self.b, db);
        }

        let need_dw = nodes[self.w].requires_grad;
        let need_dx = nodes[self.x].requires_grad;
        if !need_dw && !need_dx {
            return;
        }
        let mut dw = vec![E::ZERO; w.numel()];
        let mut dx = vec![E::ZERO; x.numel()];
        for n in 0..s.batch {
            for j in 0..s.cout {
                for c in 0..s.cin {
                    for kt in 0..s.k.0 {
                        for kh in 0..s.k.1 {
                            for kw in 0..s.k.2 {
                                let widx = w_index(&s, j, c, kt, kh, kw);
                                let wval = wv[widx];
                                let mut wacc = E::ZERO;
                                for_valid(&s, kt, kh, kw, |to, ho, wo, ti, hi, wi| {
                                    let gv = g[out_index(&s, n, to, j, ho, wo)];
                                    if need_dw {
                                        wacc += gv * xv[x_index(&s, n, ti, c, hi, wi)];
                                    }
                                    if need_dx {
                                        dx[x_index(&s, n, ti, c, hi, wi)] += gv * wval;
                                    }
                                });
                                dw[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
        if need_dw {
            accumulate(slots, self.w, dw);
        }
        if need_dx {
            accumulate(slots, self.x, dx);
        }
    }
}

impl<E: Element> Tape<E> {
    /// Temporal convolution over [N, T, Cin, H, W] with symmetric padding
    /// per axis; odd kernel extents only. With `pad = ((K-1)/2, ...)` the
    /// output keeps T' = T, H' = H, W' = W.
    pub fn temporal_conv(
        &self,
        x: Var,
        weight: Var,
        bias: Var,
        pad: (usize, usize, usize),
    ) -> Result<Var> {
        let (value, req) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let wn = &inner.nodes[weight.0];
            let bn = &inner.nodes[bias.0];
            let value = temporal_conv_value(&xn.value, &wn.value, &bn.value, pad)?;
            (value, xn.requires_grad || wn.requires_grad || bn.requires_grad)
        };
        Ok(self.push(
            value,
            req,
            Box::new(TemporalConvOp { x: x.0, w: weight.0, b: bias.0, pad }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        // Cin=1, K=(1,1,1), weight 1, bias 0 -> output equals input
        let tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 1 * 4 * 4).map(|v| v as f64 * 0.1).collect();
        let x = tape.constant(Tensor::from_vec(vec![2, 3, 1, 4, 4], data.clone()).unwrap());
        let w = tape.constant(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.temporal_conv(x, w, b, (0, 0, 0)).unwrap();
        assert_eq!(tape.shape(y), vec![2, 3, 1, 4, 4]);
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn preserves_t_with_matching_padding() {
        let tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 12, 2, 6, 6]));
        let w = tape.constant(Tensor::zeros(vec![3, 5, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.temporal_conv(x, w, b, (2, 1, 1)).unwrap();
        assert_eq!(tape.shape(y), vec![1, 12, 3, 6, 6]);
    }

    #[test]
    fn even_kernel_rejected() {
        let tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 4, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(tape.temporal_conv(x, w, b, (0, 1, 1)).is_err());
    }
}
