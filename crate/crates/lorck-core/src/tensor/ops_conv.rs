//! 2-D convolution (cross-correlation), max pooling and nearest upsampling.
//!
//! Convolution is realized as im2col + gemm per batch element. Backward
//! recomputes the patch matrix instead of caching it, trading a little time
//! for a flat memory profile.

use crate::error::{Error, Result};

use super::tape::{accumulate, Node, Tape, TapeOp, Var};
use super::{ConvGeom, ConvSpec, Element, Tensor};

pub(crate) struct ConvShapes {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

fn conv_shapes<E: Element>(x: &Tensor<E>, weight: &Tensor<E>, geom: &ConvGeom) -> Result<ConvShapes> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be [N,Cin,H,W], got {:?}", xs)));
    }
    if ws.len() != 4 {
        return Err(Error::shape("conv2d", format!("kernel must be [Cout,Cin,Kh,Kw], got {:?}", ws)));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(
            "conv2d",
            format!("channel axis: input Cin={} vs kernel Cin={}", xs[1], ws[1]),
        ));
    }
    if geom.stride.0 == 0 || geom.stride.1 == 0 || geom.dilation.0 == 0 || geom.dilation.1 == 0 {
        return Err(Error::invalid("conv2d", "stride and dilation must be positive"));
    }
    let (ho, wo) = geom.out_extent((xs[2], xs[3]), (ws[2], ws[3]))?;
    if ho == 0 || wo == 0 {
        return Err(Error::invalid("conv2d", "non-positive output extent"));
    }
    Ok(ConvShapes {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        ho,
        wo,
    })
}

/// Fill `cols` (shape [Cin*Kh*Kw, Ho*Wo] row-major) with input patches for
/// one batch element.
fn im2col<E: Element>(x: &[E], s: &ConvShapes, geom: &ConvGeom, cols: &mut [E]) {
    let span = s.ho * s.wo;
    cols.fill(E::ZERO);
    for c in 0..s.cin {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for kh in 0..s.kh {
            for kw in 0..s.kw {
                let row = (c * s.kh + kh) * s.kw + kw;
                let out = &mut cols[row * span..(row + 1) * span];
                for ho in 0..s.ho {
                    let ih = (ho * geom.stride.0 + kh * geom.dilation.0) as isize
                        - geom.pad.0 .0 as isize;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * s.w..(ih as usize + 1) * s.w];
                    let dst = &mut out[ho * s.wo..(ho + 1) * s.wo];
                    for (wo, d) in dst.iter_mut().enumerate() {
                        let iw = (wo * geom.stride.1 + kw * geom.dilation.1) as isize
                            - geom.pad.1 .0 as isize;
                        if iw >= 0 && iw < s.w as isize {
                            *d = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input gradient of one
/// batch element (the adjoint of `im2col`).
fn col2im_add<E: Element>(cols: &[E], s: &ConvShapes, geom: &ConvGeom, dx: &mut [E]) {
    let span = s.ho * s.wo;
    for c in 0..s.cin {
        let plane = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for kh in 0..s.kh {
            for kw in 0..s.kw {
                let row = (c * s.kh + kh) * s.kw + kw;
                let src_row = &cols[row * span..(row + 1) * span];
                for ho in 0..s.ho {
                    let ih = (ho * geom.stride.0 + kh * geom.dilation.0) as isize
                        - geom.pad.0 .0 as isize;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * s.w..(ih as usize + 1) * s.w];
                    let src = &src_row[ho * s.wo..(ho + 1) * s.wo];
                    for (wo, &v) in src.iter().enumerate() {
                        let iw = (wo * geom.stride.1 + kw * geom.dilation.1) as isize
                            - geom.pad.1 .0 as isize;
                        if iw >= 0 && iw < s.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Plain cross-correlation forward, usable without a tape.
pub(crate) fn conv2d_value<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    geom: &ConvGeom,
) -> Result<Tensor<E>> {
    let s = conv_shapes(x, weight, geom)?;
    if let Some(b) = bias {
        if b.shape() != [s.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} vs Cout={}", b.shape(), s.cout),
            ));
        }
    }
    let span = s.ho * s.wo;
    let patch = s.cin * s.kh * s.kw;
    let mut cols = vec![E::ZERO; patch * span];
    let mut out = vec![E::ZERO; s.batch * s.cout * span];
    let xin = x.data();
    for n in 0..s.batch {
        im2col(&xin[n * s.cin * s.h * s.w..], &s, geom, &mut cols);
        E::gemm(
            s.cout,
            patch,
            span,
            E::ONE,
            weight.data(),
            (patch as isize, 1),
            &cols,
            (span as isize, 1),
            E::ZERO,
            &mut out[n * s.cout * span..(n + 1) * s.cout * span],
            (span as isize, 1),
        );
    }
    if let Some(b) = bias {
        let bv = b.data();
        for n in 0..s.batch {
            for j in 0..s.cout {
                let base = (n * s.cout + j) * span;
                let bj = bv[j];
                for v in &mut out[base..base + span] {
                    *v += bj;
                }
            }
        }
    }
    Tensor::from_vec(vec![s.batch, s.cout, s.ho, s.wo], out)
}

struct Conv2dOp {
    x: usize,
    w: usize,
    b: Option<usize>,
    geom: ConvGeom,
}

impl<E: Element> TapeOp<E> for Conv2dOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        let x = &nodes[self.x].value;
        let w = &nodes[self.w].value;
        let s = conv_shapes(x, w, &self.geom).expect("shapes validated at forward");
        let span = s.ho * s.wo;
        let patch = s.cin * s.kh * s.kw;

        if let Some(b) = self.b {
            if nodes[b].requires_grad {
                let mut db = vec![E::ZERO; s.cout];
                for n in 0..s.batch {
                    for j in 0..s.cout {
                        let base = (n * s.cout + j) * span;
                        db[j] += g[base..base + span].iter().fold(E::ZERO, |a, &v| a + v);
                    }
                }
                accumulate(slots, b, db);
            }
        }

        let need_dw = nodes[self.w].requires_grad;
        let need_dx = nodes[self.x].requires_grad;
        if !need_dw && !need_dx {
            return;
        }
        let mut cols = vec![E::ZERO; patch * span];
        let mut dw = if need_dw { vec![E::ZERO; w.numel()] } else { Vec::new() };
        let mut dx = if need_dx { vec![E::ZERO; x.numel()] } else { Vec::new() };
        let mut dcols = if need_dx { vec![E::ZERO; patch * span] } else { Vec::new() };
        let xin = x.data();
        for n in 0..s.batch {
            let g_n = &g[n * s.cout * span..(n + 1) * s.cout * span];
            if need_dw {
                im2col(&xin[n * s.cin * s.h * s.w..], &s, &self.geom, &mut cols);
                // dW += g_n [Cout x span] @ cols^T [span x patch]
                E::gemm(
                    s.cout,
                    span,
                    patch,
                    E::ONE,
                    g_n,
                    (span as isize, 1),
                    &cols,
                    (1, span as isize),
                    E::ONE,
                    &mut dw,
                    (patch as isize, 1),
                );
            }
            if need_dx {
                // dcols = W^T [patch x Cout] @ g_n [Cout x span]
                E::gemm(
                    patch,
                    s.cout,
                    span,
                    E::ONE,
                    w.data(),
                    (1, patch as isize),
                    g_n,
                    (span as isize, 1),
                    E::ZERO,
                    &mut dcols,
                    (span as isize, 1),
                );
                col2im_add(&dcols, &s, &self.geom, &mut dx[n * s.cin * s.h * s.w..]);
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

struct MaxPool2Op {
    x: usize,
    argmax: Vec<u32>,
}

impl<E: Element> TapeOp<E> for MaxPool2Op {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        if !nodes[self.x].requires_grad {
            return;
        }
        let mut dx = vec![E::ZERO; nodes[self.x].value.numel()];
        for (&idx, &gv) in self.argmax.iter().zip(g) {
            dx[idx as usize] += gv;
        }
        accumulate(slots, self.x, dx);
    }
}

struct UpsampleOp {
    x: usize,
    factor: usize,
}

impl<E: Element> TapeOp<E> for UpsampleOp {
    fn backward(&self, out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        if !nodes[self.x].requires_grad {
            return;
        }
        let os = nodes[out].value.shape().to_vec();
        let (oh, ow) = (os[2], os[3]);
        let f = self.factor;
        let (ih, iw) = (oh / f, ow / f);
        let planes = os[0] * os[1];
        let mut dx = vec![E::ZERO; planes * ih * iw];
        for p in 0..planes {
            let gp = &g[p * oh * ow..(p + 1) * oh * ow];
            let dp = &mut dx[p * ih * iw..(p + 1) * ih * iw];
            for h in 0..oh {
                let row = &gp[h * ow..(h + 1) * ow];
                let drow = &mut dp[(h / f) * iw..(h / f + 1) * iw];
                for (w, &gv) in row.iter().enumerate() {
                    drow[w / f] += gv;
                }
            }
        }
        accumulate(slots, self.x, dx);
    }
}

impl<E: Element> Tape<E> {
    /// 2-D cross-correlation with optional bias. Differentiable w.r.t. the
    /// input, the kernel and the bias; the kernel may itself be the output of
    /// another network, in which case gradient flows into both paths.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        self.conv2d_geom(x, weight, bias, &spec.geometry())
    }

    /// `conv2d` with per-side padding control (used for the exact "same"
    /// geometry of even kernels).
    pub fn conv2d_geom(&self, x: Var, weight: Var, bias: Option<Var>, geom: &ConvGeom) -> Result<Var> {
        let (value, req) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let wn = &inner.nodes[weight.0];
            let bn = bias.map(|b| &inner.nodes[b.0]);
            let value = conv2d_value(&xn.value, &wn.value, bn.map(|n| &n.value), geom)?;
            let req = xn.requires_grad
                || wn.requires_grad
                || bn.map(|n| n.requires_grad).unwrap_or(false);
            (value, req)
        };
        Ok(self.push(
            value,
            req,
            Box::new(Conv2dOp { x: x.0, w: weight.0, b: bias.map(|b| b.0), geom: *geom }),
        ))
    }

    /// 2x2 max pooling with stride 2. Odd extents are padded on the right by
    /// replication. Backward routes gradient to the arg-max, first occurrence
    /// in row-major order on ties.
    pub fn maxpool2d(&self, x: Var) -> Result<Var> {
        let (value, req, argmax) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let xs = xn.value.shape();
            if xs.len() != 4 {
                return Err(Error::shape("maxpool2d", format!("need [N,C,H,W], got {:?}", xs)));
            }
            let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
            let xv = xn.value.data();
            let mut out = Vec::with_capacity(planes * ho * wo);
            let mut argmax = Vec::with_capacity(planes * ho * wo);
            for p in 0..planes {
                let plane = &xv[p * h * w..(p + 1) * h * w];
                for oh in 0..ho {
                    for ow_ in 0..wo {
                        let mut best_idx = 0usize;
                        let mut best = None::<E>;
                        for dh in 0..2 {
                            for dw in 0..2 {
                                let ih = (2 * oh + dh).min(h - 1);
                                let iw = (2 * ow_ + dw).min(w - 1);
                                let idx = ih * w + iw;
                                let v = plane[idx];
                                if best.map(|b| v > b).unwrap_or(true) {
                                    best = Some(v);
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best.unwrap());
                        argmax.push((p * h * w + best_idx) as u32);
                    }
                }
            }
            (
                Tensor::from_vec(vec![xs[0], xs[1], ho, wo], out)?,
                xn.requires_grad,
                argmax,
            )
        };
        Ok(self.push(value, req, Box::new(MaxPool2Op { x: x.0, argmax })))
    }

    /// Nearest-neighbor upsampling by an integer factor >= 1.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be >= 1"));
        }
        let (value, req) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let xs = xn.value.shape();
            if xs.len() != 4 {
                return Err(Error::shape("upsample_nearest", format!("need [N,C,H,W], got {:?}", xs)));
            }
            let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (oh, ow) = (h * factor, w * factor);
            let xv = xn.value.data();
            let mut out = vec![E::ZERO; planes * oh * ow];
            for p in 0..planes {
                let src = &xv[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for ho in 0..oh {
                    let srow = &src[(ho / factor) * w..(ho / factor + 1) * w];
                    let drow = &mut dst[ho * ow..(ho + 1) * ow];
                    for (wo, d) in drow.iter_mut().enumerate() {
                        *d = srow[wo / factor];
                    }
                }
            }
            (
                Tensor::from_vec(vec![xs[0], xs[1], oh, ow], out)?,
                xn.requires_grad,
            )
        };
        Ok(self.push(value, req, Box::new(UpsampleOp { x: x.0, factor })))
    }
}

/// Convolve a single-channel image with a single 2-D kernel, zero-padded to
/// preserve the extent (odd or even kernels). Used by the kernel-scale study
/// and the browser demo; no tape involved.
pub fn convolve_image<E: Element>(image: &Tensor<E>, kernel: &Tensor<E>) -> Result<Tensor<E>> {
    let is = image.shape();
    let ks = kernel.shape();
    if is.len() != 2 || ks.len() != 2 {
        return Err(Error::shape("convolve_image", format!("{:?} vs {:?}", is, ks)));
    }
    let x = image.reshaped(vec![1, 1, is[0], is[1]])?;
    let w = kernel.reshaped(vec![1, 1, ks[0], ks[1]])?;
    let geom = ConvGeom::same((ks[0], ks[1]), (1, 1), (1, 1));
    let y = conv2d_value(&x, &w, None, &geom)?;
    y.reshaped(vec![is[0], is[1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_conv() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(
            Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap(),
        );
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(Tensor::from_vec(vec![1, 1, 3, 3], k).unwrap());
        let y = tape.conv2d(x, w, None, &ConvSpec::new(1, 1, 1)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn output_size_100_40() {
        let tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 100, 100]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 40, 40]));
        let y = tape.conv2d(x, w, None, &ConvSpec::new(1, 1, 0)).unwrap();
        assert_eq!(tape.shape(y), vec![1, 1, 61, 61]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(vec![4, 2, 3, 3]));
        let err = tape.conv2d(x, w, None, &ConvSpec::new(1, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("channel axis"));
    }

    #[test]
    fn zero_kernel_backward_gives_zero_dx() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 2.0), true);
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, &ConvSpec::new(1, 1, 1)).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        // constant input: gradient goes to the first element per window
        let c = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 5.0), true);
        let yc = tape.maxpool2d(c).unwrap();
        assert_eq!(tape.value(yc).data(), &[5.0]);
        let s = tape.sum_all(yc);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(c).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_odd_extent_replicates() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(
            Tensor::from_vec(vec![1, 1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap(),
        );
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.shape(y), vec![1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.shape(y), vec![1, 1, 4, 4]);
        let v = tape.value(y);
        assert_eq!(
            v.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        // factor 1 is the identity
        let y1 = tape.upsample_nearest(x, 1).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(x).data());
        // gradient of sum is factor^2 everywhere
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0; 4]);
        // factor 0 rejected
        assert!(tape.upsample_nearest(x, 0).is_err());
    }
}
