//! Element-wise, reduction, and shape-manipulation operations.

use crate::error::{Error, Result};

use super::tape::{accumulate, Node, Tape, TapeOp, Var};
use super::{Element, Tensor};

// ---------------------------------------------------------------------------
// unary element-wise
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Unary<E: Element> {
    Relu,
    Sigmoid,
    Tanh,
    Ln,
    Exp,
    Clamp(E, E),
    /// a*x + b
    Affine(E, E),
}

struct UnaryOp<E: Element> {
    x: usize,
    kind: Unary<E>,
}

impl<E: Element> TapeOp<E> for UnaryOp<E> {
    fn backward(&self, out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        if !nodes[self.x].requires_grad {
            return;
        }
        let x = nodes[self.x].value.data();
        let y = nodes[out].value.data();
        let dx: Vec<E> = match self.kind {
            Unary::Relu => x
                .iter()
                .zip(g)
                .map(|(&x, &g)| if x > E::ZERO { g } else { E::ZERO })
                .collect(),
            Unary::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (E::ONE - y)).collect(),
            Unary::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (E::ONE - y * y)).collect(),
            Unary::Ln => x.iter().zip(g).map(|(&x, &g)| g / x).collect(),
            Unary::Exp => y.iter().zip(g).map(|(&y, &g)| g * y).collect(),
            Unary::Clamp(lo, hi) => x
                .iter()
                .zip(g)
                .map(|(&x, &g)| if x >= lo && x <= hi { g } else { E::ZERO })
                .collect(),
            Unary::Affine(a, _) => g.iter().map(|&g| g * a).collect(),
        };
        accumulate(slots, self.x, dx);
    }
}

// ---------------------------------------------------------------------------
// binary element-wise (same shape)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp {
    a: usize,
    b: usize,
    kind: Binary,
}

impl<E: Element> TapeOp<E> for BinaryOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        let av = nodes[self.a].value.data();
        let bv = nodes[self.b].value.data();
        if nodes[self.a].requires_grad {
            let da: Vec<E> = match self.kind {
                Binary::Add | Binary::Sub => g.to_vec(),
                Binary::Mul => g.iter().zip(bv).map(|(&g, &b)| g * b).collect(),
                Binary::Div => g.iter().zip(bv).map(|(&g, &b)| g / b).collect(),
            };
            accumulate(slots, self.a, da);
        }
        if nodes[self.b].requires_grad {
            let db: Vec<E> = match self.kind {
                Binary::Add => g.to_vec(),
                Binary::Sub => g.iter().map(|&g| -g).collect(),
                Binary::Mul => g.iter().zip(av).map(|(&g, &a)| g * a).collect(),
                Binary::Div => g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect(),
            };
            accumulate(slots, self.b, db);
        }
    }
}

// ---------------------------------------------------------------------------
// prelu
// ---------------------------------------------------------------------------

struct PreluOp {
    x: usize,
    slope: usize,
    channels: usize,
    inner: usize,
}

impl<E: Element> TapeOp<E> for PreluOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        let x = nodes[self.x].value.data();
        let a = nodes[self.slope].value.data();
        let blocks = x.len() / self.inner;
        if nodes[self.x].requires_grad {
            let mut dx = vec![E::ZERO; x.len()];
            for blk in 0..blocks {
                let slope = a[blk % self.channels];
                let at = blk * self.inner;
                for i in at..at + self.inner {
                    dx[i] = if x[i] > E::ZERO { g[i] } else { g[i] * slope };
                }
            }
            accumulate(slots, self.x, dx);
        }
        if nodes[self.slope].requires_grad {
            let mut da = vec![E::ZERO; self.channels];
            for blk in 0..blocks {
                let mut acc = E::ZERO;
                let at = blk * self.inner;
                for i in at..at + self.inner {
                    if x[i] <= E::ZERO {
                        acc += g[i] * x[i];
                    }
                }
                da[blk % self.channels] += acc;
            }
            accumulate(slots, self.slope, da);
        }
    }
}

// ---------------------------------------------------------------------------
// channel scaling / weighted channel sum
// ---------------------------------------------------------------------------

struct ScaleChannelsOp<E: Element> {
    x: usize,
    weights: Vec<E>,
    inner: usize,
}

impl<E: Element> TapeOp<E> for ScaleChannelsOp<E> {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        if !nodes[self.x].requires_grad {
            return;
        }
        let c = self.weights.len();
        let mut dx = vec![E::ZERO; g.len()];
        for blk in 0..g.len() / self.inner {
            let w = self.weights[blk % c];
            let at = blk * self.inner;
            for i in at..at + self.inner {
                dx[i] = g[i] * w;
            }
        }
        accumulate(slots, self.x, dx);
    }
}

struct ChannelWeightedSumOp {
    x: usize,
    c: usize,
    channels: usize,
    inner: usize,
}

impl<E: Element> TapeOp<E> for ChannelWeightedSumOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        // x: [N, K, inner...], c: [K], out/g: [N, 1, inner...]
        let x = nodes[self.x].value.data();
        let cv = nodes[self.c].value.data();
        let batch = x.len() / (self.channels * self.inner);
        if nodes[self.x].requires_grad {
            let mut dx = vec![E::ZERO; x.len()];
            for n in 0..batch {
                for k in 0..self.channels {
                    let base = (n * self.channels + k) * self.inner;
                    let gb = n * self.inner;
                    for i in 0..self.inner {
                        dx[base + i] = g[gb + i] * cv[k];
                    }
                }
            }
            accumulate(slots, self.x, dx);
        }
        if nodes[self.c].requires_grad {
            let mut dc = vec![E::ZERO; self.channels];
            for n in 0..batch {
                for k in 0..self.channels {
                    let base = (n * self.channels + k) * self.inner;
                    let gb = n * self.inner;
                    let mut acc = E::ZERO;
                    for i in 0..self.inner {
                        acc += g[gb + i] * x[base + i];
                    }
                    dc[k] += acc;
                }
            }
            accumulate(slots, self.c, dc);
        }
    }
}

// ---------------------------------------------------------------------------
// softmax over a vector
// ---------------------------------------------------------------------------

struct SoftmaxVecOp {
    x: usize,
}

impl<E: Element> TapeOp<E> for SoftmaxVecOp {
    fn backward(&self, out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        if !nodes[self.x].requires_grad {
            return;
        }
        let y = nodes[out].value.data();
        let dot = y.iter().zip(g).fold(E::ZERO, |acc, (&y, &g)| acc + y * g);
        let dx: Vec<E> = y.iter().zip(g).map(|(&y, &g)| y * (g - dot)).collect();
        accumulate(slots, self.x, dx);
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

struct SumAllOp {
    x: usize,
}

impl<E: Element> TapeOp<E> for SumAllOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        if !nodes[self.x].requires_grad {
            return;
        }
        accumulate(slots, self.x, vec![g[0]; nodes[self.x].value.numel()]);
    }
}

struct SumSpatialOp {
    x: usize,
    spatial: usize,
}

impl<E: Element> TapeOp<E> for SumSpatialOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        if !nodes[self.x].requires_grad {
            return;
        }
        let mut dx = vec![E::ZERO; nodes[self.x].value.numel()];
        for (nc, &gv) in g.iter().enumerate() {
            for i in 0..self.spatial {
                dx[nc * self.spatial + i] = gv;
            }
        }
        accumulate(slots, self.x, dx);
    }
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

struct ReshapeOp {
    x: usize,
}

impl<E: Element> TapeOp<E> for ReshapeOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        if nodes[self.x].requires_grad {
            accumulate(slots, self.x, g.to_vec());
        }
    }
}

struct ConcatOp {
    a: usize,
    b: usize,
    outer: usize,
    block_a: usize,
    block_b: usize,
}

impl<E: Element> TapeOp<E> for ConcatOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        let block = self.block_a + self.block_b;
        if nodes[self.a].requires_grad {
            let mut da = vec![E::ZERO; self.outer * self.block_a];
            for o in 0..self.outer {
                da[o * self.block_a..(o + 1) * self.block_a]
                    .copy_from_slice(&g[o * block..o * block + self.block_a]);
            }
            accumulate(slots, self.a, da);
        }
        if nodes[self.b].requires_grad {
            let mut db = vec![E::ZERO; self.outer * self.block_b];
            for o in 0..self.outer {
                db[o * self.block_b..(o + 1) * self.block_b]
                    .copy_from_slice(&g[o * block + self.block_a..(o + 1) * block]);
            }
            accumulate(slots, self.b, db);
        }
    }
}

struct NarrowOp {
    x: usize,
    outer: usize,
    full_block: usize,
    offset: usize,
    take: usize,
}

impl<E: Element> TapeOp<E> for NarrowOp {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        if !nodes[self.x].requires_grad {
            return;
        }
        let mut dx = vec![E::ZERO; nodes[self.x].value.numel()];
        for o in 0..self.outer {
            let src = &g[o * self.take..(o + 1) * self.take];
            dx[o * self.full_block + self.offset..o * self.full_block + self.offset + self.take]
                .copy_from_slice(src);
        }
        accumulate(slots, self.x, dx);
    }
}

// ---------------------------------------------------------------------------
// Tape methods
// ---------------------------------------------------------------------------

impl<E: Element> Tape<E> {
    fn unary(&self, x: Var, kind: Unary<E>, f: impl Fn(E) -> E) -> Var {
        let (value, req) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[x.0];
            (node.value.map(&f), node.requires_grad)
        };
        self.push(value, req, Box::new(UnaryOp { x: x.0, kind }))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu, |v| v.maximum(E::ZERO))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid, |v| E::ONE / (E::ONE + (-v).exp()))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh, |v| v.tanh())
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, Unary::Ln, |v| v.ln())
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp, |v| v.exp())
    }

    pub fn clamp(&self, x: Var, lo: E, hi: E) -> Var {
        self.unary(x, Unary::Clamp(lo, hi), |v| v.maximum(lo).minimum(hi))
    }

    /// a*x + b, element-wise.
    pub fn affine(&self, x: Var, a: E, b: E) -> Var {
        self.unary(x, Unary::Affine(a, b), |v| a * v + b)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, -E::ONE, E::ZERO)
    }

    fn binary(&self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        let (value, req) = {
            let inner = self.inner.borrow();
            let an = &inner.nodes[a.0];
            let bn = &inner.nodes[b.0];
            if an.value.shape() != bn.value.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", an.value.shape(), bn.value.shape()),
                ));
            }
            let f = |x: E, y: E| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            let data: Vec<E> =
                an.value.data().iter().zip(bn.value.data()).map(|(&x, &y)| f(x, y)).collect();
            (
                Tensor::from_vec(an.value.shape().to_vec(), data)?,
                an.requires_grad || bn.requires_grad,
            )
        };
        Ok(self.push(value, req, Box::new(BinaryOp { a: a.0, b: b.0, kind })))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    /// PReLU with one learnable slope per channel (axis 1).
    pub fn prelu(&self, x: Var, slope: Var) -> Result<Var> {
        let (value, req, channels, inner_len) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let sn = &inner.nodes[slope.0];
            let shape = xn.value.shape();
            if shape.len() < 2 {
                return Err(Error::shape("prelu", format!("need rank >= 2, got {:?}", shape)));
            }
            let channels = shape[1];
            if sn.value.shape() != [channels] {
                return Err(Error::shape(
                    "prelu",
                    format!("slope shape {:?} vs {} channels", sn.value.shape(), channels),
                ));
            }
            let inner_len: usize = shape[2..].iter().product();
            let a = sn.value.data();
            let xv = xn.value.data();
            let mut data = vec![E::ZERO; xv.len()];
            for blk in 0..xv.len() / inner_len {
                let slope = a[blk % channels];
                let at = blk * inner_len;
                for i in at..at + inner_len {
                    let v = xv[i];
                    data[i] = if v > E::ZERO { v } else { slope * v };
                }
            }
            (
                Tensor::from_vec(shape.to_vec(), data)?,
                xn.requires_grad || sn.requires_grad,
                channels,
                inner_len,
            )
        };
        Ok(self.push(
            value,
            req,
            Box::new(PreluOp { x: x.0, slope: slope.0, channels, inner: inner_len }),
        ))
    }

    /// Multiply channel `c` (axis 1) by the constant `weights[c]`.
    pub fn scale_channels(&self, x: Var, weights: &[E]) -> Result<Var> {
        let (value, req, inner_len) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let shape = xn.value.shape();
            if shape.len() < 2 || shape[1] != weights.len() {
                return Err(Error::shape(
                    "scale_channels",
                    format!("shape {:?} vs {} weights", shape, weights.len()),
                ));
            }
            let inner_len: usize = shape[2..].iter().product();
            let xv = xn.value.data();
            let mut data = vec![E::ZERO; xv.len()];
            for blk in 0..xv.len() / inner_len {
                let w = weights[blk % weights.len()];
                let at = blk * inner_len;
                for i in at..at + inner_len {
                    data[i] = xv[i] * w;
                }
            }
            (Tensor::from_vec(shape.to_vec(), data)?, xn.requires_grad, inner_len)
        };
        Ok(self.push(
            value,
            req,
            Box::new(ScaleChannelsOp { x: x.0, weights: weights.to_vec(), inner: inner_len }),
        ))
    }

    /// out[n,0,...] = sum_k c[k] * x[n,k,...]; both operands receive gradient.
    pub fn channel_weighted_sum(&self, x: Var, c: Var) -> Result<Var> {
        let (value, req, channels, inner_len) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let cn = &inner.nodes[c.0];
            let shape = xn.value.shape();
            if shape.len() < 2 {
                return Err(Error::shape("channel_weighted_sum", format!("rank < 2: {:?}", shape)));
            }
            let channels = shape[1];
            if cn.value.shape() != [channels] {
                return Err(Error::shape(
                    "channel_weighted_sum",
                    format!("weight shape {:?} vs {} channels", cn.value.shape(), channels),
                ));
            }
            let inner_len: usize = shape[2..].iter().product();
            let batch = shape[0];
            let xv = xn.value.data();
            let cv = cn.value.data();
            let mut data = vec![E::ZERO; batch * inner_len];
            for n in 0..batch {
                for k in 0..channels {
                    let base = (n * channels + k) * inner_len;
                    let ob = n * inner_len;
                    let w = cv[k];
                    for i in 0..inner_len {
                        data[ob + i] += w * xv[base + i];
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape[1] = 1;
            (
                Tensor::from_vec(out_shape, data)?,
                xn.requires_grad || cn.requires_grad,
                channels,
                inner_len,
            )
        };
        Ok(self.push(
            value,
            req,
            Box::new(ChannelWeightedSumOp { x: x.0, c: c.0, channels, inner: inner_len }),
        ))
    }

    /// Softmax over a rank-1 tensor.
    pub fn softmax_vec(&self, x: Var) -> Result<Var> {
        let (value, req) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            if xn.value.rank() != 1 {
                return Err(Error::shape("softmax_vec", format!("{:?}", xn.value.shape())));
            }
            let xv = xn.value.data();
            let max = xv.iter().fold(xv[0], |m, &v| m.maximum(v));
            let exps: Vec<E> = xv.iter().map(|&v| (v - max).exp()).collect();
            let total = exps.iter().fold(E::ZERO, |a, &b| a + b);
            let data: Vec<E> = exps.iter().map(|&e| e / total).collect();
            (Tensor::from_vec(xn.value.shape().to_vec(), data)?, xn.requires_grad)
        };
        Ok(self.push(value, req, Box::new(SoftmaxVecOp { x: x.0 })))
    }

    /// Sum of all elements; returns a scalar (shape [1]).
    pub fn sum_all(&self, x: Var) -> Var {
        let (value, req) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let total = xn.value.data().iter().fold(E::ZERO, |a, &b| a + b);
            (Tensor::scalar(total), xn.requires_grad)
        };
        self.push(value, req, Box::new(SumAllOp { x: x.0 }))
    }

    /// Mean of all elements; returns a scalar.
    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.inner.borrow().nodes[x.0].value.numel();
        let s = self.sum_all(x);
        self.affine(s, E::ONE / E::from_f64(n as f64), E::ZERO)
    }

    /// [N, C, ...] -> [N, C], summing over the trailing (spatial) axes.
    pub fn sum_spatial(&self, x: Var) -> Result<Var> {
        let (value, req, spatial) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let shape = xn.value.shape();
            if shape.len() < 3 {
                return Err(Error::shape("sum_spatial", format!("rank < 3: {:?}", shape)));
            }
            let spatial: usize = shape[2..].iter().product();
            let groups = shape[0] * shape[1];
            let xv = xn.value.data();
            let mut data = vec![E::ZERO; groups];
            for (g, chunk) in data.iter_mut().zip(xv.chunks_exact(spatial)) {
                *g = chunk.iter().fold(E::ZERO, |a, &b| a + b);
            }
            (
                Tensor::from_vec(vec![shape[0], shape[1]], data)?,
                xn.requires_grad,
                spatial,
            )
        };
        Ok(self.push(value, req, Box::new(SumSpatialOp { x: x.0, spatial })))
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let (value, req) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            (xn.value.reshaped(shape)?, xn.requires_grad)
        };
        Ok(self.push(value, req, Box::new(ReshapeOp { x: x.0 })))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (value, req, outer, block_a, block_b) = {
            let inner = self.inner.borrow();
            let an = &inner.nodes[a.0];
            let bn = &inner.nodes[b.0];
            let sa = an.value.shape();
            let sb = bn.value.shape();
            if sa.len() != sb.len() || axis >= sa.len() {
                return Err(Error::shape("concat", format!("{:?} vs {:?} axis {}", sa, sb, axis)));
            }
            for (i, (&x, &y)) in sa.iter().zip(sb).enumerate() {
                if i != axis && x != y {
                    return Err(Error::shape(
                        "concat",
                        format!("axis {} mismatch: {:?} vs {:?}", i, sa, sb),
                    ));
                }
            }
            let outer: usize = sa[..axis].iter().product();
            let tail: usize = sa[axis + 1..].iter().product();
            let block_a = sa[axis] * tail;
            let block_b = sb[axis] * tail;
            let av = an.value.data();
            let bv = bn.value.data();
            let mut data = Vec::with_capacity(av.len() + bv.len());
            for o in 0..outer {
                data.extend_from_slice(&av[o * block_a..(o + 1) * block_a]);
                data.extend_from_slice(&bv[o * block_b..(o + 1) * block_b]);
            }
            let mut shape = sa.to_vec();
            shape[axis] += sb[axis];
            (
                Tensor::from_vec(shape, data)?,
                an.requires_grad || bn.requires_grad,
                outer,
                block_a,
                block_b,
            )
        };
        Ok(self.push(value, req, Box::new(ConcatOp { a: a.0, b: b.0, outer, block_a, block_b })))
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (value, req, outer, full_block, offset, take) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let shape = xn.value.shape();
            if axis >= shape.len() || start + len > shape[axis] || len == 0 {
                return Err(Error::shape(
                    "narrow",
                    format!("axis {} [{}, {}) of {:?}", axis, start, start + len, shape),
                ));
            }
            let outer: usize = shape[..axis].iter().product();
            let tail: usize = shape[axis + 1..].iter().product();
            let full_block = shape[axis] * tail;
            let offset = start * tail;
            let take = len * tail;
            let xv = xn.value.data();
            let mut data = Vec::with_capacity(outer * take);
            for o in 0..outer {
                data.extend_from_slice(&xv[o * full_block + offset..o * full_block + offset + take]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            (
                Tensor::from_vec(out_shape, data)?,
                xn.requires_grad,
                outer,
                full_block,
                offset,
                take,
            )
        };
        Ok(self.push(
            value,
            req,
            Box::new(NarrowOp { x: x.0, outer, full_block, offset, take }),
        ))
    }

    /// Select index `t` along axis 0, dropping that axis.
    pub fn select0(&self, x: Var, t: usize) -> Result<Var> {
        let shape = self.shape(x);
        let v = self.narrow(x, 0, t, 1)?;
        self.reshape(v, shape[1..].to_vec())
    }

    /// Stack rank-R vars into a rank-(R+1) tensor along a new axis 0.
    pub fn stack0(&self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::invalid("stack0", "empty sequence"));
        }
        let mut shape = self.shape(items[0]);
        shape.insert(0, 1);
        let mut acc = self.reshape(items[0], shape.clone())?;
        for &item in &items[1..] {
            let lifted = self.reshape(item, shape.clone())?;
            acc = self.concat(acc, lifted, 0)?;
        }
        Ok(acc)
    }
}
