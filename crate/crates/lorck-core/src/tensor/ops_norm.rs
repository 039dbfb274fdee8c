//! Batch normalization over [N, C, H, W] with running statistics.

use std::cell::RefCell;

use crate::error::{Error, Result};

use super::tape::{accumulate, Node, Tape, TapeOp, Var};
use super::{Element, Tensor};

/// Running statistics owned by a layer, updated as a side effect of training
/// forward passes and consumed in evaluation mode.
#[derive(Debug, Clone)]
pub struct BatchNormState<E: Element> {
    pub running_mean: RefCell<Vec<E>>,
    pub running_var: RefCell<Vec<E>>,
    pub momentum: E,
    pub eps: E,
}

impl<E: Element> BatchNormState<E> {
    /// Fresh state: mean 0, variance 1, momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: RefCell::new(vec![E::ZERO; channels]),
            running_var: RefCell::new(vec![E::ONE; channels]),
            momentum: E::from_f64(0.1),
            eps: E::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.borrow().len()
    }
}

struct BatchNormOp<E: Element> {
    x: usize,
    gamma: usize,
    beta: usize,
    /// Per-channel center used in forward (batch mean or running mean).
    mean: Vec<E>,
    /// Per-channel 1/sqrt(var + eps) used in forward.
    invstd: Vec<E>,
    /// Training mode uses batch statistics, which adds the statistic terms to
    /// the input gradient.
    training: bool,
}

impl<E: Element> TapeOp<E> for BatchNormOp<E> {
    fn backward(&self, _out: usize, g: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]) {
        let x = nodes[self.x].value.data();
        let shape = nodes[self.x].value.shape();
        let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let m = n * spatial;
        let gamma = nodes[self.gamma].value.data();

        // per-channel sums of g and g * xhat
        let mut sum_g = vec![E::ZERO; c];
        let mut sum_gx = vec![E::ZERO; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let mut sg = E::ZERO;
                let mut sgx = E::ZERO;
                for i in 0..spatial {
                    let gv = g[base + i];
                    let xhat = (x[base + i] - self.mean[ci]) * self.invstd[ci];
                    sg += gv;
                    sgx += gv * xhat;
                }
                sum_g[ci] += sg;
                sum_gx[ci] += sgx;
            }
        }

        if nodes[self.beta].requires_grad {
            accumulate(slots, self.beta, sum_g.clone());
        }
        if nodes[self.gamma].requires_grad {
            accumulate(slots, self.gamma, sum_gx.clone());
        }
        if nodes[self.x].requires_grad {
            let mut dx = vec![E::ZERO; x.len()];
            let m_e = E::from_f64(m as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    let k = gamma[ci] * self.invstd[ci];
                    for i in 0..spatial {
                        let gv = g[base + i];
                        dx[base + i] = if self.training {
                            let xhat = (x[base + i] - self.mean[ci]) * self.invstd[ci];
                            k * (gv - (sum_g[ci] + xhat * sum_gx[ci]) / m_e)
                        } else {
                            k * gv
                        };
                    }
                }
            }
            accumulate(slots, self.x, dx);
        }
    }
}

impl<E: Element> Tape<E> {
    /// Per-channel normalization over (N, H, W). In training mode the batch
    /// statistics are used and the running statistics of `state` are updated
    /// with its momentum; in evaluation mode the running statistics are used.
    pub fn batchnorm2d(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<E>,
        training: bool,
    ) -> Result<Var> {
        let (value, req, mean, invstd) = {
            let inner = self.inner.borrow();
            let xn = &inner.nodes[x.0];
            let shape = xn.value.shape();
            if shape.len() != 4 {
                return Err(Error::shape("batchnorm2d", format!("need [N,C,H,W], got {:?}", shape)));
            }
            let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
            if state.channels() != c
                || inner.nodes[gamma.0].value.shape() != [c]
                || inner.nodes[beta.0].value.shape() != [c]
            {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("channel axis: input C={} vs parameter lengths", c),
                ));
            }
            let m = n * spatial;
            if training && m <= 1 {
                return Err(Error::invalid(
                    "batchnorm2d",
                    "batch-spatial extent of 1 has undefined variance in training mode",
                ));
            }
            let xv = xn.value.data();
            let (mean, var): (Vec<E>, Vec<E>) = if training {
                // single pass: per-channel sum and sum of squares
                let mut sum = vec![E::ZERO; c];
                let mut sumsq = vec![E::ZERO; c];
                let m_e = E::from_f64(m as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * spatial;
                        let (mut s, mut s2) = (E::ZERO, E::ZERO);
                        for &v in &xv[base..base + spatial] {
                            s += v;
                            s2 += v * v;
                        }
                        sum[ci] += s;
                        sumsq[ci] += s2;
                    }
                }
                let mean: Vec<E> = sum.iter().map(|&s| s / m_e).collect();
                let var: Vec<E> = sumsq
                    .iter()
                    .zip(&mean)
                    .map(|(&s2, &mu)| (s2 / m_e - mu * mu).maximum(E::ZERO))
                    .collect();
                // update running stats with the unbiased variance
                let mom = state.momentum;
                let unbias = E::from_f64(m as f64 / (m as f64 - 1.0));
                let mut rm = state.running_mean.borrow_mut();
                let mut rv = state.running_var.borrow_mut();
                for ci in 0..c {
                    rm[ci] = (E::ONE - mom) * rm[ci] + mom * mean[ci];
                    rv[ci] = (E::ONE - mom) * rv[ci] + mom * var[ci] * unbias;
                }
                (mean, var)
            } else {
                (state.running_mean.borrow().clone(), state.running_var.borrow().clone())
            };
            let invstd: Vec<E> = var.iter().map(|&v| E::ONE / (v + state.eps).sqrt()).collect();
            let gv = inner.nodes[gamma.0].value.data();
            let bv = inner.nodes[beta.0].value.data();
            let mut out = vec![E::ZERO; xv.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    let (mu, is, ga, be) = (mean[ci], invstd[ci], gv[ci], bv[ci]);
                    for i in 0..spatial {
                        out[base + i] = ga * (xv[base + i] - mu) * is + be;
                    }
                }
            }
            let req = xn.requires_grad
                || inner.nodes[gamma.0].requires_grad
                || inner.nodes[beta.0].requires_grad;
            (Tensor::from_vec(shape.to_vec(), out)?, req, mean, invstd)
        };
        Ok(self.push(
            value,
            req,
            Box::new(BatchNormOp { x: x.0, gamma: gamma.0, beta: beta.0, mean, invstd, training }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normalizes_to_zero_mean_unit_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::normal(vec![4, 3, 5, 5], 2.0, 3.0, &mut rng));
        let gamma = tape.constant(Tensor::full(vec![3], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![3]));
        let state = BatchNormState::new(3);
        let y = tape.batchnorm2d(x, gamma, beta, &state, true).unwrap();
        let v = tape.value(y);
        let spatial = 25;
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                let base = (n * 3 + c) * spatial;
                vals.extend_from_slice(&v.data()[base..base + spatial]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {}", m);
            assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }

    #[test]
    fn gamma_zero_yields_beta() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 2, 2, 2], 3.5));
        let gamma = tape.constant(Tensor::zeros(vec![2]));
        let beta = tape.constant(Tensor::full(vec![2], 0.25));
        let state = BatchNormState::new(2);
        let y = tape.batchnorm2d(x, gamma, beta, &state, true).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_element_training_batch_rejected() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 1, 1]));
        let gamma = tape.constant(Tensor::full(vec![2], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![2]));
        let state = BatchNormState::new(2);
        assert!(tape.batchnorm2d(x, gamma, beta, &state, true).is_err());
        assert!(tape.batchnorm2d(x, gamma, beta, &state, false).is_ok());
    }
}
