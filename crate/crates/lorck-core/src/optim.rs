//! Parameter storage and shape-preserving masked optimization.
//!
//! The update rule multiplies the raw gradient element-wise by the hollow
//! mask *before* anything else, so masked-out weights (and, for Adam, their
//! moments) stay exactly zero forever:
//!
//! `w <- w - lr * (mask * grad)` in SGD mode, and in Adam mode the masked
//! gradient feeds the usual first/second moment recursion.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hollow::HollowMask;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    /// Trailing [K, K] broadcast hollow mask; `None` for dense parameters.
    pub mask: Option<Arc<HollowMask>>,
    /// Persistent gradient accumulator, filled by `absorb_grads`.
    pub grad: Option<Vec<E>>,
}

/// All trainable parameters of a network, in creation order.
#[derive(Default, Debug, Clone)]
pub struct ParamSet<E: Element> {
    entries: Vec<Param<E>>,
}

/// Per-forward-pass binding of every parameter to a tape leaf.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        self.entries.push(Param { name: name.into(), value, mask: None, grad: None });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_hollow(&mut self, name: impl Into<String>, value: Tensor<E>, mask: Arc<HollowMask>) -> ParamId {
        self.entries.push(Param { name: name.into(), value, mask: Some(mask), grad: None });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter as a grad-requiring leaf on `tape`.
    pub fn bind(&self, tape: &Tape<E>) -> Binding {
        Binding { vars: self.entries.iter().map(|p| tape.leaf(p.value.clone(), true)).collect() }
    }

    /// Pull tape gradients into the persistent per-parameter accumulators
    /// (+=). Errors if any gradient is non-finite.
    pub fn absorb_grads(&mut self, tape: &Tape<E>, binding: &Binding) -> Result<()> {
        for (entry, &var) in self.entries.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(var) {
                if !g.all_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient for {}", entry.name)));
                }
                match &mut entry.grad {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => entry.grad = Some(g.data().to_vec()),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad = None;
        }
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [Param<E>] {
        &mut self.entries
    }
}

/// Optimizer family: Adam moments fed by the masked gradient, or the literal
/// masked gradient-descent step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    MaskedAdam,
    MaskedSgd,
}

impl std::str::FromStr for OptimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked-adam" | "adam" => Ok(OptimKind::MaskedAdam),
            "masked-sgd" | "sgd" => Ok(OptimKind::MaskedSgd),
            other => Err(Error::Config(format!("unknown optimizer `{}`", other))),
        }
    }
}

/// Adam state: beta1 = 0.9, beta2 = 0.999, eps = 1e-8, with per-parameter
/// moment tensors and a shared step counter. Moments at masked-out positions
/// are exactly zero at all times.
#[derive(Debug, Clone)]
pub struct MaskedAdam<E: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    kind: OptimKind,
    moments: Vec<Option<Moments<E>>>,
}

#[derive(Debug, Clone)]
struct Moments<E> {
    m: Vec<E>,
    v: Vec<E>,
}

impl<E: Element> MaskedAdam<E> {
    pub fn new(kind: OptimKind) -> Self {
        MaskedAdam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, kind, moments: Vec::new() }
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    /// One optimization step at learning rate `lr`; consumes the accumulated
    /// gradients (parameters without a gradient are left untouched).
    pub fn step(&mut self, params: &mut ParamSet<E>, lr: f64) -> Result<()> {
        self.step_count += 1;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, entry) in params.entries_mut().iter_mut().enumerate() {
            let Some(grad) = entry.grad.take() else { continue };
            if grad.len() != entry.value.numel() {
                return Err(Error::shape("masked_step", format!("gradient length for {}", entry.name)));
            }
            // Eq-style shape preservation: mask the raw gradient first.
            let mut grad = grad;
            if let Some(mask) = &entry.mask {
                let kk = mask.size() * mask.size();
                for (i, g) in grad.iter_mut().enumerate() {
                    if mask.grid()[i % kk] == 0 {
                        *g = E::ZERO;
                    }
                }
            }
            let w = entry.value.make_mut();
            match self.kind {
                OptimKind::MaskedSgd => {
                    let lr_e = E::from_f64(lr);
                    for (wi, gi) in w.iter_mut().zip(&grad) {
                        *wi -= lr_e * *gi;
                    }
                }
                OptimKind::MaskedAdam => {
                    let slot = self.moments[idx].get_or_insert_with(|| Moments {
                        m: vec![E::ZERO; grad.len()],
                        v: vec![E::ZERO; grad.len()],
                    });
                    let b1 = E::from_f64(self.beta1);
                    let b2 = E::from_f64(self.beta2);
                    let one_m_b1 = E::from_f64(1.0 - self.beta1);
                    let one_m_b2 = E::from_f64(1.0 - self.beta2);
                    let eps = E::from_f64(self.eps);
                    let lr_bc = E::from_f64(lr / bc1);
                    let inv_bc2 = E::from_f64(1.0 / bc2);
                    for i in 0..grad.len() {
                        let g = grad[i];
                        slot.m[i] = b1 * slot.m[i] + one_m_b1 * g;
                        slot.v[i] = b2 * slot.v[i] + one_m_b2 * g * g;
                        let vhat = slot.v[i] * inv_bc2;
                        w[i] -= lr_bc * slot.m[i] / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// First/second moments of a parameter, when any step has touched it.
    pub fn moments(&self, id: ParamId) -> Option<(&[E], &[E])> {
        self.moments
            .get(id.0)
            .and_then(|m| m.as_ref())
            .map(|m| (m.m.as_slice(), m.v.as_slice()))
    }

    /// Serialize moments and counters into archive entries under `prefix`.
    pub fn save_into(&self, archive: &mut crate::io::Archive, prefix: &str) {
        archive.put_scalar(format!("{}/step", prefix), self.step_count as f64);
        for (i, slot) in self.moments.iter().enumerate() {
            if let Some(m) = slot {
                let n = m.m.len();
                archive.put_tensor(
                    format!("{}/m/{}", prefix, i),
                    &Tensor::from_vec(vec![n], m.m.clone()).unwrap(),
                );
                archive.put_tensor(
                    format!("{}/v/{}", prefix, i),
                    &Tensor::from_vec(vec![n], m.v.clone()).unwrap(),
                );
            }
        }
    }

    pub fn load_from(&mut self, archive: &crate::io::Archive, prefix: &str, n_params: usize) -> Result<()> {
        self.step_count = archive.scalar(&format!("{}/step", prefix))? as u64;
        self.moments = vec![None; n_params];
        for i in 0..n_params {
            let key_m = format!("{}/m/{}", prefix, i);
            if archive.contains(&key_m) {
                let m = archive.tensor::<E>(&key_m)?;
                let v = archive.tensor::<E>(&format!("{}/v/{}", prefix, i))?;
                self.moments[i] = Some(Moments { m: m.data().to_vec(), v: v.data().to_vec() });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hollow::make_annulus_mask;

    fn one_param(values: Vec<f64>, mask: Option<Arc<HollowMask>>) -> (ParamSet<f64>, ParamId) {
        let mut set = ParamSet::new();
        let n = values.len();
        let t = Tensor::from_vec(vec![n], values).unwrap();
        let id = match mask {
            Some(m) => {
                // reshape into [1,1,K,K] layout expectations are relaxed for rank-1 tests
                set.add_hollow("w", t, m)
            }
            None => set.add("w", t),
        };
        (set, id)
    }

    #[test]
    fn sgd_step_matches_update_rule() {
        // w = [1, 2], mask = [1, 0], grad = [10, 10], lr = 0.1 -> [0.0, 2.0]
        let grid = vec![1u8, 0, 1, 1]; // 2x2 band-ish grid; only first two used
        let mask = HollowMask::from_grid(2, grid, crate::hollow::MaskSource::Annotation { source_size: 2 });
        // from_grid enforces the band invariant which a 2x2 cannot satisfy;
        // drive the masked update through a real annulus instead, checking
        // the literal rule on the first two entries.
        assert!(mask.is_err());

        let annulus = Arc::new(make_annulus_mask(5, (2.0, 2.0), 1.0).unwrap());
        let kk = 25;
        let mut values = vec![0.0; kk];
        let mut grads = vec![0.0; kk];
        // pick one band pixel and one cavity pixel
        let band_at = annulus.grid().iter().position(|&v| v == 1).unwrap();
        let zero_at = annulus.grid().iter().position(|&v| v == 0).unwrap();
        values[band_at] = 1.0;
        values[zero_at] = 2.0;
        grads[band_at] = 10.0;
        grads[zero_at] = 10.0;

        let mut set = ParamSet::new();
        let id = set.add_hollow("w", Tensor::from_vec(vec![1, 1, 5, 5], values).unwrap(), annulus);
        set.entries_mut()[0].grad = Some(grads);

        let mut opt = MaskedAdam::new(OptimKind::MaskedSgd);
        opt.step(&mut set, 0.1).unwrap();
        let w = set.get(id).value.data();
        assert_eq!(w[band_at], 0.0, "band pixel follows the gradient");
        assert_eq!(w[zero_at], 2.0, "masked-out pixel is untouched");
    }

    #[test]
    fn zero_gradient_advances_step_but_not_weights() {
        let (mut set, id) = one_param(vec![1.0, -2.0, 3.0], None);
        set.entries_mut()[0].grad = Some(vec![0.0, 0.0, 0.0]);
        let mut opt = MaskedAdam::new(OptimKind::MaskedAdam);
        opt.step(&mut set, 0.01).unwrap();
        assert_eq!(opt.step_count, 1);
        assert_eq!(set.get(id).value.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn masked_sgd_equals_unmasked_then_projected() {
        // algebraic identity of the masked step
        let annulus = Arc::new(make_annulus_mask(7, (3.0, 3.0), 1.5).unwrap());
        let kk = 49;
        let values: Vec<f64> = (0..kk)
            .map(|i| if annulus.grid()[i] == 1 { 0.3 * i as f64 } else { 0.0 })
            .collect();
        let grads: Vec<f64> = (0..kk).map(|i| (i as f64 * 0.77).sin()).collect();
        let lr = 0.05;

        let mut set = ParamSet::new();
        let id = set.add_hollow(
            "w",
            Tensor::from_vec(vec![1, 1, 7, 7], values.clone()).unwrap(),
            annulus.clone(),
        );
        set.entries_mut()[0].grad = Some(grads.clone());
        let mut opt = MaskedAdam::new(OptimKind::MaskedSgd);
        opt.step(&mut set, lr).unwrap();
        let masked = set.get(id).value.data().to_vec();

        let unmasked_then_projected: Vec<f64> = (0..kk)
            .map(|i| {
                let w = values[i] - lr * grads[i];
                if annulus.grid()[i] == 1 {
                    w
                } else {
                    0.0
                }
            })
            .collect();
        assert_eq!(masked, unmasked_then_projected);
    }

    #[test]
    fn adam_moments_stay_zero_outside_mask() {
        let annulus = Arc::new(make_annulus_mask(5, (2.0, 2.0), 1.0).unwrap());
        let mut set = ParamSet::new();
        let init = crate::hollow::init_hollow_kernel::<f64>(&annulus, (2, 2), 3, 0.0, 0.2).unwrap();
        let id = set.add_hollow("w", init, annulus.clone());
        let mut opt = MaskedAdam::new(OptimKind::MaskedAdam);
        let kk = 25;
        for step in 0..50 {
            let g: Vec<f64> = (0..set.get(id).value.numel())
                .map(|i| ((i + step) as f64 * 0.13).cos())
                .collect();
            set.entries_mut()[0].grad = Some(g);
            opt.step(&mut set, 0.01).unwrap();
        }
        let (m, v) = opt.moments(id).unwrap();
        for i in 0..m.len() {
            if annulus.grid()[i % kk] == 0 {
                assert_eq!(m[i].to_bits(), 0, "first moment at masked position");
                assert_eq!(v[i].to_bits(), 0, "second moment at masked position");
                assert_eq!(set.get(id).value.data()[i].to_bits(), 0, "weight at masked position");
            }
        }
    }
}
