//! Training objectives: the AdamW optimizer and the margin hinge used by
//! the visual reconstruction loss.
//!
//! The word loss itself is plain cross-entropy built directly in the model
//! forward pass; this module owns everything that happens after gradients
//! exist.

use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {0:?}; step rejected")]
    NonFiniteGrad(String),
    #[error("gradient count {found} does not match parameter count {expected}")]
    CountMismatch { found: usize, expected: usize },
    #[error("gradient shape {found:?} for parameter {name:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Loss-assembly knobs: `total = word_ce + lambda * visual_triplet`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Balance between the word loss and the visual loss.
    pub lambda: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Negatives sampled per masked visual token, from the rest of the batch.
    pub negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            margin: 0.2,
            negatives: 5,
        }
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-4,
            weight_decay: 0.01,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
///
/// Parameters whose gradient is `None` in a step are left untouched: no
/// moment update and no decay. All moments are `f64` like everything else.
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. The whole step is rejected (no parameter or
    /// moment changes, step count unchanged) if any gradient is non-finite,
    /// naming the first offending parameter.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
    ) -> Result<(), OptimError> {
        if grads.len() != store.len() {
            return Err(OptimError::CountMismatch {
                found: grads.len(),
                expected: store.len(),
            });
        }
        for (id, grad) in store.ids().zip(grads.iter()) {
            if let Some(g) = grad {
                if g.shape() != store.get(id).shape() {
                    return Err(OptimError::ShapeMismatch {
                        name: store.name(id).to_string(),
                        found: g.shape().to_vec(),
                        expected: store.get(id).shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(OptimError::NonFiniteGrad(store.name(id).to_string()));
                }
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (idx, id) in store.ids().enumerate() {
            let Some(g) = &grads[idx] else { continue };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = store.get_mut(id).data_mut();
            let gd = g.data();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gd[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Sum of per-parameter gradient buffers, used to accumulate one batch
/// before a single optimizer step.
pub struct GradAccumulator {
    sums: Vec<Option<Tensor>>,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        GradAccumulator {
            sums: (0..store.len()).map(|_| None).collect(),
        }
    }

    /// Adds one example's gradients; the addition order is the caller's
    /// iteration order, so results are bit-stable for a fixed order.
    pub fn add(&mut self, grads: &[Option<Tensor>]) {
        debug_assert_eq!(grads.len(), self.sums.len());
        for (slot, g) in self.sums.iter_mut().zip(grads.iter()) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn take(self) -> Vec<Option<Tensor>> {
        self.sums
    }

    /// Largest absolute gradient component and the id of the parameter
    /// holding it, for diagnostics.
    pub fn max_abs(&self, store: &ParamStore) -> Option<(ParamId, f64)> {
        let mut best: Option<(ParamId, f64)> = None;
        for (idx, id) in store.ids().enumerate() {
            if let Some(g) = &self.sums[idx] {
                let m = g.data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                if best.map_or(true, |(_, cur)| m > cur) {
                    best = Some((id, m));
                }
            }
        }
        best
    }
}

/// Margin hinges for one anchor against several negatives:
/// `max(0, margin + ||a - p|| - ||a - n_k||)` stacked as a vector.
///
/// `pos` and the negatives enter as constants; only the anchor carries
/// gradient.
pub fn triplet_hinges(
    g: &Graph,
    anchor: Var,
    pos: &Tensor,
    negs: &[Tensor],
    margin: f64,
) -> Result<Var, TensorError> {
    let pos_v = g.constant(pos.clone());
    let d_pos = g.norm2(g.sub(anchor, pos_v)?);
    let mut hinges = Vec::with_capacity(negs.len());
    for n in negs {
        let n_v = g.constant(n.clone());
        let d_neg = g.norm2(g.sub(anchor, n_v)?);
        let margin_v = g.constant(Tensor::scalar(margin));
        let gap = g.add(margin_v, g.sub(d_pos, d_neg)?)?;
        hinges.push(g.relu(gap));
    }
    g.concat_vec(&hinges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> (ParamStore, ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.add("p", Tensor::scalar(value)).unwrap();
        (ps, id)
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // p=1, g=0.5, lr=0.1, defaults betas, eps=1e-8, wd=0:
        // m_hat=0.5, v_hat=0.25, p' = 1 - 0.1*0.5/(0.5+1e-8)
        let cfg = OptimizerConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let (mut ps, id) = one_param(1.0);
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(&mut ps, &[Some(Tensor::scalar(0.5))]).unwrap();
        let expected = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-8));
        assert!((ps.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        // Zero gradient still shrinks the parameter by lr*wd*p.
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..OptimizerConfig::default()
        };
        let (mut ps, id) = one_param(2.0);
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(&mut ps, &[Some(Tensor::scalar(0.0))]).unwrap();
        assert!((ps.get(id).item() - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (p-3)^2 from p=0
        let cfg = OptimizerConfig {
            lr: 0.05,
            eps: 1e-8,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let (mut ps, id) = one_param(0.0);
        let mut opt = AdamW::new(cfg, &ps);
        for _ in 0..2000 {
            let p = ps.get(id).item();
            let grad = 2.0 * (p - 3.0);
            opt.step(&mut ps, &[Some(Tensor::scalar(grad))]).unwrap();
        }
        assert!((ps.get(id).item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_rejects_whole_step() {
        let (mut ps, id) = one_param(1.0);
        let mut opt = AdamW::new(OptimizerConfig::default(), &ps);
        let err = opt
            .step(&mut ps, &[Some(Tensor::scalar(f64::NAN))])
            .unwrap_err();
        assert!(err.to_string().contains("\"p\""), "{err}");
        assert_eq!(ps.get(id).item(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn missing_gradient_leaves_param_untouched() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::scalar(1.0)).unwrap();
        let b = ps.add("b", Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(OptimizerConfig::default(), &ps);
        opt.step(&mut ps, &[Some(Tensor::scalar(1.0)), None]).unwrap();
        assert!(ps.get(a).item() < 1.0);
        assert_eq!(ps.get(b).item(), 1.0);
    }

    #[test]
    fn bias_correction_makes_early_steps_full_size() {
        // With bias correction the very first update magnitude is ~lr for a
        // well-scaled gradient; without it the update would be ~lr/100.
        let cfg = OptimizerConfig {
            lr: 0.01,
            eps: 1e-8,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let (mut ps, id) = one_param(0.0);
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(&mut ps, &[Some(Tensor::scalar(1.0))]).unwrap();
        assert!((ps.get(id).item().abs() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn accumulator_sums_in_order() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let mut acc = GradAccumulator::new(&ps);
        acc.add(&[Some(Tensor::vector(vec![1.0, 2.0]))]);
        acc.add(&[None]);
        acc.add(&[Some(Tensor::vector(vec![0.5, -1.0]))]);
        let sums = acc.take();
        assert_eq!(sums[0].as_ref().unwrap().data(), &[1.5, 1.0]);
    }

    #[test]
    fn hinge_values_match_hand_computed_distances() {
        // anchor (0,0), pos (1,0) -> d_pos = 1
        // neg1 (3,0) -> d_neg = 3, hinge = max(0, 0.2+1-3) = 0
        // neg2 (1.1,0) -> d_neg = 1.1, hinge = max(0, 0.2-0.1) = 0.1
        let g = Graph::new();
        let anchor = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let pos = Tensor::vector(vec![1.0, 0.0]);
        let negs = [
            Tensor::vector(vec![3.0, 0.0]),
            Tensor::vector(vec![1.1, 0.0]),
        ];
        let h = triplet_hinges(&g, anchor, &pos, &negs, 0.2).unwrap();
        let v = g.value(h);
        assert!((v.data()[0]).abs() < 1e-12);
        assert!((v.data()[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn hinge_gradient_pulls_anchor_toward_positive() {
        let g = Graph::new();
        let anchor = g.leaf(Tensor::vector(vec![0.0, 0.5]));
        let pos = Tensor::vector(vec![1.0, 0.0]);
        let negs = [Tensor::vector(vec![-1.0, 0.0])];
        let h = triplet_hinges(&g, anchor, &pos, &negs, 1.0).unwrap();
        let loss = g.mean(h).unwrap();
        assert!(g.value(loss).item() > 0.0);
        g.backward(loss).unwrap();
        let grad = g.grad(anchor).unwrap();
        // Moving against the gradient must move the anchor toward pos (+x).
        assert!(grad.data()[0] < 0.0);
    }
}
