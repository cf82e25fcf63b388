//! Decoupled-weight-decay Adam with mask enforcement.
//!
//! Weight decay (0.01) applies to 2-D weight matrices only. When masks are
//! active, masked gradient entries are dropped before the moment update
//! and masked weights and moments are forced back to exactly zero after
//! it, so momentum can never revive a pruned entry.

use std::collections::BTreeMap;

use crate::model::{is_decayed_path, ModelParams};
use crate::pruning::MaskSet;

pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn moments(&self, path: &str) -> Option<(&[f64], &[f64])> {
        Some((
            self.first_moment.get(path)?.as_slice(),
            self.second_moment.get(path)?.as_slice(),
        ))
    }

    /// Bias-corrected adaptive-moment update over every gradient entry,
    /// followed by mask enforcement when masks are active.
    pub fn adam_step(
        &mut self,
        params: &mut ModelParams,
        grads: &GradMap,
        lr: f64,
        masks: Option<&MaskSet>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (path, grad) in grads {
            let Some(tensor) = params.get_mut(path) else {
                continue;
            };
            let n = tensor.data.len();
            debug_assert_eq!(grad.len(), n, "grad shape mismatch for {path}");
            let m = self
                .first_moment
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second_moment
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; n]);
            let decay = if is_decayed_path(path) {
                self.weight_decay
            } else {
                0.0
            };
            for i in 0..n {
                let mut g = grad[i];
                if let Some(masks) = masks {
                    if let Some(mask) = masks.get(path) {
                        if !mask.is_kept(i) {
                            g = 0.0;
                        }
                    }
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * tensor.data[i]);
            }
            if let Some(masks) = masks {
                if let Some(mask) = masks.get(path) {
                    mask.apply(&mut tensor.data);
                    mask.apply(m);
                    mask.apply(v);
                }
            }
        }
    }
}

/// Scale all gradients down so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params_with(path: &str, data: Vec<f64>) -> ModelParams {
        let n = data.len();
        let mut map = BTreeMap::new();
        map.insert(path.to_string(), Tensor::new(vec![n], data).unwrap().with_grad());
        ModelParams::from_tensors(map)
    }

    #[test]
    fn zero_gradient_leaves_undecayed_params_unchanged() {
        let mut params = params_with("layer.0.attn.q_proj.bias", vec![0.5, -0.25]);
        let mut grads = GradMap::new();
        grads.insert("layer.0.attn.q_proj.bias".into(), vec![0.0, 0.0]);
        let mut opt = OptimizerState::new();
        opt.adam_step(&mut params, &grads, 1e-3, None);
        assert_eq!(
            params.get("layer.0.attn.q_proj.bias").unwrap().data,
            vec![0.5, -0.25]
        );
    }

    #[test]
    fn zero_gradient_still_applies_weight_decay_to_matrices() {
        let mut params = params_with("layer.0.attn.q_proj.weight", vec![1.0]);
        let mut grads = GradMap::new();
        grads.insert("layer.0.attn.q_proj.weight".into(), vec![0.0]);
        let mut opt = OptimizerState::new();
        opt.adam_step(&mut params, &grads, 0.1, None);
        let w = params.get("layer.0.attn.q_proj.weight").unwrap().data[0];
        assert!((w - (1.0 - 0.1 * 0.01)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn scalar_quadratic_converges_to_three() {
        // Minimize (w - 3)^2 on a bias-class parameter (no weight decay).
        let path = "w.bias";
        let mut params = params_with(path, vec![0.0]);
        let mut opt = OptimizerState::new();
        let mut steps = 0;
        for _ in 0..2000 {
            steps += 1;
            let w = params.get(path).unwrap().data[0];
            let mut grads = GradMap::new();
            grads.insert(path.into(), vec![2.0 * (w - 3.0)]);
            opt.adam_step(&mut params, &grads, 0.05, None);
            if (params.get(path).unwrap().data[0] - 3.0).abs() <= 1e-3 {
                break;
            }
        }
        let w = params.get(path).unwrap().data[0];
        assert!((w - 3.0).abs() <= 1e-3, "w = {w} after {steps} steps");
    }

    #[test]
    fn masked_entry_stays_zero_through_updates() {
        use crate::pruning::SparsityMask;
        let path = "layer.0.ffn.w_in.weight";
        let mut params = params_with(path, vec![0.3, -0.7, 0.9, 0.1]);
        let mut mask = SparsityMask::all_ones(path, vec![4]);
        mask.clear(1);
        mask.clear(3);
        let masks = MaskSet::from_masks([mask]);
        masks.enforce(&mut params);

        let mut opt = OptimizerState::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut grads = GradMap::new();
            grads.insert(
                path.into(),
                (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            opt.adam_step(&mut params, &grads, 0.01, Some(&masks));
            let data = &params.get(path).unwrap().data;
            assert_eq!(data[1], 0.0);
            assert_eq!(data[3], 0.0);
        }
        // Kept entries did move.
        assert_ne!(params.get(path).unwrap().data[0], 0.3);
        // Moments of masked entries stayed inert.
        let (m, v) = opt.moments(path).unwrap();
        assert_eq!(m[1], 0.0);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = GradMap::new();
        grads.insert("a.bias".into(), vec![3.0, 4.0]); // norm 5
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = &grads["a.bias"];
        let new_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);

        let mut small = GradMap::new();
        small.insert("a.bias".into(), vec![0.1, 0.2]);
        let before = small.clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, before);
    }
}
