//! Magnitude pruning with permanent masks and a gradual sparsity schedule.
//!
//! Each prunable component (one projection or FFN matrix of one layer) is
//! pruned independently to a uniform target sparsity. Once an entry is
//! masked it stays masked for the rest of the run: masks only ever clear
//! bits, weights are re-zeroed after every optimizer step, and optimizer
//! state for masked entries is held at zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Binary keep-mask for one prunable component. Bit 1 = kept, 0 = pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMask {
    pub component_path: String,
    pub shape: Vec<usize>,
    words: Vec<u64>,
    kept_count: usize,
}

impl SparsityMask {
    pub fn all_ones(component_path: impl Into<String>, shape: Vec<usize>) -> Self {
        let total: usize = shape.iter().product();
        let n_words = total.div_ceil(64);
        let mut words = vec![u64::MAX; n_words];
        if total % 64 != 0 {
            // Zero the tail bits beyond `total` so popcounts stay exact.
            *words.last_mut().unwrap() = (1u64 << (total % 64)) - 1;
        }
        SparsityMask {
            component_path: component_path.into(),
            shape,
            words,
            kept_count: total,
        }
    }

    pub fn total(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn masked_count(&self) -> usize {
        self.total() - self.kept_count
    }

    /// Fraction of entries masked to zero.
    pub fn sparsity(&self) -> f64 {
        self.masked_count() as f64 / self.total() as f64
    }

    pub fn is_kept(&self, idx: usize) -> bool {
        debug_assert!(idx < self.total());
        self.words[idx / 64] >> (idx % 64) & 1 == 1
    }

    /// Permanently mask one entry. The only mutation this type offers:
    /// bits transition 1 -> 0 and never back.
    pub fn clear(&mut self, idx: usize) {
        debug_assert!(idx < self.total());
        let w = &mut self.words[idx / 64];
        if *w >> (idx % 64) & 1 == 1 {
            *w &= !(1u64 << (idx % 64));
            self.kept_count -= 1;
        }
    }

    /// Indices of kept entries, ascending.
    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.total()).filter(|&i| self.is_kept(i)).collect()
    }

    /// Zero masked entries of a congruent flat buffer.
    pub fn apply(&self, data: &mut [f64]) {
        debug_assert_eq!(data.len(), self.total());
        for (i, v) in data.iter_mut().enumerate() {
            if !self.is_kept(i) {
                *v = 0.0;
            }
        }
    }

    /// Multiplicative form of the mask, congruent to the weight matrix.
    pub fn to_multiplier(&self) -> Vec<f64> {
        (0..self.total())
            .map(|i| if self.is_kept(i) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Bit-packed words (little-endian bit order within each word).
    pub fn packed_words(&self) -> &[u64] {
        &self.words
    }

    pub fn from_packed_words(
        component_path: String,
        shape: Vec<usize>,
        words: Vec<u64>,
    ) -> Result<Self> {
        let total: usize = shape.iter().product();
        if words.len() != total.div_ceil(64) {
            return Err(Error::Checkpoint(format!(
                "mask for {component_path}: {} words for {total} bits",
                words.len()
            )));
        }
        if total % 64 != 0 && words.last().unwrap() >> (total % 64) != 0 {
            return Err(Error::Checkpoint(format!(
                "mask for {component_path}: tail bits set beyond {total}"
            )));
        }
        let kept_count = words.iter().map(|w| w.count_ones() as usize).sum();
        Ok(SparsityMask {
            component_path,
            shape,
            words,
            kept_count,
        })
    }
}

/// One mask per prunable component, keyed by parameter path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskSet {
    masks: BTreeMap<String, SparsityMask>,
}

impl MaskSet {
    /// Fresh all-ones masks covering exactly the prunable set of `params`.
    pub fn all_ones(params: &ModelParams) -> Self {
        let mut masks = BTreeMap::new();
        for path in params.prunable_paths() {
            let shape = params.get(&path).expect("prunable path exists").shape.clone();
            masks.insert(path.clone(), SparsityMask::all_ones(path, shape));
        }
        MaskSet { masks }
    }

    pub fn from_masks(masks: impl IntoIterator<Item = SparsityMask>) -> Self {
        MaskSet {
            masks: masks
                .into_iter()
                .map(|m| (m.component_path.clone(), m))
                .collect(),
        }
    }

    pub fn get(&self, path: &str) -> Option<&SparsityMask> {
        self.masks.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut SparsityMask> {
        self.masks.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SparsityMask)> {
        self.masks.iter()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// True when no entry is masked anywhere.
    pub fn is_all_ones(&self) -> bool {
        self.masks.values().all(|m| m.masked_count() == 0)
    }

    /// Zero masked weight entries in place.
    pub fn enforce(&self, params: &mut ModelParams) {
        for (path, mask) in &self.masks {
            if let Some(t) = params.get_mut(path) {
                mask.apply(&mut t.data);
            }
        }
    }

    /// Zero masked entries of a gradient or optimizer-moment buffer.
    pub fn zero_masked(&self, path: &str, data: &mut [f64]) {
        if let Some(mask) = self.masks.get(path) {
            mask.apply(data);
        }
    }
}

/// Set masked weights to exactly zero and kill the corresponding gradient
/// entries so the optimizer cannot revive them.
pub fn enforce_masks(
    params: &mut ModelParams,
    masks: &MaskSet,
    grads: Option<&mut BTreeMap<String, Vec<f64>>>,
) {
    masks.enforce(params);
    if let Some(grads) = grads {
        for (path, grad) in grads.iter_mut() {
            masks.zero_masked(path, grad);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Cubic,
    Linear,
}

/// Maps global optimizer step to target sparsity over the pruning window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningSchedule {
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub prune_start_step: usize,
    pub prune_end_step: usize,
    pub events_per_epoch: usize,
    pub interpolation: Interpolation,
}

impl PruningSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.initial_sparsity)
            || !(0.0..1.0).contains(&self.final_sparsity)
            || self.initial_sparsity >= self.final_sparsity
        {
            return Err(Error::Config(format!(
                "sparsity ramp must satisfy 0 <= initial < final < 1, got {} -> {}",
                self.initial_sparsity, self.final_sparsity
            )));
        }
        if self.prune_start_step >= self.prune_end_step {
            return Err(Error::Config(format!(
                "pruning window must satisfy start < end, got {} -> {}",
                self.prune_start_step, self.prune_end_step
            )));
        }
        if self.events_per_epoch == 0 {
            return Err(Error::Config("events_per_epoch must be >= 1".into()));
        }
        Ok(())
    }

    /// Target sparsity at a global step, clamped outside the window.
    /// Cubic shape: `s(t) = s_f + (s_i - s_f) * (1 - t)^3`.
    pub fn sparsity_at_step(&self, step: usize) -> f64 {
        if step <= self.prune_start_step {
            return self.initial_sparsity;
        }
        if step >= self.prune_end_step {
            return self.final_sparsity;
        }
        let t = (step - self.prune_start_step) as f64
            / (self.prune_end_step - self.prune_start_step) as f64;
        match self.interpolation {
            Interpolation::Cubic => {
                self.final_sparsity
                    + (self.initial_sparsity - self.final_sparsity) * (1.0 - t).powi(3)
            }
            Interpolation::Linear => {
                self.initial_sparsity + t * (self.final_sparsity - self.initial_sparsity)
            }
        }
    }

    /// Prune-event steps, evenly spaced across the window and inclusive of
    /// both endpoints so the trace starts at `initial_sparsity` and ends
    /// exactly at `final_sparsity`. Deduplicated when the window has fewer
    /// steps than events.
    pub fn event_steps(&self, steps_per_epoch: usize) -> Vec<usize> {
        let window = self.prune_end_step - self.prune_start_step;
        let epochs = window as f64 / steps_per_epoch.max(1) as f64;
        let n = ((self.events_per_epoch as f64 * epochs).round() as usize).max(2);
        let mut steps: Vec<usize> = (0..n)
            .map(|k| {
                self.prune_start_step
                    + ((k as f64 / (n - 1) as f64) * window as f64).round() as usize
            })
            .collect();
        steps.dedup();
        steps
    }
}

/// Progress of one gradual pruning run.
#[derive(Debug, Clone)]
pub struct GmpState {
    pub step: usize,
    pub masks: MaskSet,
    pub schedule: PruningSchedule,
}

impl GmpState {
    pub fn new(masks: MaskSet, schedule: PruningSchedule) -> Self {
        GmpState {
            step: 0,
            masks,
            schedule,
        }
    }
}

/// Mask the smallest-magnitude kept entries of one component until
/// `ceil(target * total)` entries are masked. Previously masked entries
/// stay masked; ties break toward the lowest flat index.
pub fn magnitude_prune_component(
    weights: &Tensor,
    mask: &mut SparsityMask,
    target_sparsity: f64,
) -> Result<usize> {
    if weights.shape != mask.shape {
        return Err(Error::ShapeMismatch {
            op: "magnitude_prune_component",
            lhs: weights.shape.clone(),
            rhs: mask.shape.clone(),
        });
    }
    let total = mask.total();
    let want_masked = ((target_sparsity * total as f64).ceil() as usize).min(total);
    let current_masked = mask.masked_count();
    if want_masked < current_masked {
        return Err(Error::ScheduleMonotonicity {
            component: mask.component_path.clone(),
            current: mask.sparsity(),
            target: target_sparsity,
        });
    }
    let need = want_masked - current_masked;
    if need == 0 {
        return Ok(0);
    }
    let mut kept: Vec<usize> = mask.kept_indices();
    kept.sort_by(|&a, &b| {
        weights.data[a]
            .abs()
            .total_cmp(&weights.data[b].abs())
            .then(a.cmp(&b))
    });
    for &idx in kept.iter().take(need) {
        mask.clear(idx);
    }
    Ok(need)
}

/// One prune event: every prunable component is independently brought to
/// the scheduled target, then weights are multiplied by their masks so
/// pruned entries read exactly zero.
pub fn gmp_step(state: &mut GmpState, params: &mut ModelParams) -> Result<()> {
    let target = state.schedule.sparsity_at_step(state.step);
    for path in params.prunable_paths() {
        let weights = params
            .get(&path)
            .ok_or_else(|| Error::InvalidInput(format!("missing prunable component {path}")))?
            .clone();
        let mask = state
            .masks
            .get_mut(&path)
            .ok_or_else(|| Error::InvalidInput(format!("missing mask for {path}")))?;
        magnitude_prune_component(&weights, mask, target)?;
    }
    state.masks.enforce(params);
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentSparsity {
    pub path: String,
    pub total: usize,
    pub masked: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SparsityReport {
    pub per_component: Vec<ComponentSparsity>,
    /// Masked fraction over the prunable (encoder) parameters.
    pub encoder_sparsity: f64,
    /// Masked fraction over all parameters, unpruned tensors included.
    pub total_sparsity: f64,
}

pub fn measure_sparsity(params: &ModelParams, masks: &MaskSet) -> SparsityReport {
    let mut per_component = Vec::new();
    let mut prunable_total = 0usize;
    let mut masked_total = 0usize;
    for path in params.prunable_paths() {
        let (total, masked) = match masks.get(&path) {
            Some(m) => (m.total(), m.masked_count()),
            None => (params.get(&path).map_or(0, Tensor::numel), 0),
        };
        per_component.push(ComponentSparsity {
            path: path.clone(),
            total,
            masked,
            sparsity: masked as f64 / total.max(1) as f64,
        });
        prunable_total += total;
        masked_total += masked;
    }
    let all_params: usize = params.iter().map(|(_, t)| t.numel()).sum();
    SparsityReport {
        per_component,
        encoder_sparsity: masked_total as f64 / prunable_total.max(1) as f64,
        total_sparsity: masked_total as f64 / all_params.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> PruningSchedule {
        PruningSchedule {
            initial_sparsity: 0.30,
            final_sparsity: 0.90,
            prune_start_step: 0,
            prune_end_step: 100,
            events_per_epoch: 100,
            interpolation: Interpolation::Cubic,
        }
    }

    #[test]
    fn schedule_endpoints_and_cubic_midpoint() {
        let s = schedule();
        assert_eq!(s.sparsity_at_step(0), 0.30);
        assert_eq!(s.sparsity_at_step(100), 0.90);
        assert_eq!(s.sparsity_at_step(1000), 0.90);
        // Plugging t = 0.5 into the cubic form.
        let mid = s.sparsity_at_step(50);
        assert!((mid - 0.825).abs() < 1e-12, "{mid}");
    }

    #[test]
    fn schedule_monotone_nondecreasing() {
        for interp in [Interpolation::Cubic, Interpolation::Linear] {
            let s = PruningSchedule {
                interpolation: interp,
                ..schedule()
            };
            let mut prev = 0.0;
            for step in 0..=120 {
                let v = s.sparsity_at_step(step);
                assert!(v >= prev - 1e-15);
                assert!((0.30..=0.90).contains(&v));
                prev = v;
            }
        }
    }

    #[test]
    fn event_steps_cover_both_endpoints() {
        let s = PruningSchedule {
            prune_start_step: 40,
            prune_end_step: 440,
            events_per_epoch: 100,
            ..schedule()
        };
        let events = s.event_steps(200);
        assert_eq!(*events.first().unwrap(), 40);
        assert_eq!(*events.last().unwrap(), 440);
        // 2 epochs at 100 events/epoch.
        assert_eq!(events.len(), 200);
        assert!(events.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.sparsity_at_step(events[0]), 0.30);
        assert_eq!(s.sparsity_at_step(*events.last().unwrap()), 0.90);
    }

    #[test]
    fn event_steps_dedupe_in_short_windows() {
        let s = PruningSchedule {
            prune_start_step: 0,
            prune_end_step: 10,
            events_per_epoch: 100,
            ..schedule()
        };
        let events = s.event_steps(5);
        assert!(events.len() <= 11);
        assert!(events.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*events.last().unwrap(), 10);
    }

    fn tensor_of(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn prune_component_drops_smallest_magnitudes() {
        let w = tensor_of(vec![0.1, -0.5, 0.3, 0.02]);
        let mut mask = SparsityMask::all_ones("w", vec![4]);
        magnitude_prune_component(&w, &mut mask, 0.5).unwrap();
        assert!(!mask.is_kept(0)); // 0.1 dropped
        assert!(mask.is_kept(1)); // -0.5 kept
        assert!(mask.is_kept(2)); // 0.3 kept
        assert!(!mask.is_kept(3)); // 0.02 dropped
    }

    #[test]
    fn prune_component_target_zero_keeps_all() {
        let w = tensor_of(vec![0.0, 1.0, 2.0]);
        let mut mask = SparsityMask::all_ones("w", vec![3]);
        magnitude_prune_component(&w, &mut mask, 0.0).unwrap();
        assert_eq!(mask.kept_count(), 3);
    }

    #[test]
    fn prune_component_idempotent_at_same_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = tensor_of((0..64).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut mask = SparsityMask::all_ones("w", vec![64]);
        magnitude_prune_component(&w, &mut mask, 0.45).unwrap();
        let snapshot = mask.clone();
        magnitude_prune_component(&w, &mut mask, 0.45).unwrap();
        assert_eq!(mask, snapshot);
    }

    #[test]
    fn prune_component_rejects_lower_target() {
        let w = tensor_of(vec![1.0, 2.0, 3.0, 4.0]);
        let mut mask = SparsityMask::all_ones("w", vec![4]);
        magnitude_prune_component(&w, &mut mask, 0.5).unwrap();
        let err = magnitude_prune_component(&w, &mut mask, 0.2).unwrap_err();
        assert!(matches!(err, Error::ScheduleMonotonicity { .. }));
    }

    #[test]
    fn prune_component_ties_break_by_lowest_index() {
        let w = tensor_of(vec![0.5, 0.5, 0.5, 0.5]);
        let mut mask = SparsityMask::all_ones("w", vec![4]);
        magnitude_prune_component(&w, &mut mask, 0.5).unwrap();
        assert!(!mask.is_kept(0) && !mask.is_kept(1));
        assert!(mask.is_kept(2) && mask.is_kept(3));
    }

    #[test]
    fn kept_set_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(1..100usize);
            let w = tensor_of((0..n).map(|_| rng.random_range(-2.0..2.0)).collect());
            let target: f64 = rng.random_range(0.0..1.0);
            let mut mask = SparsityMask::all_ones("w", vec![n]);
            magnitude_prune_component(&w, &mut mask, target).unwrap();

            // Exhaustive oracle: full sort by (|w|, index), keep the top slice.
            let keep_n = n - ((target * n as f64).ceil() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                w.data[a].abs().total_cmp(&w.data[b].abs()).then(a.cmp(&b))
            });
            let oracle_kept: std::collections::BTreeSet<usize> =
                order[n - keep_n..].iter().copied().collect();
            let got: std::collections::BTreeSet<usize> =
                mask.kept_indices().into_iter().collect();
            assert_eq!(got, oracle_kept);
        }
    }

    #[test]
    fn monotone_masks_across_increasing_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = tensor_of((0..256).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut mask = SparsityMask::all_ones("w", vec![256]);
        let mut prev_kept: std::collections::BTreeSet<usize> =
            mask.kept_indices().into_iter().collect();
        for target in [0.1, 0.3, 0.5, 0.77, 0.9] {
            magnitude_prune_component(&w, &mut mask, target).unwrap();
            let kept: std::collections::BTreeSet<usize> =
                mask.kept_indices().into_iter().collect();
            assert!(kept.is_subset(&prev_kept), "pruned entry returned at {target}");
            let sparsity = mask.sparsity();
            assert!((sparsity - target).abs() <= 1.0 / 256.0);
            prev_kept = kept;
        }
    }

    #[test]
    fn mask_apply_and_multiplier_agree() {
        let mut mask = SparsityMask::all_ones("w", vec![2, 4]);
        for idx in [1, 6] {
            mask.clear(idx);
        }
        assert_eq!(mask.kept_count(), 6);
        let mut data: Vec<f64> = (1..=8).map(f64::from).collect();
        let mult = mask.to_multiplier();
        let expect: Vec<f64> = data.iter().zip(&mult).map(|(d, m)| d * m).collect();
        mask.apply(&mut data);
        assert_eq!(data, expect);
        assert_eq!(data[1], 0.0);
        assert_eq!(data[6], 0.0);
    }

    #[test]
    fn packed_roundtrip_preserves_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mask = SparsityMask::all_ones("w", vec![9, 13]);
        for _ in 0..40 {
            mask.clear(rng.random_range(0..117));
        }
        let back = SparsityMask::from_packed_words(
            mask.component_path.clone(),
            mask.shape.clone(),
            mask.packed_words().to_vec(),
        )
        .unwrap();
        assert_eq!(back, mask);
    }
}
