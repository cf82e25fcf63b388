//! Knowledge distillation loss: a tempered teacher-matching KL term
//! blended with the hard-label cross entropy.
//!
//! `L = hardness * T^2 * KL(softmax(teacher/T) || softmax(student/T))
//!    + (1 - hardness) * cross_entropy(student, targets)`
//!
//! Hardness weights the distillation term; at hardness 1 the teacher
//! dominates. The `T^2` factor keeps gradient magnitude comparable across
//! temperatures. Both terms average over the same non-ignored rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub hardness: f64,
    pub temperature: f64,
}

impl KdConfig {
    pub fn new(hardness: f64, temperature: f64) -> Result<Self> {
        let cfg = KdConfig { hardness, temperature };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretraining setting: hardness 0.5, temperature 2.
    pub fn pretrain() -> Self {
        KdConfig { hardness: 0.5, temperature: 2.0 }
    }

    /// Data-size ablation setting: hardness 0.8, temperature 2.
    pub fn data_size_ablation() -> Self {
        KdConfig { hardness: 0.8, temperature: 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hardness) {
            return Err(Error::Config(format!(
                "kd hardness {} outside [0, 1]",
                self.hardness
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "kd temperature {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Combined distillation loss over `[n, c]` logits. Rows whose target is
/// the ignore index contribute to neither term. The teacher carries no
/// gradient. At hardness 0 this is exactly the plain cross entropy.
pub fn distill_loss(
    graph: &mut Graph,
    student_logits: NodeId,
    teacher_logits: &Tensor,
    hard_targets: &[usize],
    ignore_index: Option<usize>,
    cfg: &KdConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if cfg.hardness == 0.0 {
        return graph.cross_entropy(student_logits, hard_targets, ignore_index);
    }
    if graph.shape(student_logits) != teacher_logits.shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            lhs: graph.shape(student_logits).to_vec(),
            rhs: teacher_logits.shape.clone(),
        });
    }
    let active: Vec<bool> = hard_targets
        .iter()
        .map(|&t| Some(t) != ignore_index)
        .collect();
    let teacher = graph.constant(teacher_logits.shape.clone(), teacher_logits.data.clone());
    let kl = graph.kl_vs_teacher(student_logits, teacher, &active, cfg.temperature)?;
    let soft = graph.scale(kl, cfg.hardness * cfg.temperature * cfg.temperature);
    if cfg.hardness == 1.0 {
        return Ok(soft);
    }
    let ce = graph.cross_entropy(student_logits, hard_targets, ignore_index)?;
    let hard = graph.scale(ce, 1.0 - cfg.hardness);
    graph.add(soft, hard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf_logits(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let t = Tensor::new(shape, data).unwrap().with_grad();
        g.leaf(&t)
    }

    #[test]
    fn hardness_zero_is_plain_cross_entropy() {
        let data = vec![0.4, -0.8, 1.1, 0.0, 0.3, -0.2, 0.9, 0.5];
        let teacher = Tensor::new(vec![2, 4], vec![1.0; 8]).unwrap();
        let cfg = KdConfig::new(0.0, 2.0).unwrap();
        let mut g = Graph::new();
        let s = leaf_logits(&mut g, vec![2, 4], data.clone());
        let kd = distill_loss(&mut g, s, &teacher, &[1, 2], None, &cfg).unwrap();
        let ce = g.cross_entropy(s, &[1, 2], None).unwrap();
        assert_eq!(g.scalar_value(kd), g.scalar_value(ce));
    }

    #[test]
    fn identical_logits_at_hardness_one_give_zero_loss() {
        let data = vec![0.4, -0.8, 1.1, 0.0, 0.3, -0.2, 0.9, 0.5];
        let teacher = Tensor::new(vec![2, 4], data.clone()).unwrap();
        let cfg = KdConfig::new(1.0, 2.0).unwrap();
        let mut g = Graph::new();
        let s = leaf_logits(&mut g, vec![2, 4], data);
        let kd = distill_loss(&mut g, s, &teacher, &[0, 3], None, &cfg).unwrap();
        assert_eq!(g.scalar_value(kd), 0.0);
    }

    #[test]
    fn random_case_matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sdata: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tdata: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets = [3usize, 0];
        let temp = 2.0;
        let hardness = 0.5;

        // Direct softmax/KL oracle.
        let softmax = |row: &[f64]| -> Vec<f64> {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(|v| v.exp() / z).collect()
        };
        let mut kl = 0.0;
        let mut ce = 0.0;
        for r in 0..2 {
            let s_row: Vec<f64> = sdata[r * 4..(r + 1) * 4].iter().map(|v| v / temp).collect();
            let t_row: Vec<f64> = tdata[r * 4..(r + 1) * 4].iter().map(|v| v / temp).collect();
            let p = softmax(&t_row);
            let q = softmax(&s_row);
            for c in 0..4 {
                kl += p[c] * (p[c].ln() - q[c].ln());
            }
            let full = softmax(&sdata[r * 4..(r + 1) * 4]);
            ce -= full[targets[r]].ln();
        }
        kl /= 2.0;
        ce /= 2.0;
        let expect = hardness * temp * temp * kl + (1.0 - hardness) * ce;

        let teacher = Tensor::new(vec![2, 4], tdata).unwrap();
        let cfg = KdConfig::new(hardness, temp).unwrap();
        let mut g = Graph::new();
        let s = leaf_logits(&mut g, vec![2, 4], sdata);
        let kd = distill_loss(&mut g, s, &teacher, &targets, None, &cfg).unwrap();
        assert!((g.scalar_value(kd) - expect).abs() < 1e-10);
    }

    #[test]
    fn invariant_under_constant_shift_of_teacher_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sdata: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tdata: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut shifted = tdata.clone();
        for v in shifted[4..8].iter_mut() {
            *v += 7.5;
        }
        let cfg = KdConfig::new(0.7, 2.0).unwrap();
        let targets = [1usize, 2, 0];

        let mut g = Graph::new();
        let s = leaf_logits(&mut g, vec![3, 4], sdata.clone());
        let a = distill_loss(
            &mut g,
            s,
            &Tensor::new(vec![3, 4], tdata).unwrap(),
            &targets,
            None,
            &cfg,
        )
        .unwrap();
        let b = distill_loss(
            &mut g,
            s,
            &Tensor::new(vec![3, 4], shifted).unwrap(),
            &targets,
            None,
            &cfg,
        )
        .unwrap();
        assert!((g.scalar_value(a) - g.scalar_value(b)).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sdata: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let tdata: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let teacher = Tensor::new(vec![2, 4], tdata).unwrap();
        let cfg = KdConfig::new(0.5, 2.0).unwrap();
        let targets = [2usize, 1];

        let loss_of = |data: &[f64]| -> f64 {
            let mut g = Graph::new();
            let s = leaf_logits(&mut g, vec![2, 4], data.to_vec());
            let l = distill_loss(&mut g, s, &teacher, &targets, None, &cfg).unwrap();
            g.scalar_value(l)
        };

        let mut g = Graph::new();
        let s = leaf_logits(&mut g, vec![2, 4], sdata.clone());
        let l = distill_loss(&mut g, s, &teacher, &targets, None, &cfg).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad(s).unwrap().to_vec();

        let h = 1e-5;
        for i in 0..8 {
            let mut plus = sdata.clone();
            plus[i] += h;
            let mut minus = sdata.clone();
            minus[i] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let tol = f64::max(1e-7, 1e-4 * f64::max(analytic[i].abs(), numeric.abs()));
            assert!(
                (analytic[i] - numeric).abs() <= tol,
                "grad[{i}]: {} vs {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn invalid_hardness_is_config_error() {
        assert!(KdConfig::new(-0.1, 2.0).is_err());
        assert!(KdConfig::new(1.1, 2.0).is_err());
        assert!(KdConfig::new(0.5, 0.0).is_err());
    }

    #[test]
    fn ignored_rows_contribute_to_neither_term() {
        let sdata = vec![0.2, -0.4, 0.9, 0.1, 5.0, -3.0, 2.0, 0.0];
        let tdata = vec![0.1, 0.6, -0.2, 0.4, -1.0, 1.0, 0.5, 0.25];
        let cfg = KdConfig::new(0.5, 2.0).unwrap();

        // Row 1 ignored: loss must equal the single-row version.
        let mut g = Graph::new();
        let s = leaf_logits(&mut g, vec![2, 4], sdata.clone());
        let both = distill_loss(
            &mut g,
            s,
            &Tensor::new(vec![2, 4], tdata.clone()).unwrap(),
            &[2, 9],
            Some(9),
            &cfg,
        )
        .unwrap();
        let mut g1 = Graph::new();
        let s1 = leaf_logits(&mut g1, vec![1, 4], sdata[..4].to_vec());
        let single = distill_loss(
            &mut g1,
            s1,
            &Tensor::new(vec![1, 4], tdata[..4].to_vec()).unwrap(),
            &[2],
            Some(9),
            &cfg,
        )
        .unwrap();
        assert!((g.scalar_value(both) - g1.scalar_value(single)).abs() < 1e-12);
    }
}
