//! Training objectives: the symmetric contrastive loss over projected
//! global features, the Chamfer reconstruction loss, and their weighted
//! combination.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tensor};
use crate::encoder::Linear;
use crate::error::{Error, Result};

/// Scalar snapshot of one step's losses. `total == origin + lambda * contra`
/// exactly as computed in f64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub origin: f64,
    pub contra: f64,
    pub total: f64,
    pub lambda: f64,
    pub tau_sim: f64,
}

/// Two-layer head with a ReLU between, followed by exact L2 row
/// normalization (1e-12 added to the norm so zero rows stay finite).
pub struct ProjectionHead {
    l1: Linear,
    l2: Linear,
    /// Test hook: a purely linear head when false.
    pub nonlinearity: bool,
}

impl ProjectionHead {
    pub fn new(name: &str, dim: usize, proj_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ProjectionHead {
            l1: Linear::new(&format!("{name}.l1"), dim, dim, rng)?,
            l2: Linear::new(&format!("{name}.l2"), dim, proj_dim, rng)?,
            nonlinearity: true,
        })
    }

    /// Projects a `(b, d)` batch of features to unit-norm `(b, d_proj)` rows.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        if features.ndim() != 2 || features.shape()[0] == 0 {
            return Err(Error::invalid(format!(
                "project expects a non-empty (b, d) batch, got {:?}",
                features.shape()
            )));
        }
        let h = self.l1.forward(features)?;
        let h = if self.nonlinearity { h.relu() } else { h };
        self.l2.forward(&h)?.l2_normalize_rows(1e-12)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.l1.collect_params(out);
        self.l2.collect_params(out);
    }
}

/// Symmetric InfoNCE between two unit-row feature matrices.
///
/// Both directions of the cross-entropy over cosine-similarity logits are
/// averaged, each stabilized through log-softmax; positives sit on the
/// diagonal.
pub fn contrastive_loss(hm: &Tensor, hs: &Tensor, tau_sim: f64) -> Result<Tensor> {
    if !(tau_sim > 0.0) {
        return Err(Error::invalid(format!("tau_sim {tau_sim} must be > 0")));
    }
    if hm.ndim() != 2 || hs.ndim() != 2 || hm.shape() != hs.shape() {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            lhs: hm.shape().to_vec(),
            rhs: hs.shape().to_vec(),
        });
    }
    let b = hm.shape()[0];
    if b == 0 {
        return Err(Error::invalid("contrastive_loss needs a non-empty batch"));
    }
    for (name, t) in [("first", hm), ("second", hs)] {
        let norms = t.l2_norm_rows()?;
        for (i, &n) in norms.data().iter().enumerate() {
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "{name} input row {i} has norm {n}, expected 1"
                )));
            }
        }
    }

    let logits_m = hm.matmul(&hs.transpose()?)?.scale(1.0 / tau_sim);
    let logits_s = hs.matmul(&hm.transpose()?)?.scale(1.0 / tau_sim);
    let diag_m = logits_m.row_log_softmax()?.take_diag()?.sum()?;
    let diag_s = logits_s.row_log_softmax()?.take_diag()?.sum()?;
    Ok(diag_m.add(&diag_s)?.scale(-1.0 / (2.0 * b as f64)))
}

/// Symmetric mean squared nearest-neighbor distance between point sets,
/// differentiable in both arguments.
pub fn chamfer_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pred.chamfer(target)
}

/// `origin + lambda * contra`.
pub fn total_loss(origin: &Tensor, contra: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda {lambda} must be >= 0")));
    }
    origin.add(&contra.scale(lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::seeds;
    use rand::Rng;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor {
        let normalized: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Tensor::from_rows(&normalized).unwrap()
    }

    fn random_unit_rows(b: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeds::rng(seed);
        unit_rows(
            (0..b)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        )
    }

    /// Naive double-loop evaluation with no log-sum-exp tricks.
    fn contrastive_oracle(hm: &[Vec<f64>], hs: &[Vec<f64>], tau: f64) -> f64 {
        let b = hm.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut acc = 0.0;
        for i in 0..b {
            let mut den_m = 0.0;
            let mut den_s = 0.0;
            for j in 0..b {
                den_m += (dot(&hm[i], &hs[j]) / tau).exp();
                den_s += (dot(&hs[i], &hm[j]) / tau).exp();
            }
            acc += ((dot(&hm[i], &hs[i]) / tau).exp() / den_m).ln();
            acc += ((dot(&hs[i], &hm[i]) / tau).exp() / den_s).ln();
        }
        -acc / (2.0 * b as f64)
    }

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let v = t.value();
        (0..r).map(|i| v[i * c..(i + 1) * c].to_vec()).collect()
    }

    #[test]
    fn single_element_batch_has_zero_loss() {
        let h = unit_rows(vec![vec![0.3, -0.4, 0.5]]);
        let loss = contrastive_loss(&h, &h, 0.1).unwrap().item().unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn orthonormal_pair_matches_closed_form() {
        let hm = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let loss = contrastive_loss(&hm, &hm, 1.0).unwrap().item().unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
        assert!((loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn matches_naive_double_loop_oracle() {
        let hm = random_unit_rows(5, 7, 1);
        let hs = random_unit_rows(5, 7, 2);
        for tau in [1.0, 0.3, 0.1, 0.05] {
            let fast = contrastive_loss(&hm, &hs, tau).unwrap().item().unwrap();
            let slow = contrastive_oracle(&to_rows(&hm), &to_rows(&hs), tau);
            let rel = (fast - slow).abs() / slow.abs().max(1e-12);
            assert!(rel < 1e-9, "tau {tau}: {fast} vs {slow}");
        }
    }

    #[test]
    fn symmetric_under_branch_swap() {
        let hm = random_unit_rows(4, 6, 3);
        let hs = random_unit_rows(4, 6, 4);
        let a = contrastive_loss(&hm, &hs, 0.2).unwrap().item().unwrap();
        let b = contrastive_loss(&hs, &hm, 0.2).unwrap().item().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invariant_under_simultaneous_row_permutation() {
        let hm = random_unit_rows(5, 4, 5);
        let hs = random_unit_rows(5, 4, 6);
        let perm = [3usize, 0, 4, 1, 2];
        let hm_p = hm.gather_rows(&perm).unwrap();
        let hs_p = hs.gather_rows(&perm).unwrap();
        let a = contrastive_loss(&hm, &hs, 0.15).unwrap().item().unwrap();
        let b = contrastive_loss(&hm_p, &hs_p, 0.15).unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn aligned_features_beat_shuffled_features() {
        let mut rng = seeds::rng(8);
        for trial in 0..100u64 {
            let h = random_unit_rows(6, 5, 100 + trial);
            let aligned = contrastive_loss(&h, &h, 0.2).unwrap().item().unwrap();
            let mut perm: Vec<usize> = (0..6).collect();
            // random non-identity shuffle of one side
            loop {
                use rand::seq::SliceRandom;
                perm.shuffle(&mut rng);
                if perm.iter().enumerate().any(|(i, &p)| i != p) {
                    break;
                }
            }
            let shuffled = contrastive_loss(&h.gather_rows(&perm).unwrap(), &h, 0.2)
                .unwrap()
                .item()
                .unwrap();
            assert!(aligned <= shuffled, "trial {trial}: {aligned} > {shuffled}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let h = random_unit_rows(2, 3, 9);
        assert!(contrastive_loss(&h, &h, 0.0).is_err());
        assert!(contrastive_loss(&h, &h, -0.5).is_err());
        let not_unit = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert!(contrastive_loss(&not_unit, &h, 0.1).is_err());
        let other = random_unit_rows(3, 3, 10);
        assert!(contrastive_loss(&h, &other, 0.1).is_err());
    }

    #[test]
    fn contrastive_gradient_passes_finite_differences() {
        let hm_raw = Tensor::param(vec![3, 4], seeds_vec(12, 12)).unwrap();
        let hs_raw = Tensor::param(vec![3, 4], seeds_vec(13, 12)).unwrap();
        let build = || {
            let hm = hm_raw.l2_normalize_rows(1e-12)?;
            let hs = hs_raw.l2_normalize_rows(1e-12)?;
            contrastive_loss(&hm, &hs, 0.2)
        };
        let err =
            finite_diff_check(build, &[hm_raw.clone(), hs_raw.clone()], 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    fn seeds_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = seeds::rng(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn chamfer_examples() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(chamfer_loss(&a, &b).unwrap().item().unwrap(), 2.0);
        assert_eq!(chamfer_loss(&a, &a).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn chamfer_zero_iff_equal_as_sets() {
        let a = Tensor::from_rows(&[vec![0.0; 3], vec![1.0, 0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0; 3]]).unwrap();
        assert_eq!(chamfer_loss(&a, &b).unwrap().item().unwrap(), 0.0);
        let c = Tensor::from_rows(&[vec![0.0; 3], vec![1.0, 0.0, 0.1]]).unwrap();
        assert!(chamfer_loss(&a, &c).unwrap().item().unwrap() > 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let origin = Tensor::scalar(1.0);
        let contra = Tensor::scalar(0.5);
        assert_eq!(total_loss(&origin, &contra, 0.0).unwrap().item().unwrap(), 1.0);
        assert_eq!(total_loss(&origin, &contra, 0.6).unwrap().item().unwrap(), 1.3);
        assert!(total_loss(&origin, &contra, -1.0).is_err());
    }

    #[test]
    fn total_loss_gradient_in_contra_is_lambda() {
        let contra = Tensor::param(vec![], vec![0.37]).unwrap();
        let origin = Tensor::scalar(0.9);
        let lambda = 0.6;
        let err = finite_diff_check(
            || total_loss(&origin, &contra, lambda),
            &[contra.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "max rel err {err}");
        contra.zero_grad();
        let loss = total_loss(&origin, &contra, lambda).unwrap();
        loss.backward().unwrap();
        assert_eq!(contra.grad().unwrap(), vec![lambda]);
    }

    #[test]
    fn projection_rows_are_unit_norm() {
        let mut rng = seeds::rng(20);
        let head = ProjectionHead::new("proj", 6, 4, &mut rng).unwrap();
        let x = Tensor::constant(vec![5, 6], seeds_vec(21, 30)).unwrap();
        let norms = head.project(&x).unwrap().l2_norm_rows().unwrap();
        for &n in norms.data().iter() {
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_head_direction_is_scale_invariant() {
        let mut rng = seeds::rng(22);
        let mut head = ProjectionHead::new("proj", 4, 4, &mut rng).unwrap();
        head.nonlinearity = false;
        // kill the biases so the head is exactly linear
        let mut params = Vec::new();
        head.collect_params(&mut params);
        for p in &params {
            if p.name.ends_with(".bias") {
                p.tensor.set_data(&vec![0.0; p.tensor.len()]).unwrap();
            }
        }
        let x = Tensor::constant(vec![1, 4], vec![0.3, -0.7, 0.2, 0.9]).unwrap();
        let a = head.project(&x).unwrap().value();
        let b = head.project(&x.scale(10.0)).unwrap().value();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn projection_gradient_passes_finite_differences() {
        let mut rng = seeds::rng(23);
        let head = ProjectionHead::new("proj", 5, 3, &mut rng).unwrap();
        let x = Tensor::constant(vec![4, 5], seeds_vec(24, 20)).unwrap();
        let mut params = Vec::new();
        head.collect_params(&mut params);
        let tensors: Vec<Tensor> = params.iter().map(|p| p.tensor.clone()).collect();
        let target = Tensor::constant(vec![4, 3], seeds_vec(25, 12)).unwrap();
        let build = || {
            let h = head.project(&x)?;
            h.mul(&target)?.sum()
        };
        let err = finite_diff_check(build, &tensors, 1e-5).unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }
}
