//! The four robustness perturbations: Gaussian noise, rotation, scaling and
//! point dropping.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationKind {
    /// I.i.d. zero-mean noise of standard deviation `sigma` per coordinate.
    GaussianNoise { sigma: f64 },
    /// Rigid rotation about `axis` by an angle drawn uniformly from
    /// `degrees` (inclusive).
    Rotation { axis: Axis, degrees: (f64, f64) },
    /// All coordinates multiplied by one factor drawn uniformly from
    /// `factors` (inclusive).
    Scaling { factors: (f64, f64) },
    /// Removes a seeded uniform subset of `floor(ratio * count)` points.
    DropPoints { ratio: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub seed: u64,
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, seed: u64) -> Result<Self> {
        match &kind {
            PerturbationKind::GaussianNoise { sigma } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    return Err(Error::invalid(format!("sigma {sigma} must be >= 0")));
                }
            }
            PerturbationKind::Rotation { degrees, .. } => {
                if !(degrees.0.is_finite() && degrees.1.is_finite()) || degrees.0 > degrees.1 {
                    return Err(Error::invalid(format!(
                        "degree range {degrees:?} must be ordered and finite"
                    )));
                }
            }
            PerturbationKind::Scaling { factors } => {
                if !(factors.0.is_finite() && factors.1.is_finite())
                    || factors.0 <= 0.0
                    || factors.0 > factors.1
                {
                    return Err(Error::invalid(format!(
                        "scaling range {factors:?} must be positive and ordered"
                    )));
                }
            }
            PerturbationKind::DropPoints { ratio } => {
                if !ratio.is_finite() || !(0.0..1.0).contains(ratio) {
                    return Err(Error::invalid(format!("drop ratio {ratio} must be in [0, 1)")));
                }
            }
        }
        Ok(Self { kind, seed })
    }

    /// A short stable name used as an evaluation-condition label.
    pub fn label(&self) -> String {
        match &self.kind {
            PerturbationKind::GaussianNoise { sigma } => format!("gaussian_{sigma}"),
            PerturbationKind::Rotation { axis, degrees } => {
                format!("rotation_{axis:?}_{}_{}", degrees.0, degrees.1).to_lowercase()
            }
            PerturbationKind::Scaling { factors } => format!("scaling_{}_{}", factors.0, factors.1),
            PerturbationKind::DropPoints { ratio } => format!("drop_{ratio}"),
        }
    }
}

fn rotation_matrix(axis: Axis, theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    match axis {
        Axis::X => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        Axis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        Axis::Z => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

pub(crate) fn rotate(points: &mut [[f64; 3]], axis: Axis, theta: f64) {
    let m = rotation_matrix(axis, theta);
    for p in points.iter_mut() {
        let q = [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ];
        *p = q;
    }
}

/// Applies a perturbation; pure in (cloud, perturbation) including the seed.
pub fn perturb(cloud: &PointCloud, p: &Perturbation) -> PointCloud {
    let mut rng = seeds::rng(p.seed);
    let label = cloud.label();
    let mut points = cloud.points().to_vec();

    match &p.kind {
        PerturbationKind::GaussianNoise { sigma } => {
            if *sigma > 0.0 {
                let normal = Normal::new(0.0, *sigma).expect("validated sigma");
                for pt in points.iter_mut() {
                    for c in pt.iter_mut() {
                        *c += normal.sample(&mut rng);
                    }
                }
            }
        }
        PerturbationKind::Rotation { axis, degrees } => {
            let deg = rng.gen_range(degrees.0..=degrees.1);
            rotate(&mut points, *axis, deg.to_radians());
        }
        PerturbationKind::Scaling { factors } => {
            let s = rng.gen_range(factors.0..=factors.1);
            for pt in points.iter_mut() {
                for c in pt.iter_mut() {
                    *c *= s;
                }
            }
        }
        PerturbationKind::DropPoints { ratio } => {
            let n = points.len();
            let drop = ((ratio * n as f64).floor() as usize).min(n.saturating_sub(1));
            if drop > 0 {
                let mut dropped = vec![false; n];
                for i in rand::seq::index::sample(&mut rng, n, drop) {
                    dropped[i] = true;
                }
                points = points
                    .into_iter()
                    .zip(dropped)
                    .filter_map(|(pt, d)| (!d).then_some(pt))
                    .collect();
            }
        }
    }

    PointCloud::new(points, label).expect("perturbation preserves validity")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist2;
    use crate::geometry::{synth_shape, ShapeKind};

    #[test]
    fn zero_sigma_noise_is_identity() {
        let c = synth_shape(ShapeKind::Cube, 50, 1).unwrap();
        let p = Perturbation::new(PerturbationKind::GaussianNoise { sigma: 0.0 }, 3).unwrap();
        assert_eq!(perturb(&c, &p), c);
    }

    #[test]
    fn rotation_z_90_degrees_maps_x_to_y() {
        let c = PointCloud::new(vec![[1.0, 0.0, 0.0]], None).unwrap();
        let p = Perturbation::new(
            PerturbationKind::Rotation {
                axis: Axis::Z,
                degrees: (90.0, 90.0),
            },
            0,
        )
        .unwrap();
        let r = perturb(&c, &p);
        let q = r.points()[0];
        assert!((q[0]).abs() < 1e-12, "{q:?}");
        assert!((q[1] - 1.0).abs() < 1e-12, "{q:?}");
        assert!((q[2]).abs() < 1e-12, "{q:?}");
    }

    #[test]
    fn drop_ratio_removes_exact_count_of_members() {
        let c = synth_shape(ShapeKind::Sphere, 1000, 2).unwrap();
        let p = Perturbation::new(PerturbationKind::DropPoints { ratio: 0.2 }, 7).unwrap();
        let r = perturb(&c, &p);
        assert_eq!(r.len(), 800);
        let originals: std::collections::HashSet<_> =
            c.points().iter().map(|p| p.map(f64::to_bits)).collect();
        for pt in r.points() {
            assert!(originals.contains(&pt.map(f64::to_bits)));
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let c = synth_shape(ShapeKind::Torus, 60, 4).unwrap();
        let p = Perturbation::new(
            PerturbationKind::Rotation {
                axis: Axis::Y,
                degrees: (-30.0, 30.0),
            },
            11,
        )
        .unwrap();
        let r = perturb(&c, &p);
        for i in 0..c.len() {
            for j in (i + 1)..c.len() {
                let before = dist2(&c.points()[i], &c.points()[j]).sqrt();
                let after = dist2(&r.points()[i], &r.points()[j]).sqrt();
                assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scaling_multiplies_pairwise_distances() {
        let c = synth_shape(ShapeKind::Cube, 40, 5).unwrap();
        let p = Perturbation::new(PerturbationKind::Scaling { factors: (1.3, 1.3) }, 1).unwrap();
        let r = perturb(&c, &p);
        for i in 0..c.len() {
            for j in (i + 1)..c.len() {
                let before = dist2(&c.points()[i], &c.points()[j]).sqrt();
                let after = dist2(&r.points()[i], &r.points()[j]).sqrt();
                assert!((after - 1.3 * before).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perturb_is_pure() {
        let c = synth_shape(ShapeKind::Sphere, 128, 6).unwrap();
        for kind in [
            PerturbationKind::GaussianNoise { sigma: 0.05 },
            PerturbationKind::Rotation {
                axis: Axis::X,
                degrees: (-30.0, 30.0),
            },
            PerturbationKind::Scaling { factors: (0.5, 1.5) },
            PerturbationKind::DropPoints { ratio: 0.6 },
        ] {
            let p = Perturbation::new(kind, 99).unwrap();
            assert_eq!(perturb(&c, &p), perturb(&c, &p));
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(Perturbation::new(PerturbationKind::GaussianNoise { sigma: -0.1 }, 0).is_err());
        assert!(Perturbation::new(PerturbationKind::DropPoints { ratio: 1.0 }, 0).is_err());
        assert!(Perturbation::new(PerturbationKind::Scaling { factors: (0.0, 1.0) }, 0).is_err());
        assert!(Perturbation::new(
            PerturbationKind::Rotation {
                axis: Axis::X,
                degrees: (30.0, -30.0)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn labels_are_preserved() {
        let c = synth_shape(ShapeKind::Cube, 30, 8).unwrap();
        let p = Perturbation::new(PerturbationKind::DropPoints { ratio: 0.5 }, 1).unwrap();
        assert_eq!(perturb(&c, &p).label(), c.label());
    }
}
