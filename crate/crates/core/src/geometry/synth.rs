//! Synthetic shape generation for desk-scale experiments.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::seeds;

/// The three-class synthetic shape family. Labels are stable: sphere 0,
/// cube 1, torus 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
}

impl ShapeKind {
    pub fn label(self) -> u32 {
        match self {
            ShapeKind::Sphere => 0,
            ShapeKind::Cube => 1,
            ShapeKind::Torus => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
        }
    }
}

// Torus dimensions: ring radius + tube radius = 1 so the surface is
// inscribed in the unit ball like the other shapes.
const TORUS_RING: f64 = 0.75;
const TORUS_TUBE: f64 = 0.25;

/// Samples `n_points` uniformly on the named surface inscribed in the unit
/// ball, labeled by kind; deterministic given the seed.
pub fn synth_shape(kind: ShapeKind, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points == 0 {
        return Err(Error::invalid("n_points must be >= 1"));
    }
    let mut rng = seeds::rng(seed);
    let mut points = Vec::with_capacity(n_points);

    match kind {
        ShapeKind::Sphere => {
            for _ in 0..n_points {
                // normalized Gaussian triple is uniform on the sphere
                loop {
                    let v: [f64; 3] = [
                        rand_distr::StandardNormal.sample(&mut rng),
                        rand_distr::StandardNormal.sample(&mut rng),
                        rand_distr::StandardNormal.sample(&mut rng),
                    ];
                    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if norm > 1e-9 {
                        points.push([v[0] / norm, v[1] / norm, v[2] / norm]);
                        break;
                    }
                }
            }
        }
        ShapeKind::Cube => {
            // half-side chosen so cube vertices touch the unit sphere
            let a = 1.0 / 3f64.sqrt();
            for _ in 0..n_points {
                let face = rng.gen_range(0..6u8);
                let u = rng.gen_range(-a..=a);
                let v = rng.gen_range(-a..=a);
                points.push(match face {
                    0 => [a, u, v],
                    1 => [-a, u, v],
                    2 => [u, a, v],
                    3 => [u, -a, v],
                    4 => [u, v, a],
                    _ => [u, v, -a],
                });
            }
        }
        ShapeKind::Torus => {
            let (big_r, small_r) = (TORUS_RING, TORUS_TUBE);
            for _ in 0..n_points {
                let u = rng.gen_range(0.0..std::f64::consts::TAU);
                // rejection on the tube angle corrects for the area element
                let v = loop {
                    let v = rng.gen_range(0.0..std::f64::consts::TAU);
                    let accept = (big_r + small_r * v.cos()) / (big_r + small_r);
                    if rng.gen::<f64>() <= accept {
                        break v;
                    }
                };
                let ring = big_r + small_r * v.cos();
                points.push([ring * u.cos(), ring * u.sin(), small_r * v.sin()]);
            }
        }
    }

    PointCloud::new(points, Some(kind.label()))
}
