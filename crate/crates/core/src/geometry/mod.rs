//! Point-cloud construction, patchification, perturbations and synthetic
//! shapes.

mod patch;
mod perturb;
mod synth;

pub use patch::{farthest_point_sample, farthest_point_sample_from, knn_group, patchify, PatchSet};
pub use perturb::{perturb, Axis, Perturbation, PerturbationKind};
pub use synth::{synth_shape, ShapeKind};

use crate::error::{Error, Result};

/// An ordered list of 3D points with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    label: Option<u32>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty inputs and non-finite coordinates.
    pub fn new(points: Vec<[f64; 3]>, label: Option<u32>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid(format!(
                    "point {i} has non-finite coordinate {p:?}"
                )));
            }
        }
        Ok(Self { points, label })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
