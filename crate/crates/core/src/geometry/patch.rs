//! Farthest-point sampling and k-nearest-neighbor patch grouping.

use rand::Rng;

use super::{dist2, PointCloud};
use crate::error::{Error, Result};
use crate::seeds;

/// Center indices plus per-patch neighbor lists and center-relative
/// coordinates.
///
/// For every patch `p` and slot `j`:
/// `local_coords[p][j] == points[neighbor_indices[p][j]] - points[center_indices[p]]`
/// and `center_coords[p] == points[center_indices[p]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub center_indices: Vec<usize>,
    pub center_coords: Vec<[f64; 3]>,
    pub neighbor_indices: Vec<Vec<usize>>,
    pub local_coords: Vec<Vec<[f64; 3]>>,
}

impl PatchSet {
    pub fn n_patches(&self) -> usize {
        self.center_indices.len()
    }

    pub fn patch_size(&self) -> usize {
        self.neighbor_indices.first().map_or(0, Vec::len)
    }
}

/// Greedy farthest-point sampling; the first center is drawn uniformly from
/// the seed.
///
/// Each subsequent pick maximizes the minimum distance to the points already
/// chosen, ties broken by lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, n_centers: usize, seed: u64) -> Result<Vec<usize>> {
    let first = seeds::rng(seed).gen_range(0..cloud.len());
    farthest_point_sample_from(cloud, n_centers, first)
}

/// Farthest-point sampling with an explicitly chosen first center.
pub fn farthest_point_sample_from(
    cloud: &PointCloud,
    n_centers: usize,
    first: usize,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    if n_centers == 0 || n_centers > n {
        return Err(Error::invalid(format!(
            "n_centers {n_centers} out of range 1..={n}"
        )));
    }
    if first >= n {
        return Err(Error::invalid(format!("first index {first} out of range")));
    }

    let pts = cloud.points();
    let mut chosen = Vec::with_capacity(n_centers);
    chosen.push(first);

    // min squared distance from each point to the chosen set
    let mut min_d2: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[first])).collect();

    while chosen.len() < n_centers {
        let mut best = 0;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        chosen.push(best);
        for (i, d2) in min_d2.iter_mut().enumerate() {
            let nd = dist2(&pts[i], &pts[best]);
            if nd < *d2 {
                *d2 = nd;
            }
        }
    }
    Ok(chosen)
}

/// Groups the `k` nearest neighbors of each center (the center itself is at
/// distance zero and always included), ties broken by lowest index.
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], k: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k {k} out of range 1..={n}")));
    }
    for &c in center_indices {
        if c >= n {
            return Err(Error::invalid(format!("center index {c} out of range")));
        }
    }

    let pts = cloud.points();
    let mut neighbor_indices = Vec::with_capacity(center_indices.len());
    let mut local_coords = Vec::with_capacity(center_indices.len());

    for &c in center_indices {
        let center = pts[c];
        let mut order: Vec<(f64, usize)> =
            pts.iter().enumerate().map(|(i, p)| (dist2(p, &center), i)).collect();
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let idx: Vec<usize> = order[..k].iter().map(|&(_, i)| i).collect();
        let local: Vec<[f64; 3]> = idx
            .iter()
            .map(|&i| {
                [
                    pts[i][0] - center[0],
                    pts[i][1] - center[1],
                    pts[i][2] - center[2],
                ]
            })
            .collect();
        neighbor_indices.push(idx);
        local_coords.push(local);
    }

    Ok(PatchSet {
        center_indices: center_indices.to_vec(),
        center_coords: center_indices.iter().map(|&c| pts[c]).collect(),
        neighbor_indices,
        local_coords,
    })
}

/// FPS followed by KNN grouping; the standard patchification path.
pub fn patchify(cloud: &PointCloud, n_patches: usize, k: usize, seed: u64) -> Result<PatchSet> {
    let centers = farthest_point_sample(cloud, n_patches, seed)?;
    knn_group(cloud, &centers, k)
}
