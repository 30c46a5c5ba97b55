//! Patch-token and positional embeddings.

use rand_chacha::ChaCha8Rng;

use super::linear::Linear;
use crate::autodiff::{Parameter, Tensor};
use crate::error::Result;
use crate::geometry::PatchSet;

/// Shared per-point two-layer map followed by a max-pool over each patch:
/// a miniature PointNet producing one d-vector per patch.
pub struct TokenEmbed {
    l1: Linear,
    l2: Linear,
}

impl TokenEmbed {
    pub fn new(name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<TokenEmbed> {
        Ok(TokenEmbed {
            l1: Linear::new(&format!("{name}.l1"), 3, dim, rng)?,
            l2: Linear::new(&format!("{name}.l2"), dim, dim, rng)?,
        })
    }

    /// `locals` is `(n_patches * k, 3)`, blocked by patch; returns `(n_patches, d)`.
    pub fn forward(&self, locals: &Tensor, k: usize) -> Result<Tensor> {
        let h = self.l1.forward(locals)?.relu();
        self.l2.forward(&h)?.segment_max_rows(k)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.l1.collect_params(out);
        self.l2.collect_params(out);
    }
}

/// Two-layer map of each patch center's 3D coordinates.
pub struct PosEmbed {
    l1: Linear,
    l2: Linear,
}

impl PosEmbed {
    pub fn new(name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<PosEmbed> {
        Ok(PosEmbed {
            l1: Linear::new(&format!("{name}.l1"), 3, dim, rng)?,
            l2: Linear::new(&format!("{name}.l2"), dim, dim, rng)?,
        })
    }

    /// `centers` is `(n_patches, 3)`; returns `(n_patches, d)`.
    pub fn forward(&self, centers: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(centers)?.gelu())
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.l1.collect_params(out);
        self.l2.collect_params(out);
    }
}

pub(crate) fn locals_tensor(patches: &PatchSet) -> Result<Tensor> {
    let n = patches.n_patches();
    let k = patches.patch_size();
    let mut flat = Vec::with_capacity(n * k * 3);
    for patch in &patches.local_coords {
        for p in patch {
            flat.extend_from_slice(p);
        }
    }
    Tensor::constant(vec![n * k, 3], flat)
}

pub(crate) fn centers_tensor(patches: &PatchSet) -> Result<Tensor> {
    let n = patches.n_patches();
    let mut flat = Vec::with_capacity(n * 3);
    for c in &patches.center_coords {
        flat.extend_from_slice(c);
    }
    Tensor::constant(vec![n, 3], flat)
}
