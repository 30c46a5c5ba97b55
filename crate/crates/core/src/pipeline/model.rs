//! Model assembly: encoder, mask token, projection head and reconstruction
//! head behind one parameter registry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{load_params_into, save_params, validate_registry, Parameter};
use crate::encoder::{Encoder, Linear};
use crate::error::Result;
use crate::geometry::{patchify, PatchSet, PointCloud};
use crate::masking::MaskToken;
use crate::objectives::ProjectionHead;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Patches per cloud (N).
    pub n_patches: usize,
    /// Points per patch (k).
    pub patch_size: usize,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 3,
            dim: 64,
            heads: 4,
            n_patches: 16,
            patch_size: 16,
            proj_dim: 64,
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub mask_token: MaskToken,
    pub proj_head: ProjectionHead,
    /// Masked-position latents to `patch_size x 3` local offsets.
    pub recon_head: Linear,
    params: Vec<Parameter>,
}

impl Model {
    /// Builds a model with seeded initialization; creation order is fixed so
    /// the same seed always yields the same parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        let mut rng = seeds::rng(seed);
        let encoder = Encoder::new(
            "encoder",
            cfg.depth,
            cfg.dim,
            cfg.heads,
            4 * cfg.dim,
            LAYER_NORM_EPS,
            &mut rng,
        )?;
        let mask_token = MaskToken::new("mask_token", cfg.dim, &mut rng)?;
        let proj_head = ProjectionHead::new("proj_head", cfg.dim, cfg.proj_dim, &mut rng)?;
        let recon_head = Linear::new("recon_head", cfg.dim, cfg.patch_size * 3, &mut rng)?;

        let mut params = Vec::new();
        encoder.collect_params(&mut params);
        params.push(mask_token.embedding.clone());
        proj_head.collect_params(&mut params);
        recon_head.collect_params(&mut params);
        validate_registry(&params)?;

        Ok(Model {
            cfg: *cfg,
            encoder,
            mask_token,
            proj_head,
            recon_head,
            params,
        })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// FPS + KNN with the model's patch geometry.
    pub fn patchify(&self, cloud: &PointCloud, seed: u64) -> Result<PatchSet> {
        patchify(cloud, self.cfg.n_patches, self.cfg.patch_size, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, &self.params)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        load_params_into(path, &self.params)
    }
}
