//! The dual-branch training step over shared weights, the two-stage
//! schedule, optimization, and the frozen-feature kNN probe.

mod model;
mod optimizer;
mod probe;
mod train;

pub use model::{Model, ModelConfig};
pub use optimizer::{cosine_lr, AdamW};
pub use probe::{extract_features, knn_probe, FeatureRow};
pub use train::{train, EpochRecord, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::significance;
use crate::error::{Error, Result};
use crate::geometry::{PatchSet, PointCloud};
use crate::masking::{apply_mask, decide, MaskDecision, MaskStrategy};
use crate::objectives::{contrastive_loss, total_loss, LossBundle};
use crate::seeds;

/// Which latent rows feed the projection head and the probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastFeature {
    /// The global token's latent row.
    #[default]
    GlobalToken,
    /// Mean over the point-token latent rows.
    MeanPool,
}

/// Per-step knobs; [`train`] derives one per stage from the [`TrainConfig`].
#[derive(Clone, Debug)]
pub struct StepConfig {
    pub strategy: MaskStrategy,
    /// Number of patches to mask (K).
    pub mask_count: usize,
    pub tau_pro: f64,
    pub tau_sim: f64,
    pub lambda: f64,
    /// Layer whose attention feeds the significance score; `None` means the
    /// last layer.
    pub sig_layer: Option<usize>,
    pub contrast_feature: ContrastFeature,
}

/// One sample of a step batch: cached patches plus this step's mask seed.
pub struct StepSample<'a> {
    pub patches: &'a PatchSet,
    pub mask_seed: u64,
}

/// Everything a training step produces: the scalar loss snapshot, the live
/// loss tensor for backward, and the per-sample mask decisions (empty for
/// the no-masking strategy).
pub struct StepOutcome {
    pub bundle: LossBundle,
    pub loss: Tensor,
    pub decisions: Vec<MaskDecision>,
}

pub(crate) fn feature_rows(
    latent: &Tensor,
    n_patches: usize,
    which: ContrastFeature,
) -> Result<Tensor> {
    match which {
        ContrastFeature::GlobalToken => latent.slice_rows(0, 1),
        ContrastFeature::MeanPool => {
            let pts = latent.slice_rows(1, n_patches + 1)?;
            let d = latent.shape()[1];
            pts.mean_axis(0)?.reshape(vec![1, d])
        }
    }
}

/// Per-patch Chamfer reconstruction of the masked patches' local
/// coordinates from the masked branch's latent rows.
fn reconstruction_term(
    model: &Model,
    latent: &Tensor,
    patches: &PatchSet,
    masked_patches: &[usize],
) -> Result<Tensor> {
    if masked_patches.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let rows: Vec<usize> = masked_patches.iter().map(|&p| p + 1).collect();
    let picked = latent.gather_rows(&rows)?;
    let recon = model.recon_head.forward(&picked)?;
    let k = patches.patch_size();

    let mut acc: Option<Tensor> = None;
    for (slot, &p) in masked_patches.iter().enumerate() {
        let pred = recon.slice_rows(slot, slot + 1)?.reshape(vec![k, 3])?;
        let mut target = Vec::with_capacity(k * 3);
        for c in &patches.local_coords[p] {
            target.extend_from_slice(c);
        }
        let target = Tensor::constant(vec![k, 3], target)?;
        let term = pred.chamfer(&target)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty mask").scale(1.0 / masked_patches.len() as f64))
}

/// One dual-branch step over a batch.
///
/// Standard branch: full tokens, attention captured, significance scored.
/// Masked branch: the strategy's patches replaced by the mask token, run
/// through the same weights, reconstructing masked patches (Chamfer) and
/// aligning global features with the standard branch (contrastive). With
/// strategy `none` the step degenerates to single-branch reconstruction
/// pretraining over a random mask and reports a zero contrastive term.
pub fn dual_branch_step(
    model: &Model,
    samples: &[StepSample<'_>],
    cfg: &StepConfig,
) -> Result<StepOutcome> {
    dual_branch_step_with_masks(model, samples, cfg, None)
}

/// [`dual_branch_step`] with the per-sample mask selection pinned.
///
/// Selection is discrete and carries no gradient, so the finite-difference
/// oracle must hold it fixed while parameters are nudged; everything else
/// (including the standard-branch forward) is recomputed.
pub fn dual_branch_step_with_masks(
    model: &Model,
    samples: &[StepSample<'_>],
    cfg: &StepConfig,
    forced_masks: Option<&[Vec<usize>]>,
) -> Result<StepOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("dual_branch_step needs at least one sample"));
    }
    if let Some(masks) = forced_masks {
        if masks.len() != samples.len() {
            return Err(Error::invalid("one forced mask per sample required"));
        }
    }
    let sig_layer = cfg.sig_layer.unwrap_or(model.cfg.depth - 1);

    let mut origin_acc: Option<Tensor> = None;
    let mut masked_feats: Vec<Tensor> = Vec::new();
    let mut std_feats: Vec<Tensor> = Vec::new();
    let mut decisions = Vec::new();

    for (sample_ix, sample) in samples.iter().enumerate() {
        let n = sample.patches.n_patches();
        let seq = model.encoder.embed_tokens(sample.patches)?;

        let masked_patches: Vec<usize> = if cfg.strategy == MaskStrategy::None {
            match forced_masks {
                Some(masks) => masks[sample_ix].clone(),
                None => {
                    let mut rng = seeds::rng(sample.mask_seed);
                    let mut idx =
                        rand::seq::index::sample(&mut rng, n, cfg.mask_count.min(n)).into_vec();
                    idx.sort_unstable();
                    idx
                }
            }
        } else {
            let std_out = model.encoder.encode(&seq)?;
            let s = significance(&std_out.records, sig_layer)?;
            let picked = match forced_masks {
                Some(masks) => masks[sample_ix].clone(),
                None => {
                    let decision =
                        decide(&s, cfg.strategy, cfg.mask_count, cfg.tau_pro, sample.mask_seed)?;
                    let picked = decision.masked.clone();
                    decisions.push(decision);
                    picked
                }
            };
            std_feats.push(feature_rows(&std_out.latent, n, cfg.contrast_feature)?);
            picked
        };

        let mask_rows: Vec<usize> = masked_patches.iter().map(|&p| p + 1).collect();
        let masked_seq = apply_mask(&seq, &mask_rows, &model.mask_token)?;
        let masked_out = model.encoder.encode(&masked_seq)?;

        let term = reconstruction_term(model, &masked_out.latent, sample.patches, &masked_patches)?;
        origin_acc = Some(match origin_acc {
            Some(a) => a.add(&term)?,
            None => term,
        });

        if cfg.strategy != MaskStrategy::None {
            masked_feats.push(feature_rows(&masked_out.latent, n, cfg.contrast_feature)?);
        }
    }

    let origin = origin_acc.expect("non-empty batch").scale(1.0 / samples.len() as f64);
    let contra = if cfg.strategy == MaskStrategy::None {
        Tensor::scalar(0.0)
    } else {
        let hm = model.proj_head.project(&Tensor::concat_rows(&masked_feats)?)?;
        let hs = model.proj_head.project(&Tensor::concat_rows(&std_feats)?)?;
        contrastive_loss(&hm, &hs, cfg.tau_sim)?
    };
    let total = total_loss(&origin, &contra, cfg.lambda)?;

    let bundle = LossBundle {
        origin: origin.item()?,
        contra: contra.item()?,
        total: total.item()?,
        lambda: cfg.lambda,
        tau_sim: cfg.tau_sim,
    };
    Ok(StepOutcome {
        bundle,
        loss: total,
        decisions,
    })
}

/// [`dual_branch_step`] on raw clouds: patchifies each cloud and derives
/// per-sample mask seeds from `seed` and the batch position.
pub fn dual_branch_step_on_clouds(
    model: &Model,
    clouds: &[PointCloud],
    cfg: &StepConfig,
    seed: u64,
) -> Result<StepOutcome> {
    let patch_sets: Vec<PatchSet> = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| model.patchify(c, seeds::derive(seed, "patch", &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<StepSample<'_>> = patch_sets
        .iter()
        .enumerate()
        .map(|(i, p)| StepSample {
            patches: p,
            mask_seed: seeds::derive(seed, "mask", &[i as u64]),
        })
        .collect();
    dual_branch_step(model, &samples, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Tensor};
    use crate::geometry::{synth_shape, ShapeKind};

    fn micro_model() -> Model {
        Model::new(
            &ModelConfig {
                depth: 1,
                dim: 8,
                heads: 2,
                n_patches: 4,
                patch_size: 4,
                proj_dim: 8,
            },
            11,
        )
        .unwrap()
    }

    fn micro_clouds() -> Vec<PointCloud> {
        vec![
            synth_shape(ShapeKind::Sphere, 32, 1).unwrap(),
            synth_shape(ShapeKind::Cube, 32, 2).unwrap(),
        ]
    }

    fn joint_cfg() -> StepConfig {
        StepConfig {
            strategy: MaskStrategy::DynamicHigh,
            mask_count: 2,
            tau_pro: 0.5,
            tau_sim: 0.1,
            lambda: 0.6,
            sig_layer: None,
            contrast_feature: ContrastFeature::GlobalToken,
        }
    }

    #[test]
    fn none_strategy_reduces_to_origin_only() {
        let model = micro_model();
        let cfg = StepConfig {
            strategy: MaskStrategy::None,
            lambda: 0.0,
            ..joint_cfg()
        };
        let out = dual_branch_step_on_clouds(&model, &micro_clouds(), &cfg, 3).unwrap();
        assert_eq!(out.bundle.contra, 0.0);
        assert_eq!(out.bundle.total, out.bundle.origin);
        assert!(out.bundle.origin > 0.0);
        assert!(out.decisions.is_empty());
    }

    #[test]
    fn step_is_bit_deterministic() {
        let model = micro_model();
        let cfg = joint_cfg();
        let clouds = micro_clouds();
        let a = dual_branch_step_on_clouds(&model, &clouds, &cfg, 5).unwrap();
        let b = dual_branch_step_on_clouds(&model, &clouds, &cfg, 5).unwrap();
        assert_eq!(a.bundle.origin.to_bits(), b.bundle.origin.to_bits());
        assert_eq!(a.bundle.contra.to_bits(), b.bundle.contra.to_bits());
        assert_eq!(a.bundle.total.to_bits(), b.bundle.total.to_bits());
        assert_eq!(a.decisions[0].masked, b.decisions[0].masked);
    }

    #[test]
    fn bundle_total_is_exact_combination() {
        let model = micro_model();
        let out = dual_branch_step_on_clouds(&model, &micro_clouds(), &joint_cfg(), 7).unwrap();
        let want = out.bundle.origin + out.bundle.lambda * out.bundle.contra;
        assert_eq!(out.bundle.total.to_bits(), want.to_bits());
        assert!(out.bundle.contra != 0.0);
    }

    #[test]
    fn both_branches_read_identical_parameters() {
        // weight sharing is by registry identity, not value equality
        let model = micro_model();
        let params_first = model.params().to_vec();
        let _ = dual_branch_step_on_clouds(&model, &micro_clouds(), &joint_cfg(), 9).unwrap();
        for (a, b) in params_first.iter().zip(model.params()) {
            assert!(Tensor::same(&a.tensor, &b.tensor), "{} rebound", a.name);
        }
    }

    #[test]
    fn full_step_gradient_passes_finite_differences() {
        let model = micro_model();
        let clouds = micro_clouds();
        let cfg = joint_cfg();
        let seed = 13u64;
        let patch_sets: Vec<_> = clouds
            .iter()
            .enumerate()
            .map(|(i, c)| model.patchify(c, seeds::derive(seed, "patch", &[i as u64])).unwrap())
            .collect();
        let samples: Vec<StepSample<'_>> = patch_sets
            .iter()
            .enumerate()
            .map(|(i, p)| StepSample {
                patches: p,
                mask_seed: seeds::derive(seed, "mask", &[i as u64]),
            })
            .collect();
        // pin the realized masks: the discrete selection carries no gradient
        let masks: Vec<Vec<usize>> = dual_branch_step(&model, &samples, &cfg)
            .unwrap()
            .decisions
            .iter()
            .map(|d| d.masked.clone())
            .collect();

        let tensors: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
        // step 1e-5: large enough to clear rounding noise on small
        // gradients, small enough not to straddle relu/max-pool kinks
        let err = finite_diff_check(
            || Ok(dual_branch_step_with_masks(&model, &samples, &cfg, Some(&masks))?.loss),
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn mask_count_zero_gives_zero_origin() {
        let model = micro_model();
        let cfg = StepConfig {
            mask_count: 0,
            ..joint_cfg()
        };
        let out = dual_branch_step_on_clouds(&model, &micro_clouds(), &cfg, 21).unwrap();
        assert_eq!(out.bundle.origin, 0.0);
        assert!(out.bundle.contra.is_finite());
    }
}

