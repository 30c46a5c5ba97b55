//! The two-stage training schedule: reconstruction-only epochs first, then
//! joint reconstruction + contrastive epochs under the configured mask
//! strategy.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    cosine_lr, dual_branch_step, AdamW, ContrastFeature, Model, ModelConfig, StepConfig,
    StepSample,
};
use crate::error::{Error, Result};
use crate::geometry::{PatchSet, PointCloud};
use crate::masking::MaskStrategy;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lambda: f64,
    pub tau_pro: f64,
    pub tau_sim: f64,
    pub mask_ratio: f64,
    pub strategy: MaskStrategy,
    pub seed: u64,
    /// Significance layer; `None` = last.
    pub sig_layer: Option<usize>,
    pub contrast_feature: ContrastFeature,
    /// Drop optimizer moments at the stage boundary instead of carrying
    /// them over.
    pub reset_optimizer_stage2: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 30,
            epochs_stage2: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            grad_clip: 10.0,
            lambda: 0.6,
            tau_pro: 0.5,
            tau_sim: 0.1,
            mask_ratio: 0.6,
            strategy: MaskStrategy::DynamicHigh,
            seed: 7,
            sig_layer: None,
            contrast_feature: ContrastFeature::GlobalToken,
            reset_optimizer_stage2: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} must be in [0, 1)",
                self.mask_ratio
            )));
        }
        if !(self.tau_pro > 0.0) || !(self.tau_sim > 0.0) {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if let Some(layer) = self.sig_layer {
            if layer >= self.model.depth {
                return Err(Error::Config(format!(
                    "sig_layer {layer} out of range for depth {}",
                    self.model.depth
                )));
            }
        }
        Ok(())
    }

    /// K: patches masked per sample.
    pub fn mask_count(&self) -> usize {
        (self.mask_ratio * self.model.n_patches as f64).round() as usize
    }

    fn step_config(&self, stage2: bool) -> StepConfig {
        StepConfig {
            strategy: if stage2 { self.strategy } else { MaskStrategy::None },
            mask_count: self.mask_count(),
            tau_pro: self.tau_pro,
            tau_sim: self.tau_sim,
            lambda: if stage2 { self.lambda } else { 0.0 },
            sig_layer: self.sig_layer,
            contrast_feature: self.contrast_feature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub origin: f64,
    pub contra: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub stage1_checkpoint: PathBuf,
    pub wall_time_s: f64,
    pub config: TrainConfig,
}

impl TrainReport {
    /// One epoch per line (`epoch origin contra total lr`, tab-separated)
    /// after `#`-prefixed meta lines; wall time sits on its own meta line so
    /// comparisons can ignore it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let config = serde_json::to_string(&self.config)
            .map_err(|e| Error::Config(format!("config echo: {e}")))?;
        writeln!(f, "# config {config}")?;
        writeln!(f, "# checkpoint {}", self.checkpoint.display())?;
        writeln!(f, "# stage1_checkpoint {}", self.stage1_checkpoint.display())?;
        writeln!(f, "# wall_time_s {}", self.wall_time_s)?;
        writeln!(f, "epoch\torigin\tcontra\ttotal\tlr")?;
        for e in &self.epochs {
            writeln!(f, "{}\t{}\t{}\t{}\t{}", e.epoch, e.origin, e.contra, e.total, e.lr)?;
        }
        Ok(())
    }
}

/// Pretrains on the corpus and writes `stage1.ckpt` and `final.ckpt` under
/// `out_dir`.
pub fn train(cfg: &TrainConfig, data: &[PointCloud], out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();

    let model = Model::new(&cfg.model, seeds::derive(cfg.seed, "init", &[]))?;
    let mut optimizer = AdamW::new(model.params(), cfg.weight_decay, cfg.grad_clip);

    // patchification is deterministic per sample; cache it across epochs
    let patch_sets: Vec<PatchSet> = data
        .iter()
        .enumerate()
        .map(|(i, c)| model.patchify(c, seeds::derive(cfg.seed, "patch", &[i as u64])))
        .collect::<Result<Vec<_>>>()?;

    let total_epochs = cfg.epochs_stage1 + cfg.epochs_stage2;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = total_epochs * steps_per_epoch;

    let stage1_path = out_dir.join("stage1.ckpt");
    let final_path = out_dir.join("final.ckpt");
    if cfg.epochs_stage1 == 0 {
        model.save(&stage1_path)?;
    }

    let mut epochs = Vec::with_capacity(total_epochs);
    let mut global_step = 0usize;
    for epoch in 0..total_epochs {
        let stage2 = epoch >= cfg.epochs_stage1;
        let step_cfg = cfg.step_config(stage2);

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeds::rng(seeds::derive(cfg.seed, "shuffle", &[epoch as u64])));

        let (mut origin_sum, mut contra_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut last_lr = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<StepSample<'_>> = chunk
                .iter()
                .map(|&i| StepSample {
                    patches: &patch_sets[i],
                    mask_seed: seeds::derive(
                        cfg.seed,
                        "mask",
                        &[epoch as u64, step as u64, i as u64],
                    ),
                })
                .collect();

            let out = dual_branch_step(&model, &samples, &step_cfg)?;
            for (term, value) in [
                ("origin", out.bundle.origin),
                ("contra", out.bundle.contra),
                ("total", out.bundle.total),
            ] {
                if !value.is_finite() {
                    return Err(Error::NonFinite { term, epoch, step });
                }
            }

            model.zero_grads();
            out.loss.backward()?;
            let lr = cosine_lr(cfg.learning_rate, global_step, total_steps);
            optimizer.step(model.params(), lr)?;

            origin_sum += out.bundle.origin;
            contra_sum += out.bundle.contra;
            total_sum += out.bundle.total;
            last_lr = lr;
            global_step += 1;
        }

        epochs.push(EpochRecord {
            epoch,
            origin: origin_sum / steps_per_epoch as f64,
            contra: contra_sum / steps_per_epoch as f64,
            total: total_sum / steps_per_epoch as f64,
            lr: last_lr,
        });

        if epoch + 1 == cfg.epochs_stage1 {
            model.save(&stage1_path)?;
            if cfg.reset_optimizer_stage2 {
                optimizer.reset_state();
            }
        }
    }

    model.save(&final_path)?;
    Ok(TrainReport {
        epochs,
        checkpoint: final_path,
        stage1_checkpoint: stage1_path,
        wall_time_s: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    })
}
