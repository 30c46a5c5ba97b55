//! Experiment configuration: TOML file, environment and flag overrides,
//! dataset construction, and the config hash embedded in every metrics
//! record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{perturb, synth_shape, Axis, Perturbation, PerturbationKind, PointCloud, ShapeKind};
use crate::pipeline::TrainConfig;
use crate::seeds;
use rand::Rng;

/// Environment variable prefix; `CLOUDMASK_SEED`, `CLOUDMASK_OUT`,
/// `CLOUDMASK_CONFIG`, `CLOUDMASK_CHECKPOINT`, `CLOUDMASK_DATA_DIR`.
pub const ENV_PREFIX: &str = "CLOUDMASK_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Synth,
    Dir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub seed: u64,
    /// Gaussian jitter applied to every generated cloud.
    pub jitter: f64,
    /// Random rotations about all three axes per generated cloud.
    pub rotate: bool,
    /// Uniform per-cloud scale range applied before normalization;
    /// `(1.0, 1.0)` disables it.
    pub scale: (f64, f64),
    /// Per-cloud random offset, uniform in a cube of this half-width,
    /// applied after normalization; 0 disables it.
    pub translate: f64,
    /// Visible fraction per cloud: a random directional crop keeps this
    /// share of an oversampled surface, so every sample is a partial view.
    /// 1.0 disables cropping.
    pub crop: f64,
    /// For `kind = dir`: directory with `train/` and `test/` of labeled
    /// `.xyz` files.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synth,
            train_per_class: 32,
            test_per_class: 16,
            points: 256,
            seed: 1,
            jitter: 0.02,
            rotate: true,
            scale: (1.0, 1.0),
            translate: 0.0,
            crop: 0.6,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub probe_k: usize,
    /// Evaluation conditions beyond "clean".
    pub perturbations: Vec<PerturbationKind>,
    /// Dynamic-mask draws per sample for the coverage statistics.
    pub coverage_draws: usize,
    pub export_features: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe_k: 5,
            perturbations: default_perturbations(),
            coverage_draws: 200,
            export_features: false,
        }
    }
}

/// The robustness table's eight conditions.
pub fn default_perturbations() -> Vec<PerturbationKind> {
    vec![
        PerturbationKind::GaussianNoise { sigma: 0.01 },
        PerturbationKind::GaussianNoise { sigma: 0.03 },
        PerturbationKind::Rotation { axis: Axis::X, degrees: (-30.0, 30.0) },
        PerturbationKind::Rotation { axis: Axis::Y, degrees: (-30.0, 30.0) },
        PerturbationKind::Rotation { axis: Axis::Z, degrees: (-30.0, 30.0) },
        PerturbationKind::Scaling { factors: (0.5, 1.5) },
        PerturbationKind::DropPoints { ratio: 0.2 },
        PerturbationKind::DropPoints { ratio: 0.6 },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentSpec {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.probe_k == 0 {
            return Err(Error::Config("eval.probe_k must be >= 1".into()));
        }
        match self.data.kind {
            DataKind::Synth => {
                if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
                    return Err(Error::Config("synth data needs samples per class".into()));
                }
                if self.data.points == 0 {
                    return Err(Error::Config("data.points must be >= 1".into()));
                }
            }
            DataKind::Dir => {
                if self.data.dir.is_none() {
                    return Err(Error::Config("data.kind = dir requires data.dir".into()));
                }
            }
        }
        for kind in &self.eval.perturbations {
            Perturbation::new(kind.clone(), 0)?;
        }
        Ok(())
    }

    /// Hash of the canonical JSON form: identical configs, identical hash.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Loads a spec from TOML, then applies `KEY=VALUE` dotted-path overrides
/// (e.g. `train.lambda=0.0`).
pub fn load_spec(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentSpec> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            text.parse::<toml::Value>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::try_from(ExperimentSpec::default())
            .map_err(|e| Error::Config(format!("default spec: {e}")))?,
    };

    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        set_path(&mut value, key, raw)?;
    }

    let spec: ExperimentSpec = value
        .try_into()
        .map_err(|e| Error::Config(format!("spec: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

fn parse_scalar(raw: &str) -> toml::Value {
    // bare words fall back to strings so `--set train.strategy=random` works
    match format!("v = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        _ => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, dotted: &str, raw: &str) -> Result<()> {
    let parsed = parse_scalar(raw);
    let mut node = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("--set path {dotted:?} crosses a non-table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("dotted paths have at least one part")
}

/// Re-expresses a cloud in its own frame: centroid at the origin, bounding
/// radius 1.
fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let n = cloud.len() as f64;
    let mut center = [0.0f64; 3];
    for p in cloud.points() {
        for (c, v) in center.iter_mut().zip(p) {
            *c += v / n;
        }
    }
    let mut shifted: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .map(|p| [p[0] - center[0], p[1] - center[1], p[2] - center[2]])
        .collect();
    let radius = shifted
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max);
    if radius > 1e-12 {
        for p in shifted.iter_mut() {
            for c in p.iter_mut() {
                *c /= radius;
            }
        }
    }
    PointCloud::new(shifted, cloud.label())
}

fn synth_sample(kind: ShapeKind, cfg: &DataConfig, seed: u64) -> Result<PointCloud> {
    let mut cloud = if cfg.crop < 1.0 {
        // oversample the surface, keep the most visible points along a
        // random direction: every sample is a partial view
        let oversampled = ((cfg.points as f64) / cfg.crop).ceil() as usize;
        let full = synth_shape(kind, oversampled, seed)?;
        let mut rng = seeds::rng(seeds::derive(seed, "crop", &[]));
        let dir = loop {
            let v: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm > 1e-3 {
                break [v[0] / norm, v[1] / norm, v[2] / norm];
            }
        };
        let mut order: Vec<usize> = (0..full.len()).collect();
        let depth = |i: usize| {
            let p = &full.points()[i];
            p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]
        };
        order.sort_by(|&a, &b| depth(b).total_cmp(&depth(a)).then(a.cmp(&b)));
        order.truncate(cfg.points);
        order.sort_unstable();
        let kept: Vec<[f64; 3]> = order.iter().map(|&i| full.points()[i]).collect();
        PointCloud::new(kept, full.label())?
    } else {
        synth_shape(kind, cfg.points, seed)?
    };
    cloud = normalize_cloud(&cloud)?;
    if cfg.rotate {
        for (ix, axis) in [Axis::X, Axis::Y, Axis::Z].into_iter().enumerate() {
            let p = Perturbation::new(
                PerturbationKind::Rotation { axis, degrees: (-180.0, 180.0) },
                seeds::derive(seed, "rot", &[ix as u64]),
            )?;
            cloud = perturb(&cloud, &p);
        }
    }
    if cfg.scale != (1.0, 1.0) {
        let p = Perturbation::new(
            PerturbationKind::Scaling { factors: cfg.scale },
            seeds::derive(seed, "scale", &[]),
        )?;
        cloud = perturb(&cloud, &p);
    }
    if cfg.translate > 0.0 {
        let mut rng = seeds::rng(seeds::derive(seed, "translate", &[]));
        let offset: [f64; 3] = [
            rng.gen_range(-cfg.translate..=cfg.translate),
            rng.gen_range(-cfg.translate..=cfg.translate),
            rng.gen_range(-cfg.translate..=cfg.translate),
        ];
        let points = cloud
            .points()
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        cloud = PointCloud::new(points, cloud.label())?;
    }
    if cfg.jitter > 0.0 {
        let p = Perturbation::new(
            PerturbationKind::GaussianNoise { sigma: cfg.jitter },
            seeds::derive(seed, "jitter", &[]),
        )?;
        cloud = perturb(&cloud, &p);
    }
    Ok(cloud)
}

fn read_labeled_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("xyz") | Some("off")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("{}: no .xyz/.off files", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let cloud = super::io::read_cloud_auto(&p)?;
        if cloud.label().is_none() {
            return Err(Error::invalid(format!(
                "{}: missing class label (use the xyz trailing label column)",
                p.display()
            )));
        }
        out.push(cloud);
    }
    Ok(out)
}

/// Builds the (train, test) corpora per the data section.
pub fn build_dataset(cfg: &DataConfig) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    match cfg.kind {
        DataKind::Synth => {
            let classes = [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus];
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (split, count, out) in [
                (0u64, cfg.train_per_class, &mut train),
                (1u64, cfg.test_per_class, &mut test),
            ] {
                for kind in classes {
                    for i in 0..count {
                        let seed = seeds::derive(
                            cfg.seed,
                            "synth",
                            &[split, u64::from(kind.label()), i as u64],
                        );
                        out.push(synth_sample(kind, cfg, seed)?);
                    }
                }
            }
            Ok((train, test))
        }
        DataKind::Dir => {
            let dir = cfg.dir.as_ref().expect("validated");
            Ok((
                read_labeled_dir(&dir.join("train"))?,
                read_labeled_dir(&dir.join("test"))?,
            ))
        }
    }
}

/// Flag > environment > config file > default, for the common scalar knobs.
pub fn env_override(name: &str) -> Option<String> {
    std::env::var(format!("{ENV_PREFIX}{name}")).ok().filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;

    #[test]
    fn default_spec_validates() {
        ExperimentSpec::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "[train]\nlambda = 0.4\nstrategy = \"random\"\n\n[data]\npoints = 64\n",
        )
        .unwrap();
        let spec = load_spec(Some(&path), &[]).unwrap();
        assert_eq!(spec.train.lambda, 0.4);
        assert_eq!(spec.train.strategy, MaskStrategy::Random);
        assert_eq!(spec.data.points, 64);
        // defaults fill the rest
        assert_eq!(spec.eval.probe_k, 5);

        let spec2 = load_spec(
            Some(&path),
            &[
                "train.lambda=0.9".into(),
                "train.strategy=fixed_high".into(),
                "train.model.depth=2".into(),
            ],
        )
        .unwrap();
        assert_eq!(spec2.train.lambda, 0.9);
        assert_eq!(spec2.train.strategy, MaskStrategy::FixedHigh);
        assert_eq!(spec2.train.model.depth, 2);
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        assert!(matches!(
            load_spec(None, &["no_equals_sign".into()]),
            Err(Error::Usage(_))
        ));
        assert!(load_spec(None, &["train.lambda=-1".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentSpec::default();
        let mut b = ExperimentSpec::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.lambda += 0.1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn synth_dataset_is_deterministic_and_labeled() {
        let cfg = DataConfig {
            train_per_class: 2,
            test_per_class: 1,
            points: 32,
            ..DataConfig::default()
        };
        let (train1, test1) = build_dataset(&cfg).unwrap();
        let (train2, _) = build_dataset(&cfg).unwrap();
        assert_eq!(train1, train2);
        assert_eq!(train1.len(), 6);
        assert_eq!(test1.len(), 3);
        for c in &train1 {
            assert!(c.label().is_some());
            assert_eq!(c.len(), 32);
        }
        // all three classes present
        let labels: std::collections::BTreeSet<_> =
            train1.iter().map(|c| c.label().unwrap()).collect();
        assert_eq!(labels.len(), 3);
    }

    #[test]
    fn dir_dataset_reads_sorted_labeled_files() {
        let dir = tempfile::tempdir().unwrap();
        for split in ["train", "test"] {
            std::fs::create_dir(dir.path().join(split)).unwrap();
            for (i, label) in [(0, 0u32), (1, 1)] {
                std::fs::write(
                    dir.path().join(split).join(format!("c{i}.xyz")),
                    format!("0 0 0 {label}\n1 0 0 {label}\n0 1 0 {label}\n"),
                )
                .unwrap();
            }
        }
        let cfg = DataConfig {
            kind: DataKind::Dir,
            dir: Some(dir.path().to_path_buf()),
            ..DataConfig::default()
        };
        let (train, test) = build_dataset(&cfg).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 2);
        assert_eq!(train[0].label(), Some(0));
        assert_eq!(train[1].label(), Some(1));
    }
}
