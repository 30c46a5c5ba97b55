//! Experiment execution: pretraining, per-condition probing, mask-coverage
//! statistics and the ablation matrix.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{build_dataset, ExperimentSpec};
use super::io;
use crate::encoder::significance;
use crate::error::{Error, Result};
use crate::geometry::{perturb, Perturbation, PointCloud};
use crate::masking::{decide, MaskDecision, MaskStrategy};
use crate::pipeline::{extract_features, knn_probe, train, Model};
use crate::seeds;

/// Dynamic-vs-fixed mask variety over repeated draws on the test set.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CoverageStats {
    pub draws: usize,
    pub mask_count: usize,
    /// Mean over samples of distinct patches masked at least once.
    pub mean_distinct_patches: f64,
    /// Fraction of samples where that count strictly exceeds the fixed
    /// strategy's (which always masks the same K patches).
    pub frac_exceeding_fixed: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment_id: String,
    pub config_hash: String,
    /// Probe accuracy per evaluation condition ("clean" plus one per
    /// perturbation).
    pub accuracies: BTreeMap<String, f64>,
    pub mask_coverage: Option<CoverageStats>,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    fn validate(&self) -> Result<()> {
        for (name, acc) in &self.accuracies {
            if !(0.0..=1.0).contains(acc) {
                return Err(Error::invalid(format!("accuracy {name} = {acc} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Probe accuracies for the clean test set and every configured
/// perturbation; perturbations apply to test data only.
pub fn evaluate(
    model: &Model,
    spec: &ExperimentSpec,
    train_clouds: &[PointCloud],
    test_clouds: &[PointCloud],
) -> Result<BTreeMap<String, f64>> {
    let seed = spec.train.seed;
    let feature = spec.train.contrast_feature;
    let train_feats = extract_features(model, train_clouds, seeds::derive(seed, "feat_train", &[]), feature)?;

    let test_seed = seeds::derive(seed, "feat_test", &[]);
    let mut accuracies = BTreeMap::new();
    let clean_feats = extract_features(model, test_clouds, test_seed, feature)?;
    accuracies.insert(
        "clean".to_string(),
        knn_probe(&train_feats, &clean_feats, spec.eval.probe_k)?,
    );

    for (ci, kind) in spec.eval.perturbations.iter().enumerate() {
        let perturbed: Vec<PointCloud> = test_clouds
            .iter()
            .enumerate()
            .map(|(si, c)| {
                let p = Perturbation::new(
                    kind.clone(),
                    seeds::derive(seed, "perturb", &[ci as u64, si as u64]),
                )?;
                Ok(perturb(c, &p))
            })
            .collect::<Result<Vec<_>>>()?;
        // same patchification stream as the clean pass, so a zero-strength
        // perturbation reproduces the clean accuracy exactly
        let feats = extract_features(model, &perturbed, test_seed, feature)?;
        let label = Perturbation::new(kind.clone(), 0)?.label();
        accuracies.insert(label, knn_probe(&train_feats, &feats, spec.eval.probe_k)?);
    }
    Ok(accuracies)
}

/// Significance scores for every test cloud under the model.
pub fn significance_per_sample(
    model: &Model,
    clouds: &[PointCloud],
    seed: u64,
    sig_layer: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let layer = sig_layer.unwrap_or(model.cfg.depth - 1);
    clouds
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            let patches = model.patchify(cloud, seeds::derive(seed, "patch", &[i as u64]))?;
            let out = model.encoder.encode(&model.encoder.embed_tokens(&patches)?)?;
            significance(&out.records, layer)
        })
        .collect()
}

/// One mask decision per test sample under the configured strategy.
pub fn export_mask_decisions(
    model: &Model,
    spec: &ExperimentSpec,
    clouds: &[PointCloud],
) -> Result<Vec<MaskDecision>> {
    let seed = seeds::derive(spec.train.seed, "export", &[]);
    let scores = significance_per_sample(model, clouds, seed, spec.train.sig_layer)?;
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            decide(
                s,
                spec.train.strategy,
                spec.train.mask_count(),
                spec.train.tau_pro,
                seeds::derive(seed, "decision", &[i as u64]),
            )
        })
        .collect()
}

/// Repeated dynamic draws per sample versus the fixed top-K.
pub fn mask_coverage(
    model: &Model,
    spec: &ExperimentSpec,
    clouds: &[PointCloud],
) -> Result<CoverageStats> {
    let k = spec.train.mask_count();
    let draws = spec.eval.coverage_draws;
    let seed = seeds::derive(spec.train.seed, "coverage", &[]);
    let scores = significance_per_sample(model, clouds, seed, spec.train.sig_layer)?;

    let mut distinct_sum = 0usize;
    let mut exceeding = 0usize;
    for (i, s) in scores.iter().enumerate() {
        let mut touched: BTreeSet<usize> = BTreeSet::new();
        for d in 0..draws {
            let decision = decide(
                s,
                MaskStrategy::DynamicHigh,
                k,
                spec.train.tau_pro,
                seeds::derive(seed, "draw", &[i as u64, d as u64]),
            )?;
            touched.extend(decision.masked);
        }
        distinct_sum += touched.len();
        // the fixed strategy visits exactly K distinct patches
        if touched.len() > k {
            exceeding += 1;
        }
    }
    Ok(CoverageStats {
        draws,
        mask_count: k,
        mean_distinct_patches: distinct_sum as f64 / scores.len() as f64,
        frac_exceeding_fixed: exceeding as f64 / scores.len() as f64,
    })
}

/// Pretrains per the spec, evaluates clean and perturbed conditions, and
/// writes the report, metrics and optional feature export under `out_dir`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    experiment_id: &str,
    out_dir: &Path,
) -> Result<MetricsRecord> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();

    let (train_clouds, test_clouds) = build_dataset(&spec.data)?;
    let report = train(&spec.train, &train_clouds, out_dir)?;
    report.write(&out_dir.join("report.tsv"))?;

    // reload from the checkpoint: evaluation uses exactly what was written
    let model = Model::new(&spec.train.model, seeds::derive(spec.train.seed, "init", &[]))?;
    model.load(&report.checkpoint)?;

    let accuracies = evaluate(&model, spec, &train_clouds, &test_clouds)?;
    let coverage = mask_coverage(&model, spec, &test_clouds)?;

    if spec.eval.export_features {
        let feats = extract_features(
            &model,
            &test_clouds,
            seeds::derive(spec.train.seed, "feat_test", &[]),
            spec.train.contrast_feature,
        )?;
        io::write_features_tsv(&feats, &out_dir.join("features.tsv"))?;
    }

    let record = MetricsRecord {
        experiment_id: experiment_id.to_string(),
        config_hash: spec.config_hash(),
        accuracies,
        mask_coverage: Some(coverage),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    record.validate()?;
    io::write_jsonl(&[record.clone()], &out_dir.join("metrics.jsonl"))?;
    Ok(record)
}

/// The ablation rows: strategy x loss combinations, then fixed-vs-dynamic
/// across mask ratios.
pub fn ablation_rows(base: &ExperimentSpec) -> Vec<(String, ExperimentSpec)> {
    let mut rows = Vec::new();

    let component: [(&str, MaskStrategy, f64); 7] = [
        ("component_none_origin", MaskStrategy::None, 0.0),
        ("component_random_origin", MaskStrategy::Random, 0.0),
        ("component_random_joint", MaskStrategy::Random, base.train.lambda),
        ("component_low_origin", MaskStrategy::LowAttention, 0.0),
        ("component_low_joint", MaskStrategy::LowAttention, base.train.lambda),
        ("component_high_origin", MaskStrategy::DynamicHigh, 0.0),
        ("component_high_joint", MaskStrategy::DynamicHigh, base.train.lambda),
    ];
    for (name, strategy, lambda) in component {
        let mut spec = base.clone();
        spec.train.strategy = strategy;
        spec.train.lambda = lambda;
        rows.push((name.to_string(), spec));
    }

    for strategy in [MaskStrategy::FixedHigh, MaskStrategy::DynamicHigh] {
        for ratio in [0.2, 0.4, 0.6, 0.8] {
            let mut spec = base.clone();
            spec.train.strategy = strategy;
            spec.train.mask_ratio = ratio;
            let tag = match strategy {
                MaskStrategy::FixedHigh => "fixed",
                _ => "dynamic",
            };
            rows.push((format!("ratio_{tag}_{ratio}"), spec));
        }
    }
    rows
}

/// Runs all 15 ablation rows from one base spec, varying only the named
/// knobs, and writes a combined metrics file.
pub fn run_ablation(base: &ExperimentSpec, out_dir: &Path) -> Result<Vec<MetricsRecord>> {
    base.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();
    for (name, spec) in ablation_rows(base) {
        let record = run_experiment(&spec, &name, &out_dir.join(&name))?;
        records.push(record);
    }
    io::write_jsonl(&records, &out_dir.join("ablation.jsonl"))?;
    Ok(records)
}
