//! Frozen-feature extraction and the kNN classification probe.

use super::{feature_rows, ContrastFeature, Model};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::seeds;

/// One labeled feature vector.
#[derive(Clone, Debug)]
pub struct FeatureRow {
    pub feature: Vec<f64>,
    pub label: u32,
}

/// Encodes each cloud and keeps the configured latent feature; clouds must
/// be labeled.
pub fn extract_features(
    model: &Model,
    clouds: &[PointCloud],
    seed: u64,
    which: ContrastFeature,
) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::with_capacity(clouds.len());
    for (i, cloud) in clouds.iter().enumerate() {
        let label = cloud
            .label()
            .ok_or_else(|| Error::invalid(format!("cloud {i} has no label")))?;
        let patches = model.patchify(cloud, seeds::derive(seed, "patch", &[i as u64]))?;
        let seq = model.encoder.embed_tokens(&patches)?;
        let out = model.encoder.encode(&seq)?;
        let feat = feature_rows(&out.latent, patches.n_patches(), which)?;
        rows.push(FeatureRow {
            feature: feat.value(),
            label,
        });
    }
    Ok(rows)
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-12)
}

/// Majority vote among the k nearest training rows under cosine distance;
/// vote ties go to the label of the nearest neighbor holding a tied label.
pub fn knn_probe(train: &[FeatureRow], test: &[FeatureRow], k: usize) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("knn_probe needs non-empty feature sets"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::invalid(format!(
            "k {k} out of range 1..={}",
            train.len()
        )));
    }

    let mut correct = 0usize;
    for t in test {
        let mut order: Vec<(f64, usize)> = train
            .iter()
            .enumerate()
            .map(|(i, r)| (cosine_distance(&t.feature, &r.feature), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut votes: std::collections::BTreeMap<u32, usize> = Default::default();
        for &(_, i) in &order[..k] {
            *votes.entry(train[i].label).or_insert(0) += 1;
        }
        let top = *votes.values().max().expect("k >= 1");
        let predicted = order[..k]
            .iter()
            .map(|&(_, i)| train[i].label)
            .find(|l| votes[l] == top)
            .expect("some label holds the top count");
        if predicted == t.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
