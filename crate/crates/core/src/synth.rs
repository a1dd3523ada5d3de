//! Seeded synthetic datasets with a planted sparse linear model.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};

use crate::data::{InstanceMatrix, LabeledDataset};
use crate::objective::sigmoid;

/// Labels drawn as `P(y = +1) = σ(κ · xᵀw*)`.
fn planted_labels(x: &InstanceMatrix, truth: &[f64], sharpness: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut margins = vec![0.0; x.n_instances()];
    x.dot_instances(truth, &mut margins);
    margins
        .iter()
        .map(|&m| {
            if rng.random::<f64>() < sigmoid(sharpness * m) {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

fn sparse_truth(d: usize, support: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut w = vec![0.0; d];
    for j in sample(rng, d, support.min(d)) {
        w[j] = normal.sample(rng);
    }
    w
}

fn normalize(entries: &mut [(usize, f64)]) {
    let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        entries.iter_mut().for_each(|(_, v)| *v /= norm);
    }
}

/// `n` instances with `nnz` uniformly placed `±1` features each.
pub fn sparse_signs(n: usize, d: usize, nnz: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = sparse_truth(d, d / 10 + 1, &mut rng);
    let mut x = InstanceMatrix::new(d);
    for _ in 0..n {
        let mut cols: Vec<usize> = sample(&mut rng, d, nnz.min(d)).into_vec();
        cols.sort_unstable();
        let row: Vec<(usize, f64)> = cols
            .into_iter()
            .map(|j| (j, if rng.random::<bool>() { 1.0 } else { -1.0 }))
            .collect();
        x.push_instance(&row);
    }
    let labels = planted_labels(&x, &truth, 1.0, &mut rng);
    LabeledDataset::new(x, labels)
}

/// Bag-of-words stand-in: Zipf-distributed feature ids, positive term
/// weights, unit-norm instances.
pub fn text_like(n: usize, d: usize, mean_nnz: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(d as f64, 1.1).unwrap();
    // rank r maps to a fixed random feature id
    let ids: Vec<usize> = sample(&mut rng, d, d).into_vec();
    let mut x = InstanceMatrix::new(d);
    for _ in 0..n {
        let len = rng.random_range(mean_nnz / 2..=mean_nnz * 3 / 2).max(1);
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for _ in 0..len {
            let rank = zipf.sample(&mut rng) as usize - 1;
            *counts.entry(ids[rank.min(d - 1)]).or_insert(0.0) += 1.0;
        }
        let mut row: Vec<(usize, f64)> = counts.into_iter().map(|(j, c)| (j, 1.0 + c.ln())).collect();
        normalize(&mut row);
        x.push_instance(&row);
    }
    // the signal lives on moderately frequent words
    let mut truth = vec![0.0; d];
    let normal = Normal::new(0.0, 1.0).unwrap();
    for r in sample(&mut rng, (d / 4).max(1), (d / 50).max(1)) {
        truth[ids[r]] = 4.0 * normal.sample(&mut rng);
    }
    let labels = planted_labels(&x, &truth, 3.0, &mut rng);
    LabeledDataset::new(x, labels)
}

/// Dense Gaussian features with variance decaying as `1/(1+j)`, rescaled to
/// unit-norm instances.
pub fn dense_like(n: usize, d: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let truth = sparse_truth(d, d / 5, &mut rng);
    let scales: Vec<f64> = (0..d).map(|j| (1.0 + j as f64).powf(-0.5)).collect();
    let mut x = InstanceMatrix::new(d);
    for _ in 0..n {
        let mut row: Vec<(usize, f64)> = scales
            .iter()
            .enumerate()
            .map(|(j, s)| (j, s * normal.sample(&mut rng)))
            .collect();
        normalize(&mut row);
        x.push_instance(&row);
    }
    let labels = planted_labels(&x, &truth, 20.0, &mut rng);
    LabeledDataset::new(x, labels)
}
