//! Seeded synthetic data: Gaussian embedding sets and labelled class clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding_store::EmbeddingSet;
use crate::error::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut impl Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

/// `n` rows of i.i.d. standard normal entries with ids `{prefix}{i}`.
pub fn gaussian_set(n: usize, dim: usize, seed: u64, prefix: &str) -> Result<EmbeddingSet> {
    let mut r = rng(seed);
    let data = (0..n * dim)
        .map(|_| StandardNormal.sample(&mut r))
        .collect::<Vec<f32>>();
    let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
    EmbeddingSet::new(ids, dim, data, false)
}

/// Samples drawn around per-class centroids.
#[derive(Debug, Clone)]
pub struct LabelledSet {
    pub set: EmbeddingSet,
    pub labels: Vec<usize>,
}

/// `per_class` samples for each centroid, `centroid + N(0, noise²)`, ids `{prefix}{class}_{i}`.
pub fn sample_clusters(
    centroids: &[Vec<f64>],
    per_class: usize,
    noise: f64,
    seed: u64,
    prefix: &str,
) -> Result<LabelledSet> {
    let mut r = rng(seed);
    let dim = centroids.first().map_or(1, Vec::len);
    let mut ids = Vec::with_capacity(centroids.len() * per_class);
    let mut data = Vec::with_capacity(centroids.len() * per_class * dim);
    let mut labels = Vec::with_capacity(centroids.len() * per_class);
    for (c, mu) in centroids.iter().enumerate() {
        for i in 0..per_class {
            ids.push(format!("{prefix}{c}_{i}"));
            labels.push(c);
            for &m in mu {
                let z: f64 = StandardNormal.sample(&mut r);
                data.push((m + noise * z) as f32);
            }
        }
    }
    Ok(LabelledSet {
        set: EmbeddingSet::new(ids, dim, data, false)?,
        labels,
    })
}

/// Ground truth where each query's relevant items are the index rows sharing its label.
pub fn label_ground_truth(
    queries: &EmbeddingSet,
    query_labels: &[usize],
    index: &EmbeddingSet,
    index_labels: &[usize],
) -> Result<crate::eval::GroundTruth> {
    let mut by_label: std::collections::HashMap<usize, Vec<&str>> = std::collections::HashMap::new();
    for (id, &l) in index.ids().iter().zip(index_labels) {
        by_label.entry(l).or_default().push(id);
    }
    let mut gt = crate::eval::GroundTruth::new();
    for (id, l) in queries.ids().iter().zip(query_labels) {
        gt.insert(id.clone(), by_label.get(l).cloned().unwrap_or_default())?;
    }
    Ok(gt)
}

/// mP@k of exact search over `index` for `queries`, relevance by shared label.
pub fn label_mp_at_k(
    queries: &EmbeddingSet,
    query_labels: &[usize],
    index: &EmbeddingSet,
    index_labels: &[usize],
    k: usize,
) -> Result<f64> {
    let gt = label_ground_truth(queries, query_labels, index, index_labels)?;
    let idx = crate::retrieval::build_index(index.clone())?;
    let results = crate::retrieval::search(&idx, queries, k)?;
    crate::eval::mean_precision_at_k(&results, &gt, k)
}
