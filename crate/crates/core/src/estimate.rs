//! Target class-proportion estimates from agglomerative clustering, and the
//! visit weights γ derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::Matrix;

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    pub const SUM_TOL: f64 = 1e-12;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract(
                "class distribution needs at least one class",
            ));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::contract(
                "class probabilities must be finite and >= 0",
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::contract(format!(
                "class probabilities sum to {total}"
            )));
        }
        Ok(ClassDistribution { probs })
    }

    /// Normalizes non-negative weights onto the simplex.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::contract("weights must have positive mass"));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(num_classes: usize) -> Self {
        ClassDistribution {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    /// Empirical frequencies of `labels` over `num_classes` classes.
    pub fn empirical(labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::contract(
                "empirical distribution of an empty label set",
            ));
        }
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(Error::contract(format!(
                    "label {l} out of range [0, {num_classes})"
                )));
            }
            counts[l] += 1;
        }
        Ok(ClassDistribution {
            probs: counts
                .iter()
                .map(|&c| c as f64 / labels.len() as f64)
                .collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.probs.len() as f64;
        self.probs.iter().all(|&p| (p - u).abs() <= Self::SUM_TOL)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    sizes: Vec<usize>,
}

impl ClusterAssignment {
    /// Cluster id of each sample, in `[0, k)`.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Builds an assignment from raw labels; ids must cover `[0, k)`.
    pub fn from_labels(labels: Vec<usize>, k: usize) -> Result<Self> {
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            if l >= k {
                return Err(Error::contract(format!(
                    "cluster id {l} out of range [0, {k})"
                )));
            }
            sizes[l] += 1;
        }
        if sizes.contains(&0) {
            return Err(Error::contract("empty cluster"));
        }
        Ok(ClusterAssignment { labels, sizes })
    }
}

/// Bottom-up clustering with average linkage on Euclidean distances,
/// merging until `k` clusters remain.
///
/// The closest pair is merged at each step; ties go to the pair with the
/// lexicographically smallest (lower index, higher index), where a cluster's
/// index is its lowest member. Output ids are numbered by lowest member.
pub fn agglomerative_cluster(embeddings: &Matrix, k: usize) -> Result<ClusterAssignment> {
    let n = embeddings.rows();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "cannot form {k} clusters from {n} samples"
        )));
    }

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = embeddings
                .row(i)
                .iter()
                .zip(embeddings.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    // Slot i stands for the cluster whose lowest member is i.
    let mut active: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut parent: Vec<usize> = (0..n).collect();

    while active.len() > k {
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let d = dist[i * n + j];
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (_, keep, gone) = best;
        let (ni, nj) = (size[keep] as f64, size[gone] as f64);
        for &m in &active {
            if m == keep || m == gone {
                continue;
            }
            let d = (ni * dist[keep * n + m] + nj * dist[gone * n + m]) / (ni + nj);
            dist[keep * n + m] = d;
            dist[m * n + keep] = d;
        }
        size[keep] += size[gone];
        parent[gone] = keep;
        active.retain(|&m| m != gone);
    }

    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let mut id_of_slot = vec![usize::MAX; n];
    for (id, &slot) in active.iter().enumerate() {
        id_of_slot[slot] = id;
    }
    let labels: Vec<usize> = (0..n).map(|i| id_of_slot[root(i)]).collect();
    ClusterAssignment::from_labels(labels, k)
}

/// Cluster-size proportions, read as class proportions.
pub fn estimate_target_distribution(
    assignment: &ClusterAssignment,
    num_classes: usize,
) -> Result<ClassDistribution> {
    if assignment.num_clusters() != num_classes {
        return Err(Error::contract(format!(
            "assignment has {} clusters but there are {num_classes} classes",
            assignment.num_clusters()
        )));
    }
    let n = assignment.len() as f64;
    Ok(ClassDistribution {
        probs: assignment.sizes.iter().map(|&s| s as f64 / n).collect(),
    })
}

/// `γ_j = p_source / p_cluster(j)`.
///
/// Clusters are not matched to classes, so the source distribution must be
/// uniform: then the numerator is the same for every class.
pub fn gamma_weights(
    source: &ClassDistribution,
    assignment: &ClusterAssignment,
    cluster_dist: &ClassDistribution,
) -> Result<Vec<f64>> {
    if !source.is_uniform() {
        return Err(Error::contract(
            "cluster-based weights require a uniform source distribution",
        ));
    }
    if assignment.sizes.contains(&0) {
        return Err(Error::contract("zero-size cluster"));
    }
    if cluster_dist.num_classes() != assignment.num_clusters() {
        return Err(Error::contract(
            "cluster distribution does not match assignment",
        ));
    }
    if cluster_dist.probs.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::contract("cluster probabilities must be positive"));
    }
    let numerator = source.probs[0];
    Ok(assignment
        .labels
        .iter()
        .map(|&c| numerator / cluster_dist.probs[c])
        .collect())
}

/// γ from the true (withheld) target labels.
pub fn oracle_gamma(source: &ClassDistribution, labels: &[usize]) -> Result<Vec<f64>> {
    let c = source.num_classes();
    let target = ClassDistribution::empirical(labels, c)?;
    labels
        .iter()
        .map(|&l| {
            if !(source.probs[l] > 0.0) {
                return Err(Error::contract(format!("source has no mass on class {l}")));
            }
            Ok(source.probs[l] / target.probs[l])
        })
        .collect()
}

/// Clusters target embeddings into `num_classes` groups and returns γ under a
/// uniform source.
pub fn estimated_gamma(target_embeddings: &Matrix, num_classes: usize) -> Result<Vec<f64>> {
    let assignment = agglomerative_cluster(target_embeddings, num_classes)?;
    let dist = estimate_target_distribution(&assignment, num_classes)?;
    gamma_weights(&ClassDistribution::uniform(num_classes), &assignment, &dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points_1d(xs: &[f64]) -> Matrix {
        Matrix::from_fn(xs.len(), 1, |i, _| xs[i])
    }

    #[test]
    fn singleton_clusters_when_k_equals_n() {
        let a = agglomerative_cluster(&points_1d(&[3.0, 1.0, 2.0]), 3).unwrap();
        assert_eq!(a.labels(), &[0, 1, 2]);
        assert_eq!(a.sizes(), &[1, 1, 1]);
    }

    #[test]
    fn nearest_pair_merges_first() {
        let a = agglomerative_cluster(&points_1d(&[0.0, 0.1, 10.0]), 2).unwrap();
        assert_eq!(a.labels(), &[0, 0, 1]);
        assert_eq!(a.sizes(), &[2, 1]);
    }

    #[test]
    fn ties_break_toward_lowest_pair() {
        // 0-1 and 1-2 and 2-3 all at distance 1; (0,1) merges first.
        let a = agglomerative_cluster(&points_1d(&[0.0, 1.0, 2.0, 3.0]), 3).unwrap();
        assert_eq!(a.labels(), &[0, 0, 1, 2]);
    }

    #[test]
    fn average_linkage_differs_from_single() {
        // Single linkage would attach 2.1 to {0, 1} (gap 1.1 < 1.2).
        let pts = points_1d(&[0.0, 1.0, 2.1, 3.3]);
        let a = agglomerative_cluster(&pts, 2).unwrap();
        assert_eq!(a.labels(), &[0, 0, 1, 1]);
    }

    #[test]
    fn cluster_errors() {
        assert!(agglomerative_cluster(&points_1d(&[0.0, 1.0]), 3).is_err());
        assert!(agglomerative_cluster(&points_1d(&[0.0, 1.0]), 0).is_err());
    }

    #[test]
    fn distribution_from_sizes() {
        let cases: [(&[usize], &[f64]); 3] = [
            (&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1], &[0.5, 0.5]),
            (&[0, 0, 0, 0, 0, 0, 0, 0, 1, 1], &[0.8, 0.2]),
            (&[0, 0, 0, 0, 0, 0, 1, 1, 1, 2], &[0.6, 0.3, 0.1]),
        ];
        for (labels, expected) in cases {
            let k = expected.len();
            let a = ClusterAssignment::from_labels(labels.to_vec(), k).unwrap();
            let d = estimate_target_distribution(&a, k).unwrap();
            assert_eq!(d.probs(), expected);
        }
        let a = ClusterAssignment::from_labels(vec![0, 1], 2).unwrap();
        assert!(estimate_target_distribution(&a, 3).is_err());
    }

    #[test]
    fn gamma_examples() {
        let a = ClusterAssignment::from_labels(vec![0, 1, 0, 1], 2).unwrap();
        let d = estimate_target_distribution(&a, 2).unwrap();
        let g = gamma_weights(&ClassDistribution::uniform(2), &a, &d).unwrap();
        assert_eq!(g, vec![1.0; 4]);

        let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        let a = ClusterAssignment::from_labels(labels.clone(), 2).unwrap();
        let d = estimate_target_distribution(&a, 2).unwrap();
        let g = gamma_weights(&ClassDistribution::uniform(2), &a, &d).unwrap();
        for (j, &v) in g.iter().enumerate() {
            let expected = if j < 8 { 0.625 } else { 2.5 };
            assert!((v - expected).abs() < 1e-15);
        }
        let oracle = oracle_gamma(&ClassDistribution::uniform(2), &labels).unwrap();
        assert_eq!(oracle, g);
    }

    #[test]
    fn gamma_requires_uniform_source() {
        let a = ClusterAssignment::from_labels(vec![0, 1], 2).unwrap();
        let d = estimate_target_distribution(&a, 2).unwrap();
        let skewed = ClassDistribution::new(vec![0.7, 0.3]).unwrap();
        assert!(gamma_weights(&skewed, &a, &d).is_err());
    }

    #[test]
    fn oracle_examples() {
        let u = ClassDistribution::uniform(3);
        assert_eq!(oracle_gamma(&u, &[0, 1, 2, 2, 1, 0]).unwrap(), vec![1.0; 6]);

        let mut labels = vec![0usize; 9];
        labels.push(1);
        let g = oracle_gamma(&ClassDistribution::uniform(2), &labels).unwrap();
        assert!((g[0] - 5.0 / 9.0).abs() < 1e-15);
        assert!((g[9] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_inverts_cluster_frequencies() {
        let labels = vec![0, 2, 2, 1, 0, 2, 2, 2, 1, 2, 0];
        let a = ClusterAssignment::from_labels(labels.clone(), 3).unwrap();
        let d = estimate_target_distribution(&a, 3).unwrap();
        let g = gamma_weights(&ClassDistribution::uniform(3), &a, &d).unwrap();
        let n = labels.len() as f64;
        let total: f64 = labels
            .iter()
            .zip(&g)
            .map(|(&c, &gj)| gj * d.probs()[c] * 3.0 / n)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_validation() {
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ClassDistribution::new(vec![]).is_err());
        assert!(ClassDistribution::uniform(4).is_uniform());
        let d = ClassDistribution::from_weights(&[1.0, 3.0]).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
    }
}
