//! Batch construction: class-balanced source batches and target batches
//! whose class mix sits at a chosen KL divergence from uniform.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::onehot;
use crate::error::{Error, Result};
use crate::estimate::ClassDistribution;
use crate::numgrad::Matrix;

/// Largest tilt magnitude, in units of the direction's range, so the
/// smallest tilted probability stays far from underflow.
const MAX_TILT_SPAN: f64 = 600.0;
pub const KL_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        let mut seen = vec![false; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::contract(format!(
                    "label {l} out of range [0, {num_classes})"
                )));
            }
            seen[l] = true;
        }
        if let Some(c) = seen.iter().position(|&s| !s) {
            return Err(Error::contract(format!("class {c} has no samples")));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> TargetBatch {
        TargetBatch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Source mini-batch with one-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub features: Matrix,
    pub labels: Matrix,
    pub classes: Vec<usize>,
}

/// Unlabeled batch as seen by adaptation. The labels ride along only for
/// oracle weighting and accuracy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    features: Matrix,
    labels: Vec<usize>,
}

impl TargetBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "target_batch",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(TargetBatch { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Withheld labels; never fed to adaptation except in oracle mode.
    pub fn withheld_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A tilted class distribution and how far it sits from uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlTarget {
    pub requested_kl: f64,
    pub achieved_kl: f64,
    pub tilt: f64,
    pub distribution: ClassDistribution,
}

/// `KL(p‖q) = Σ p_c ln(p_c / q_c)` in nats.
pub fn kl_divergence(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64> {
    if p.num_classes() != q.num_classes() {
        return Err(Error::contract(format!(
            "KL between distributions over {} and {} classes",
            p.num_classes(),
            q.num_classes()
        )));
    }
    let mut total = 0.0;
    for (c, (&pc, &qc)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pc > 0.0 {
            if !(qc > 0.0) {
                return Err(Error::contract(format!(
                    "q has no mass on class {c} where p does"
                )));
            }
            total += pc * (pc / qc).ln();
        }
    }
    Ok(total.max(0.0))
}

/// `ln q` for `q ∝ exp(t·g)`.
fn tilted_log_probs(direction: &[f64], t: f64) -> Vec<f64> {
    let max = direction
        .iter()
        .map(|&g| t * g)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + direction
            .iter()
            .map(|&g| (t * g - max).exp())
            .sum::<f64>()
            .ln();
    direction.iter().map(|&g| t * g - lse).collect()
}

/// `KL(uniform ‖ q_t)` evaluated in log space.
fn tilted_kl(direction: &[f64], t: f64) -> f64 {
    let c = direction.len() as f64;
    let logq = tilted_log_probs(direction, t);
    (-c.ln() - logq.iter().sum::<f64>() / c).max(0.0)
}

/// Seed-drawn zero-mean unit vector.
fn tilt_direction(num_classes: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..num_classes)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mean = raw.iter().sum::<f64>() / num_classes as f64;
    let centred: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let norm = centred.iter().map(|v| v * v).sum::<f64>().sqrt();
    centred.iter().map(|v| v / norm).collect()
}

/// Largest KL reachable by the tilt family for this direction.
fn max_tilt(direction: &[f64]) -> f64 {
    let max = direction.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = direction.iter().copied().fold(f64::INFINITY, f64::min);
    MAX_TILT_SPAN / (max - min)
}

/// Exponentially tilts the uniform distribution along a seed-chosen
/// direction until `KL(uniform‖q)` hits `requested_kl`.
pub fn make_divergent_distribution(
    num_classes: usize,
    requested_kl: f64,
    seed: u64,
) -> Result<KlTarget> {
    if num_classes == 0 {
        return Err(Error::contract("need at least one class"));
    }
    if !(requested_kl >= 0.0) || !requested_kl.is_finite() {
        return Err(Error::contract(format!(
            "requested KL must be finite and >= 0, got {requested_kl}"
        )));
    }
    let uniform = ClassDistribution::uniform(num_classes);
    if requested_kl == 0.0 {
        return Ok(KlTarget {
            requested_kl,
            achieved_kl: 0.0,
            tilt: 0.0,
            distribution: uniform,
        });
    }
    if num_classes == 1 {
        return Err(Error::contract(
            "a single class admits only KL = 0 (achievable bound 0)",
        ));
    }

    let direction = tilt_direction(num_classes, seed);
    let t_max = max_tilt(&direction);
    let bound = tilted_kl(&direction, t_max);
    if requested_kl > bound {
        return Err(Error::contract(format!(
            "KL {requested_kl} unreachable for {num_classes} classes; achievable bound {bound:.6}"
        )));
    }

    // KL is increasing in t >= 0: d/dt ln Z = E_q[g] >= mean(g) = 0.
    let (mut lo, mut hi) = (0.0, t_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tilted_kl(&direction, mid) < requested_kl {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi.max(1.0) {
            break;
        }
    }
    let tilt = 0.5 * (lo + hi);
    let probs: Vec<f64> = tilted_log_probs(&direction, tilt)
        .into_iter()
        .map(f64::exp)
        .collect();
    let distribution = ClassDistribution::from_weights(&probs)?;
    let achieved_kl = kl_divergence(&uniform, &distribution)?;
    if (achieved_kl - requested_kl).abs() > KL_TOL {
        return Err(Error::contract(format!(
            "bisection reached KL {achieved_kl}, requested {requested_kl}"
        )));
    }
    Ok(KlTarget {
        requested_kl,
        achieved_kl,
        tilt,
        distribution,
    })
}

/// Largest-remainder apportionment of `n` items; ties go to the lower class
/// index.
pub fn largest_remainder_counts(dist: &ClassDistribution, n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = dist.probs().iter().map(|&p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(n.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

pub fn balanced_source_batch(
    ds: &LabeledDataset,
    per_class: usize,
    seed: u64,
) -> Result<SourceBatch> {
    balanced_source_batch_with(ds, per_class, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Exactly `per_class` samples of every class, drawn without replacement and
/// shuffled.
pub fn balanced_source_batch_with<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    per_class: usize,
    rng: &mut R,
) -> Result<SourceBatch> {
    let by_class = ds.indices_by_class();
    let mut picked = Vec::with_capacity(per_class * ds.num_classes);
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::contract(format!(
                "class {c} has {} samples, need {per_class}",
                members.len()
            )));
        }
        picked.extend(
            index::sample(rng, members.len(), per_class)
                .into_iter()
                .map(|k| members[k]),
        );
    }
    picked.shuffle(rng);
    let classes: Vec<usize> = picked.iter().map(|&i| ds.labels[i]).collect();
    Ok(SourceBatch {
        features: ds.features.select_rows(&picked),
        labels: onehot(&classes, ds.num_classes),
        classes,
    })
}

pub fn distribution_target_batch(
    ds: &LabeledDataset,
    dist: &ClassDistribution,
    n: usize,
    seed: u64,
) -> Result<TargetBatch> {
    distribution_target_batch_with(ds, dist, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Per-class counts follow [`largest_remainder_counts`]; samples are drawn
/// without replacement and shuffled.
pub fn distribution_target_batch_with<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    dist: &ClassDistribution,
    n: usize,
    rng: &mut R,
) -> Result<TargetBatch> {
    if dist.num_classes() != ds.num_classes {
        return Err(Error::contract(format!(
            "distribution over {} classes for a {}-class dataset",
            dist.num_classes(),
            ds.num_classes
        )));
    }
    let counts = largest_remainder_counts(dist, n);
    let by_class = ds.indices_by_class();
    let mut picked = Vec::with_capacity(n);
    for (c, (&count, members)) in counts.iter().zip(&by_class).enumerate() {
        if members.len() < count {
            return Err(Error::contract(format!(
                "class {c} has {} samples, need {count}",
                members.len()
            )));
        }
        picked.extend(
            index::sample(rng, members.len(), count)
                .into_iter()
                .map(|k| members[k]),
        );
    }
    picked.shuffle(rng);
    Ok(ds.subset(&picked))
}
