//! Association losses between a labeled source batch and an unlabeled target
//! batch.
//!
//! Source embeddings `x_s` (N_S×D) and target embeddings `x_t` (N_T×D) give
//! an affinity matrix `A` (N_S×N_T). Row softmax of `A` is the source→target
//! transition `P_st`; row softmax of `Aᵀ` is target→source `P_ts`.
//!
//! * walker: cross-entropy between the class-equality matrix `E` and the
//!   round trip `P_st·P_ts`, averaged over source rows.
//! * visit: cross-entropy between the (optionally γ-weighted) uniform target
//!   distribution and the column mean of `P_st`.
//! * total: `walker + β·visit`.

use serde::{Deserialize, Serialize};

use crate::backbone::onehot_classes;
use crate::error::{Error, Result};
use crate::numgrad::{Axis, Graph, Matrix, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityKind {
    /// `a_ij = <x_i, x_j>`
    DotProduct,
    /// `a_ij = -|x_i - x_j|²`
    NegSquaredEuclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

/// Row-stochastic transition probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    probs: Matrix,
    direction: Direction,
}

impl TransitionMatrix {
    pub const ROW_SUM_TOL: f64 = 1e-9;

    pub fn new(probs: Matrix, direction: Direction) -> Result<Self> {
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::contract(format!(
                    "transition row {i} has a negative entry"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::contract(format!(
                    "transition row {i} sums to {total}"
                )));
            }
        }
        Ok(TransitionMatrix { probs, direction })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }
}

/// `e_ik = [y_i = y_k] / count(y_i)`; every row sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct EqualityMatrix {
    values: Matrix,
}

impl EqualityMatrix {
    pub fn from_classes(classes: &[usize]) -> Self {
        let max = classes.iter().copied().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; max];
        for &c in classes {
            counts[c] += 1;
        }
        let n = classes.len();
        let values = Matrix::from_fn(n, n, |i, k| {
            if classes[i] == classes[k] {
                1.0 / counts[classes[i]] as f64
            } else {
                0.0
            }
        });
        EqualityMatrix { values }
    }

    pub fn from_onehot(labels: &Matrix) -> Result<Self> {
        Ok(Self::from_classes(&onehot_classes(labels)?))
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssocLossConfig {
    pub beta: f64,
    pub affinity: AffinityKind,
    /// Per-target visit weights; `None` means all ones.
    pub gamma: Option<Vec<f64>>,
    /// Rescale γ to sum to N_T before use.
    pub renormalize_gamma: bool,
}

impl Default for AssocLossConfig {
    fn default() -> Self {
        AssocLossConfig {
            beta: 0.5,
            affinity: AffinityKind::NegSquaredEuclidean,
            gamma: None,
            renormalize_gamma: false,
        }
    }
}

/// Node ids of every intermediate in one association loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AssocLosses {
    pub affinity: NodeId,
    pub pst: NodeId,
    pub pts: NodeId,
    pub round_trip: NodeId,
    pub visit_probs: NodeId,
    pub walker: NodeId,
    pub visit: NodeId,
    pub total: NodeId,
}

pub fn affinity(g: &mut Graph, src: NodeId, tgt: NodeId, kind: AffinityKind) -> Result<NodeId> {
    let (s, t) = (g.value(src).shape(), g.value(tgt).shape());
    if s.1 != t.1 {
        return Err(Error::Dimension {
            op: "affinity",
            left: s,
            right: t,
        });
    }
    match kind {
        AffinityKind::DotProduct => {
            let tt = g.transpose(tgt);
            g.matmul(src, tt)
        }
        AffinityKind::NegSquaredEuclidean => g.neg_sq_dist(src, tgt),
    }
}

/// `(P_st, P_ts)` from an affinity node.
pub fn transitions(g: &mut Graph, affinity: NodeId) -> Result<(NodeId, NodeId)> {
    let pst = g.row_softmax(affinity)?;
    let at = g.transpose(affinity);
    let pts = g.row_softmax(at)?;
    Ok((pst, pts))
}

/// Numeric counterpart of [`transitions`].
pub fn transition_matrices(affinity: &Matrix) -> Result<(TransitionMatrix, TransitionMatrix)> {
    let mut g = Graph::new();
    let a = g.constant(affinity.clone());
    let (pst, pts) = transitions(&mut g, a)?;
    Ok((
        TransitionMatrix::new(g.value(pst).clone(), Direction::SourceToTarget)?,
        TransitionMatrix::new(g.value(pts).clone(), Direction::TargetToSource)?,
    ))
}

pub fn round_trip(g: &mut Graph, pst: NodeId, pts: NodeId) -> Result<NodeId> {
    g.matmul(pst, pts)
}

/// `-(1/N_S) Σ_ik e_ik log(max(rt_ik, ε))`
pub fn walker_loss(g: &mut Graph, equality: &EqualityMatrix, round_trip: NodeId) -> Result<NodeId> {
    let (e, r) = (equality.values.shape(), g.value(round_trip).shape());
    if e != r || r.0 != r.1 {
        return Err(Error::Dimension {
            op: "walker_loss",
            left: e,
            right: r,
        });
    }
    if r.0 == 0 {
        return Err(Error::contract("walker loss over an empty source batch"));
    }
    let e = g.constant(equality.values.clone());
    let log_rt = g.log(round_trip);
    let weighted = g.mul(e, log_rt)?;
    let total = g.sum(weighted, Axis::All);
    Ok(g.scale(total, -1.0 / r.0 as f64))
}

/// Column mean of `P_st`: how much source mass lands on each target.
pub fn visit_probs(g: &mut Graph, pst: NodeId) -> Result<NodeId> {
    g.mean(pst, Axis::Cols)
}

/// `-Σ_j γ_j (1/N_T) log(max(vp_j, ε))`, with γ_j = 1 when `gamma` is absent.
pub fn visit_loss(g: &mut Graph, visit_probs: NodeId, gamma: Option<&[f64]>) -> Result<NodeId> {
    let shape = g.value(visit_probs).shape();
    if shape.0 != 1 || shape.1 == 0 {
        return Err(Error::Dimension {
            op: "visit_loss",
            left: shape,
            right: (1, gamma.map_or(shape.1, <[f64]>::len)),
        });
    }
    let n_t = shape.1;
    let weights = match gamma {
        Some(w) => {
            if w.len() != n_t {
                return Err(Error::Dimension {
                    op: "visit_loss",
                    left: shape,
                    right: (1, w.len()),
                });
            }
            if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::contract("visit weights must be positive and finite"));
            }
            Matrix::row_vector(w)
        }
        None => Matrix::filled(1, n_t, 1.0),
    };
    let w = g.constant(weights);
    let log_vp = g.log(visit_probs);
    let weighted = g.mul(w, log_vp)?;
    let total = g.sum(weighted, Axis::All);
    Ok(g.scale(total, -1.0 / n_t as f64))
}

fn prepared_gamma(config: &AssocLossConfig, n_t: usize) -> Result<Option<Vec<f64>>> {
    let Some(gamma) = &config.gamma else {
        return Ok(None);
    };
    if gamma.len() != n_t {
        return Err(Error::Dimension {
            op: "assoc_loss",
            left: (1, n_t),
            right: (1, gamma.len()),
        });
    }
    if config.renormalize_gamma {
        let total: f64 = gamma.iter().sum();
        Ok(Some(gamma.iter().map(|v| v * n_t as f64 / total).collect()))
    } else {
        Ok(Some(gamma.clone()))
    }
}

/// Builds walker, visit and `walker + β·visit` on the graph.
pub fn assoc_loss(
    g: &mut Graph,
    src: NodeId,
    src_labels: &Matrix,
    tgt: NodeId,
    config: &AssocLossConfig,
) -> Result<AssocLosses> {
    if !(config.beta >= 0.0) {
        return Err(Error::contract(format!(
            "beta must be >= 0, got {}",
            config.beta
        )));
    }
    let n_s = g.value(src).rows();
    let n_t = g.value(tgt).rows();
    if src_labels.rows() != n_s {
        return Err(Error::Dimension {
            op: "assoc_loss",
            left: g.value(src).shape(),
            right: src_labels.shape(),
        });
    }
    let gamma = prepared_gamma(config, n_t)?;
    let equality = EqualityMatrix::from_onehot(src_labels)?;

    let a = affinity(g, src, tgt, config.affinity)?;
    let (pst, pts) = transitions(g, a)?;
    let rt = round_trip(g, pst, pts)?;
    let walker = walker_loss(g, &equality, rt)?;
    let vp = visit_probs(g, pst)?;
    let visit = visit_loss(g, vp, gamma.as_deref())?;
    let scaled = g.scale(visit, config.beta);
    let total = g.add(walker, scaled)?;
    Ok(AssocLosses {
        affinity: a,
        pst,
        pts,
        round_trip: rt,
        visit_probs: vp,
        walker,
        visit,
        total,
    })
}
