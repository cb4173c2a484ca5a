//! Finite-difference suites over every differentiable operation and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assoc::{
    affinity, assoc_loss, round_trip, transitions, visit_loss, visit_probs, walker_loss,
    AffinityKind, AssocLossConfig, EqualityMatrix,
};
use crate::backbone::{init_params, onehot, task_loss};
use crate::error::Result;
use crate::numgrad::{grad_check_with, Axis, Graph, Matrix, NodeId};
use crate::seed::derive_seed;

pub const FD_STEP: f64 = 1e-5;
/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-5;
/// Tolerance for composite losses.
pub const LOSS_TOL: f64 = 1e-4;
pub const MAX_SIDE: usize = 8;

/// Deliberate corruption of an analytic gradient, for checking that the
/// suites actually catch errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    WalkerSignFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SuiteKind {
    Op,
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub kind: SuiteKind,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type BuildFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct Case {
    inputs: Vec<Matrix>,
    build: BuildFn,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (
        rng.random_range(1..=MAX_SIDE),
        rng.random_range(1..=MAX_SIDE),
    )
}

/// Projects a matrix-valued node to a scalar with fixed random weights so
/// every output entry gets a distinct adjoint.
fn project(g: &mut Graph, node: NodeId, weights: &Matrix) -> Result<NodeId> {
    let w = g.constant(weights.clone());
    let m = g.mul(node, w)?;
    Ok(g.sum(m, Axis::All))
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = dims(rng);
    let k = rng.random_range(1..=MAX_SIDE);
    let a = uniform_matrix(rng, r, c, -2.0, 2.0);
    match name {
        "matmul" => {
            let b = uniform_matrix(rng, c, k, -2.0, 2.0);
            let w = uniform_matrix(rng, r, k, -1.0, 1.0);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, x| {
                    let p = g.matmul(x[0], x[1])?;
                    project(g, p, &w)
                }),
            }
        }
        "add" | "sub" | "mul" => {
            let b = uniform_matrix(rng, r, c, -2.0, 2.0);
            let w = uniform_matrix(rng, r, c, -1.0, 1.0);
            let which = name.to_string();
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, x| {
                    let y = match which.as_str() {
                        "add" => g.add(x[0], x[1])?,
                        "sub" => g.sub(x[0], x[1])?,
                        _ => g.mul(x[0], x[1])?,
                    };
                    project(g, y, &w)
                }),
            }
        }
        "add_row" => {
            let b = uniform_matrix(rng, 1, c, -2.0, 2.0);
            let w = uniform_matrix(rng, r, c, -1.0, 1.0);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, x| {
                    let y = g.add_row(x[0], x[1])?;
                    project(g, y, &w)
                }),
            }
        }
        "scale" | "tanh" | "transpose" | "row_softmax" | "row_log_softmax" => {
            let w = uniform_matrix(rng, r, c, -1.0, 1.0);
            let s = rng.random_range(-3.0..3.0);
            let which = name.to_string();
            Case {
                inputs: vec![a],
                build: Box::new(move |g, x| {
                    let y = match which.as_str() {
                        "scale" => g.scale(x[0], s),
                        "tanh" => g.tanh(x[0]),
                        "row_softmax" => g.row_softmax(x[0])?,
                        "row_log_softmax" => g.row_log_softmax(x[0])?,
                        _ => {
                            let t = g.transpose(x[0]);
                            g.transpose(t)
                        }
                    };
                    project(g, y, &w)
                }),
            }
        }
        "log" => {
            let pos = uniform_matrix(rng, r, c, 0.2, 3.0);
            let w = uniform_matrix(rng, r, c, -1.0, 1.0);
            Case {
                inputs: vec![pos],
                build: Box::new(move |g, x| {
                    let y = g.log(x[0]);
                    project(g, y, &w)
                }),
            }
        }
        "sum" | "mean" => {
            let axis = [Axis::All, Axis::Rows, Axis::Cols][rng.random_range(0..3)];
            let shape = match axis {
                Axis::All => (1, 1),
                Axis::Rows => (r, 1),
                Axis::Cols => (1, c),
            };
            let w = uniform_matrix(rng, shape.0, shape.1, -1.0, 1.0);
            let is_sum = name == "sum";
            Case {
                inputs: vec![a],
                build: Box::new(move |g, x| {
                    let y = if is_sum {
                        g.sum(x[0], axis)
                    } else {
                        g.mean(x[0], axis)?
                    };
                    project(g, y, &w)
                }),
            }
        }
        "neg_sq_dist" => {
            let b = uniform_matrix(rng, k, c, -2.0, 2.0);
            let w = uniform_matrix(rng, r, k, -1.0, 1.0);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, x| {
                    let y = g.neg_sq_dist(x[0], x[1])?;
                    project(g, y, &w)
                }),
            }
        }
        other => unreachable!("unknown op suite {other}"),
    }
}

pub const OP_SUITES: [&str; 14] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "log",
    "tanh",
    "row_softmax",
    "row_log_softmax",
    "transpose",
    "sum",
    "mean",
    "neg_sq_dist",
];

pub const LOSS_SUITES: [&str; 9] = [
    "task_loss",
    "walker_loss/dot_product",
    "walker_loss/neg_squared_euclidean",
    "visit_loss/unweighted",
    "visit_loss/weighted",
    "assoc_total/dot_product",
    "assoc_total/neg_squared_euclidean",
    "assoc_total_weighted/neg_squared_euclidean",
    "joint_through_embedder",
];

fn kind_of(name: &str) -> AffinityKind {
    if name.ends_with("dot_product") {
        AffinityKind::DotProduct
    } else {
        AffinityKind::NegSquaredEuclidean
    }
}

/// Embedding scale keeps affinities moderate for either kind.
const EMB_SCALE: f64 = 0.8;

fn random_classes(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

fn loss_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let n_s = rng.random_range(2..=MAX_SIDE);
    let n_t = rng.random_range(2..=MAX_SIDE);
    let d = rng.random_range(2..=MAX_SIDE);
    let c = rng.random_range(2..=4);
    let src = uniform_matrix(rng, n_s, d, -EMB_SCALE, EMB_SCALE);
    let tgt = uniform_matrix(rng, n_t, d, -EMB_SCALE, EMB_SCALE);
    let classes = random_classes(rng, n_s, c);
    let labels = onehot(&classes, c);
    let gamma: Vec<f64> = (0..n_t).map(|_| rng.random_range(0.2..3.0)).collect();

    match name {
        "task_loss" => {
            let logits = uniform_matrix(rng, n_s, c, -3.0, 3.0);
            Case {
                inputs: vec![logits],
                build: Box::new(move |g, x| task_loss(g, x[0], &labels)),
            }
        }
        n if n.starts_with("walker_loss") => {
            let kind = kind_of(n);
            let eq = EqualityMatrix::from_classes(&classes);
            Case {
                inputs: vec![src, tgt],
                build: Box::new(move |g, x| {
                    let a = affinity(g, x[0], x[1], kind)?;
                    let (pst, pts) = transitions(g, a)?;
                    let rt = round_trip(g, pst, pts)?;
                    walker_loss(g, &eq, rt)
                }),
            }
        }
        n if n.starts_with("visit_loss") => {
            let weights = n.ends_with("weighted") && !n.ends_with("unweighted");
            Case {
                inputs: vec![src, tgt],
                build: Box::new(move |g, x| {
                    let a = affinity(g, x[0], x[1], AffinityKind::NegSquaredEuclidean)?;
                    let (pst, _) = transitions(g, a)?;
                    let vp = visit_probs(g, pst)?;
                    visit_loss(g, vp, weights.then_some(gamma.as_slice()))
                }),
            }
        }
        n if n.starts_with("assoc_total") => {
            let config = AssocLossConfig {
                beta: rng.random_range(0.1..1.0),
                affinity: kind_of(n),
                gamma: n.starts_with("assoc_total_weighted").then_some(gamma),
                renormalize_gamma: false,
            };
            Case {
                inputs: vec![src, tgt],
                build: Box::new(move |g, x| Ok(assoc_loss(g, x[0], &labels, x[1], &config)?.total)),
            }
        }
        "joint_through_embedder" => {
            let input_dim = rng.random_range(2..=4);
            let params =
                init_params(input_dim, &[5], d.max(2), c, rng.random()).expect("valid widths");
            let xs = uniform_matrix(rng, n_s, input_dim, -1.0, 1.0);
            let xt = uniform_matrix(rng, n_t, input_dim, -1.0, 1.0);
            let config = AssocLossConfig {
                beta: 0.5,
                ..AssocLossConfig::default()
            };
            let inputs = params.tensors();
            Case {
                inputs,
                build: Box::new(move |g, x| {
                    let xs_n = g.constant(xs.clone());
                    let xt_n = g.constant(xt.clone());
                    let (es, ls) = forward_with_leaves(g, x, xs_n)?;
                    let (et, _) = forward_with_leaves(g, x, xt_n)?;
                    let task = task_loss(g, ls, &labels)?;
                    let assoc = assoc_loss(g, es, &labels, et, &config)?;
                    g.add(task, assoc.total)
                }),
            }
        }
        other => unreachable!("unknown loss suite {other}"),
    }
}

/// Forward pass whose weights are the given leaf nodes, ordered as
/// `EmbedderParams::tensors`.
fn forward_with_leaves(
    g: &mut Graph,
    leaves: &[NodeId],
    input: NodeId,
) -> Result<(NodeId, NodeId)> {
    let n = leaves.len() / 2;
    let mut h = input;
    let mut emb = input;
    for i in 0..n {
        let z = g.matmul(h, leaves[2 * i])?;
        let z = g.add_row(z, leaves[2 * i + 1])?;
        h = if i + 2 < n { g.tanh(z) } else { z };
        if i + 2 == n {
            emb = h;
        }
    }
    Ok((emb, h))
}

fn run_suite(
    name: &str,
    kind: SuiteKind,
    seeds: usize,
    base_seed: u64,
    fault: Option<Fault>,
) -> Result<SuiteResult> {
    let tolerance = match kind {
        SuiteKind::Op => OP_TOL,
        SuiteKind::Loss => LOSS_TOL,
    };
    let flip = fault == Some(Fault::WalkerSignFlip) && name.contains("walker");
    let mut max_err: f64 = 0.0;
    for s in 0..seeds {
        let tag = name
            .bytes()
            .fold(s as u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, tag));
        let case = match kind {
            SuiteKind::Op => op_case(name, &mut rng),
            SuiteKind::Loss => loss_case(name, &mut rng),
        };
        let check = grad_check_with(&case.build, &case.inputs, FD_STEP, tolerance, |grads| {
            if flip {
                for m in grads.iter_mut() {
                    *m = m.map(|v| -v);
                }
            }
        })?;
        max_err = max_err.max(check.max_rel_error);
    }
    Ok(SuiteResult {
        name: name.to_string(),
        kind,
        cases: seeds,
        max_rel_error: max_err,
        tolerance,
        passed: max_err < tolerance,
    })
}

/// Runs every op and loss suite with `seeds` random cases each.
pub fn run_all(seeds: usize, base_seed: u64, fault: Option<Fault>) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for name in OP_SUITES {
        out.push(run_suite(name, SuiteKind::Op, seeds, base_seed, fault)?);
    }
    for name in LOSS_SUITES {
        out.push(run_suite(name, SuiteKind::Loss, seeds, base_seed, fault)?);
    }
    Ok(out)
}

/// Only the loss suites.
pub fn run_losses(seeds: usize, base_seed: u64, fault: Option<Fault>) -> Result<Vec<SuiteResult>> {
    LOSS_SUITES
        .iter()
        .map(|name| run_suite(name, SuiteKind::Loss, seeds, base_seed, fault))
        .collect()
}
