//! Feed-forward embedder/classifier and its optimizer.
//!
//! The network is `input -> tanh hidden layers -> linear embedding (D) ->
//! linear logits (C)`. The embedding layer output is what the association
//! losses consume.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numgrad::{Axis, Graph, Matrix, NodeId};

pub const MIN_EMBED_DIM: usize = 2;
pub const MAX_EMBED_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub biases: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderParams {
    layers: Vec<Layer>,
    input_dim: usize,
    embed_dim: usize,
    num_classes: usize,
    activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub embeddings: Matrix,
    pub logits: Matrix,
}

/// Graph handles for one set of bound parameters.
#[derive(Clone, Debug)]
pub struct BoundParams {
    nodes: Vec<(NodeId, NodeId)>,
}

impl BoundParams {
    /// Parameter node ids in `(w0, b0, w1, b1, ...)` order.
    pub fn ids(&self) -> Vec<NodeId> {
        self.nodes.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

pub fn init_params(
    input_dim: usize,
    hidden: &[usize],
    embed_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<EmbedderParams> {
    if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
        return Err(Error::contract("layer widths must be at least 1"));
    }
    if !(MIN_EMBED_DIM..=MAX_EMBED_DIM).contains(&embed_dim) {
        return Err(Error::contract(format!(
            "embedding dimension {embed_dim} outside [{MIN_EMBED_DIM}, {MAX_EMBED_DIM}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut widths = vec![input_dim];
    widths.extend_from_slice(hidden);
    widths.push(embed_dim);
    widths.push(num_classes);

    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (3.0 / fan_in as f64).sqrt();
            let weights = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
            Layer {
                weights,
                biases: Matrix::zeros(1, fan_out),
            }
        })
        .collect();

    Ok(EmbedderParams {
        layers,
        input_dim,
        embed_dim,
        num_classes,
        activation: Activation::Tanh,
    })
}

impl EmbedderParams {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Flat `(w0, b0, w1, b1, ...)` list.
    pub fn tensors(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.clone(), l.biases.clone()])
            .collect()
    }

    /// Rebuilds parameters from a flat list shaped like [`Self::tensors`].
    pub fn with_tensors(&self, tensors: Vec<Matrix>) -> Result<Self> {
        if tensors.len() != 2 * self.layers.len() {
            return Err(Error::contract(format!(
                "expected {} tensors, got {}",
                2 * self.layers.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(self.layers.len());
        for old in &self.layers {
            let weights = it.next().expect("length checked");
            let biases = it.next().expect("length checked");
            if weights.shape() != old.weights.shape() || biases.shape() != old.biases.shape() {
                return Err(Error::Dimension {
                    op: "with_tensors",
                    left: old.weights.shape(),
                    right: weights.shape(),
                });
            }
            layers.push(Layer { weights, biases });
        }
        Ok(EmbedderParams {
            layers,
            ..self.clone()
        })
    }

    /// Checks the layer chain, e.g. after loading from disk.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::contract(
                "need at least an embedding and an output layer",
            ));
        }
        let mut width = self.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.rows() != width || l.biases.shape() != (1, l.weights.cols()) {
                return Err(Error::contract(format!("layer {i} does not chain")));
            }
            width = l.weights.cols();
        }
        let n = self.layers.len();
        if self.layers[n - 2].weights.cols() != self.embed_dim || width != self.num_classes {
            return Err(Error::contract("embedding or output width mismatch"));
        }
        if !(MIN_EMBED_DIM..=MAX_EMBED_DIM).contains(&self.embed_dim) {
            return Err(Error::contract("embedding dimension out of range"));
        }
        Ok(())
    }

    /// Registers every weight and bias as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let nodes = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weights.clone()), g.leaf(l.biases.clone())))
            .collect();
        BoundParams { nodes }
    }

    /// Records the forward pass; returns `(embeddings, logits)` nodes.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        input: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let cols = g.value(input).cols();
        if cols != self.input_dim {
            return Err(Error::Dimension {
                op: "forward",
                left: g.value(input).shape(),
                right: (self.input_dim, self.layers[0].weights.cols()),
            });
        }
        let n = bound.nodes.len();
        let mut h = input;
        let mut embeddings = input;
        for (i, &(w, b)) in bound.nodes.iter().enumerate() {
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            h = if i + 2 < n {
                match self.activation {
                    Activation::Tanh => g.tanh(z),
                }
            } else {
                z
            };
            if i + 2 == n {
                embeddings = h;
            }
        }
        Ok((embeddings, h))
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.constant(batch.clone());
        let (e, l) = self.forward_graph(&mut g, &bound, x)?;
        Ok(ForwardOutput {
            embeddings: g.value(e).clone(),
            logits: g.value(l).clone(),
        })
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        Ok(self.forward(batch)?.logits.row_argmax())
    }
}

/// Class index of each one-hot row, or an error naming the first bad row.
pub fn onehot_classes(labels: &Matrix) -> Result<Vec<usize>> {
    (0..labels.rows())
        .map(|i| {
            let row = labels.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::contract(format!("label row {i} is not one-hot")));
            }
            Ok(row.iter().position(|&v| v == 1.0).expect("one entry is 1"))
        })
        .collect()
}

pub fn onehot(labels: &[usize], num_classes: usize) -> Matrix {
    Matrix::from_fn(labels.len(), num_classes, |i, c| {
        if labels[i] == c {
            1.0
        } else {
            0.0
        }
    })
}

/// Mean softmax cross-entropy of `logits` against one-hot `labels`.
pub fn task_loss(g: &mut Graph, logits: NodeId, labels: &Matrix) -> Result<NodeId> {
    let shape = g.value(logits).shape();
    if shape != labels.shape() {
        return Err(Error::Dimension {
            op: "task_loss",
            left: shape,
            right: labels.shape(),
        });
    }
    onehot_classes(labels)?;
    let y = g.constant(labels.clone());
    let logp = g.row_log_softmax(logits)?;
    let picked = g.mul(y, logp)?;
    let per_row = g.sum(picked, Axis::Rows);
    let mean = g.mean(per_row, Axis::All)?;
    Ok(g.scale(mean, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl OptState {
    pub fn new(shapes: &[(usize, usize)], config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        OptState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn for_params(params: &EmbedderParams, config: AdamConfig) -> Self {
        let shapes: Vec<_> = params.tensors().iter().map(Matrix::shape).collect();
        Self::new(&shapes, config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One update of raw tensors.
    pub fn update(&mut self, params: &[Matrix], grads: &[Matrix]) -> Result<Vec<Matrix>> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::contract("parameter/gradient/state count mismatch"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Dimension {
                    op: "opt_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        let mut out = Vec::with_capacity(params.len());
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let m = Matrix::from_fn(p.rows(), p.cols(), |i, j| {
                beta1 * self.first[k].get(i, j) + (1.0 - beta1) * g.get(i, j)
            });
            let v = Matrix::from_fn(p.rows(), p.cols(), |i, j| {
                let gij = g.get(i, j);
                beta2 * self.second[k].get(i, j) + (1.0 - beta2) * gij * gij
            });
            let next = Matrix::from_fn(p.rows(), p.cols(), |i, j| {
                let m_hat = m.get(i, j) / c1;
                let v_hat = v.get(i, j) / c2;
                p.get(i, j) - learning_rate * m_hat / (v_hat.sqrt() + epsilon)
            });
            self.first[k] = m;
            self.second[k] = v;
            out.push(next);
        }
        Ok(out)
    }
}

/// Applies one optimizer update to the embedder parameters.
pub fn opt_step(
    params: &EmbedderParams,
    grads: &[Matrix],
    state: &mut OptState,
) -> Result<EmbedderParams> {
    let updated = state.update(&params.tensors(), grads)?;
    params.with_tensors(updated)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: EmbedderParams,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: EmbedderParams, config: serde_json::Value) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            params,
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}
