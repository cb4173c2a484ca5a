//! Sequential adaptation over a stream of unlabeled batches.
//!
//! A model `f_0` is pretrained on the labeled stationary set. When batch
//! `D_k` arrives, every retained model `f_0..f_{k-1}` is scored on it, then
//! `f_{k-1}` is adapted on `D_k` (task loss on fresh class-balanced source
//! batches plus the association losses against `D_k`) to give `f_k`, which
//! is scored on `D_k` at lag 0. `D_k` is dropped once its round ends; only
//! model checkpoints are kept.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assoc::{assoc_loss, AffinityKind, AssocLossConfig};
use crate::backbone::{init_params, opt_step, task_loss, AdamConfig, EmbedderParams, OptState};
use crate::error::{Error, Result};
use crate::estimate::{estimated_gamma, oracle_gamma, ClassDistribution};
use crate::numgrad::{Graph, Matrix};
use crate::sampling::{balanced_source_batch_with, LabeledDataset, TargetBatch};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// Plain visit loss.
    None,
    /// γ from agglomerative clustering of the current target embeddings.
    Estimated,
    /// γ from the withheld target labels.
    Oracle,
}

impl GammaMode {
    pub const ALL: [GammaMode; 3] = [GammaMode::None, GammaMode::Estimated, GammaMode::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            GammaMode::None => "none",
            GammaMode::Estimated => "estimated",
            GammaMode::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GammaMode::None),
            "estimated" => Ok(GammaMode::Estimated),
            "oracle" => Ok(GammaMode::Oracle),
            other => Err(Error::Config(format!("unknown gamma mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub per_class: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hidden: vec![32],
            embed_dim: 16,
            steps: 200,
            learning_rate: 3e-3,
            per_class: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Steps between the two compared losses.
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            window: 20,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub beta: f64,
    pub affinity: AffinityKind,
    pub gamma_mode: GammaMode,
    pub renormalize_gamma: bool,
    pub steps: usize,
    pub learning_rate: f64,
    pub source_per_class: usize,
    /// Stream batches held at once; only 1 is supported.
    pub window: usize,
    pub early_stop: Option<EarlyStop>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            beta: 0.5,
            affinity: AffinityKind::NegSquaredEuclidean,
            gamma_mode: GammaMode::Estimated,
            renormalize_gamma: false,
            steps: 200,
            learning_rate: 5e-3,
            source_per_class: 10,
            window: 1,
            early_stop: Some(EarlyStop::default()),
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window != 1 {
            return Err(Error::Config(format!(
                "window must be 1, got {}",
                self.window
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.source_per_class == 0 {
            return Err(Error::Config("source_per_class must be >= 1".into()));
        }
        Ok(())
    }

    fn assoc(&self, gamma: Option<Vec<f64>>) -> AssocLossConfig {
        AssocLossConfig {
            beta: self.beta,
            affinity: self.affinity,
            gamma,
            renormalize_gamma: self.renormalize_gamma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub task: f64,
    pub walker: f64,
    pub visit: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub params: EmbedderParams,
    pub losses: Vec<StepLosses>,
}

/// Fraction of rows whose arg-max logit matches the label.
pub fn evaluate(params: &EmbedderParams, features: &Matrix, labels: &[usize]) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "evaluate",
            left: features.shape(),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty batch"));
    }
    let predicted = params.predict(features)?;
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// The untrained model `pretrain` starts from.
pub fn initial_params(
    source: &LabeledDataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<EmbedderParams> {
    init_params(
        source.input_dim(),
        &config.hidden,
        config.embed_dim,
        source.num_classes(),
        derive_seed(seed, 0x1417),
    )
}

/// Supervised training of a fresh model on class-balanced batches; returns
/// the loss trace alongside the parameters.
pub fn pretrain_with_trace(
    source: &LabeledDataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(EmbedderParams, Vec<f64>)> {
    let mut params = initial_params(source, config, seed)?;
    let mut state = OptState::for_params(
        &params,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5a3c));
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = balanced_source_batch_with(source, config.per_class, &mut rng)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(batch.features);
        let (_, logits) = params.forward_graph(&mut g, &bound, x)?;
        let loss = task_loss(&mut g, logits, &batch.labels)?;
        trace.push(g.scalar(loss).expect("scalar loss"));
        let grads = g.backward(loss)?;
        let grads: Vec<Matrix> = bound
            .ids()
            .iter()
            .map(|&id| grads.get(id).clone())
            .collect();
        params = opt_step(&params, &grads, &mut state)?;
    }
    Ok((params, trace))
}

/// `f_0`: minimizes the task loss only.
pub fn pretrain(
    source: &LabeledDataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<EmbedderParams> {
    Ok(pretrain_with_trace(source, config, seed)?.0)
}

/// One adaptation round: `steps` optimizer updates of
/// `task(source) + walker + β·visit` against `target`.
pub fn adapt_round(
    params: &EmbedderParams,
    source: &LabeledDataset,
    target: &TargetBatch,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    config.validate()?;
    let c = source.num_classes();
    if target.is_empty() {
        return Err(Error::contract("empty target batch"));
    }
    if target.features().cols() != params.input_dim() {
        return Err(Error::Dimension {
            op: "adapt_round",
            left: target.features().shape(),
            right: (target.len(), params.input_dim()),
        });
    }
    if config.gamma_mode == GammaMode::Estimated && target.len() < c {
        return Err(Error::contract(format!(
            "cannot cluster {} target samples into {c} classes",
            target.len()
        )));
    }
    let oracle = match config.gamma_mode {
        GammaMode::Oracle => Some(oracle_gamma(
            &ClassDistribution::uniform(c),
            target.withheld_labels(),
        )?),
        _ => None,
    };

    let mut params = params.clone();
    let mut state = OptState::for_params(
        &params,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses: Vec<StepLosses> = Vec::with_capacity(config.steps);

    for _ in 0..config.steps {
        let batch = balanced_source_batch_with(source, config.source_per_class, &mut rng)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xs = g.constant(batch.features);
        let xt = g.constant(target.features().clone());
        let (es, ls) = params.forward_graph(&mut g, &bound, xs)?;
        let (et, _) = params.forward_graph(&mut g, &bound, xt)?;
        let task = task_loss(&mut g, ls, &batch.labels)?;

        let gamma = match config.gamma_mode {
            GammaMode::None => None,
            GammaMode::Estimated => Some(estimated_gamma(g.value(et), c)?),
            GammaMode::Oracle => oracle.clone(),
        };
        let assoc = assoc_loss(&mut g, es, &batch.labels, et, &config.assoc(gamma))?;
        let total = g.add(task, assoc.total)?;

        let step = StepLosses {
            task: g.scalar(task).expect("scalar"),
            walker: g.scalar(assoc.walker).expect("scalar"),
            visit: g.scalar(assoc.visit).expect("scalar"),
            total: g.scalar(total).expect("scalar"),
        };
        let grads = g.backward(total)?;
        let grads: Vec<Matrix> = bound
            .ids()
            .iter()
            .map(|&id| grads.get(id).clone())
            .collect();
        params = opt_step(&params, &grads, &mut state)?;
        losses.push(step);

        if let Some(es) = config.early_stop {
            if plateaued(&losses, es) {
                break;
            }
        }
    }
    Ok(AdaptOutcome { params, losses })
}

fn plateaued(losses: &[StepLosses], es: EarlyStop) -> bool {
    let n = losses.len();
    if es.window == 0 || n <= es.window {
        return false;
    }
    let now = losses[n - 1].total;
    let then = losses[n - 1 - es.window].total;
    (now - then).abs() / then.abs().max(f64::MIN_POSITIVE) < es.rel_tol
}

/// Anything that can stand in for an incoming stream batch.
pub trait StreamBatch {
    fn features(&self) -> &Matrix;
    fn labels(&self) -> &[usize];
    fn to_target(&self) -> Result<TargetBatch> {
        TargetBatch::new(self.features().clone(), self.labels().to_vec())
    }
}

impl StreamBatch for TargetBatch {
    fn features(&self) -> &Matrix {
        TargetBatch::features(self)
    }

    fn labels(&self) -> &[usize] {
        self.withheld_labels()
    }

    fn to_target(&self) -> Result<TargetBatch> {
        Ok(self.clone())
    }
}

/// Accuracy by (batch, lag). Row `m` (0-based) has lags `0..=m`; larger lags
/// are absent because that batch had not arrived yet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagMatrix {
    /// `acc[batch][lag]`
    pub acc: Vec<Vec<Option<f64>>>,
    /// `f_0` on each batch.
    pub source_only: Vec<f64>,
}

impl LagMatrix {
    pub fn new(k: usize) -> Self {
        LagMatrix {
            acc: vec![vec![None; k]; k],
            source_only: vec![0.0; k],
        }
    }

    pub fn num_batches(&self) -> usize {
        self.acc.len()
    }

    pub fn get(&self, batch: usize, lag: usize) -> Option<f64> {
        self.acc.get(batch)?.get(lag).copied().flatten()
    }

    /// `(lag, accuracy)` for every present cell of a row, with `f_0` at lag
    /// `batch + 1`.
    pub fn row_with_source(&self, batch: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = (0..=batch)
            .filter_map(|lag| self.get(batch, lag).map(|a| (lag, a)))
            .collect();
        out.push((batch + 1, self.source_only[batch]));
        out
    }

    /// `round,lag,accuracy` rows; absent cells have an empty accuracy and the
    /// source-only model appears under lag `source`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,lag,accuracy\n");
        for (m, row) in self.acc.iter().enumerate() {
            for (lag, cell) in row.iter().enumerate() {
                match cell {
                    Some(a) => out.push_str(&format!("{},{lag},{a:?}\n", m + 1)),
                    None => out.push_str(&format!("{},{lag},\n", m + 1)),
                }
            }
            out.push_str(&format!("{},source,{:?}\n", m + 1, self.source_only[m]));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLosses {
    pub round: usize,
    pub steps: Vec<StepLosses>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRunReport {
    pub config: serde_json::Value,
    pub seed: u64,
    pub pretrain_final_loss: Option<f64>,
    pub losses: Vec<RoundLosses>,
    pub lag: LagMatrix,
}

impl StreamRunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        self.lag.to_csv()
    }

    pub fn total_steps(&self) -> usize {
        self.losses.iter().map(|r| r.steps.len()).sum()
    }
}

/// Emitted after each round, once the round's batch has been released.
#[derive(Clone, Copy, Debug)]
pub struct RoundEvent {
    /// 1-based round number.
    pub round: usize,
    pub lag0_accuracy: f64,
}

/// Streams `batches` through an already pretrained `f_0`.
pub fn run_stream_from<B, I, H>(
    f0: &EmbedderParams,
    source: &LabeledDataset,
    batches: I,
    config: &AdaptationConfig,
    seed: u64,
    mut on_round: H,
) -> Result<(LagMatrix, Vec<RoundLosses>)>
where
    B: StreamBatch,
    I: IntoIterator<Item = B>,
    I::IntoIter: ExactSizeIterator,
    H: FnMut(&RoundEvent),
{
    config.validate()?;
    let batches = batches.into_iter();
    let k = batches.len();
    if k == 0 {
        return Err(Error::contract("stream has no batches"));
    }
    let mut lag = LagMatrix::new(k);
    let mut losses = Vec::with_capacity(k);
    // models[j] = f_j
    let mut models = vec![f0.clone()];

    for (m, batch) in batches.enumerate() {
        lag.source_only[m] = evaluate(&models[0], batch.features(), batch.labels())?;
        for (j, model) in models.iter().enumerate().skip(1) {
            lag.acc[m][m + 1 - j] = Some(evaluate(model, batch.features(), batch.labels())?);
        }
        let target = batch.to_target()?;
        let outcome = adapt_round(
            models.last().expect("f_0 present"),
            source,
            &target,
            config,
            derive_seed(seed, m as u64 + 1),
        )?;
        let acc0 = evaluate(&outcome.params, batch.features(), batch.labels())?;
        lag.acc[m][0] = Some(acc0);
        drop(target);
        drop(batch);
        models.push(outcome.params);
        losses.push(RoundLosses {
            round: m + 1,
            steps: outcome.losses,
        });
        on_round(&RoundEvent {
            round: m + 1,
            lag0_accuracy: acc0,
        });
    }
    Ok((lag, losses))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub pretrain: PretrainConfig,
    pub adapt: AdaptationConfig,
}

/// Pretrains `f_0` on `source`, then adapts through `batches` in order.
pub fn run_stream<B, I>(
    source: &LabeledDataset,
    batches: I,
    config: &StreamConfig,
    seed: u64,
) -> Result<StreamRunReport>
where
    B: StreamBatch,
    I: IntoIterator<Item = B>,
    I::IntoIter: ExactSizeIterator,
{
    let (f0, trace) = pretrain_with_trace(source, &config.pretrain, derive_seed(seed, 0))?;
    let (lag, losses) = run_stream_from(&f0, source, batches, &config.adapt, seed, |_| {})?;
    Ok(StreamRunReport {
        config: serde_json::to_value(config).map_err(|e| Error::Serde(e.to_string()))?,
        seed,
        pretrain_final_loss: trace.last().copied(),
        losses,
        lag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_params;

    #[test]
    fn evaluate_examples() {
        let p = init_params(2, &[3], 2, 2, 0).unwrap();
        let zeroed: Vec<Matrix> = p.tensors().iter().map(|t| t.map(|_| 0.0)).collect();
        let constant = p.with_tensors(zeroed).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, 0.5]]);
        // all-zero logits pick class 0
        assert_eq!(evaluate(&constant, &x, &[0, 1, 0, 1]).unwrap(), 0.5);

        let pred = p.predict(&x).unwrap();
        assert_eq!(evaluate(&p, &x, &pred).unwrap(), 1.0);
        let perm = [3, 1, 0, 2];
        let xp = x.select_rows(&perm);
        let lp: Vec<usize> = perm.iter().map(|&i| [0, 1, 1, 0][i]).collect();
        assert_eq!(
            evaluate(&p, &x, &[0, 1, 1, 0]).unwrap(),
            evaluate(&p, &xp, &lp).unwrap()
        );
        assert!(evaluate(&p, &x, &[0]).is_err());
    }

    #[test]
    fn lag_matrix_absent_cells_are_triangular() {
        let mut lag = LagMatrix::new(3);
        for m in 0..3 {
            for l in 0..=m {
                lag.acc[m][l] = Some(0.5);
            }
        }
        for m in 0..3 {
            for l in 0..3 {
                assert_eq!(lag.get(m, l).is_some(), l <= m);
            }
        }
        let csv = lag.to_csv();
        assert!(csv.starts_with("round,lag,accuracy\n"));
        assert!(csv.contains("1,1,\n"));
        assert!(csv.contains("1,source,0.0\n"));
        assert_eq!(csv.lines().count(), 1 + 3 * 4);
    }

    #[test]
    fn gamma_mode_parses() {
        for m in GammaMode::ALL {
            assert_eq!(m.name().parse::<GammaMode>().unwrap(), m);
        }
        assert!("weighted".parse::<GammaMode>().is_err());
    }

    #[test]
    fn window_other_than_one_is_rejected() {
        let cfg = AdaptationConfig {
            window: 2,
            ..AdaptationConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
