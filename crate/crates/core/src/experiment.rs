//! Reference synthetic setups and the multi-seed drivers behind the CLI:
//! the KL sweep over weighting modes and the drifting-stream lag study.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc::{affinity, transition_matrices};
use crate::datagen::{gen_domain, gen_stream, DomainSpec, DriftRates, Shift, StreamSpec};
use crate::error::{Error, Result};
use crate::estimate::ClassDistribution;
use crate::numgrad::Graph;
use crate::sampling::{distribution_target_batch, make_divergent_distribution, LabeledDataset};
use crate::seed::derive_seed;
use crate::stream::{
    adapt_round, evaluate, pretrain, run_stream, AdaptationConfig, GammaMode, PretrainConfig,
    StreamConfig, StreamRunReport,
};

/// Source domain plus a rotated, translated and rescaled target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainPairConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub sigma: f64,
    /// Class means lie on a sphere of this radius.
    pub radius: f64,
    pub angle: f64,
    /// Length of the seed-directed translation.
    pub translation: f64,
    pub scale: f64,
    /// Labeled source samples per class.
    pub source_per_class: usize,
    /// Target pool samples per class (batches are drawn from it).
    pub target_pool_per_class: usize,
}

impl Default for DomainPairConfig {
    fn default() -> Self {
        DomainPairConfig {
            num_classes: 10,
            input_dim: 16,
            sigma: 1.0,
            radius: 4.0,
            angle: std::f64::consts::FRAC_PI_2,
            translation: 4.0,
            scale: 1.0,
            source_per_class: 100,
            target_pool_per_class: 100,
        }
    }
}

impl DomainPairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.input_dim < 2 {
            return Err(Error::Config("input_dim must be >= 2".into()));
        }
        if !(self.sigma > 0.0) || !(self.radius > 0.0) || !(self.scale > 0.0) {
            return Err(Error::Config("sigma, radius and scale must be > 0".into()));
        }
        if self.source_per_class == 0 || self.target_pool_per_class == 0 {
            return Err(Error::Config("per-class sample counts must be >= 1".into()));
        }
        Ok(())
    }

    /// `(source, target)` domain specs for one seed.
    pub fn domains(&self, seed: u64) -> Result<(DomainSpec, DomainSpec)> {
        let source = DomainSpec::random(
            self.num_classes,
            self.input_dim,
            self.sigma,
            self.radius,
            derive_seed(seed, 1),
        )?;
        let shift = self.shift(seed)?;
        let target = source.with_shift(shift);
        Ok((source, target))
    }

    fn shift(&self, seed: u64) -> Result<Shift> {
        let dir = DomainSpec::random(
            1,
            self.input_dim,
            1.0,
            self.translation,
            derive_seed(seed, 2),
        )?;
        Ok(Shift {
            angle: self.angle,
            plane: Shift::random_plane(self.input_dim, derive_seed(seed, 3)),
            translation: dir.means.row(0).to_vec(),
            scale: self.scale,
        })
    }

    pub fn source_dataset(&self, source: &DomainSpec, seed: u64) -> Result<LabeledDataset> {
        gen_domain(
            source,
            self.source_per_class * self.num_classes,
            &ClassDistribution::uniform(self.num_classes),
            derive_seed(seed, 4),
        )
    }

    pub fn target_pool(&self, target: &DomainSpec, seed: u64) -> Result<LabeledDataset> {
        gen_domain(
            target,
            self.target_pool_per_class * self.num_classes,
            &ClassDistribution::uniform(self.num_classes),
            derive_seed(seed, 5),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub pair: DomainPairConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptationConfig,
    pub kls: Vec<f64>,
    pub modes: Vec<GammaMode>,
    pub seeds: Vec<u64>,
    /// Target batch size used for adaptation.
    pub target_batch: usize,
    /// Held-out target samples (same class mix) used for scoring.
    pub eval_batch: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            pair: DomainPairConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptationConfig::default(),
            kls: vec![0.05, 0.2, 0.4],
            modes: GammaMode::ALL.to_vec(),
            seeds: (0..20).collect(),
            target_batch: 200,
            eval_batch: 200,
        }
    }
}

/// Accuracies of every mode for one (kl, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSeedOutcome {
    pub kl: f64,
    pub seed: u64,
    pub source_only: f64,
    pub adapted: Vec<(GammaMode, f64)>,
}

impl SweepSeedOutcome {
    pub fn accuracy(&self, mode: GammaMode) -> Option<f64> {
        self.adapted
            .iter()
            .find(|(m, _)| *m == mode)
            .map(|&(_, a)| a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kl: f64,
    pub mode: GammaMode,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub source_only_mean: f64,
    pub source_only_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub outcomes: Vec<SweepSeedOutcome>,
}

pub const SWEEP_CSV_HEADER: &str =
    "kl,mode,mean_accuracy,std_accuracy,seeds,source_only_mean,source_only_std";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:?},{},{:?},{:?},{},{:?},{:?}\n",
                r.kl,
                r.mode.name(),
                r.mean,
                r.std,
                r.seeds,
                r.source_only_mean,
                r.source_only_std
            ));
        }
        out
    }
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or fewer than two points are given.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pretrains once per seed, then adapts on a KL-controlled target batch in
/// every mode and scores on a held-out batch with the same class mix.
pub fn sweep_seed(config: &SweepConfig, seed: u64) -> Result<Vec<SweepSeedOutcome>> {
    let pair = &config.pair;
    let (source_spec, target_spec) = pair.domains(seed)?;
    let source = pair.source_dataset(&source_spec, seed)?;
    let pool = pair.target_pool(&target_spec, seed)?;
    let f0 = pretrain(&source, &config.pretrain, derive_seed(seed, 6))?;

    config
        .kls
        .iter()
        .enumerate()
        .map(|(ki, &kl)| {
            let dist = make_divergent_distribution(
                pair.num_classes,
                kl,
                derive_seed(seed, 100 + ki as u64),
            )?;
            let batch = distribution_target_batch(
                &pool,
                &dist.distribution,
                config.target_batch,
                derive_seed(seed, 200 + ki as u64),
            )?;
            let held_out = gen_domain(
                &target_spec,
                config.eval_batch,
                &dist.distribution,
                derive_seed(seed, 300 + ki as u64),
            )?;
            let source_only = evaluate(&f0, held_out.features(), held_out.labels())?;
            let adapted = config
                .modes
                .iter()
                .map(|&mode| {
                    let adapt = AdaptationConfig {
                        gamma_mode: mode,
                        ..config.adapt.clone()
                    };
                    let out = adapt_round(
                        &f0,
                        &source,
                        &batch,
                        &adapt,
                        derive_seed(seed, 400 + ki as u64),
                    )?;
                    Ok((
                        mode,
                        evaluate(&out.params, held_out.features(), held_out.labels())?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepSeedOutcome {
                kl,
                seed,
                source_only,
                adapted,
            })
        })
        .collect()
}

/// Runs every seed (in parallel) and aggregates one row per (kl, mode).
pub fn sweep_kl(config: &SweepConfig) -> Result<SweepResult> {
    config.pair.validate()?;
    config.adapt.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let per_seed: Vec<Vec<SweepSeedOutcome>> = config
        .seeds
        .par_iter()
        .map(|&s| sweep_seed(config, s))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<SweepSeedOutcome> = per_seed.into_iter().flatten().collect();

    let mut rows = Vec::new();
    for &kl in &config.kls {
        let at_kl: Vec<&SweepSeedOutcome> = outcomes.iter().filter(|o| o.kl == kl).collect();
        let so: Vec<f64> = at_kl.iter().map(|o| o.source_only).collect();
        let (so_mean, so_std) = mean_std(&so);
        for &mode in &config.modes {
            let accs: Vec<f64> = at_kl.iter().filter_map(|o| o.accuracy(mode)).collect();
            let (mean, std) = mean_std(&accs);
            rows.push(SweepRow {
                kl,
                mode,
                mean,
                std,
                seeds: accs.len(),
                source_only_mean: so_mean,
                source_only_std: so_std,
            });
        }
    }
    Ok(SweepResult { rows, outcomes })
}

/// Drifting stream built on a [`DomainPairConfig`] source domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub pair: DomainPairConfig,
    pub batch_size: usize,
    /// KL from uniform of each batch's class mix; its length is K.
    pub kl_schedule: Vec<f64>,
    pub angle_step: f64,
    pub translation_step: f64,
    pub scale_step: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            pair: DomainPairConfig::default(),
            batch_size: 200,
            kl_schedule: vec![0.0, 0.08, 0.16, 0.24, 0.32, 0.4],
            angle_step: 0.35,
            translation_step: 1.0,
            scale_step: 0.0,
        }
    }
}

impl DriftConfig {
    pub fn num_batches(&self) -> usize {
        self.kl_schedule.len()
    }

    /// Source domain and the stream schedule for one seed. The stream starts
    /// from the unshifted source and drifts along a seed-chosen direction.
    pub fn build(&self, seed: u64) -> Result<(DomainSpec, StreamSpec)> {
        self.pair.validate()?;
        let (source, _) = self.pair.domains(seed)?;
        let dir = DomainSpec::random(
            1,
            self.pair.input_dim,
            1.0,
            self.translation_step,
            derive_seed(seed, 7),
        )?;
        let rates = DriftRates {
            angle_step: self.angle_step,
            translation_step: dir.means.row(0).to_vec(),
            scale_step: self.scale_step,
            plane: Shift::random_plane(self.pair.input_dim, derive_seed(seed, 8)),
        };
        let stream = StreamSpec::linear(
            &Shift::identity(self.pair.input_dim),
            &rates,
            &self.kl_schedule,
            self.pair.num_classes,
            self.batch_size,
            derive_seed(seed, 9),
        )?;
        Ok((source, stream))
    }
}

/// Generates the stream for `seed`, pretrains `f_0` and runs every round.
pub fn stream_seed(
    drift: &DriftConfig,
    config: &StreamConfig,
    seed: u64,
) -> Result<StreamRunReport> {
    let (source_spec, stream) = drift.build(seed)?;
    let source = drift.pair.source_dataset(&source_spec, seed)?;
    let batches = gen_stream(&source_spec, &stream, derive_seed(seed, 10))?;
    run_stream(&source, batches, config, seed)
}

/// Two-class toy with a skewed target batch, used to show that walker loss
/// alone leaves some targets unvisited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitToyConfig {
    pub pair: DomainPairConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptationConfig,
    pub target_probs: Vec<f64>,
    pub target_batch: usize,
    /// A target counts as unvisited below `threshold / N_T`.
    pub threshold: f64,
}

impl Default for VisitToyConfig {
    fn default() -> Self {
        VisitToyConfig {
            pair: DomainPairConfig {
                num_classes: 2,
                input_dim: 4,
                source_per_class: 20,
                target_pool_per_class: 100,
                ..DomainPairConfig::default()
            },
            pretrain: PretrainConfig::default(),
            adapt: AdaptationConfig {
                gamma_mode: GammaMode::None,
                early_stop: None,
                ..AdaptationConfig::default()
            },
            target_probs: vec![0.85, 0.15],
            target_batch: 40,
            threshold: 0.1,
        }
    }
}

/// Smallest visit probability times `N_T` after adapting with visit weight
/// `beta`, measured between the whole source set and the target batch.
pub fn min_scaled_visit(config: &VisitToyConfig, beta: f64, seed: u64) -> Result<f64> {
    let pair = &config.pair;
    let (source_spec, target_spec) = pair.domains(seed)?;
    let source = pair.source_dataset(&source_spec, seed)?;
    let pool = pair.target_pool(&target_spec, seed)?;
    let dist = ClassDistribution::new(config.target_probs.clone())?;
    let batch =
        distribution_target_batch(&pool, &dist, config.target_batch, derive_seed(seed, 20))?;
    let f0 = pretrain(&source, &config.pretrain, derive_seed(seed, 6))?;
    let adapt = AdaptationConfig {
        beta,
        ..config.adapt.clone()
    };
    let out = adapt_round(&f0, &source, &batch, &adapt, derive_seed(seed, 21))?;

    let es = out.params.forward(source.features())?.embeddings;
    let et = out.params.forward(batch.features())?.embeddings;
    let mut g = Graph::new();
    let s = g.constant(es);
    let t = g.constant(et);
    let a = affinity(&mut g, s, t, config.adapt.affinity)?;
    let (pst, _) = transition_matrices(g.value(a))?;
    let p = pst.probs();
    let n_t = p.cols();
    let min = (0..n_t)
        .map(|j| (0..p.rows()).map(|i| p.get(i, j)).sum::<f64>() / p.rows() as f64)
        .fold(f64::INFINITY, f64::min);
    Ok(min * n_t as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
