//! Command-line entry point: configuration loading and the subcommands.
//!
//! Configuration is a TOML file with one flat section per module. Every key
//! is optional; missing keys take their defaults and unknown keys are
//! rejected. `--seed` and `--out` override `run.seeds` and `run.out`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::assoc::AffinityKind;
use crate::backbone::Checkpoint;
use crate::datagen::{dataset_csv, gen_domain, gen_stream};
use crate::error::{Error, Result};
use crate::estimate::ClassDistribution;
use crate::experiment::{stream_seed, sweep_kl, DomainPairConfig, DriftConfig, SweepConfig};
use crate::gradcheck::{self, Fault, SuiteResult};
use crate::io::write_atomic;
use crate::sampling::{distribution_target_batch, make_divergent_distribution};
use crate::seed::derive_seed;
use crate::stream::{
    adapt_round, evaluate, pretrain, pretrain_with_trace, AdaptationConfig, EarlyStop, GammaMode,
    PretrainConfig, StepLosses, StreamConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Block length used to smooth the pretraining loss trace.
pub const SMOOTH_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![0],
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub beta: f64,
    pub affinity: AffinityKind,
    pub gamma_mode: GammaMode,
    pub renormalize_gamma: bool,
    pub steps: usize,
    pub learning_rate: f64,
    pub source_per_class: usize,
    pub window: usize,
    /// 0 disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_rel_tol: f64,
    /// KL from uniform of the target batch used by `adapt`.
    pub kl: f64,
    /// Target batch size used by `adapt`.
    pub target_batch: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let a = AdaptationConfig::default();
        let es = a.early_stop.unwrap_or_default();
        AdaptSection {
            beta: a.beta,
            affinity: a.affinity,
            gamma_mode: a.gamma_mode,
            renormalize_gamma: a.renormalize_gamma,
            steps: a.steps,
            learning_rate: a.learning_rate,
            source_per_class: a.source_per_class,
            window: a.window,
            early_stop_window: es.window,
            early_stop_rel_tol: es.rel_tol,
            kl: 0.4,
            target_batch: 200,
        }
    }
}

impl AdaptSection {
    pub fn to_config(&self) -> AdaptationConfig {
        AdaptationConfig {
            beta: self.beta,
            affinity: self.affinity,
            gamma_mode: self.gamma_mode,
            renormalize_gamma: self.renormalize_gamma,
            steps: self.steps,
            learning_rate: self.learning_rate,
            source_per_class: self.source_per_class,
            window: self.window,
            early_stop: (self.early_stop_window > 0).then_some(EarlyStop {
                window: self.early_stop_window,
                rel_tol: self.early_stop_rel_tol,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub kls: Vec<f64>,
    pub modes: Vec<GammaMode>,
    pub target_batch: usize,
    pub eval_batch: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = SweepConfig::default();
        SweepSection {
            kls: s.kls,
            modes: s.modes,
            target_batch: s.target_batch,
            eval_batch: s.eval_batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSection {
    pub batch_size: usize,
    pub kl_schedule: Vec<f64>,
    pub angle_step: f64,
    pub translation_step: f64,
    pub scale_step: f64,
}

impl Default for StreamSection {
    fn default() -> Self {
        let d = DriftConfig::default();
        StreamSection {
            batch_size: d.batch_size,
            kl_schedule: d.kl_schedule,
            angle_step: d.angle_step,
            translation_step: d.translation_step,
            scale_step: d.scale_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    /// Random cases per suite.
    pub cases: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection { cases: 10 }
    }
}

/// Everything a run needs, one section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DomainPairConfig,
    pub backbone: PretrainConfig,
    pub adapt: AdaptSection,
    pub sweep: SweepSection,
    pub stream: StreamSection,
    pub gradcheck: GradcheckSection,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(field_err("run.seeds", "at least one seed is required"));
        }
        self.data.validate().map_err(|e| field_err("data", e))?;
        let b = &self.backbone;
        if !(2..=256).contains(&b.embed_dim) {
            return Err(field_err("backbone.embed_dim", "must be in 2..=256"));
        }
        if b.hidden.contains(&0) {
            return Err(field_err("backbone.hidden", "widths must be >= 1"));
        }
        if b.per_class == 0 {
            return Err(field_err("backbone.per_class", "must be >= 1"));
        }
        if !(b.learning_rate > 0.0) {
            return Err(field_err("backbone.learning_rate", "must be > 0"));
        }
        let a = &self.adapt;
        self.adapt
            .to_config()
            .validate()
            .map_err(|e| field_err("adapt", e))?;
        if a.steps == 0 {
            return Err(field_err("adapt.steps", "must be >= 1"));
        }
        if !(a.learning_rate > 0.0) {
            return Err(field_err("adapt.learning_rate", "must be > 0"));
        }
        if a.source_per_class == 0 {
            return Err(field_err("adapt.source_per_class", "must be >= 1"));
        }
        if a.target_batch < self.data.num_classes {
            return Err(field_err(
                "adapt.target_batch",
                "must be >= data.num_classes",
            ));
        }
        let max_kl = (self.data.num_classes as f64).ln();
        let check_kl = |field: &str, kl: f64| {
            if !(0.0..max_kl).contains(&kl) {
                Err(field_err(
                    field,
                    format!("{kl} outside [0, ln C = {max_kl:.4})"),
                ))
            } else {
                Ok(())
            }
        };
        check_kl("adapt.kl", a.kl)?;
        let s = &self.sweep;
        if s.kls.is_empty() {
            return Err(field_err("sweep.kls", "must not be empty"));
        }
        for &kl in &s.kls {
            check_kl("sweep.kls", kl)?;
        }
        if s.modes.is_empty() {
            return Err(field_err("sweep.modes", "must not be empty"));
        }
        if s.target_batch < self.data.num_classes || s.eval_batch == 0 {
            return Err(field_err(
                "sweep",
                "target_batch must be >= data.num_classes and eval_batch >= 1",
            ));
        }
        let st = &self.stream;
        if st.kl_schedule.is_empty() {
            return Err(field_err(
                "stream.kl_schedule",
                "must name at least one batch",
            ));
        }
        for &kl in &st.kl_schedule {
            check_kl("stream.kl_schedule", kl)?;
        }
        if st.batch_size < self.data.num_classes {
            return Err(field_err(
                "stream.batch_size",
                "must be >= data.num_classes",
            ));
        }
        if self.gradcheck.cases == 0 {
            return Err(field_err("gradcheck.cases", "must be >= 1"));
        }
        Ok(())
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            pair: self.data.clone(),
            pretrain: self.backbone.clone(),
            adapt: self.adapt.to_config(),
            kls: self.sweep.kls.clone(),
            modes: self.sweep.modes.clone(),
            seeds: self.run.seeds.clone(),
            target_batch: self.sweep.target_batch,
            eval_batch: self.sweep.eval_batch,
        }
    }

    pub fn drift_config(&self) -> DriftConfig {
        DriftConfig {
            pair: self.data.clone(),
            batch_size: self.stream.batch_size,
            kl_schedule: self.stream.kl_schedule.clone(),
            angle_step: self.stream.angle_step,
            translation_step: self.stream.translation_step,
            scale_step: self.stream.scale_step,
        }
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            pretrain: self.backbone.clone(),
            adapt: self.adapt.to_config(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "streamda",
    version,
    about = "Associative domain adaptation on synthetic shifted domains and drifting streams"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file (sections: run, data, backbone, adapt, sweep, stream, gradcheck).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed to run; repeat for several. Overrides run.seeds.
    #[arg(long = "seed", global = true, value_name = "N")]
    pub seeds: Vec<u64>,
    /// Output directory. Overrides run.out.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train f_0 on the labeled source domain.
    #[command(after_help = "Writes per seed:\n  \
        pretrain_seed<N>.checkpoint.json  parameters plus config echo\n  \
        pretrain_seed<N>.metrics.json     final_loss, source_accuracy (held-out source sample),\n                                    \
        smoothed_loss (means of consecutive 20-step blocks)")]
    Pretrain,
    /// Pretrain, then run one adaptation round on a KL-controlled target batch.
    #[command(after_help = "Writes adapt.csv with columns:\n  \
        seed         seed of the run\n  \
        kl           KL(uniform || target class mix)\n  \
        mode         gamma mode: none | estimated | oracle\n  \
        source_only  accuracy of f_0 on held-out target samples\n  \
        adapted      accuracy of the adapted model on the same samples\n  \
        steps        optimizer steps executed\n\
        and adapt.json with the per-step losses.")]
    Adapt {
        /// Start from this checkpoint instead of pretraining.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare gamma modes over seeds for each target KL.
    #[command(
        name = "sweep-kl",
        after_help = "Writes sweep_kl.csv with one row per (kl, mode):\n  \
        kl                KL(uniform || target class mix)\n  \
        mode              gamma mode: none | estimated | oracle\n  \
        mean_accuracy     mean adapted accuracy over seeds\n  \
        std_accuracy      sample standard deviation over seeds\n  \
        seeds             number of seeds\n  \
        source_only_mean  mean accuracy of f_0\n  \
        source_only_std   its standard deviation\n\
        and sweep_kl_seeds.json with every per-seed accuracy."
    )]
    SweepKl,
    /// Pretrain, then adapt sequentially over a drifting stream with lag evaluation.
    #[command(
        after_help = "Writes per seed stream_seed<N>.json (config echo, losses, lag matrix with null\n\
        for absent cells) and stream_seed<N>.csv with columns:\n  \
        round     1-based stream batch index\n  \
        lag       rounds between the model's last adaptation and this batch, or `source` for f_0\n  \
        accuracy  accuracy on the batch; empty when that model did not exist yet"
    )]
    Stream,
    /// Check analytic gradients of every op and loss against finite differences.
    Gradcheck {
        /// Corrupt an analytic gradient to confirm the suites catch it.
        #[arg(long, hide = true, value_name = "FAULT")]
        inject_fault: Option<String>,
    },
    /// Write the synthetic datasets as CSV.
    #[command(
        name = "gen-data",
        after_help = "Writes per seed source_seed<N>.csv, target_seed<N>.csv and\n\
        stream_seed<N>_batch<K>.csv, each with columns x0..x{d-1},label."
    )]
    GenData,
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CHECK_FAILED
        }
    }
}

fn resolve(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !common.seeds.is_empty() {
        cfg.run.seeds = common.seeds.clone();
    }
    if let Some(out) = &common.out {
        cfg.run.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = resolve(&cli.common)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Adapt { checkpoint } => cmd_adapt(&cfg, checkpoint.as_deref()),
        Command::SweepKl => cmd_sweep_kl(&cfg),
        Command::Stream => cmd_stream(&cfg),
        Command::Gradcheck { inject_fault } => {
            let fault = match inject_fault.as_deref() {
                None => None,
                Some("walker-sign-flip") => Some(Fault::WalkerSignFlip),
                Some(other) => return Err(Error::Config(format!("unknown fault `{other}`"))),
            };
            cmd_gradcheck(&cfg, fault)
        }
        Command::GenData => cmd_gen_data(&cfg),
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn config_echo(cfg: &ExperimentConfig, seed: u64) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg).map_err(|e| Error::Serde(e.to_string()))?;
    v["seed"] = seed.into();
    Ok(v)
}

/// Means of consecutive `window`-step blocks; a short tail block is kept.
pub fn smooth(trace: &[f64], window: usize) -> Vec<f64> {
    trace
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub source_accuracy: f64,
    pub smoothed_loss: Vec<f64>,
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<i32> {
    let out = &cfg.run.out;
    for &seed in &cfg.run.seeds {
        let (source_spec, _) = cfg.data.domains(seed)?;
        let source = cfg.data.source_dataset(&source_spec, seed)?;
        let test = gen_domain(
            &source_spec,
            source.len(),
            &ClassDistribution::uniform(cfg.data.num_classes),
            derive_seed(seed, 30),
        )?;
        let (params, trace) = pretrain_with_trace(&source, &cfg.backbone, derive_seed(seed, 6))?;
        let metrics = PretrainMetrics {
            seed,
            steps: trace.len(),
            final_loss: trace.last().copied(),
            source_accuracy: evaluate(&params, test.features(), test.labels())?,
            smoothed_loss: smooth(&trace, SMOOTH_WINDOW),
        };
        Checkpoint::new(params, config_echo(cfg, seed)?)
            .save(&out.join(format!("pretrain_seed{seed}.checkpoint.json")))?;
        write_atomic(
            &out.join(format!("pretrain_seed{seed}.metrics.json")),
            json(&metrics)?.as_bytes(),
        )?;
        println!(
            "seed {seed}: final loss {:.6}, source accuracy {:.4}",
            metrics.final_loss.unwrap_or(f64::NAN),
            metrics.source_accuracy
        );
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub seed: u64,
    pub kl: f64,
    pub mode: GammaMode,
    pub source_only: f64,
    pub adapted: f64,
    pub losses: Vec<StepLosses>,
}

fn cmd_adapt(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<i32> {
    let start = checkpoint.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &start {
        let p = &ck.params;
        if p.input_dim() != cfg.data.input_dim || p.num_classes() != cfg.data.num_classes {
            return Err(Error::Config(format!(
                "checkpoint has input_dim {} and {} classes; data section has {} and {}",
                p.input_dim(),
                p.num_classes(),
                cfg.data.input_dim,
                cfg.data.num_classes
            )));
        }
    }
    let adapt = cfg.adapt.to_config();
    let mut records = Vec::new();
    let mut csv = String::from("seed,kl,mode,source_only,adapted,steps\n");
    for &seed in &cfg.run.seeds {
        let (source_spec, target_spec) = cfg.data.domains(seed)?;
        let source = cfg.data.source_dataset(&source_spec, seed)?;
        let pool = cfg.data.target_pool(&target_spec, seed)?;
        let f0 = match &start {
            Some(ck) => ck.params.clone(),
            None => pretrain(&source, &cfg.backbone, derive_seed(seed, 6))?,
        };
        let kl = cfg.adapt.kl;
        let dist = make_divergent_distribution(cfg.data.num_classes, kl, derive_seed(seed, 100))?;
        let batch = distribution_target_batch(
            &pool,
            &dist.distribution,
            cfg.adapt.target_batch,
            derive_seed(seed, 200),
        )?;
        let held_out = gen_domain(
            &target_spec,
            cfg.adapt.target_batch,
            &dist.distribution,
            derive_seed(seed, 300),
        )?;
        let source_only = evaluate(&f0, held_out.features(), held_out.labels())?;
        let outcome = adapt_round(&f0, &source, &batch, &adapt, derive_seed(seed, 400))?;
        let adapted = evaluate(&outcome.params, held_out.features(), held_out.labels())?;
        csv.push_str(&format!(
            "{seed},{kl:?},{},{source_only:?},{adapted:?},{}\n",
            adapt.gamma_mode.name(),
            outcome.losses.len()
        ));
        println!(
            "seed {seed}: source-only {source_only:.4}, adapted {adapted:.4} ({} steps)",
            outcome.losses.len()
        );
        records.push(AdaptRecord {
            seed,
            kl,
            mode: adapt.gamma_mode,
            source_only,
            adapted,
            losses: outcome.losses,
        });
    }
    write_atomic(&cfg.run.out.join("adapt.json"), json(&records)?.as_bytes())?;
    write_atomic(&cfg.run.out.join("adapt.csv"), csv.as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_sweep_kl(cfg: &ExperimentConfig) -> Result<i32> {
    let result = sweep_kl(&cfg.sweep_config())?;
    write_atomic(
        &cfg.run.out.join("sweep_kl_seeds.json"),
        json(&result.outcomes)?.as_bytes(),
    )?;
    let csv = result.to_csv();
    write_atomic(&cfg.run.out.join("sweep_kl.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn cmd_stream(cfg: &ExperimentConfig) -> Result<i32> {
    let drift = cfg.drift_config();
    let stream_cfg = cfg.stream_config();
    for &seed in &cfg.run.seeds {
        let mut report = stream_seed(&drift, &stream_cfg, seed)?;
        report.config = config_echo(cfg, seed)?;
        write_atomic(
            &cfg.run.out.join(format!("stream_seed{seed}.json")),
            (report.to_json()? + "\n").as_bytes(),
        )?;
        write_atomic(
            &cfg.run.out.join(format!("stream_seed{seed}.csv")),
            report.to_csv().as_bytes(),
        )?;
        let lag0: Vec<String> = (0..report.lag.num_batches())
            .map(|m| format!("{:.3}", report.lag.get(m, 0).unwrap_or(f64::NAN)))
            .collect();
        println!(
            "seed {seed}: lag-0 accuracy per round [{}]",
            lag0.join(", ")
        );
    }
    Ok(EXIT_OK)
}

/// Text table of suite results with a final verdict line.
pub fn gradcheck_summary(results: &[SuiteResult]) -> String {
    let mut out = format!(
        "{:<50} {:>5} {:>12} {:>9}  status\n",
        "suite", "cases", "max_rel_err", "tol"
    );
    for r in results {
        out.push_str(&format!(
            "{:<50} {:>5} {:>12.3e} {:>9.0e}  {}\n",
            format!(
                "{}/{}",
                if r.kind == gradcheck::SuiteKind::Op {
                    "op"
                } else {
                    "loss"
                },
                r.name
            ),
            r.cases,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    let failed: Vec<&SuiteResult> = results.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        out.push_str(&format!("all {} suites passed\n", results.len()));
    } else {
        for r in &failed {
            out.push_str(&format!(
                "FAILED {}: max relative error {:.3e}\n",
                r.name, r.max_rel_error
            ));
        }
    }
    out
}

fn cmd_gradcheck(cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<i32> {
    let seed = cfg.run.seeds[0];
    let results = gradcheck::run_all(cfg.gradcheck.cases, seed, fault)?;
    print!("{}", gradcheck_summary(&results));
    Ok(if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<i32> {
    let drift = cfg.drift_config();
    let out = &cfg.run.out;
    for &seed in &cfg.run.seeds {
        let (source_spec, target_spec) = cfg.data.domains(seed)?;
        let source = cfg.data.source_dataset(&source_spec, seed)?;
        let pool = cfg.data.target_pool(&target_spec, seed)?;
        write_atomic(
            &out.join(format!("source_seed{seed}.csv")),
            dataset_csv(&source).as_bytes(),
        )?;
        write_atomic(
            &out.join(format!("target_seed{seed}.csv")),
            dataset_csv(&pool).as_bytes(),
        )?;
        let (stream_source, stream) = drift.build(seed)?;
        for (k, batch) in gen_stream(&stream_source, &stream, derive_seed(seed, 10))?
            .into_iter()
            .enumerate()
        {
            let text = batch_csv(batch.features(), batch.withheld_labels());
            write_atomic(
                &out.join(format!("stream_seed{seed}_batch{}.csv", k + 1)),
                text.as_bytes(),
            )?;
        }
        println!("seed {seed}: wrote datasets to {}", out.display());
    }
    Ok(EXIT_OK)
}

/// Same layout as `dataset_csv`; stream batches may miss classes, so they
/// are not `LabeledDataset`s.
fn batch_csv(features: &crate::Matrix, labels: &[usize]) -> String {
    let d = features.cols();
    let mut out: String = (0..d).map(|k| format!("x{k},")).collect();
    out.push_str("label\n");
    for (i, l) in labels.iter().enumerate() {
        for v in features.row(i) {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{l}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = ExperimentConfig::from_toml("[adapt]\nbeta = 0.5\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_toml("[nosuch]\n").unwrap_err();
        assert!(err.to_string().contains("nosuch"), "{err}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg =
            ExperimentConfig::from_toml("[adapt]\nsteps = 7\n[data]\nnum_classes = 3\n").unwrap();
        assert_eq!(cfg.adapt.steps, 7);
        assert_eq!(cfg.adapt.beta, AdaptSection::default().beta);
        assert_eq!(cfg.data.num_classes, 3);
        assert_eq!(cfg.data.input_dim, DomainPairConfig::default().input_dim);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = ExperimentConfig::from_toml("[adapt]\nwindow = 3\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("adapt"));
        let cfg = ExperimentConfig::from_toml("[sweep]\nkls = [5.0]\n").unwrap();
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("sweep.kls"));
    }

    #[test]
    fn early_stop_window_zero_disables() {
        let s = AdaptSection {
            early_stop_window: 0,
            ..AdaptSection::default()
        };
        assert_eq!(s.to_config().early_stop, None);
        assert_eq!(
            AdaptSection::default().to_config(),
            AdaptationConfig::default()
        );
    }

    #[test]
    fn smoothing_blocks() {
        assert_eq!(smooth(&[1.0, 3.0, 2.0, 4.0, 5.0], 2), vec![2.0, 3.0, 5.0]);
    }
}
