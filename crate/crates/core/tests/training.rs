use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamda::datagen::{gen_domain, gen_stream};
use streamda::estimate::ClassDistribution;
use streamda::experiment::{DomainPairConfig, DriftConfig};
use streamda::sampling::LabeledDataset;
use streamda::seed::derive_seed;
use streamda::stream::{
    adapt_round, evaluate, initial_params, pretrain, pretrain_with_trace, AdaptationConfig,
    PretrainConfig,
};
use streamda::Matrix;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Two classes split by the hyperplane x0 = 0 with a margin of 1.
fn separable(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    let x = Matrix::from_fn(n, 2, |i, j| {
        if j == 0 {
            let l = i % 2;
            labels.push(l);
            let mag = rng.random_range(0.5..2.0);
            if l == 1 {
                mag
            } else {
                -mag
            }
        } else {
            rng.random_range(-2.0..2.0)
        }
    });
    LabeledDataset::new(x, labels, 2).unwrap()
}

#[test]
fn one_hidden_layer_fits_separable_data() {
    let ds = separable(100, 1);
    let cfg = PretrainConfig {
        hidden: vec![8],
        embed_dim: 2,
        steps: 500,
        learning_rate: 1e-2,
        per_class: 10,
    };
    let (params, trace) = pretrain_with_trace(&ds, &cfg, 1).unwrap();
    assert_eq!(trace.len(), 500);
    assert_eq!(evaluate(&params, ds.features(), ds.labels()).unwrap(), 1.0);
}

#[test]
fn pretrained_source_model_generalizes() {
    // well-separated classes: mean spacing is about 11σ
    let pair = DomainPairConfig {
        sigma: 0.5,
        ..DomainPairConfig::default()
    };
    let cfg = PretrainConfig::default();
    for seed in 0..5 {
        let (source_spec, _) = pair.domains(seed).unwrap();
        let source = pair.source_dataset(&source_spec, seed).unwrap();
        let test = gen_domain(
            &source_spec,
            1000,
            &ClassDistribution::uniform(pair.num_classes),
            derive_seed(seed, 77),
        )
        .unwrap();
        let f0 = pretrain(&source, &cfg, seed).unwrap();
        let acc = evaluate(&f0, test.features(), test.labels()).unwrap();
        assert!(acc >= 0.95, "seed {seed}: source test accuracy {acc}");
    }
}

#[test]
fn pretrain_is_deterministic_and_zero_steps_is_initialization() {
    let ds = separable(40, 2);
    let cfg = PretrainConfig {
        steps: 30,
        ..PretrainConfig::default()
    };
    assert_eq!(
        pretrain(&ds, &cfg, 9).unwrap(),
        pretrain(&ds, &cfg, 9).unwrap()
    );
    assert_ne!(
        pretrain(&ds, &cfg, 9).unwrap(),
        pretrain(&ds, &cfg, 10).unwrap()
    );
    let none = PretrainConfig { steps: 0, ..cfg };
    assert_eq!(
        pretrain(&ds, &none, 9).unwrap(),
        initial_params(&ds, &none, 9).unwrap()
    );
}

#[test]
fn zero_adaptation_steps_leave_params_unchanged() {
    let pair = DomainPairConfig::default();
    let (s, t) = pair.domains(0).unwrap();
    let source = pair.source_dataset(&s, 0).unwrap();
    let target = pair
        .target_pool(&t, 0)
        .unwrap()
        .subset(&(0..50).collect::<Vec<_>>());
    let f0 = initial_params(&source, &PretrainConfig::default(), 0).unwrap();
    let cfg = AdaptationConfig {
        steps: 0,
        ..AdaptationConfig::default()
    };
    let out = adapt_round(&f0, &source, &target, &cfg, 0).unwrap();
    assert_eq!(out.params, f0);
    assert!(out.losses.is_empty());
}

#[test]
fn clustering_needs_at_least_c_targets() {
    let pair = DomainPairConfig::default();
    let (s, t) = pair.domains(0).unwrap();
    let source = pair.source_dataset(&s, 0).unwrap();
    let target = pair.target_pool(&t, 0).unwrap().subset(&[0, 1, 2]);
    let f0 = initial_params(&source, &PretrainConfig::default(), 0).unwrap();
    assert!(adapt_round(&f0, &source, &target, &AdaptationConfig::default(), 0).is_err());
}

#[test]
fn adapting_to_the_source_distribution_does_not_forget() {
    let pair = DomainPairConfig::default();
    let mut deltas = Vec::new();
    for seed in 0..20 {
        let (s, _) = pair.domains(seed).unwrap();
        let source = pair.source_dataset(&s, seed).unwrap();
        let target = gen_domain(
            &s,
            200,
            &ClassDistribution::uniform(pair.num_classes),
            derive_seed(seed, 50),
        )
        .unwrap()
        .subset(&(0..200).collect::<Vec<_>>());
        let f0 = pretrain(&source, &PretrainConfig::default(), seed).unwrap();
        let before = evaluate(&f0, target.features(), target.withheld_labels()).unwrap();
        let out = adapt_round(&f0, &source, &target, &AdaptationConfig::default(), seed).unwrap();
        let after = evaluate(&out.params, target.features(), target.withheld_labels()).unwrap();
        deltas.push(after - before);
    }
    let m = median(deltas.clone());
    assert!(m >= -0.02, "median change {m}, all {deltas:?}");
}

#[test]
fn adapting_to_a_shifted_batch_helps_in_most_seeds() {
    let drift = DriftConfig::default();
    let mut wins = 0;
    for seed in 0..20 {
        let (s, stream) = drift.build(seed).unwrap();
        let source = drift.pair.source_dataset(&s, seed).unwrap();
        let batches = gen_stream(&s, &stream, derive_seed(seed, 10)).unwrap();
        let target = batches.last().unwrap();
        let f0 = pretrain(&source, &PretrainConfig::default(), seed).unwrap();
        let before = evaluate(&f0, target.features(), target.withheld_labels()).unwrap();
        let out = adapt_round(&f0, &source, target, &AdaptationConfig::default(), seed).unwrap();
        let after = evaluate(&out.params, target.features(), target.withheld_labels()).unwrap();
        if after > before {
            wins += 1;
        }
    }
    assert!(wins >= 16, "adaptation helped in {wins}/20 seeds");
}
