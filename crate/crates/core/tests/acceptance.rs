//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers when it holds.
//!
//! Covered: exact cost-model arithmetic, reference sweep percentages,
//! the traffic bound over a configuration grid, gradient correctness against
//! finite differences, pseudo-label and aggregation oracle equivalence,
//! entropy/relation-score invariants, partition properties, desk-scale
//! learning behavior, byte-level determinism, and protocol conformance.

use rand::Rng;
use std::sync::OnceLock;
use umpfssl_core::config::{parse_config_str, ExperimentConfig};
use umpfssl_core::data::{dirichlet_partition, generate_synthetic, split_labeled, PartitionSpec};
use umpfssl_core::experiment::{build_experiment, run_experiment};
use umpfssl_core::federation::{ClientState, HelperEntry, ServerPool};
use umpfssl_core::ledger::{
    cost1, cost2_bound, nu_sweep_cost_fraction, reconcile, savings_delta, tau_sweep_cost_fraction,
    CostModelParams, Rational,
};
use umpfssl_core::nn::{
    backward, batch_loss, Activation, ForwardMode, LossKind, ModelParams, NetSpec, OptimState,
    Target, TrainExample,
};
use umpfssl_core::protocol::{run, run_baseline, BaselineKind, EventKind, ExperimentTrace};
use umpfssl_core::rng::{derive_seed, rng_from_seed};
use umpfssl_core::uncertainty::{corr, mc_predict, normalized_residue, AblationMode, CorrScore};
use umpfssl_core::Method;

// ---------------------------------------------------------------------------
// Criterion 1: cost-model arithmetic at the reference defaults, exact.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_cost_model_arithmetic_exact() {
    let params = CostModelParams {
        client_count: 100,
        sample_rate: Rational::new(1, 10),
        helper_capacity: 5,
        replace_count: 2,
        search_rounds: 30,
        update_period: 10,
        total_rounds: 200,
    };
    let k = Rational::from_int(100);

    // Greedy search: tau K n = 2000 per K model-units.
    let greedy = cost1(params.sample_rate, params.client_count, params.total_rounds);
    assert_eq!(greedy / k, Rational::from_int(2000));

    // Protocol bound per K: M n / nu + F R + tau n = 100 + 60 + 20.
    let m_term = Rational::from_int((params.helper_capacity * params.total_rounds) as i128)
        / Rational::from_int(params.update_period as i128);
    let search_term = Rational::from_int((params.search_rounds * params.replace_count) as i128);
    let upload_term = params.sample_rate * Rational::from_int(params.total_rounds as i128);
    assert_eq!(m_term, Rational::from_int(100));
    assert_eq!(search_term, Rational::from_int(60));
    assert_eq!(upload_term, Rational::from_int(20));
    assert_eq!(cost2_bound(&params) / k, Rational::from_int(180));

    // Savings: 1 - 180/2000 = 91%, exactly.
    let (delta, fraction) = savings_delta(&params);
    assert_eq!(delta, Rational::from_int(182_000));
    assert_eq!(fraction, Rational::new(91, 100));
    assert!(fraction > Rational::new(9, 10));

    println!(
        "[criterion 1] PASS: cost1/K = 2000, cost2/K = 100+60+20 = 180, savings = 91% (exact)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: reference sweep cost percentages at one-decimal resolution.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_sweep_cost_percentages() {
    let base = CostModelParams {
        client_count: 100,
        sample_rate: Rational::new(1, 10),
        helper_capacity: 5,
        replace_count: 2,
        search_rounds: 30,
        update_period: 10,
        total_rounds: 200,
    };

    let nu_expected = [
        (1usize, 100.0),
        (5, 26.0),
        (10, 16.7),
        (15, 13.5),
        (20, 12.0),
    ];
    for (nu, expected) in nu_expected {
        let percent = nu_sweep_cost_fraction(&base, nu).to_f64() * 100.0;
        assert!(
            (percent - expected).abs() <= 0.1,
            "nu = {nu}: computed {percent:.3}% vs reference {expected}%"
        );
    }
    // Strictly decreasing in nu.
    let fractions: Vec<f64> = nu_expected
        .iter()
        .map(|(nu, _)| nu_sweep_cost_fraction(&base, *nu).to_f64())
        .collect();
    assert!(fractions.windows(2).all(|w| w[1] < w[0]));

    let tau_expected = [
        ("0.05", 5.7),
        ("0.1", 10.7),
        ("0.2", 20.6),
        ("0.5", 50.4),
        ("1", 100.0),
    ];
    for (tau, expected) in tau_expected {
        let rate = Rational::from_decimal_str(tau).unwrap();
        let percent = tau_sweep_cost_fraction(&base, rate).to_f64() * 100.0;
        assert!(
            (percent - expected).abs() <= 0.1,
            "tau = {tau}: computed {percent:.3}% vs reference {expected}%"
        );
    }

    println!(
        "[criterion 2] PASS: nu grid -> 100/26/16.7/13.5/12 %, tau grid -> 5.7/10.7/20.6/50.4/100 % (within 0.1pp)"
    );
}

// ---------------------------------------------------------------------------
// Shared desk-scale grid for criteria 3 and 10.
// ---------------------------------------------------------------------------

const GRID_TEMPLATE: &str = r#"
method = "um_pfssl"
master_seed = 0

[dataset]
kind = "synthetic"
class_count = 3
per_class = 30
cluster_spread = 0.5

[partition]
clients = 4
alpha = 1.0

[model]
hidden_widths = [6]
dropout_rate = 0.2
activation = "tanh"

[round]
sample_rate = 0.5
helper_capacity = 2
replace_count = 1
search_rounds = 5
update_period = 2
total_rounds = 12
local_epochs = 1
mc_samples = 2

[optimizer]
learning_rate = 0.05
momentum = 0.9

[training]
batch_size = 8
warmup_epochs = 1
"#;

/// 30 configurations with K <= 16 and n <= 40; tau * K is integral
/// everywhere so Eq.-28-style accounting applies without rounding slack.
fn grid_configs() -> Vec<ExperimentConfig> {
    let mut configs = Vec::new();
    let mut index = 0u64;
    for &clients in &[4usize, 8, 16] {
        for &sample_rate in &[0.25f64, 0.5] {
            for &(capacity, replace) in &[(2usize, 1usize), (4, 2)] {
                for &(search, period, rounds) in &[(5usize, 2usize, 12usize), (10, 3, 40)] {
                    let mut config = parse_config_str(GRID_TEMPLATE).unwrap();
                    config.partition.clients = clients;
                    config.dataset = umpfssl_core::DatasetConfig::Synthetic {
                        class_count: 3,
                        per_class: 30 * clients / 4,
                        cluster_spread: 0.5,
                    };
                    config.round.sample_rate = sample_rate;
                    config.round.helper_capacity = capacity;
                    config.round.replace_count = replace;
                    config.round.search_rounds = search;
                    config.round.update_period = period;
                    config.round.total_rounds = rounds;
                    config.master_seed = 1000 + index;
                    config.validate().unwrap();
                    configs.push(config);
                    index += 1;
                }
            }
        }
    }
    // 24 so far; six full-participation points complete the grid of 30.
    for &clients in &[4usize, 8, 16] {
        for &(capacity, replace) in &[(2usize, 1usize), (4, 3)] {
            let mut config = parse_config_str(GRID_TEMPLATE).unwrap();
            config.partition.clients = clients;
            config.dataset = umpfssl_core::DatasetConfig::Synthetic {
                class_count: 3,
                per_class: 30 * clients / 4,
                cluster_spread: 0.5,
            };
            config.round.sample_rate = 1.0;
            config.round.helper_capacity = capacity;
            config.round.replace_count = replace;
            config.round.search_rounds = 8;
            config.round.update_period = 4;
            config.round.total_rounds = 20;
            config.master_seed = 2000 + index;
            config.validate().unwrap();
            configs.push(config);
            index += 1;
        }
    }
    assert_eq!(configs.len(), 30);
    configs
}

fn grid_traces() -> &'static Vec<(ExperimentConfig, ExperimentTrace)> {
    static TRACES: OnceLock<Vec<(ExperimentConfig, ExperimentTrace)>> = OnceLock::new();
    TRACES.get_or_init(|| {
        grid_configs()
            .into_iter()
            .map(|config| {
                let settings = config.protocol_settings(config.master_seed).unwrap();
                let mut built = build_experiment(&config, config.master_seed).unwrap();
                let trace = run(&settings, &mut built.clients, &mut built.pool).unwrap();
                for client in &built.clients {
                    client.helpers.validate().unwrap();
                }
                (config, trace)
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Criterion 3: measured traffic within the analytic bound on every grid run.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_ledger_bound_over_grid() {
    let mut checked = 0;
    for (config, trace) in grid_traces() {
        let params = config
            .round_config(config.master_seed)
            .cost_params()
            .unwrap();
        let report = reconcile(&trace.ledger, &trace.events, &params);
        assert!(
            report.trace_matches_ledger,
            "trace/ledger mismatch for K={} tau={}",
            config.partition.clients, config.round.sample_rate
        );
        assert!(
            report.within_bound,
            "bound exceeded for K={} tau={} M={}: measured {} > bound {}",
            config.partition.clients,
            config.round.sample_rate,
            config.round.helper_capacity,
            trace.ledger.total(),
            report.bound_with_fill
        );
        checked += 1;
    }
    assert_eq!(checked, 30);
    println!("[criterion 3] PASS: measured traffic <= cost2 bound (+fill) in 30/30 grid runs");
}

// ---------------------------------------------------------------------------
// Criterion 4: analytic gradients vs central finite differences.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_gradient_matches_finite_differences() {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = rng_from_seed(derive_seed(4000, &[seed]));
        let input_dim = rng.gen_range(2..=4);
        let hidden = rng.gen_range(3..=6);
        let classes = rng.gen_range(2..=5);
        let dropout = if seed % 2 == 0 { 0.0 } else { 0.3 };
        let spec =
            NetSpec::new(vec![input_dim, hidden, classes], dropout, Activation::Tanh).unwrap();
        let params = ModelParams::init_random(spec, derive_seed(seed, &[1])).unwrap();

        let batch_len = rng.gen_range(1..=4);
        let inputs: Vec<Vec<f64>> = (0..batch_len)
            .map(|_| (0..input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let soft_targets: Vec<Vec<f64>> = (0..batch_len)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|v| v / total).collect()
            })
            .collect();
        let loss_kind = if seed % 2 == 0 {
            LossKind::CrossEntropy
        } else {
            LossKind::KlDivergence
        };
        let batch: Vec<TrainExample> = (0..batch_len)
            .map(|i| TrainExample {
                input: &inputs[i],
                target: match loss_kind {
                    LossKind::CrossEntropy => Target::Label(i % classes),
                    LossKind::KlDivergence => Target::Soft(&soft_targets[i]),
                },
            })
            .collect();
        let mode = if dropout > 0.0 {
            ForwardMode::DropoutSample(derive_seed(seed, &[2]))
        } else {
            ForwardMode::Deterministic
        };

        let grads = backward(&params, &batch, loss_kind, mode).unwrap();
        #[allow(clippy::needless_range_loop)]
        for idx in 0..grads.len() {
            let plus = batch_loss(&params.nudged(idx, h), &batch, loss_kind, mode).unwrap();
            let minus = batch_loss(&params.nudged(idx, -h), &batch, loss_kind, mode).unwrap();
            let numeric = (plus - minus) / (2.0 * h);
            let scale = grads[idx].abs().max(numeric.abs()).max(1e-3);
            let rel = (grads[idx] - numeric).abs() / scale;
            worst = worst.max(rel);
            assert!(
                rel < 1e-5,
                "seed {seed} coord {idx} ({loss_kind:?}): analytic {} vs numeric {numeric}, rel {rel:e}",
                grads[idx]
            );
        }
    }
    println!(
        "[criterion 4] PASS: 100 random nets/batches, worst relative error {worst:.2e} < 1e-5"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: oracle equivalence (pseudo-label argmin + weighted mean).
// ---------------------------------------------------------------------------

fn oracle_client(seed: u64, points: usize, helpers: usize) -> ClientState {
    let spec = NetSpec::new(vec![2, 5, 3], 0.4, Activation::Tanh).unwrap();
    let mut rng = rng_from_seed(seed);
    let labeled: Vec<umpfssl_core::LabeledExample> = (0..6)
        .map(|i| umpfssl_core::LabeledExample {
            features: vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
            label: i % 3,
        })
        .collect();
    let unlabeled: Vec<Vec<f64>> = (0..points)
        .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
        .collect();
    let hidden: Vec<usize> = (0..points).map(|i| i % 3).collect();
    let data = umpfssl_core::ClientDataset::from_parts(
        labeled.clone(),
        unlabeled,
        hidden,
        labeled.clone(),
        labeled,
        3,
    )
    .unwrap();
    let params = ModelParams::init_random(spec.clone(), derive_seed(seed, &[0])).unwrap();
    let opt = OptimState::new(params.values().len(), 0.1, 0.9).unwrap();
    let mut client = ClientState::new(0, params, opt, data, helpers.max(1), seed);
    for id in 1..helpers {
        let helper_params =
            ModelParams::init_random(spec.clone(), derive_seed(seed, &[id as u64])).unwrap();
        client
            .helpers
            .insert(HelperEntry {
                client_id: id,
                params: helper_params,
                corr: CorrScore::combine(0.5, rng.gen(), rng.gen()),
                cached_version: 0,
            })
            .unwrap();
    }
    client
}

#[test]
fn criterion_05_oracle_equivalence() {
    let mc_samples = 3;

    // Pseudo-label selection vs the exhaustive (point x helper) argmin,
    // recomputing every MC prediction independently.
    for instance in 0..50u64 {
        let mut rng = rng_from_seed(derive_seed(5000, &[instance]));
        let points = rng.gen_range(1..=20);
        let helpers = rng.gen_range(1..=5);
        let mut client = oracle_client(derive_seed(instance, &[7]), points, helpers);
        let seed = derive_seed(instance, &[11]);

        let labels = client.select_pseudo_labels(mc_samples, seed).unwrap();
        assert_eq!(labels.len(), points);

        // Independent oracle: enumerate all (point, helper) entropies with
        // the documented seed derivation and take the per-point argmin,
        // ties to the lowest helper id.
        let entries: Vec<(usize, ModelParams)> = client
            .helpers
            .entries()
            .iter()
            .map(|e| (e.client_id, e.params.clone()))
            .collect();
        for (i, point) in client.data.unlabeled_features().iter().enumerate() {
            let mut best: Option<(usize, umpfssl_core::PredictiveDistribution)> = None;
            for (id, params) in &entries {
                let helper_seed = derive_seed(seed, &[*id as u64]);
                let pred = mc_predict(
                    params,
                    point,
                    mc_samples,
                    derive_seed(helper_seed, &[i as u64]),
                )
                .unwrap();
                let better = match &best {
                    None => true,
                    Some((_, current)) => pred.entropy() < current.entropy(),
                };
                if better {
                    best = Some((*id, pred));
                }
            }
            let (oracle_id, oracle_pred) = best.unwrap();
            assert_eq!(
                labels[i].source_helper, oracle_id,
                "instance {instance} point {i}"
            );
            assert_eq!(labels[i].target.probs(), oracle_pred.probs());
            assert_eq!(labels[i].uncertainty, oracle_pred.entropy());
        }
    }

    // Aggregation vs the per-coordinate weighted mean oracle, bitwise:
    // entries in ascending id order, weights normalized first.
    for instance in 0..50u64 {
        let mut rng = rng_from_seed(derive_seed(5100, &[instance]));
        let helpers = rng.gen_range(1..=5);
        let mut client = oracle_client(derive_seed(instance, &[13]), 4, helpers);
        for entry_id in client.helpers.ids() {
            let corr = CorrScore::combine(0.5, rng.gen(), rng.gen());
            client.helpers.entry_mut(entry_id).unwrap().corr = corr;
        }
        client.refresh_self_entry();

        let entries: Vec<(f64, Vec<f64>)> = client
            .helpers
            .entries()
            .iter()
            .map(|e| (e.corr.value, e.params.values().to_vec()))
            .collect();
        let total: f64 = entries.iter().map(|(w, _)| w).sum();
        let expected: Vec<f64> = (0..entries[0].1.len())
            .map(|coord| {
                let mut acc = 0.0;
                for (weight, values) in &entries {
                    acc += (weight / total) * values[coord];
                }
                acc
            })
            .collect();

        client.aggregate(AblationMode::Combined).unwrap();
        assert_eq!(
            client.params.values(),
            expected.as_slice(),
            "instance {instance}: aggregation differs from the weighted-mean oracle"
        );
    }

    println!("[criterion 5] PASS: 50 pseudo-label argmin instances and 50 weighted-mean instances, bitwise equal");
}

// ---------------------------------------------------------------------------
// Criterion 6: entropy and relation-score invariants, ablation isolation.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_entropy_and_corr_invariants() {
    // Entropy of any MC prediction lies in [0, ln C].
    for seed in 0..40u64 {
        let mut rng = rng_from_seed(derive_seed(6000, &[seed]));
        let classes = rng.gen_range(2..=6);
        let spec = NetSpec::new(vec![2, 5, classes], 0.5, Activation::Tanh).unwrap();
        let params = ModelParams::init_random(spec, seed).unwrap();
        let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let pred = mc_predict(&params, &x, 5, seed).unwrap();
        let max_entropy = (classes as f64).ln();
        assert!(pred.entropy() >= 0.0);
        assert!(pred.entropy() <= max_entropy + 1e-12);
    }

    // Normalized-residue boundaries.
    for &classes in &[2usize, 4, 10] {
        let max = (classes as f64).ln();
        assert_eq!(normalized_residue(0.0, 7, classes), 1.0);
        assert!(normalized_residue(7.0 * max, 7, classes).abs() < 1e-12);
        assert!((normalized_residue(3.5 * max, 7, classes) - 0.5).abs() < 1e-12);
    }

    // Corr is exactly its stored convex combination on real evaluations.
    let mut rng = rng_from_seed(6100);
    for seed in 0..20u64 {
        let client = oracle_client(derive_seed(6200, &[seed]), 8, 1);
        let spec = NetSpec::new(vec![2, 5, 3], 0.3, Activation::Tanh).unwrap();
        let helper = ModelParams::init_random(spec, rng.gen()).unwrap();
        let score = corr(&client.data, &helper, 4, seed).unwrap();
        let mu = client.data.labeled_ratio();
        assert_eq!(
            score.value,
            (1.0 - mu) * score.entropy_term + mu * score.accuracy_term
        );
        assert!((0.0..=1.0).contains(&score.value));
    }

    // Ablation isolation: perturbing the helper's labeled-set accuracy
    // leaves the EN-only score unchanged; perturbing its prediction entropy
    // leaves the TA-only score unchanged.
    let spec = NetSpec::new(vec![2, 4, 3], 0.0, Activation::Tanh).unwrap();
    let helper = ModelParams::init_random(spec.clone(), 77).unwrap();
    let base = oracle_client(900, 10, 1);
    let relabel = |offset: usize| {
        let labeled: Vec<umpfssl_core::LabeledExample> = base
            .data
            .labeled()
            .iter()
            .map(|ex| {
                let predicted =
                    umpfssl_core::nn::forward(&helper, &ex.features, ForwardMode::Deterministic)
                        .unwrap()
                        .argmax();
                umpfssl_core::LabeledExample {
                    features: ex.features.clone(),
                    label: (predicted + offset) % 3,
                }
            })
            .collect();
        umpfssl_core::ClientDataset::from_parts(
            labeled,
            base.data.unlabeled_features().to_vec(),
            base.data.hidden_labels_for_metrics().to_vec(),
            base.data.val().to_vec(),
            base.data.test().to_vec(),
            3,
        )
        .unwrap()
    };
    // Labels agree with the helper everywhere vs nowhere: accuracy 1 vs 0,
    // identical unlabeled data and seeds.
    let score_right = corr(&relabel(0), &helper, 4, 5).unwrap();
    let score_wrong = corr(&relabel(1), &helper, 4, 5).unwrap();
    assert_eq!(score_right.accuracy_term, 1.0);
    assert_eq!(score_wrong.accuracy_term, 0.0);
    assert_eq!(
        score_right.for_mode(AblationMode::EntropyOnly),
        score_wrong.for_mode(AblationMode::EntropyOnly)
    );

    // Sharpening the output layer scales every logit by 3: the argmax (and
    // so the TA-only score) is preserved while prediction entropies change.
    let mut sharpened = helper.clone();
    {
        let first_layer = 2 * 4 + 4;
        for v in &mut sharpened.values_mut()[first_layer..] {
            *v *= 3.0;
        }
    }
    let data_right = relabel(0);
    let score_sharp = corr(&data_right, &sharpened, 4, 5).unwrap();
    assert_eq!(
        score_right.for_mode(AblationMode::AccuracyOnly),
        score_sharp.for_mode(AblationMode::AccuracyOnly)
    );
    assert_ne!(score_right.entropy_term, score_sharp.entropy_term);

    println!("[criterion 6] PASS: entropy in [0, ln C], residue boundaries, convex identity, ablation isolation");
}

// ---------------------------------------------------------------------------
// Criterion 7: partition properties.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_partition_properties() {
    let data = generate_synthetic(4, 50, 0.6, 70).unwrap();

    // Disjoint and exhaustive for every seed; labeled-ratio identity exact.
    for seed in 0..25u64 {
        let spec = PartitionSpec {
            client_count: 5,
            alpha: 0.5,
            label_split_alpha: 0.5,
            seed,
        };
        let parts = dirichlet_partition(&data, &spec).unwrap();
        let mut seen = vec![false; data.len()];
        for part in &parts {
            for &row in part.train.iter().chain(&part.val).chain(&part.test) {
                assert!(!seen[row], "row {row} assigned twice at seed {seed}");
                seen[row] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "seed {seed}: unassigned rows");

        for (id, part) in parts.iter().enumerate() {
            let client = split_labeled(&data, part, 0.5, derive_seed(seed, &[id as u64])).unwrap();
            let n_s = client.labeled().len();
            let n_u = client.unlabeled_features().len();
            assert_eq!(n_s + n_u, part.train.len());
            assert_eq!(client.labeled_ratio(), n_s as f64 / (n_s + n_u) as f64);
        }
    }

    // Heterogeneity is monotone non-increasing in alpha over the standard
    // grid, averaged over 50 seeds.
    let alphas = [0.5, 1.0, 5.0, 10.0];
    let global = vec![0.25; 4];
    let mut means = Vec::new();
    for &alpha in &alphas {
        let mut total = 0.0;
        let seeds = 50;
        for seed in 0..seeds {
            let spec = PartitionSpec {
                client_count: 6,
                alpha,
                label_split_alpha: 0.5,
                seed: 500 + seed,
            };
            let parts = dirichlet_partition(&data, &spec).unwrap();
            for part in &parts {
                let mut hist = [0.0; 4];
                for &row in part.train.iter().chain(&part.val).chain(&part.test) {
                    hist[data.label(row)] += 1.0;
                }
                let n: f64 = hist.iter().sum();
                let tv: f64 = hist
                    .iter()
                    .zip(&global)
                    .map(|(h, g)| (h / n - g).abs())
                    .sum::<f64>()
                    / 2.0;
                total += tv / 6.0;
            }
        }
        means.push(total / seeds as f64);
    }
    for pair in means.windows(2) {
        assert!(
            pair[0] >= pair[1] - 1e-9,
            "heterogeneity not monotone in alpha: {means:?}"
        );
    }

    println!(
        "[criterion 7] PASS: partitions disjoint/exhaustive over 25 seeds, mu identity exact, TV monotone in alpha: {means:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: desk-scale learning behavior over 20 seeded repeats.
// ---------------------------------------------------------------------------

const DESK_TEMPLATE: &str = r#"
method = "um_pfssl"
master_seed = 0

[dataset]
kind = "synthetic"
class_count = 4
per_class = 100
cluster_spread = 1.0

[partition]
clients = 8
alpha = 0.5

[model]
hidden_widths = [16]
dropout_rate = 0.2
activation = "tanh"

[round]
sample_rate = 0.5
helper_capacity = 3
replace_count = 1
search_rounds = 10
update_period = 5
total_rounds = 30
local_epochs = 2
mc_samples = 5

[optimizer]
learning_rate = 0.05
momentum = 0.9

[training]
batch_size = 16
warmup_epochs = 5
"#;

fn desk_trace(method: Method, seed: u64) -> ExperimentTrace {
    let mut config = parse_config_str(DESK_TEMPLATE).unwrap();
    config.method = method.name().to_string();
    config.master_seed = seed;
    let settings = config.protocol_settings(seed).unwrap();
    let mut built = build_experiment(&config, seed).unwrap();
    match method {
        Method::UmPfssl | Method::RandomHelper => {
            run(&settings, &mut built.clients, &mut built.pool).unwrap()
        }
        Method::LocalOnly => run_baseline(
            &settings,
            &mut built.clients,
            &mut built.pool,
            BaselineKind::LocalOnly,
        )
        .unwrap(),
        Method::FedavgSemi => run_baseline(
            &settings,
            &mut built.clients,
            &mut built.pool,
            BaselineKind::FedavgSemi,
        )
        .unwrap(),
    }
}

fn best_acc(trace: &ExperimentTrace) -> f64 {
    trace
        .rounds
        .iter()
        .map(|r| r.mean_test_acc)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn mean_pseudo_error(trace: &ExperimentTrace, rounds: std::ops::Range<usize>) -> f64 {
    let slice = &trace.rounds[rounds];
    slice.iter().map(|r| r.pseudo_label_error_rate).sum::<f64>() / slice.len() as f64
}

#[test]
fn criterion_08_desk_scale_learning_behavior() {
    let repeats = 20u64;
    let mut beats_local = 0;
    let mut error_drops = 0;
    let mut um_errors = Vec::new();
    let mut random_errors = Vec::new();

    for repeat in 0..repeats {
        let seed = derive_seed(8000, &[repeat]);
        let um = desk_trace(Method::UmPfssl, seed);
        let local = desk_trace(Method::LocalOnly, seed);
        let control = desk_trace(Method::RandomHelper, seed);

        if best_acc(&um) >= best_acc(&local) {
            beats_local += 1;
        }
        let n = um.rounds.len();
        if mean_pseudo_error(&um, n - 5..n) < mean_pseudo_error(&um, 0..5) {
            error_drops += 1;
        }
        um_errors.push(mean_pseudo_error(&um, 0..n));
        random_errors.push(mean_pseudo_error(&control, 0..n));
    }

    let um_mean = um_errors.iter().sum::<f64>() / repeats as f64;
    let random_mean = random_errors.iter().sum::<f64>() / repeats as f64;

    assert!(
        beats_local * 5 >= repeats * 4,
        "(a) UM-pFSSL >= local_only in only {beats_local}/{repeats} repeats"
    );
    assert!(
        error_drops * 5 >= repeats * 4,
        "(b) pseudo-label error dropped in only {error_drops}/{repeats} repeats"
    );
    assert!(
        um_mean <= random_mean,
        "(c) EN+TA mean pseudo error {um_mean:.4} > random-control {random_mean:.4}"
    );

    println!(
        "[criterion 8] PASS: (a) beats local in {beats_local}/{repeats}, (b) error drop in {error_drops}/{repeats}, (c) EN+TA error {um_mean:.4} <= random {random_mean:.4}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: byte-identical outputs, sequential and parallel.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_byte_identical_reports() {
    let mut config = parse_config_str(DESK_TEMPLATE).unwrap();
    config.partition.clients = 6;
    config.round.total_rounds = 8;
    config.dataset = umpfssl_core::DatasetConfig::Synthetic {
        class_count: 3,
        per_class: 40,
        cluster_spread: 0.6,
    };
    config.validate().unwrap();

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let dir_par = tempfile::tempdir().unwrap();

    run_experiment(&config, 999, dir_a.path()).unwrap();
    run_experiment(&config, 999, dir_b.path()).unwrap();
    let mut parallel_config = config.clone();
    parallel_config.parallel = true;
    run_experiment(&parallel_config, 999, dir_par.path()).unwrap();

    for name in ["metrics.csv", "costs.csv", "partition.csv", "summary.csv"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        let p = std::fs::read(dir_par.path().join(name)).unwrap();
        assert_eq!(a, b, "{name}: repeated run differs");
        assert_eq!(a, p, "{name}: parallel schedule differs from sequential");
    }

    println!(
        "[criterion 9] PASS: identical seeds give byte-identical CSVs, sequential == parallel"
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: protocol conformance audits across the grid.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_protocol_conformance() {
    let mut replace_events = 0u64;
    let mut update_events = 0u64;
    for (config, trace) in grid_traces() {
        let horizon = config.round.search_rounds as u64;
        let period = config.round.update_period as u64;
        for event in &trace.events {
            match event.kind {
                EventKind::Replace => {
                    replace_events += 1;
                    assert!(
                        event.round < horizon,
                        "replace event at round {} >= F = {horizon}",
                        event.round
                    );
                }
                EventKind::Update => {
                    update_events += 1;
                    assert_eq!(
                        event.round % period,
                        0,
                        "update event off the nu grid at round {}",
                        event.round
                    );
                    assert_ne!(
                        event.peer_id,
                        Some(event.client_id),
                        "self refresh must never be a download"
                    );
                }
                _ => {}
            }
        }
        // Per-client download totals respect the per-round caps.
        let mut per_round_replace = std::collections::HashMap::new();
        for event in trace.events.iter().filter(|e| e.kind == EventKind::Replace) {
            *per_round_replace
                .entry((event.round, event.client_id))
                .or_insert(0u64) += 1;
        }
        for ((round, client), count) in per_round_replace {
            assert!(
                count <= config.round.replace_count as u64,
                "client {client} downloaded {count} > R candidates in round {round}"
            );
        }
    }
    assert!(
        replace_events > 0,
        "grid produced no replace events to audit"
    );
    assert!(update_events > 0, "grid produced no update events to audit");

    // Final helper lists: capacity respected, owner present, no duplicates
    // (validated inside run() each round; re-validated here on fresh runs).
    let config = grid_configs().into_iter().next().unwrap();
    let settings = config.protocol_settings(config.master_seed).unwrap();
    let mut built = build_experiment(&config, config.master_seed).unwrap();
    run(&settings, &mut built.clients, &mut built.pool).unwrap();
    for client in &built.clients {
        client.helpers.validate().unwrap();
        assert!(client.helpers.len() <= config.round.helper_capacity);
        assert!(client.helpers.contains(client.id));
    }

    println!(
        "[criterion 10] PASS: {replace_events} replace + {update_events} update events audited; capacity, owner, and phase gates hold"
    );
}

// ---------------------------------------------------------------------------
// Pseudo-label error comparison is statistical; the EN+TA <= random-control
// check above (criterion 8c) uses matched seeds per the metrics contract.
// ---------------------------------------------------------------------------

/// The advertised pool of every ServerPool slot is writable only through
/// uploads; spot-check the version discipline under a grid run.
#[test]
fn pool_versions_match_upload_counts() {
    let (config, trace) = &grid_traces()[0];
    let settings = config.protocol_settings(config.master_seed).unwrap();
    let mut built = build_experiment(config, config.master_seed).unwrap();
    let fresh = run(&settings, &mut built.clients, &mut built.pool).unwrap();
    assert_eq!(fresh.ledger.uploads(), trace.ledger.uploads());
    let pool: &ServerPool = &built.pool;
    let mut uploads_per_client = vec![0u64; config.partition.clients];
    for event in fresh.events.iter().filter(|e| e.kind == EventKind::Upload) {
        uploads_per_client[event.client_id] += 1;
    }
    for (id, &count) in uploads_per_client.iter().enumerate() {
        assert_eq!(
            pool.version(id),
            count,
            "client {id} version/upload mismatch"
        );
    }
}
