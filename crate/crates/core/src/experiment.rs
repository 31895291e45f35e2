//! Experiment assembly and execution: dataset construction, partitioning,
//! client setup, warmup, scheduler dispatch, reconciliation, and report
//! emission. Also the sweep and repeat runners.
//!
//! Seeds flow master seed -> per-repeat seed -> per-concern streams, so
//! adding repeats or sweep points never perturbs earlier results.

use crate::config::{DatasetConfig, ExperimentConfig, Method};
use crate::data::{
    dirichlet_partition, generate_synthetic, load_idx, split_labeled, Dataset, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::federation::{ClientState, ServerPool};
use crate::ledger::{
    self, f_sweep_cost_fraction, nu_sweep_cost_fraction, tau_sweep_cost_fraction, Rational,
    ReconcileReport,
};
use crate::metrics::{self, best_accuracy_summary, ReportContext};
use crate::nn::{ModelParams, OptimState};
use crate::protocol::{run, run_baseline, BaselineKind, ExperimentTrace};
use crate::rng::{derive_seed, stream_seed, Stream};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// A ready-to-run experiment: warmed-up clients and the populated pool.
pub struct BuiltExperiment {
    pub clients: Vec<ClientState>,
    pub pool: ServerPool,
    pub run_seed: u64,
}

/// Result of one completed run.
pub struct RunOutcome {
    pub trace: ExperimentTrace,
    pub best_mean_test_acc: f64,
    pub best_round: u64,
    pub final_mean_test_acc: f64,
    pub final_acc_variance: f64,
    pub reconcile: Option<ReconcileReport>,
    pub summary_text: String,
    pub written: Vec<PathBuf>,
}

impl RunOutcome {
    /// True when every checked invariant held through the run.
    pub fn invariants_ok(&self) -> bool {
        self.reconcile.as_ref().is_none_or(|r| r.ok())
    }
}

fn build_dataset(config: &ExperimentConfig, run_seed: u64) -> Result<Dataset> {
    match &config.dataset {
        DatasetConfig::Synthetic {
            class_count,
            per_class,
            cluster_spread,
        } => generate_synthetic(
            *class_count,
            *per_class,
            *cluster_spread,
            stream_seed(run_seed, Stream::DataGen, &[]),
        ),
        DatasetConfig::Idx { images, labels } => load_idx(Path::new(images), Path::new(labels)),
    }
}

/// Builds the dataset, partitions it, initializes every client from the
/// shared starting model, and runs supervised warmup.
pub fn build_experiment(config: &ExperimentConfig, run_seed: u64) -> Result<BuiltExperiment> {
    config.validate()?;
    let dataset = build_dataset(config, run_seed)?;
    let spec = config.net_spec(dataset.feature_dim(), dataset.class_count())?;

    let partition_spec = PartitionSpec {
        client_count: config.partition.clients,
        alpha: config.partition.alpha,
        label_split_alpha: config.partition.label_split_alpha,
        seed: stream_seed(run_seed, Stream::Partition, &[]),
    };
    let parts = dirichlet_partition(&dataset, &partition_spec)?;

    let shared = ModelParams::init_random(spec, stream_seed(run_seed, Stream::Init, &[]))?;
    let mut clients = Vec::with_capacity(parts.len());
    for (id, part) in parts.iter().enumerate() {
        let data = split_labeled(
            &dataset,
            part,
            config.partition.label_split_alpha,
            stream_seed(run_seed, Stream::LabelSplit, &[id as u64]),
        )?;
        let opt = OptimState::new(
            shared.values().len(),
            config.optimizer.learning_rate,
            config.optimizer.momentum,
        )?;
        let mut client = ClientState::new(
            id,
            shared.clone(),
            opt,
            data,
            config.round.helper_capacity,
            derive_seed(
                stream_seed(run_seed, Stream::TrainDropout, &[]),
                &[id as u64],
            ),
        );
        client.warmup(config.training.warmup_epochs, config.training.batch_size)?;
        clients.push(client);
    }
    let pool = ServerPool::new(clients.iter().map(|c| c.params.clone()).collect());
    Ok(BuiltExperiment {
        clients,
        pool,
        run_seed,
    })
}

fn trace_matches_ledger(trace: &ExperimentTrace) -> bool {
    use crate::protocol::EventKind;
    let mut uploads = 0u64;
    let mut downloads = 0u64;
    for event in &trace.events {
        match event.kind {
            EventKind::Upload => uploads += event.model_units,
            EventKind::Replace | EventKind::Update | EventKind::Sample => {
                downloads += event.model_units
            }
            _ => {}
        }
    }
    uploads == trace.ledger.uploads()
        && downloads == trace.ledger.downloads()
        && trace.ledger.validate().is_ok()
}

/// Executes the configured method for one seed and writes the report files
/// into `out_dir`. Validation failures abort before anything is written.
pub fn run_experiment(
    config: &ExperimentConfig,
    run_seed: u64,
    out_dir: &Path,
) -> Result<RunOutcome> {
    let method = config.method()?;
    let settings = config.protocol_settings(run_seed)?;
    let mut built = build_experiment(config, run_seed)?;

    let trace = match method {
        Method::UmPfssl | Method::RandomHelper => {
            run(&settings, &mut built.clients, &mut built.pool)?
        }
        Method::FedavgSemi => run_baseline(
            &settings,
            &mut built.clients,
            &mut built.pool,
            BaselineKind::FedavgSemi,
        )?,
        Method::LocalOnly => run_baseline(
            &settings,
            &mut built.clients,
            &mut built.pool,
            BaselineKind::LocalOnly,
        )?,
    };

    // Bound reconciliation applies to the protocol methods; baselines only
    // get the trace/ledger consistency check.
    let reconcile = match method {
        Method::UmPfssl | Method::RandomHelper => Some(ledger::reconcile(
            &trace.ledger,
            &trace.events,
            &settings.round.cost_params()?,
        )),
        Method::FedavgSemi | Method::LocalOnly => {
            if !trace_matches_ledger(&trace) {
                return Err(Error::Consistency(
                    "trace events disagree with the ledger counters".into(),
                ));
            }
            None
        }
    };

    let ctx = ReportContext {
        method: method.name().to_string(),
        ablation: config.ablation.clone(),
        alpha: config.partition.alpha,
        seed: run_seed,
        cost_params: match method {
            Method::UmPfssl | Method::RandomHelper => Some(settings.round.cost_params()?),
            _ => None,
        },
    };
    let written = metrics::emit_reports(&trace, &built.clients, &ctx, out_dir)?;
    let mut summary_text = metrics::render_summary(&trace, &ctx);
    if let Some(report) = &reconcile {
        let _ = writeln!(
            summary_text,
            "analytic bound (incl. fill): {} model-units, within bound: {}, slack: {}",
            report.bound_with_fill, report.within_bound, report.slack
        );
    }

    let (best_round, best_mean_test_acc) =
        best_accuracy_summary(&trace.rounds).unwrap_or((0, f64::NAN));
    let (final_mean_test_acc, final_acc_variance) = trace
        .rounds
        .last()
        .map(|r| (r.mean_test_acc, r.acc_variance))
        .unwrap_or((f64::NAN, f64::NAN));

    Ok(RunOutcome {
        trace,
        best_mean_test_acc,
        best_round,
        final_mean_test_acc,
        final_acc_variance,
        reconcile,
        summary_text,
        written,
    })
}

/// Per-repeat seed: repeat `r` of a master seed.
pub fn repeat_seed(master_seed: u64, repeat: usize) -> u64 {
    stream_seed(master_seed, Stream::Repeat, &[repeat as u64])
}

/// Aggregate view over a repeated run.
pub struct RepeatOutcome {
    pub per_repeat: Vec<RunOutcome>,
    pub mean_best_test_acc: f64,
    pub mean_final_test_acc: f64,
    pub written: Vec<PathBuf>,
}

/// Runs `config.repeats` seeded repeats into `repeat_NNN/` subdirectories
/// and writes both aggregate views: the mean of per-repeat best accuracies
/// and the mean accuracy curve.
pub fn run_repeats(config: &ExperimentConfig, out_dir: &Path) -> Result<RepeatOutcome> {
    config.validate()?;
    let mut per_repeat = Vec::with_capacity(config.repeats);
    let mut written = Vec::new();
    for repeat in 0..config.repeats {
        let seed = repeat_seed(config.master_seed, repeat);
        let sub_dir = out_dir.join(format!("repeat_{repeat:03}"));
        let outcome = run_experiment(config, seed, &sub_dir)?;
        written.extend(outcome.written.iter().cloned());
        per_repeat.push(outcome);
    }

    let mut repeat_rows = String::from(
        "repeat,seed,best_mean_test_acc,best_round,final_mean_test_acc,final_acc_variance\n",
    );
    for (repeat, outcome) in per_repeat.iter().enumerate() {
        let _ = writeln!(
            repeat_rows,
            "{},{},{},{},{},{}",
            repeat,
            repeat_seed(config.master_seed, repeat),
            outcome.best_mean_test_acc,
            outcome.best_round,
            outcome.final_mean_test_acc,
            outcome.final_acc_variance,
        );
    }
    let repeats_path = out_dir.join("repeats_summary.csv");
    std::fs::write(&repeats_path, &repeat_rows)
        .map_err(|e| Error::io(repeats_path.display().to_string(), e))?;
    written.push(repeats_path);

    // Mean accuracy curve over repeats, per round.
    let round_count = per_repeat
        .iter()
        .map(|o| o.trace.rounds.len())
        .min()
        .unwrap_or(0);
    let mut curve = String::from("round,mean_val_acc,mean_test_acc,pseudo_label_error_rate\n");
    for r in 0..round_count {
        let k = per_repeat.len() as f64;
        let val = per_repeat
            .iter()
            .map(|o| o.trace.rounds[r].mean_val_acc)
            .sum::<f64>()
            / k;
        let test = per_repeat
            .iter()
            .map(|o| o.trace.rounds[r].mean_test_acc)
            .sum::<f64>()
            / k;
        let err = per_repeat
            .iter()
            .map(|o| o.trace.rounds[r].pseudo_label_error_rate)
            .sum::<f64>()
            / k;
        let _ = writeln!(
            curve,
            "{},{},{},{}",
            per_repeat[0].trace.rounds[r].round, val, test, err
        );
    }
    let curve_path = out_dir.join("mean_curve.csv");
    std::fs::write(&curve_path, &curve)
        .map_err(|e| Error::io(curve_path.display().to_string(), e))?;
    written.push(curve_path);

    let mean_best =
        per_repeat.iter().map(|o| o.best_mean_test_acc).sum::<f64>() / per_repeat.len() as f64;
    let mean_final = per_repeat
        .iter()
        .map(|o| o.final_mean_test_acc)
        .sum::<f64>()
        / per_repeat.len() as f64;
    Ok(RepeatOutcome {
        per_repeat,
        mean_best_test_acc: mean_best,
        mean_final_test_acc: mean_final,
        written,
    })
}

/// A sweepable hyperparameter axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    SearchRounds,
    UpdatePeriod,
    SampleRate,
}

impl SweepAxis {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "alpha" => Ok(SweepAxis::Alpha),
            "f" | "search_rounds" => Ok(SweepAxis::SearchRounds),
            "nu" | "update_period" => Ok(SweepAxis::UpdatePeriod),
            "tau" | "sample_rate" => Ok(SweepAxis::SampleRate),
            other => Err(Error::Config(format!(
                "unknown sweep axis '{other}', expected alpha, f, nu, or tau"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::SearchRounds => "f",
            SweepAxis::UpdatePeriod => "nu",
            SweepAxis::SampleRate => "tau",
        }
    }
}

/// Reference search horizon used to normalize the F sweep.
pub const F_SWEEP_REFERENCE: usize = 200;

/// One sweep grid point result.
pub struct SweepPoint {
    pub value: f64,
    pub best_mean_test_acc: f64,
    /// Analytic cost relative to the axis baseline, as a percentage.
    pub cost_percent: f64,
    pub invariants_ok: bool,
}

/// Analytic cost percentage for one grid point, from the base configuration.
pub fn sweep_cost_percent(config: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<f64> {
    let base = config.round_config(config.master_seed).cost_params()?;
    let fraction = match axis {
        SweepAxis::Alpha => Rational::one(),
        SweepAxis::UpdatePeriod => nu_sweep_cost_fraction(&base, value as usize),
        SweepAxis::SampleRate => tau_sweep_cost_fraction(&base, Rational::from_f64_decimal(value)?),
        SweepAxis::SearchRounds => f_sweep_cost_fraction(&base, value as usize, F_SWEEP_REFERENCE),
    };
    Ok(fraction.to_f64() * 100.0)
}

fn apply_axis(config: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut point = config.clone();
    match axis {
        SweepAxis::Alpha => point.partition.alpha = value,
        SweepAxis::SearchRounds => point.round.search_rounds = value as usize,
        SweepAxis::UpdatePeriod => {
            if value < 1.0 {
                return Err(Error::Config(
                    "update_period sweep values must be >= 1".into(),
                ));
            }
            point.round.update_period = value as usize;
        }
        SweepAxis::SampleRate => point.round.sample_rate = value,
    }
    point.validate()?;
    Ok(point)
}

/// Runs every grid point with a derived seed and writes
/// `sweep_summary.csv` plus per-point report subdirectories.
pub fn run_sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out_dir: &Path,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep grid must not be empty".into()));
    }
    // Validate the whole grid before any point runs.
    for &value in values {
        apply_axis(config, axis, value)?;
    }

    let mut points = Vec::with_capacity(values.len());
    for (index, &value) in values.iter().enumerate() {
        let point_config = apply_axis(config, axis, value)?;
        let seed = derive_seed(
            config.master_seed,
            &[axis.name().len() as u64, index as u64],
        );
        let sub_dir = out_dir.join(format!("{}_{}", axis.name(), value));
        let outcome = run_experiment(&point_config, seed, &sub_dir)?;
        points.push(SweepPoint {
            value,
            best_mean_test_acc: outcome.best_mean_test_acc,
            cost_percent: sweep_cost_percent(config, axis, value)?,
            invariants_ok: outcome.invariants_ok(),
        });
    }

    let mut rows = String::from("axis,value,best_mean_test_acc,cost_percent\n");
    for point in &points {
        let _ = writeln!(
            rows,
            "{},{},{},{:.1}",
            axis.name(),
            point.value,
            point.best_mean_test_acc,
            point.cost_percent
        );
    }
    let path = out_dir.join("sweep_summary.csv");
    std::fs::write(&path, &rows).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(points)
}

/// Builds the partition only and writes `partition.csv`; returns a brief
/// text summary.
pub fn partition_only(config: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    let built = build_experiment(config, repeat_seed(config.master_seed, 0))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let class_count = built.clients[0].data.class_count();
    let mut csv = String::from("client,train,val,test,labeled,unlabeled,labeled_ratio");
    for class in 0..class_count {
        let _ = write!(csv, ",class_{class}");
    }
    csv.push('\n');
    let mut text = String::new();
    for client in &built.clients {
        let _ = write!(
            csv,
            "{},{},{},{},{},{},{}",
            client.id,
            client.data.train_len(),
            client.data.val().len(),
            client.data.test().len(),
            client.data.labeled().len(),
            client.data.unlabeled_features().len(),
            client.data.labeled_ratio(),
        );
        for count in client.data.train_class_counts() {
            let _ = write!(csv, ",{count}");
        }
        csv.push('\n');
        let _ = writeln!(
            text,
            "client {}: {} train ({} labeled / {} unlabeled, mu={:.3}), {} val, {} test",
            client.id,
            client.data.train_len(),
            client.data.labeled().len(),
            client.data.unlabeled_features().len(),
            client.data.labeled_ratio(),
            client.data.val().len(),
            client.data.test().len(),
        );
    }
    let path = out_dir.join("partition.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text)
}
