//! Per-client and aggregate evaluation plus CSV report emission.
//!
//! Evaluation is read-only over client state and always uses the
//! deterministic forward pass. Report files are written with a fixed column
//! order and shortest-roundtrip float formatting, so a seeded run produces
//! byte-identical CSVs every time.

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::federation::{ClientState, PseudoLabel};
use crate::ledger::{CostLedger, CostModelParams, Rational};
use crate::nn::{forward, ForwardMode};
use crate::protocol::ExperimentTrace;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Which held-out split to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

/// One round's evaluation snapshot across all clients.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: u64,
    pub per_client_val_acc: Vec<f64>,
    pub per_client_test_acc: Vec<f64>,
    pub mean_val_acc: f64,
    pub mean_test_acc: f64,
    pub acc_variance: f64,
    pub pseudo_label_error_rate: f64,
    pub pseudo_label_count: usize,
    pub cumulative_uploads: u64,
    pub cumulative_downloads: u64,
}

/// Argmax accuracy of the client's model on one of its held-out splits.
pub fn evaluate_client(client: &ClientState, split: Split) -> Result<f64> {
    let examples = match split {
        Split::Val => client.data.val(),
        Split::Test => client.data.test(),
    };
    if examples.is_empty() {
        return Err(Error::Domain(format!(
            "client {} has an empty {split:?} split",
            client.id
        )));
    }
    let mut correct = 0usize;
    for example in examples {
        let pred = forward(
            &client.params,
            &example.features,
            ForwardMode::Deterministic,
        )?;
        if pred.argmax() == example.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Population variance of per-client accuracies: `1/K sum (a_k - mean)^2`.
pub fn fairness_variance(accuracies: &[f64]) -> f64 {
    assert!(accuracies.len() >= 2, "variance needs at least two clients");
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    accuracies
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / accuracies.len() as f64
}

/// Wrong/total pseudo-label counts against the hidden ground truth.
pub fn count_pseudo_errors(labels: &[PseudoLabel], data: &ClientDataset) -> (usize, usize) {
    let truth = data.hidden_labels_for_metrics();
    debug_assert_eq!(labels.len(), truth.len());
    let wrong = labels
        .iter()
        .zip(truth.iter())
        .filter(|(label, &actual)| label.target.argmax() != actual)
        .count();
    (wrong, labels.len())
}

/// Fraction of pseudo-labels whose argmax disagrees with the hidden truth.
pub fn pseudo_label_error(labels: &[PseudoLabel], data: &ClientDataset) -> f64 {
    let (wrong, total) = count_pseudo_errors(labels, data);
    if total == 0 {
        0.0
    } else {
        wrong as f64 / total as f64
    }
}

/// Best mean test accuracy over the rounds of a run, with the round it was
/// reached in.
pub fn best_accuracy_summary(rounds: &[RoundMetrics]) -> Option<(u64, f64)> {
    rounds
        .iter()
        .map(|r| (r.round, r.mean_test_acc))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
}

/// Evaluates every client on val and test and folds in the round's
/// pseudo-label stats and ledger snapshot.
pub fn round_metrics(
    round: u64,
    clients: &[ClientState],
    pseudo_wrong: usize,
    pseudo_total: usize,
    ledger: &CostLedger,
    parallel: bool,
) -> Result<RoundMetrics> {
    let evaluate = |client: &ClientState| -> Result<(f64, f64)> {
        Ok((
            evaluate_client(client, Split::Val)?,
            evaluate_client(client, Split::Test)?,
        ))
    };
    let scores: Result<Vec<(f64, f64)>> = if parallel {
        clients.par_iter().map(evaluate).collect()
    } else {
        clients.iter().map(evaluate).collect()
    };
    let scores = scores?;
    let per_client_val_acc: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let per_client_test_acc: Vec<f64> = scores.iter().map(|s| s.1).collect();
    let mean_val_acc = per_client_val_acc.iter().sum::<f64>() / clients.len() as f64;
    let mean_test_acc = per_client_test_acc.iter().sum::<f64>() / clients.len() as f64;
    let acc_variance = fairness_variance(&per_client_test_acc);
    let pseudo_label_error_rate = if pseudo_total == 0 {
        0.0
    } else {
        pseudo_wrong as f64 / pseudo_total as f64
    };
    Ok(RoundMetrics {
        round,
        per_client_val_acc,
        per_client_test_acc,
        mean_val_acc,
        mean_test_acc,
        acc_variance,
        pseudo_label_error_rate,
        pseudo_label_count: pseudo_total,
        cumulative_uploads: ledger.uploads(),
        cumulative_downloads: ledger.downloads(),
    })
}

/// Run identity attached to the emitted reports.
#[derive(Debug, Clone)]
pub struct ReportContext {
    pub method: String,
    pub ablation: String,
    pub alpha: f64,
    pub seed: u64,
    /// Analytic bound parameters; `None` for baselines outside the cost
    /// model.
    pub cost_params: Option<CostModelParams>,
}

fn fmt_f64(value: f64) -> String {
    format!("{value}")
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Cumulative analytic bound through round `t`, in model-units: update
/// downloads on the nu grid, search downloads for rounds below F, uploads at
/// the realized sample count, plus the initial-fill allowance.
fn cumulative_bound(p: &CostModelParams, round: u64) -> Rational {
    let k = Rational::from_int(p.client_count as i128);
    let m = Rational::from_int(p.helper_capacity as i128);
    let updates = Rational::from_int((round / p.update_period as u64) as i128);
    let search_rounds = round.min(p.search_rounds.saturating_sub(1) as u64);
    let search = Rational::from_int((search_rounds * p.replace_count as u64) as i128);
    let sampled = (p.sample_rate * k).ceil_int().max(1);
    let uploads = Rational::from_int(sampled) * Rational::from_int(round as i128);
    let fill = Rational::from_int(
        (p.client_count * (p.helper_capacity - 1).min(p.client_count - 1)) as i128,
    );
    k * m * updates + search * k + uploads + fill
}

/// Writes `metrics.csv`, `costs.csv`, `partition.csv`, and `summary.csv`
/// into `out_dir`, returning the written paths.
pub fn emit_reports(
    trace: &ExperimentTrace,
    clients: &[ClientState],
    ctx: &ReportContext,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut written = Vec::new();

    // metrics.csv: one row per (round, client); round-level aggregates are
    // repeated on each row.
    let mut metrics = String::from(
        "round,client,val_acc,test_acc,mean_val_acc,mean_test_acc,acc_variance,pseudo_label_error_rate\n",
    );
    for round in &trace.rounds {
        for client in 0..clients.len() {
            let _ = writeln!(
                metrics,
                "{},{},{},{},{},{},{},{}",
                round.round,
                client,
                fmt_f64(round.per_client_val_acc[client]),
                fmt_f64(round.per_client_test_acc[client]),
                fmt_f64(round.mean_val_acc),
                fmt_f64(round.mean_test_acc),
                fmt_f64(round.acc_variance),
                fmt_f64(round.pseudo_label_error_rate),
            );
        }
    }
    let metrics_path = out_dir.join("metrics.csv");
    write_file(&metrics_path, &metrics)?;
    written.push(metrics_path);

    // costs.csv: per-round and cumulative traffic with the analytic bound.
    let mut costs = String::from(
        "round,uploads,downloads,cum_uploads,cum_downloads,cum_bound,percent_of_bound\n",
    );
    let mut cum_up = 0u64;
    let mut cum_down = 0u64;
    for round in &trace.rounds {
        let counters = trace
            .ledger
            .per_round()
            .get(round.round as usize)
            .copied()
            .unwrap_or_default();
        cum_up += counters.uploads;
        cum_down += counters.downloads;
        let (bound, percent) = match &ctx.cost_params {
            Some(params) => {
                let bound = cumulative_bound(params, round.round);
                let measured = Rational::from_int((cum_up + cum_down) as i128);
                let percent = if bound.is_zero() {
                    0.0
                } else {
                    (measured / bound).to_f64()
                };
                (fmt_f64(bound.to_f64()), fmt_f64(percent))
            }
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            costs,
            "{},{},{},{},{},{},{}",
            round.round, counters.uploads, counters.downloads, cum_up, cum_down, bound, percent,
        );
    }
    let costs_path = out_dir.join("costs.csv");
    write_file(&costs_path, &costs)?;
    written.push(costs_path);

    // partition.csv: per-client sizes, labeled ratio, per-class train counts.
    let class_count = clients.first().map(|c| c.data.class_count()).unwrap_or(0);
    let mut partition = String::from("client,train,val,test,labeled,unlabeled,labeled_ratio");
    for class in 0..class_count {
        let _ = write!(partition, ",class_{class}");
    }
    partition.push('\n');
    for client in clients {
        let _ = write!(
            partition,
            "{},{},{},{},{},{},{}",
            client.id,
            client.data.train_len(),
            client.data.val().len(),
            client.data.test().len(),
            client.data.labeled().len(),
            client.data.unlabeled_features().len(),
            fmt_f64(client.data.labeled_ratio()),
        );
        for count in client.data.train_class_counts() {
            let _ = write!(partition, ",{count}");
        }
        partition.push('\n');
    }
    let partition_path = out_dir.join("partition.csv");
    write_file(&partition_path, &partition)?;
    written.push(partition_path);

    // summary.csv: one row per client.
    let mut summary = String::from(
        "client,labeled_ratio,best_val_acc,best_test_acc,final_val_acc,final_test_acc\n",
    );
    for (client, state) in clients.iter().enumerate() {
        let best_val = trace
            .rounds
            .iter()
            .map(|r| r.per_client_val_acc[client])
            .fold(f64::NAN, f64::max);
        let best_test = trace
            .rounds
            .iter()
            .map(|r| r.per_client_test_acc[client])
            .fold(f64::NAN, f64::max);
        let final_val = trace
            .rounds
            .last()
            .map(|r| r.per_client_val_acc[client])
            .unwrap_or(f64::NAN);
        let final_test = trace
            .rounds
            .last()
            .map(|r| r.per_client_test_acc[client])
            .unwrap_or(f64::NAN);
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{}",
            client,
            fmt_f64(state.data.labeled_ratio()),
            fmt_f64(best_val),
            fmt_f64(best_test),
            fmt_f64(final_val),
            fmt_f64(final_test),
        );
    }
    let summary_path = out_dir.join("summary.csv");
    write_file(&summary_path, &summary)?;
    written.push(summary_path);

    Ok(written)
}

/// Plain-text run summary for standard output.
pub fn render_summary(trace: &ExperimentTrace, ctx: &ReportContext) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "method={} ablation={} alpha={} seed={}",
        ctx.method, ctx.ablation, ctx.alpha, ctx.seed
    );
    if let Some((round, best)) = best_accuracy_summary(&trace.rounds) {
        let _ = writeln!(out, "best mean test accuracy: {best:.4} (round {round})");
    }
    if let Some(last) = trace.rounds.last() {
        let _ = writeln!(
            out,
            "final mean test accuracy: {:.4}  variance: {:.6}",
            last.mean_test_acc, last.acc_variance
        );
        let _ = writeln!(
            out,
            "final pseudo-label error rate: {:.4}",
            last.pseudo_label_error_rate
        );
    }
    let _ = writeln!(
        out,
        "traffic: {} uploads, {} downloads ({} fill) = {} model-units",
        trace.ledger.uploads(),
        trace.ledger.downloads(),
        trace.ledger.fill_downloads(),
        trace.ledger.total()
    );
    out
}
