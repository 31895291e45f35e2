//! The round loop: helper search and refresh phases, client sampling, the
//! per-client participation pipeline, and baseline schedulers.
//!
//! Round phases are barriers. Replace/update maintenance runs first, then
//! clients are sampled, then sampled clients aggregate, pseudo-label, train,
//! and finally uploads commit in ascending client-id order. Client-phase
//! tasks only read the pool state left by the maintenance phase, so the
//! optional parallel schedule is bit-identical to the sequential one.

use crate::error::{Error, Result};
use crate::federation::{
    upload, ClientState, HelperEntry, HelperEvaluation, PseudoLabel, ServerPool, TrainSettings,
};
use crate::ledger::{CostLedger, CostModelParams, Rational};
use crate::metrics::{self, RoundMetrics};
use crate::rng::{derive_seed, rng_from_seed, sample_without_replacement, stream_seed, Stream};
use crate::uncertainty::{AblationMode, CorrScore};
use rand::Rng;
use rayon::prelude::*;

/// Protocol knobs for one run.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub client_count: usize,
    pub sample_rate: f64,
    pub helper_capacity: usize,
    pub replace_count: usize,
    pub search_rounds: usize,
    pub update_period: usize,
    pub total_rounds: usize,
    pub local_epochs: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.client_count < 2 {
            return Err(Error::Config("client_count must be >= 2".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Config("sample_rate must lie in (0, 1]".into()));
        }
        if self.helper_capacity < 1 {
            return Err(Error::Config("helper_capacity must be >= 1".into()));
        }
        if self.replace_count + 1 > self.helper_capacity {
            return Err(Error::Config(format!(
                "replace_count {} must be at most helper_capacity - 1 = {}",
                self.replace_count,
                self.helper_capacity - 1
            )));
        }
        if self.update_period < 1 {
            return Err(Error::Config("update_period must be >= 1".into()));
        }
        if self.mc_samples < 1 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        let sampled = self.sampled_per_round();
        if sampled < 1 || sampled > self.client_count {
            return Err(Error::Config(format!(
                "sampled client count {sampled} out of range"
            )));
        }
        Ok(())
    }

    /// `ceil(tau * K)` clients participate each round.
    pub fn sampled_per_round(&self) -> usize {
        (self.sample_rate * self.client_count as f64).ceil() as usize
    }

    /// The analytic cost-model view of these parameters.
    pub fn cost_params(&self) -> Result<CostModelParams> {
        Ok(CostModelParams {
            client_count: self.client_count,
            sample_rate: Rational::from_f64_decimal(self.sample_rate)?,
            helper_capacity: self.helper_capacity,
            replace_count: self.replace_count,
            search_rounds: self.search_rounds,
            update_period: self.update_period,
            total_rounds: self.total_rounds,
        })
    }
}

/// What happened, to whom, and how many model-units moved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// A candidate download during the search phase.
    Replace,
    /// A helper refresh download during the update phase.
    Update,
    /// Sampling membership (0 units), or a helper-list fill download
    /// (1 unit, `peer_id` set) at first participation.
    Sample,
    /// Local aggregation of the cached helper models.
    Aggregate,
    /// Pseudo-label selection over the unlabeled split.
    PseudoLabel,
    /// Local training epochs.
    Train,
    /// Model upload to the server pool.
    Upload,
    /// A candidate draw came up short of `R` disjoint peers.
    Skip,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Replace => "replace",
            EventKind::Update => "update",
            EventKind::Sample => "sample",
            EventKind::Aggregate => "aggregate",
            EventKind::PseudoLabel => "pseudo_label",
            EventKind::Train => "train",
            EventKind::Upload => "upload",
            EventKind::Skip => "skip",
        }
    }
}

/// One audit-log entry; the trace feeds the cost ledger and the protocol
/// conformance checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundEvent {
    pub round: u64,
    pub kind: EventKind,
    pub client_id: usize,
    pub peer_id: Option<usize>,
    pub model_units: u64,
}

/// How helpers are scored for ranking, replacement, weighting, and
/// pseudo-label source selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// The uncertainty-based relation score.
    Corr,
    /// Seeded random scores and random pseudo-label sources (control arm).
    Random,
}

/// Everything a scheduler needs besides the clients and the pool.
#[derive(Debug, Clone)]
pub struct ProtocolSettings {
    pub round: RoundConfig,
    pub train: TrainSettings,
    pub ablation: AblationMode,
    pub policy: SelectionPolicy,
    /// Restrict the replace/update maintenance loops to this round's sampled
    /// clients instead of all clients.
    pub restrict_maintenance_to_sampled: bool,
    /// Evaluate relation scores over a fixed seeded subset of at most this
    /// many unlabeled points; `None` evaluates the full set.
    pub uncertainty_eval_cap: Option<usize>,
    /// Run the per-client phases on a thread pool; results are bit-identical
    /// to the sequential schedule.
    pub parallel: bool,
}

/// Comparison schedulers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Uniform global averaging of sampled uploads, self-pseudo-labels.
    FedavgSemi,
    /// No communication at all, self-pseudo-labels.
    LocalOnly,
}

/// Full record of one run.
#[derive(Debug, Clone)]
pub struct ExperimentTrace {
    pub events: Vec<RoundEvent>,
    pub rounds: Vec<RoundMetrics>,
    pub ledger: CostLedger,
}

/// Uniform draw without replacement of `ceil(tau * K)` client ids,
/// deterministic per `(seed, round)`; returned in ascending order.
pub fn sample_clients(config: &RoundConfig, round: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(stream_seed(config.seed, Stream::Sampling, &[round]));
    let pool: Vec<usize> = (0..config.client_count).collect();
    let mut picked = sample_without_replacement(&mut rng, &pool, config.sampled_per_round());
    picked.sort_unstable();
    picked
}

/// Ledger charges for download-type events. Uploads are charged by
/// [`upload`] itself when the commit happens.
fn charge(ledger: &mut CostLedger, event: &RoundEvent) {
    if event.model_units == 0 {
        return;
    }
    match event.kind {
        EventKind::Upload => {}
        EventKind::Sample => ledger.record_fill_download(event.round),
        EventKind::Replace | EventKind::Update => ledger.record_download(event.round),
        _ => unreachable!("event kind {:?} carries no model units", event.kind),
    }
}

/// A helper's score under the active policy. Random scores are a pure
/// function of `(seed, round, owner, helper)`.
fn policy_score(
    policy: SelectionPolicy,
    mode: AblationMode,
    corr: &CorrScore,
    master_seed: u64,
    round: u64,
    owner: usize,
    helper: usize,
) -> f64 {
    match policy {
        SelectionPolicy::Corr => corr.for_mode(mode),
        SelectionPolicy::Random => {
            let seed = stream_seed(
                master_seed,
                Stream::RandomControl,
                &[round, owner as u64, helper as u64],
            );
            rng_from_seed(seed).gen::<f64>()
        }
    }
}

/// Scores every cached helper against local data and stores the relation
/// scores on the entries. Local compute over cached models; never charged.
fn score_entries(
    client: &mut ClientState,
    settings: &ProtocolSettings,
    round: u64,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    client.score_helpers(
        settings.round.mc_samples,
        seed,
        round,
        settings.uncertainty_eval_cap,
    )?;
    let scores = client
        .helpers
        .entries()
        .iter()
        .map(|e| {
            (
                e.client_id,
                policy_score(
                    settings.policy,
                    settings.ablation,
                    &e.corr,
                    settings.round.seed,
                    round,
                    client.id,
                    e.client_id,
                ),
            )
        })
        .collect();
    Ok(scores)
}

/// The `R` lowest-scored ids, ties to the lowest id. `exclude_owner` drops
/// the self entry from the ranking entirely (search phase); otherwise the
/// owner may rank low but is still protected by the caller (update phase).
fn lowest_ranked(
    scores: &[(usize, f64)],
    count: usize,
    owner: usize,
    exclude_owner: bool,
) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = scores
        .iter()
        .filter(|(id, _)| !exclude_owner || *id != owner)
        .copied()
        .collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.into_iter().take(count).map(|(id, _)| id).collect()
}

/// Search phase for one client: score the cached helpers, mark the `R` least
/// related non-self entries, download `R` random disjoint candidates, and
/// greedily replace marked entries with strictly better candidates.
fn replace_helper(
    client: &mut ClientState,
    pool: &ServerPool,
    settings: &ProtocolSettings,
    round: u64,
) -> Result<Vec<RoundEvent>> {
    let mut events = Vec::new();
    let config = &settings.round;
    let eval_seed = client.maintenance_seed(round);
    let scores = score_entries(client, settings, round, eval_seed)?;
    let marked = lowest_ranked(&scores, config.replace_count, client.id, true);

    let outside: Vec<usize> = (0..config.client_count)
        .filter(|id| !client.helpers.contains(*id))
        .collect();
    let mut rng = rng_from_seed(stream_seed(
        config.seed,
        Stream::Candidates,
        &[round, client.id as u64],
    ));
    let candidates = sample_without_replacement(&mut rng, &outside, config.replace_count);
    if candidates.len() < config.replace_count {
        events.push(RoundEvent {
            round,
            kind: EventKind::Skip,
            client_id: client.id,
            peer_id: None,
            model_units: 0,
        });
    }

    // Every candidate download is charged, replacement or not.
    let mut scored_candidates = Vec::with_capacity(candidates.len());
    for &candidate in &candidates {
        events.push(RoundEvent {
            round,
            kind: EventKind::Replace,
            client_id: client.id,
            peer_id: Some(candidate),
            model_units: 1,
        });
        let params = pool.model(candidate).clone();
        let helper_seed = derive_seed(eval_seed, &[candidate as u64]);
        let mut corr = client.score_external(
            &params,
            config.mc_samples,
            helper_seed,
            settings.uncertainty_eval_cap,
        )?;
        corr.evaluated_round = round;
        let score = policy_score(
            settings.policy,
            settings.ablation,
            &corr,
            config.seed,
            round,
            client.id,
            candidate,
        );
        scored_candidates.push((candidate, params, corr, score));
    }

    // Best candidate against the worst marked incumbent, strict improvement
    // only, one slot per candidate.
    scored_candidates.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap().then(a.0.cmp(&b.0)));
    let mut marked_scores: Vec<(usize, f64)> = marked
        .iter()
        .map(|id| (*id, scores.iter().find(|(sid, _)| sid == id).unwrap().1))
        .collect();
    marked_scores.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));

    let mut slot = 0;
    for (candidate, params, corr, score) in scored_candidates {
        if slot >= marked_scores.len() {
            break;
        }
        let (incumbent, incumbent_score) = marked_scores[slot];
        if score > incumbent_score {
            client.helpers.remove(incumbent)?;
            client.helpers.insert(HelperEntry {
                client_id: candidate,
                params,
                corr,
                cached_version: pool.version(candidate),
            })?;
            slot += 1;
        } else {
            break;
        }
    }
    Ok(events)
}

/// Update phase for one client: rank the cached helpers, skip the `R` lowest
/// non-self entries, and re-download every retained helper whose pool
/// version moved past the cached copy. The self entry refreshes locally for
/// free.
fn update_helper(
    client: &mut ClientState,
    pool: &ServerPool,
    settings: &ProtocolSettings,
    round: u64,
) -> Result<Vec<RoundEvent>> {
    let mut events = Vec::new();
    let config = &settings.round;
    let seed = derive_seed(client.maintenance_seed(round), &[1]);
    let scores = score_entries(client, settings, round, seed)?;
    let lowest = lowest_ranked(&scores, config.replace_count, client.id, false);

    let owner = client.id;
    let retained: Vec<usize> = client
        .helpers
        .ids()
        .into_iter()
        .filter(|id| *id == owner || !lowest.contains(id))
        .collect();
    for id in retained {
        if id == owner {
            client.refresh_self_entry();
            let version = pool.version(owner);
            if let Some(entry) = client.helpers.entry_mut(owner) {
                entry.cached_version = version;
            }
            continue;
        }
        let pool_version = pool.version(id);
        let entry = client
            .helpers
            .entry_mut(id)
            .expect("retained id comes from the list");
        if pool_version > entry.cached_version {
            entry.params = pool.model(id).clone();
            entry.cached_version = pool_version;
            events.push(RoundEvent {
                round,
                kind: EventKind::Update,
                client_id: owner,
                peer_id: Some(id),
                model_units: 1,
            });
        }
    }
    Ok(events)
}

/// Output of one sampled client's participation phase.
struct ClientRoundOutput {
    client_id: usize,
    events: Vec<RoundEvent>,
    pseudo_wrong: usize,
    pseudo_total: usize,
}

/// Fill the helper list at first participation, aggregate, pseudo-label,
/// train, and stage the upload.
fn client_participation(
    client: &mut ClientState,
    pool: &ServerPool,
    settings: &ProtocolSettings,
    round: u64,
) -> Result<ClientRoundOutput> {
    let config = &settings.round;
    let mut events = Vec::new();

    // Fill the helper list with random peers if short.
    if client.helpers.len() < config.helper_capacity {
        let outside: Vec<usize> = (0..config.client_count)
            .filter(|id| !client.helpers.contains(*id))
            .collect();
        let want = config.helper_capacity - client.helpers.len();
        let mut rng = rng_from_seed(stream_seed(
            config.seed,
            Stream::Fill,
            &[round, client.id as u64],
        ));
        for peer in sample_without_replacement(&mut rng, &outside, want) {
            client.helpers.insert(HelperEntry {
                client_id: peer,
                params: pool.model(peer).clone(),
                corr: CorrScore::combine(0.0, 0.0, 0.0),
                cached_version: pool.version(peer),
            })?;
            events.push(RoundEvent {
                round,
                kind: EventKind::Sample,
                client_id: client.id,
                peer_id: Some(peer),
                model_units: 1,
            });
        }
    }

    // One MC evaluation per (helper, point), reused for weighting and
    // pseudo-label selection.
    let evals = client.evaluate_helpers(
        config.mc_samples,
        client.mc_seed(round),
        round,
        settings.uncertainty_eval_cap,
    )?;
    if settings.policy == SelectionPolicy::Random {
        // Control arm: uniform aggregation weights.
        for eval in &evals {
            if let Some(entry) = client.helpers.entry_mut(eval.client_id) {
                entry.corr = CorrScore::combine(0.0, 1.0, 1.0);
            }
        }
    }
    client.aggregate(settings.ablation)?;
    events.push(RoundEvent {
        round,
        kind: EventKind::Aggregate,
        client_id: client.id,
        peer_id: None,
        model_units: 0,
    });

    let labels = match settings.policy {
        SelectionPolicy::Corr => client.select_pseudo_labels_from(&evals)?,
        SelectionPolicy::Random => select_random_sources(
            client,
            &evals,
            stream_seed(
                config.seed,
                Stream::RandomControl,
                &[round, client.id as u64],
            ),
        )?,
    };
    events.push(RoundEvent {
        round,
        kind: EventKind::PseudoLabel,
        client_id: client.id,
        peer_id: None,
        model_units: 0,
    });
    let (pseudo_wrong, pseudo_total) = metrics::count_pseudo_errors(&labels, &client.data);

    client.local_train(&labels, config.local_epochs, settings.train, round)?;
    events.push(RoundEvent {
        round,
        kind: EventKind::Train,
        client_id: client.id,
        peer_id: None,
        model_units: 0,
    });
    events.push(RoundEvent {
        round,
        kind: EventKind::Upload,
        client_id: client.id,
        peer_id: None,
        model_units: 1,
    });

    Ok(ClientRoundOutput {
        client_id: client.id,
        events,
        pseudo_wrong,
        pseudo_total,
    })
}

/// Random-control pseudo-labels: a uniformly drawn helper per point.
fn select_random_sources(
    client: &ClientState,
    evals: &[HelperEvaluation],
    seed: u64,
) -> Result<Vec<PseudoLabel>> {
    let point_count = client.data.unlabeled_features().len();
    if evals.is_empty() && point_count > 0 {
        return Err(Error::Protocol("no helper evaluations available".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut labels = Vec::with_capacity(point_count);
    for i in 0..point_count {
        let pick = &evals[rng.gen_range(0..evals.len())];
        labels.push(PseudoLabel {
            target: pick.per_point[i].clone(),
            source_helper: pick.client_id,
            uncertainty: pick.per_point[i].entropy(),
        });
    }
    Ok(labels)
}

fn run_for_each<F>(
    clients: &mut [ClientState],
    targets: &[usize],
    parallel: bool,
    task: F,
) -> Result<Vec<(usize, Vec<RoundEvent>)>>
where
    F: Fn(&mut ClientState) -> Result<Vec<RoundEvent>> + Sync,
{
    if parallel {
        clients
            .par_iter_mut()
            .filter(|c| targets.contains(&c.id))
            .map(|c| Ok((c.id, task(c)?)))
            .collect()
    } else {
        targets
            .iter()
            .map(|&id| Ok((id, task(&mut clients[id])?)))
            .collect()
    }
}

/// The full protocol: search rounds, periodic helper updates, sampling, and
/// the per-client participation pipeline, with uploads committed in
/// client-id order at the round barrier.
pub fn run(
    settings: &ProtocolSettings,
    clients: &mut [ClientState],
    pool: &mut ServerPool,
) -> Result<ExperimentTrace> {
    let config = &settings.round;
    config.validate()?;
    if clients.len() != config.client_count || pool.client_count() != config.client_count {
        return Err(Error::Config(format!(
            "config expects {} clients, got {} states and {} pool slots",
            config.client_count,
            clients.len(),
            pool.client_count()
        )));
    }

    let mut events: Vec<RoundEvent> = Vec::new();
    let mut ledger = CostLedger::new();
    let mut rounds: Vec<RoundMetrics> = Vec::new();

    for round in 1..=config.total_rounds as u64 {
        pool.set_round(round);
        let sampled = sample_clients(config, round);
        let all: Vec<usize> = (0..config.client_count).collect();
        let maintenance_targets: &[usize] = if settings.restrict_maintenance_to_sampled {
            &sampled
        } else {
            &all
        };

        // Search phase: only during the first F rounds.
        if round < config.search_rounds as u64 && config.replace_count > 0 {
            let produced = run_for_each(clients, maintenance_targets, settings.parallel, |c| {
                replace_helper(c, pool, settings, round)
            })?;
            for (_, batch) in produced {
                for event in batch {
                    charge(&mut ledger, &event);
                    events.push(event);
                }
            }
        }

        // Update phase: on the nu grid.
        if round % config.update_period as u64 == 0 {
            let produced = run_for_each(clients, maintenance_targets, settings.parallel, |c| {
                update_helper(c, pool, settings, round)
            })?;
            for (_, batch) in produced {
                for event in batch {
                    charge(&mut ledger, &event);
                    events.push(event);
                }
            }
        }

        // Sampling membership markers.
        for &id in &sampled {
            events.push(RoundEvent {
                round,
                kind: EventKind::Sample,
                client_id: id,
                peer_id: None,
                model_units: 0,
            });
        }

        // Participation phase against the immutable post-maintenance pool.
        let outputs: Result<Vec<ClientRoundOutput>> = if settings.parallel {
            clients
                .par_iter_mut()
                .filter(|c| sampled.contains(&c.id))
                .map(|c| client_participation(c, pool, settings, round))
                .collect()
        } else {
            sampled
                .iter()
                .map(|&id| client_participation(&mut clients[id], pool, settings, round))
                .collect()
        };
        let outputs = outputs?;

        // Commit uploads and bookkeeping in client-id order.
        let mut pseudo_wrong = 0usize;
        let mut pseudo_total = 0usize;
        for output in outputs {
            for event in &output.events {
                charge(&mut ledger, event);
            }
            events.extend(output.events.iter().copied());
            pseudo_wrong += output.pseudo_wrong;
            pseudo_total += output.pseudo_total;
            upload(&clients[output.client_id], pool, &mut ledger, round);
        }

        rounds.push(metrics::round_metrics(
            round,
            clients,
            pseudo_wrong,
            pseudo_total,
            &ledger,
            settings.parallel,
        )?);

        for client in clients.iter() {
            client.helpers.validate()?;
        }
    }

    Ok(ExperimentTrace {
        events,
        rounds,
        ledger,
    })
}

/// Events plus pseudo-label stats from one baseline client's round.
type BaselineOutput = (Vec<RoundEvent>, usize, usize);

/// Baseline schedulers sharing the trace/ledger/metrics plumbing.
pub fn run_baseline(
    settings: &ProtocolSettings,
    clients: &mut [ClientState],
    pool: &mut ServerPool,
    kind: BaselineKind,
) -> Result<ExperimentTrace> {
    let config = &settings.round;
    config.validate()?;
    if clients.len() != config.client_count || pool.client_count() != config.client_count {
        return Err(Error::Config("client count mismatch".into()));
    }

    let mut events: Vec<RoundEvent> = Vec::new();
    let mut ledger = CostLedger::new();
    let mut rounds: Vec<RoundMetrics> = Vec::new();

    // FedAvg starts from the uniform mean of the post-warmup models.
    let mut global = match kind {
        BaselineKind::FedavgSemi => Some(uniform_mean(clients)?),
        BaselineKind::LocalOnly => None,
    };

    for round in 1..=config.total_rounds as u64 {
        pool.set_round(round);
        let sampled = sample_clients(config, round);
        for &id in &sampled {
            events.push(RoundEvent {
                round,
                kind: EventKind::Sample,
                client_id: id,
                peer_id: None,
                model_units: 0,
            });
        }

        let global_ref = global.as_ref();
        let task = |client: &mut ClientState| -> Result<BaselineOutput> {
            let mut local_events = Vec::new();
            if let Some(global_params) = global_ref {
                client.params = global_params.clone();
                client.refresh_self_entry();
                local_events.push(RoundEvent {
                    round,
                    kind: EventKind::Update,
                    client_id: client.id,
                    peer_id: None,
                    model_units: 1,
                });
            }
            // Self-pseudo-labels: the own model is the only candidate.
            let labels = self_pseudo_labels(client, config.mc_samples, round)?;
            local_events.push(RoundEvent {
                round,
                kind: EventKind::PseudoLabel,
                client_id: client.id,
                peer_id: None,
                model_units: 0,
            });
            let (wrong, total) = metrics::count_pseudo_errors(&labels, &client.data);
            client.local_train(&labels, config.local_epochs, settings.train, round)?;
            local_events.push(RoundEvent {
                round,
                kind: EventKind::Train,
                client_id: client.id,
                peer_id: None,
                model_units: 0,
            });
            if matches!(kind, BaselineKind::FedavgSemi) {
                local_events.push(RoundEvent {
                    round,
                    kind: EventKind::Upload,
                    client_id: client.id,
                    peer_id: None,
                    model_units: 1,
                });
            }
            Ok((local_events, wrong, total))
        };

        let outputs: Result<Vec<(usize, BaselineOutput)>> = if settings.parallel {
            clients
                .par_iter_mut()
                .filter(|c| sampled.contains(&c.id))
                .map(|c| {
                    let id = c.id;
                    Ok((id, task(c)?))
                })
                .collect()
        } else {
            sampled
                .iter()
                .map(|&id| Ok((id, task(&mut clients[id])?)))
                .collect()
        };
        let outputs = outputs?;

        let mut pseudo_wrong = 0usize;
        let mut pseudo_total = 0usize;
        for (id, (local_events, wrong, total)) in outputs {
            for event in &local_events {
                charge(&mut ledger, event);
            }
            events.extend(local_events);
            pseudo_wrong += wrong;
            pseudo_total += total;
            if matches!(kind, BaselineKind::FedavgSemi) {
                upload(&clients[id], pool, &mut ledger, round);
            }
        }

        if matches!(kind, BaselineKind::FedavgSemi) {
            let uploads: Vec<&ClientState> = sampled.iter().map(|&id| &clients[id]).collect();
            global = Some(uniform_mean_of(&uploads)?);
        }

        rounds.push(metrics::round_metrics(
            round,
            clients,
            pseudo_wrong,
            pseudo_total,
            &ledger,
            settings.parallel,
        )?);
    }

    Ok(ExperimentTrace {
        events,
        rounds,
        ledger,
    })
}

fn self_pseudo_labels(
    client: &mut ClientState,
    mc_samples: usize,
    round: u64,
) -> Result<Vec<PseudoLabel>> {
    let seed = client.mc_seed(round);
    let own = client.id;
    let unlabeled = client.data.unlabeled_features();
    let helper_seed = derive_seed(seed, &[own as u64]);
    let mut labels = Vec::with_capacity(unlabeled.len());
    for (i, x) in unlabeled.iter().enumerate() {
        let pred = crate::uncertainty::mc_predict(
            &client.params,
            x,
            mc_samples,
            derive_seed(helper_seed, &[i as u64]),
        )?;
        labels.push(PseudoLabel {
            uncertainty: pred.entropy(),
            source_helper: own,
            target: pred,
        });
    }
    Ok(labels)
}

fn uniform_mean(clients: &[ClientState]) -> Result<crate::nn::ModelParams> {
    let refs: Vec<&ClientState> = clients.iter().collect();
    uniform_mean_of(&refs)
}

fn uniform_mean_of(clients: &[&ClientState]) -> Result<crate::nn::ModelParams> {
    let first = clients
        .first()
        .ok_or_else(|| Error::Protocol("cannot average zero models".into()))?;
    let mut mean = vec![0.0; first.params.values().len()];
    for client in clients {
        for (m, &v) in mean.iter_mut().zip(client.params.values()) {
            *m += v;
        }
    }
    let scale = 1.0 / clients.len() as f64;
    for m in &mut mean {
        *m *= scale;
    }
    crate::nn::ModelParams::from_values(first.params.spec().clone(), mean)
}
