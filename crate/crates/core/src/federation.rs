//! Client and server state plus the per-round client operations: warmup,
//! helper evaluation, weighted aggregation, pseudo-label selection, local
//! semi-supervised training, and model upload.
//!
//! Each client keeps a capacity-bounded helper list that always contains the
//! client itself. Relation scores are recomputed from cached helper models in
//! every participating round (local compute only), and the per-point MC
//! predictions from that evaluation are reused for pseudo-label selection.

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::ledger::CostLedger;
use crate::nn::{backward, ForwardMode, LossKind, ModelParams, OptimState, Target, TrainExample};
use crate::rng::{derive_seed, rng_from_seed, shuffle};
use crate::uncertainty::{
    corr_from_predictions, mc_predict, AblationMode, CorrScore, PredictiveDistribution,
};
use serde::{Deserialize, Serialize};

/// Aggregation falls back to the client's own model below this total weight.
const WEIGHT_EPS: f64 = 1e-9;

// Tags for per-client seed lineages.
const TAG_WARMUP: u64 = 101;
const TAG_TRAIN: u64 = 102;
const TAG_MC: u64 = 103;
const TAG_MAINT: u64 = 104;
const TAG_EVAL_CAP: u64 = 105;

/// A cached copy of a peer model with its latest relation score.
#[derive(Debug, Clone)]
pub struct HelperEntry {
    pub client_id: usize,
    pub params: ModelParams,
    pub corr: CorrScore,
    pub cached_version: u64,
}

/// Capacity-bounded helper cache; the owner is always present and never
/// evicted.
#[derive(Debug, Clone)]
pub struct HelperList {
    owner_id: usize,
    capacity: usize,
    entries: Vec<HelperEntry>,
}

impl HelperList {
    pub fn new(owner_id: usize, capacity: usize, owner_params: ModelParams) -> Self {
        assert!(capacity >= 1, "helper list capacity must be >= 1");
        HelperList {
            owner_id,
            capacity,
            entries: vec![HelperEntry {
                client_id: owner_id,
                params: owner_params,
                corr: CorrScore::combine(0.0, 0.0, 0.0),
                cached_version: 0,
            }],
        }
    }

    pub fn owner_id(&self) -> usize {
        self.owner_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending client-id order.
    pub fn entries(&self) -> &[HelperEntry] {
        &self.entries
    }

    pub fn contains(&self, client_id: usize) -> bool {
        self.entries.iter().any(|e| e.client_id == client_id)
    }

    pub fn entry_mut(&mut self, client_id: usize) -> Option<&mut HelperEntry> {
        self.entries.iter_mut().find(|e| e.client_id == client_id)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.client_id).collect()
    }

    pub fn insert(&mut self, entry: HelperEntry) -> Result<()> {
        if self.contains(entry.client_id) {
            return Err(Error::Protocol(format!(
                "helper {} already cached by client {}",
                entry.client_id, self.owner_id
            )));
        }
        if self.entries.len() >= self.capacity {
            return Err(Error::Protocol(format!(
                "helper list of client {} is full (capacity {})",
                self.owner_id, self.capacity
            )));
        }
        let pos = self
            .entries
            .partition_point(|e| e.client_id < entry.client_id);
        self.entries.insert(pos, entry);
        Ok(())
    }

    pub fn remove(&mut self, client_id: usize) -> Result<HelperEntry> {
        if client_id == self.owner_id {
            return Err(Error::Protocol(format!(
                "client {client_id} cannot evict itself from its helper list"
            )));
        }
        let pos = self
            .entries
            .iter()
            .position(|e| e.client_id == client_id)
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "helper {client_id} not cached by client {}",
                    self.owner_id
                ))
            })?;
        Ok(self.entries.remove(pos))
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::Protocol(format!(
                "helper list of client {} exceeds capacity: {} > {}",
                self.owner_id,
                self.entries.len(),
                self.capacity
            )));
        }
        if !self.contains(self.owner_id) {
            return Err(Error::Protocol(format!(
                "helper list of client {} lost its owner entry",
                self.owner_id
            )));
        }
        for pair in self.entries.windows(2) {
            if pair[0].client_id >= pair[1].client_id {
                return Err(Error::Protocol(format!(
                    "helper list of client {} has duplicate or unsorted ids",
                    self.owner_id
                )));
            }
        }
        Ok(())
    }
}

/// Server-side model pool: the latest uploaded copy of every client's model
/// with a per-client version counter.
#[derive(Debug, Clone)]
pub struct ServerPool {
    models: Vec<ModelParams>,
    versions: Vec<u64>,
    round: u64,
}

impl ServerPool {
    /// Populates the pool with the clients' initial (post-warmup) models.
    /// Initial population is setup, not an upload: versions start at 0 and
    /// nothing is charged.
    pub fn new(models: Vec<ModelParams>) -> Self {
        let versions = vec![0; models.len()];
        ServerPool {
            models,
            versions,
            round: 0,
        }
    }

    pub fn client_count(&self) -> usize {
        self.models.len()
    }

    pub fn model(&self, client_id: usize) -> &ModelParams {
        &self.models[client_id]
    }

    pub fn version(&self, client_id: usize) -> u64 {
        self.versions[client_id]
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn set_round(&mut self, round: u64) {
        self.round = round;
    }

    fn store(&mut self, client_id: usize, params: ModelParams) {
        self.models[client_id] = params;
        self.versions[client_id] += 1;
    }
}

/// The soft pseudo-label chosen for one unlabeled point.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub target: PredictiveDistribution,
    pub source_helper: usize,
    pub uncertainty: f64,
}

/// How the two loss terms are applied during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Sequential supervised pass then unsupervised pass per epoch.
    TwoStep,
    /// Single pass per epoch minimizing the ratio-weighted combined loss.
    WeightedSingleStep,
}

/// Minibatch settings shared by warmup and local training.
#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub mode: TrainingMode,
}

/// Relation evaluation of one cached helper, with the per-point predictions
/// kept for pseudo-label selection.
#[derive(Debug, Clone)]
pub struct HelperEvaluation {
    pub client_id: usize,
    pub corr: CorrScore,
    pub per_point: Vec<PredictiveDistribution>,
}

/// One client's full state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub params: ModelParams,
    pub opt: OptimState,
    pub data: ClientDataset,
    pub helpers: HelperList,
    seed: u64,
}

impl ClientState {
    pub fn new(
        id: usize,
        params: ModelParams,
        opt: OptimState,
        data: ClientDataset,
        helper_capacity: usize,
        seed: u64,
    ) -> Self {
        let helpers = HelperList::new(id, helper_capacity, params.clone());
        ClientState {
            id,
            params,
            opt,
            data,
            helpers,
            seed,
        }
    }

    /// Seed of the maintenance-phase relation evaluations for a round.
    pub fn maintenance_seed(&self, round: u64) -> u64 {
        derive_seed(self.seed, &[TAG_MAINT, round])
    }

    /// Seed of the participation-phase MC evaluations for a round.
    pub fn mc_seed(&self, round: u64) -> u64 {
        derive_seed(self.seed, &[TAG_MC, round])
    }

    /// Supervised-only warmup on the labeled split; a no-op for clients
    /// without labeled data.
    pub fn warmup(&mut self, epochs: usize, batch_size: usize) -> Result<()> {
        if self.data.labeled().is_empty() {
            return Ok(());
        }
        for epoch in 0..epochs {
            let seed = derive_seed(self.seed, &[TAG_WARMUP, epoch as u64]);
            self.supervised_pass(batch_size, seed)?;
        }
        self.refresh_self_entry();
        Ok(())
    }

    /// Indices of the fixed seeded subset the relation score is evaluated
    /// over when `cap` is below the unlabeled-set size; `None` means the
    /// full set. The subset is drawn once per client and stays fixed across
    /// rounds.
    fn eval_subset(&self, cap: Option<usize>) -> Option<Vec<usize>> {
        let count = self.data.unlabeled_features().len();
        match cap {
            Some(cap) if cap < count => {
                let mut rng = rng_from_seed(derive_seed(self.seed, &[TAG_EVAL_CAP]));
                let pool: Vec<usize> = (0..count).collect();
                let mut subset =
                    crate::rng::sample_without_replacement(&mut rng, &pool, cap.max(1));
                subset.sort_unstable();
                Some(subset)
            }
            _ => None,
        }
    }

    /// Recomputes the relation score of every cached helper (including self,
    /// refreshed locally for free) against local data, reusing one MC
    /// prediction per (helper, point). With an evaluation cap the entropy
    /// term is taken over the client's fixed seeded subset; the per-point
    /// predictions for pseudo-labeling are always complete.
    pub fn evaluate_helpers(
        &mut self,
        mc_samples: usize,
        seed: u64,
        round: u64,
        cap: Option<usize>,
    ) -> Result<Vec<HelperEvaluation>> {
        self.refresh_self_entry();
        let subset = self.eval_subset(cap);
        let mut evals = Vec::with_capacity(self.helpers.len());
        let unlabeled = self.data.unlabeled_features();
        for entry in self.helpers.entries() {
            let helper_seed = derive_seed(seed, &[entry.client_id as u64]);
            let per_point: Result<Vec<PredictiveDistribution>> = unlabeled
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    mc_predict(
                        &entry.params,
                        x,
                        mc_samples,
                        derive_seed(helper_seed, &[i as u64]),
                    )
                })
                .collect();
            let per_point = per_point?;
            let mut corr = match &subset {
                None => corr_from_predictions(&self.data, &entry.params, &per_point)?,
                Some(indices) => {
                    let picked: Vec<&PredictiveDistribution> =
                        indices.iter().map(|&i| &per_point[i]).collect();
                    corr_over_subset(&self.data, &entry.params, &picked)?
                }
            };
            corr.evaluated_round = round;
            evals.push(HelperEvaluation {
                client_id: entry.client_id,
                corr,
                per_point,
            });
        }
        for eval in &evals {
            if let Some(entry) = self.helpers.entry_mut(eval.client_id) {
                entry.corr = eval.corr;
            }
        }
        Ok(evals)
    }

    /// Relation scores only, for the maintenance phases: with a cap, only
    /// the subset points are evaluated (local compute saving; never charged
    /// as communication).
    pub fn score_helpers(
        &mut self,
        mc_samples: usize,
        seed: u64,
        round: u64,
        cap: Option<usize>,
    ) -> Result<Vec<CorrScore>> {
        self.refresh_self_entry();
        let subset = self.eval_subset(cap);
        let mut scores = Vec::with_capacity(self.helpers.len());
        for entry in self.helpers.entries() {
            let helper_seed = derive_seed(seed, &[entry.client_id as u64]);
            let mut corr = score_one_helper(
                &self.data,
                &entry.params,
                mc_samples,
                helper_seed,
                subset.as_deref(),
            )?;
            corr.evaluated_round = round;
            scores.push(corr);
        }
        let ids = self.helpers.ids();
        for (id, corr) in ids.into_iter().zip(scores.iter()) {
            if let Some(entry) = self.helpers.entry_mut(id) {
                entry.corr = *corr;
            }
        }
        Ok(scores)
    }

    /// Replaces the local model with the relation-weighted average of all
    /// cached helper models. Falls back to the own model when the total
    /// weight vanishes.
    pub fn aggregate(&mut self, mode: AblationMode) -> Result<()> {
        let own_len = self.params.values().len();
        for entry in self.helpers.entries() {
            if entry.params.spec() != self.params.spec() {
                return Err(Error::Protocol(format!(
                    "helper {} has a mismatched parameter layout",
                    entry.client_id
                )));
            }
            debug_assert_eq!(entry.params.values().len(), own_len);
        }
        let total_weight: f64 = self
            .helpers
            .entries()
            .iter()
            .map(|e| e.corr.for_mode(mode))
            .sum();
        if total_weight < WEIGHT_EPS {
            return Ok(());
        }
        let mut merged = vec![0.0; own_len];
        for entry in self.helpers.entries() {
            let weight = entry.corr.for_mode(mode) / total_weight;
            for (m, &v) in merged.iter_mut().zip(entry.params.values()) {
                *m += weight * v;
            }
        }
        self.params = ModelParams::from_values(self.params.spec().clone(), merged)?;
        Ok(())
    }

    /// Minimum-entropy pseudo-label per unlabeled point, over precomputed
    /// helper evaluations. Entropy ties resolve to the lowest helper id.
    pub fn select_pseudo_labels_from(
        &self,
        evals: &[HelperEvaluation],
    ) -> Result<Vec<PseudoLabel>> {
        let point_count = self.data.unlabeled_features().len();
        for eval in evals {
            if eval.per_point.len() != point_count {
                return Err(Error::Protocol(format!(
                    "helper {} evaluated {} points, expected {point_count}",
                    eval.client_id,
                    eval.per_point.len()
                )));
            }
        }
        if evals.is_empty() && point_count > 0 {
            return Err(Error::Protocol("no helper evaluations available".into()));
        }
        let mut labels = Vec::with_capacity(point_count);
        for i in 0..point_count {
            // Evaluations arrive in ascending id order; strict comparison
            // keeps the lowest id on ties.
            let mut best = &evals[0];
            for eval in &evals[1..] {
                if eval.per_point[i].entropy() < best.per_point[i].entropy() {
                    best = eval;
                }
            }
            labels.push(PseudoLabel {
                target: best.per_point[i].clone(),
                source_helper: best.client_id,
                uncertainty: best.per_point[i].entropy(),
            });
        }
        Ok(labels)
    }

    /// Pseudo-label selection computing the MC predictions from scratch;
    /// equivalent to [`ClientState::evaluate_helpers`] followed by
    /// [`ClientState::select_pseudo_labels_from`] at the same seed.
    pub fn select_pseudo_labels(
        &mut self,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Vec<PseudoLabel>> {
        let evals = self.evaluate_helpers(mc_samples, seed, 0, None)?;
        self.select_pseudo_labels_from(&evals)
    }

    /// `E` local epochs: a supervised cross-entropy pass over the labeled
    /// split followed by an unsupervised KL pass over the pseudo-labeled
    /// split (or one weighted pass, depending on the training mode).
    pub fn local_train(
        &mut self,
        pseudo_labels: &[PseudoLabel],
        epochs: usize,
        settings: TrainSettings,
        round: u64,
    ) -> Result<()> {
        if pseudo_labels.len() != self.data.unlabeled_features().len() {
            return Err(Error::Protocol(format!(
                "{} pseudo labels for {} unlabeled points",
                pseudo_labels.len(),
                self.data.unlabeled_features().len()
            )));
        }
        for epoch in 0..epochs {
            let seed = derive_seed(self.seed, &[TAG_TRAIN, round, epoch as u64]);
            match settings.mode {
                TrainingMode::TwoStep => {
                    self.supervised_pass(settings.batch_size, derive_seed(seed, &[0]))?;
                    self.unsupervised_pass(
                        pseudo_labels,
                        settings.batch_size,
                        derive_seed(seed, &[1]),
                    )?;
                }
                TrainingMode::WeightedSingleStep => {
                    self.weighted_pass(pseudo_labels, settings.batch_size, seed)?;
                }
            }
        }
        self.refresh_self_entry();
        Ok(())
    }

    /// Ratio-weighted combined loss `mu * sum CE + (1 - mu) * sum KL` under
    /// the deterministic forward pass. Diagnostic; not used for training.
    pub fn combined_loss(&self, pseudo_labels: &[PseudoLabel]) -> Result<f64> {
        let mu = self.data.labeled_ratio();
        let mut supervised = 0.0;
        for example in self.data.labeled() {
            let pred =
                crate::nn::forward(&self.params, &example.features, ForwardMode::Deterministic)?;
            supervised += crate::nn::cross_entropy(&pred, example.label)?;
        }
        let mut unsupervised = 0.0;
        for (x, label) in self.data.unlabeled_features().iter().zip(pseudo_labels) {
            let pred = crate::nn::forward(&self.params, x, ForwardMode::Deterministic)?;
            unsupervised += crate::nn::kl_divergence(&pred, &label.target)?;
        }
        Ok(mu * supervised + (1.0 - mu) * unsupervised)
    }

    /// Keeps the cached self entry in sync with the live model. Local and
    /// free: never charged to the ledger.
    pub fn refresh_self_entry(&mut self) {
        let params = self.params.clone();
        let own = self.id;
        if let Some(entry) = self.helpers.entry_mut(own) {
            entry.params = params;
        }
    }

    fn supervised_pass(&mut self, batch_size: usize, seed: u64) -> Result<()> {
        let n = self.data.labeled().len();
        if n == 0 {
            return Ok(());
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from_seed(derive_seed(seed, &[0]));
        shuffle(&mut rng, &mut order);
        for (batch_idx, chunk) in order.chunks(batch_size.max(1)).enumerate() {
            let batch: Vec<TrainExample> = chunk
                .iter()
                .map(|&i| {
                    let example = &self.data.labeled()[i];
                    TrainExample {
                        input: &example.features,
                        target: Target::Label(example.label),
                    }
                })
                .collect();
            let mode = ForwardMode::DropoutSample(derive_seed(seed, &[1, batch_idx as u64]));
            let grads = backward(&self.params, &batch, LossKind::CrossEntropy, mode)?;
            crate::nn::sgd_step(&mut self.params, &grads, &mut self.opt)?;
        }
        Ok(())
    }

    fn unsupervised_pass(
        &mut self,
        pseudo_labels: &[PseudoLabel],
        batch_size: usize,
        seed: u64,
    ) -> Result<()> {
        let n = self.data.unlabeled_features().len();
        if n == 0 {
            return Ok(());
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from_seed(derive_seed(seed, &[0]));
        shuffle(&mut rng, &mut order);
        for (batch_idx, chunk) in order.chunks(batch_size.max(1)).enumerate() {
            let batch: Vec<TrainExample> = chunk
                .iter()
                .map(|&i| TrainExample {
                    input: &self.data.unlabeled_features()[i],
                    target: Target::Soft(pseudo_labels[i].target.probs()),
                })
                .collect();
            let mode = ForwardMode::DropoutSample(derive_seed(seed, &[1, batch_idx as u64]));
            let grads = backward(&self.params, &batch, LossKind::KlDivergence, mode)?;
            crate::nn::sgd_step(&mut self.params, &grads, &mut self.opt)?;
        }
        Ok(())
    }

    /// One epoch of the combined objective: each step takes a labeled and an
    /// unlabeled minibatch (the shorter stream wraps around) and applies
    /// `mu * grad_CE + (1 - mu) * grad_KL` in a single update.
    fn weighted_pass(
        &mut self,
        pseudo_labels: &[PseudoLabel],
        batch_size: usize,
        seed: u64,
    ) -> Result<()> {
        let n_l = self.data.labeled().len();
        let n_u = self.data.unlabeled_features().len();
        if n_l == 0 && n_u == 0 {
            return Ok(());
        }
        let batch = batch_size.max(1);
        let mut rng = rng_from_seed(derive_seed(seed, &[0]));
        let mut labeled_order: Vec<usize> = (0..n_l).collect();
        shuffle(&mut rng, &mut labeled_order);
        let mut unlabeled_order: Vec<usize> = (0..n_u).collect();
        shuffle(&mut rng, &mut unlabeled_order);

        let steps = (n_l.div_ceil(batch)).max(n_u.div_ceil(batch)).max(1);
        let mu = self.data.labeled_ratio();
        for step in 0..steps {
            let mode = ForwardMode::DropoutSample(derive_seed(seed, &[1, step as u64]));
            let mut combined = vec![0.0; self.params.values().len()];
            if n_l > 0 {
                let batch_rows: Vec<TrainExample> = (0..batch)
                    .map(|j| {
                        let i = labeled_order[(step * batch + j) % n_l];
                        let example = &self.data.labeled()[i];
                        TrainExample {
                            input: &example.features,
                            target: Target::Label(example.label),
                        }
                    })
                    .collect();
                let grads = backward(
                    &self.params,
                    &batch_rows,
                    LossKind::CrossEntropy,
                    ForwardMode::DropoutSample(derive_seed(seed, &[2, step as u64])),
                )?;
                for (c, g) in combined.iter_mut().zip(grads) {
                    *c += mu * g;
                }
            }
            if n_u > 0 {
                let batch_rows: Vec<TrainExample> = (0..batch)
                    .map(|j| {
                        let i = unlabeled_order[(step * batch + j) % n_u];
                        TrainExample {
                            input: &self.data.unlabeled_features()[i],
                            target: Target::Soft(pseudo_labels[i].target.probs()),
                        }
                    })
                    .collect();
                let grads = backward(&self.params, &batch_rows, LossKind::KlDivergence, mode)?;
                for (c, g) in combined.iter_mut().zip(grads) {
                    *c += (1.0 - mu) * g;
                }
            }
            crate::nn::sgd_step(&mut self.params, &combined, &mut self.opt)?;
        }
        Ok(())
    }
}

/// Relation score with the entropy term taken over an explicit subset of
/// per-point predictions.
fn corr_over_subset(
    client: &ClientDataset,
    helper: &ModelParams,
    picked: &[&PredictiveDistribution],
) -> Result<CorrScore> {
    let entropy_term = if picked.is_empty() {
        0.0
    } else {
        let total: f64 = picked.iter().map(|p| p.entropy()).sum();
        crate::uncertainty::normalized_residue(total, picked.len(), client.class_count())
    };
    let accuracy_term = crate::uncertainty::helper_accuracy(helper, client.labeled())?;
    Ok(CorrScore::combine(
        client.labeled_ratio(),
        entropy_term,
        accuracy_term,
    ))
}

/// Relation score of an arbitrary model, evaluating only the subset points
/// when one is given. Per-point seeds use the original point indices, so
/// capped and uncapped evaluations of the same point agree bit-for-bit.
fn score_one_helper(
    client: &ClientDataset,
    params: &ModelParams,
    mc_samples: usize,
    helper_seed: u64,
    subset: Option<&[usize]>,
) -> Result<CorrScore> {
    let unlabeled = client.unlabeled_features();
    let indices: Vec<usize> = match subset {
        Some(picked) => picked.to_vec(),
        None => (0..unlabeled.len()).collect(),
    };
    let preds: Result<Vec<PredictiveDistribution>> = indices
        .iter()
        .map(|&i| {
            mc_predict(
                params,
                &unlabeled[i],
                mc_samples,
                derive_seed(helper_seed, &[i as u64]),
            )
        })
        .collect();
    let preds = preds?;
    let refs: Vec<&PredictiveDistribution> = preds.iter().collect();
    corr_over_subset(client, params, &refs)
}

impl ClientState {
    /// Relation score of a model that is not (yet) in the helper list, e.g.
    /// a search-phase candidate.
    pub fn score_external(
        &self,
        params: &ModelParams,
        mc_samples: usize,
        helper_seed: u64,
        cap: Option<usize>,
    ) -> Result<CorrScore> {
        let subset = self.eval_subset(cap);
        score_one_helper(
            &self.data,
            params,
            mc_samples,
            helper_seed,
            subset.as_deref(),
        )
    }
}

/// Stores the client's current model in the pool, bumps its version, and
/// charges one model-unit upload to the ledger.
pub fn upload(client: &ClientState, pool: &mut ServerPool, ledger: &mut CostLedger, round: u64) {
    pool.store(client.id, client.params.clone());
    ledger.record_upload(round);
}
