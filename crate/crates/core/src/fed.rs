//! Federated simulation: client construction, per-round sampling, local
//! training in four modes, FedAvg aggregation and training history.
//!
//! Seed discipline: the local epoch `e` of client `c` in round `r` uses
//! [`local_epoch_seed`]`(seed, r, c, e)`. [`train_centralized`] uses the same
//! seeds with `c = 0, e = 0`, so one client holding everything with one local
//! epoch per round reproduces centralized training exactly.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::Write;

use rand::seq::{index, IndexedRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{oversample_prefixes, segment, Conversation, Label, Segment, MAX_SEGMENT_LEN};
use crate::dp::{
    self, adaptive_clip_update, clip_vector, dp_fedavg_noise, dpsgd_epoch, metric_dp_perturb,
    noisy_unclipped_fraction, AccountantReport, DpFedAvgParams, DpSgdParams, MetricDpParams,
};
use crate::embed::{l2_norm, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::model::{sgd_epoch, LogisticModel, SgdParams, TrainingExample};
use crate::rng::{derive_seed, rng_from, tag};

/// Negative conversations pooled into a non-OG client besides its seed.
pub const NEGATIVE_POOL: usize = 10;
/// Warm-up segments given to every client, per label.
pub const WARMUP_PER_LABEL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    Plain,
    MetricDp,
    DpSgd,
    DpFedavg,
}

impl TrainingMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Plain => "plain",
            TrainingMode::MetricDp => "metric-dp",
            TrainingMode::DpSgd => "dp-sgd",
            TrainingMode::DpFedavg => "dp-fedavg",
        }
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "plain" => Ok(TrainingMode::Plain),
            "metric-dp" => Ok(TrainingMode::MetricDp),
            "dp-sgd" => Ok(TrainingMode::DpSgd),
            "dp-fedavg" => Ok(TrainingMode::DpFedavg),
            _ => Err(Error::invalid("mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricDpSettings {
    pub eta: f64,
}

impl Default for MetricDpSettings {
    fn default() -> Self {
        Self { eta: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSgdSettings {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
}

impl Default for DpSgdSettings {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            delta: dp::DEFAULT_DELTA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpFedAvgSettings {
    pub update_clip: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub adaptive: bool,
    pub target_quantile: f64,
    pub clip_lr: f64,
    pub indicator_noise_std: f64,
}

impl Default for DpFedAvgSettings {
    fn default() -> Self {
        let p = DpFedAvgParams::default();
        Self {
            update_clip: p.update_clip,
            noise_multiplier: p.noise_multiplier,
            delta: p.delta,
            adaptive: p.adaptive,
            target_quantile: p.target_quantile,
            clip_lr: p.clip_lr,
            indicator_noise_std: p.indicator_noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederatedConfig {
    pub total_clients: usize,
    pub rounds: usize,
    pub sample_fraction: f64,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub mode: TrainingMode,
    /// Enrich positive clients with conversation prefixes of this step.
    pub oversample_step: Option<usize>,
    pub metric_dp: MetricDpSettings,
    pub dp_sgd: DpSgdSettings,
    pub dp_fedavg: DpFedAvgSettings,
    /// Set programmatically from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            total_clients: 10_000,
            rounds: 100,
            sample_fraction: 0.1,
            local_epochs: 5,
            lr: 0.01,
            batch_size: 32,
            l2: 0.0,
            mode: TrainingMode::Plain,
            oversample_step: None,
            metric_dp: MetricDpSettings::default(),
            dp_sgd: DpSgdSettings::default(),
            dp_fedavg: DpFedAvgSettings::default(),
            seed: 0,
        }
    }
}

impl FederatedConfig {
    pub fn sgd(&self) -> SgdParams {
        SgdParams {
            lr: self.lr,
            batch_size: self.batch_size,
            l2: self.l2,
        }
    }

    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.total_clients, self.sample_fraction)
    }

    pub fn dp_fedavg_params(&self) -> DpFedAvgParams {
        let s = &self.dp_fedavg;
        DpFedAvgParams {
            update_clip: s.update_clip,
            noise_multiplier: s.noise_multiplier,
            clients_per_round: self.clients_per_round(),
            total_clients: self.total_clients,
            rounds: self.rounds,
            delta: s.delta,
            adaptive: s.adaptive,
            target_quantile: s.target_quantile,
            clip_lr: s.clip_lr,
            indicator_noise_std: s.indicator_noise_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(Error::invalid("federated.total_clients", "must be at least 1"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::invalid("federated.sample_fraction", "must be in (0, 1]"));
        }
        self.sgd().validate()?;
        if self.oversample_step == Some(0) {
            return Err(Error::invalid("federated.oversample_step", "must be at least 1"));
        }
        match self.mode {
            TrainingMode::Plain => {}
            TrainingMode::MetricDp => {
                MetricDpParams::new(self.metric_dp.eta, 1)?;
            }
            TrainingMode::DpSgd => {
                let s = &self.dp_sgd;
                DpSgdParams {
                    clip_norm: s.clip_norm,
                    noise_multiplier: s.noise_multiplier,
                    batch_size: 1,
                    dataset_size: 1,
                    delta: s.delta,
                }
                .validate()?;
            }
            TrainingMode::DpFedavg => self.dp_fedavg_params().validate()?,
        }
        Ok(())
    }
}

pub fn clients_per_round(total: usize, fraction: f64) -> usize {
    // guard against 0.1 * 10_000 landing a hair above an integer
    (((fraction * total as f64) - 1e-9).ceil() as usize).clamp(1, total.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientKind {
    /// Seeded from a positive conversation.
    Og,
    NonOg,
}

/// What the stored features are.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeaturePrivacy {
    Raw,
    /// Own examples were perturbed at construction; raw vectors were dropped.
    MetricDp { eta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    /// Own examples first, then the warm-up share.
    pub examples: Vec<TrainingExample>,
    pub n_own: usize,
    pub kind: ClientKind,
    pub features: FeaturePrivacy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Weights then bias.
    pub delta: Vec<f64>,
    pub n_examples: usize,
    /// `|delta|` as sent.
    pub update_norm: f64,
    /// Whether the raw update already fit inside the clip (DP-FedAvg).
    pub unclipped: bool,
    /// Locally trained model; withheld in DP-FedAvg mode, where the server
    /// only sees clipped deltas.
    pub local_model: Option<LogisticModel>,
    /// Global-model loss on this client's data before training.
    pub loss_before: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientBuildOptions {
    pub n_clients: usize,
    pub seed: u64,
    pub oversample_step: Option<usize>,
    pub metric_dp_eta: Option<f64>,
}

impl ClientBuildOptions {
    pub fn from_config(cfg: &FederatedConfig) -> Self {
        Self {
            n_clients: cfg.total_clients,
            seed: cfg.seed,
            oversample_step: cfg.oversample_step,
            metric_dp_eta: (cfg.mode == TrainingMode::MetricDp).then_some(cfg.metric_dp.eta),
        }
    }
}

fn own_segments(conv: &Conversation, oversample: Option<usize>) -> Result<Vec<Segment>> {
    match oversample {
        Some(step) if conv.label.is_positive() => oversample_prefixes(std::slice::from_ref(conv), step),
        _ => segment(conv, MAX_SEGMENT_LEN),
    }
}

fn embed_all(embedder: &Embedder, segs: &[Segment]) -> Result<Vec<TrainingExample>> {
    segs.iter()
        .map(|s| {
            Ok(TrainingExample {
                features: embedder.embed_segment(s)?,
                label: s.label,
            })
        })
        .collect()
}

/// Build `n_clients` clients. Each is seeded from a uniformly drawn training
/// conversation; a negative seed pools [`NEGATIVE_POOL`] further negative
/// conversations. Every client gets a random balanced warm-up share of
/// [`WARMUP_PER_LABEL`] segments per label.
pub fn build_clients(
    train: &[Conversation],
    warmup: &[Segment],
    embedder: &Embedder,
    opts: &ClientBuildOptions,
) -> Result<Vec<ClientState>> {
    if opts.n_clients == 0 {
        return Err(Error::invalid("n_clients", "must be at least 1"));
    }
    let warm_pos: Vec<&Segment> = warmup.iter().filter(|s| s.label.is_positive()).collect();
    let warm_neg: Vec<&Segment> = warmup.iter().filter(|s| !s.label.is_positive()).collect();
    if warm_pos.len() < WARMUP_PER_LABEL || warm_neg.len() < WARMUP_PER_LABEL {
        return Err(Error::Insufficient(format!(
            "warm-up needs at least {WARMUP_PER_LABEL} segments per label, got {} positive and {} negative",
            warm_pos.len(),
            warm_neg.len()
        )));
    }
    let negatives: Vec<usize> = (0..train.len()).filter(|&i| !train[i].label.is_positive()).collect();
    if train.is_empty() || negatives.len() < NEGATIVE_POOL + 1 {
        return Err(Error::Insufficient(format!(
            "client construction needs at least {} negative training conversations",
            NEGATIVE_POOL + 1
        )));
    }
    let metric = opts
        .metric_dp_eta
        .map(|eta| MetricDpParams::new(eta, embedder.dimension()))
        .transpose()?;

    // Draw every client's membership first so the embedding work can be
    // shared and parallelised.
    let plans: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = (0..opts.n_clients)
        .map(|cid| {
            let mut rng = rng_from(opts.seed, &[tag::CLIENT, cid as u64]);
            let seed_conv = rand::Rng::random_range(&mut rng, 0..train.len());
            let mut members = vec![seed_conv];
            if !train[seed_conv].label.is_positive() {
                let pool: Vec<usize> = negatives.iter().copied().filter(|&i| i != seed_conv).collect();
                members.extend(pool.choose_multiple(&mut rng, NEGATIVE_POOL).copied());
            }
            let wp = index::sample(&mut rng, warm_pos.len(), WARMUP_PER_LABEL).into_vec();
            let wn = index::sample(&mut rng, warm_neg.len(), WARMUP_PER_LABEL).into_vec();
            (members, wp, wn)
        })
        .collect();

    let mut used: Vec<usize> = plans.iter().flat_map(|p| p.0.iter().copied()).collect();
    used.sort_unstable();
    used.dedup();
    let own_cache: HashMap<usize, Vec<TrainingExample>> = used
        .par_iter()
        .map(|&i| Ok((i, embed_all(embedder, &own_segments(&train[i], opts.oversample_step)?)?)))
        .collect::<Result<_>>()?;
    let warm_pos_emb: Vec<EmbeddingVector> = warm_pos
        .par_iter()
        .map(|s| embedder.embed_segment(s))
        .collect::<Result<_>>()?;
    let warm_neg_emb: Vec<EmbeddingVector> = warm_neg
        .par_iter()
        .map(|s| embedder.embed_segment(s))
        .collect::<Result<_>>()?;

    plans
        .into_par_iter()
        .enumerate()
        .map(|(cid, (members, wp, wn))| {
            let kind = if train[members[0]].label.is_positive() {
                ClientKind::Og
            } else {
                ClientKind::NonOg
            };
            let mut examples: Vec<TrainingExample> = members.iter().flat_map(|i| own_cache[i].iter().cloned()).collect();
            let n_own = examples.len();
            let features = match &metric {
                Some(p) => {
                    let mut rng = rng_from(opts.seed, &[tag::PERTURB, cid as u64]);
                    for ex in &mut examples {
                        ex.features = metric_dp_perturb(&ex.features, p, &mut rng)?;
                    }
                    FeaturePrivacy::MetricDp { eta: p.eta }
                }
                None => FeaturePrivacy::Raw,
            };
            examples.extend(wp.iter().map(|&k| TrainingExample {
                features: warm_pos_emb[k].clone(),
                label: Label::Positive,
            }));
            examples.extend(wn.iter().map(|&k| TrainingExample {
                features: warm_neg_emb[k].clone(),
                label: Label::Negative,
            }));
            Ok(ClientState {
                client_id: cid,
                examples,
                n_own,
                kind,
                features,
            })
        })
        .collect()
}

/// Indices of the clients taking part in `round`, ascending.
pub fn sample_client_ids(n: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let k = clients_per_round(n, fraction);
    let mut ids = if k >= n {
        (0..n).collect()
    } else {
        index::sample(&mut rng_from(seed, &[tag::SAMPLE, round as u64]), n, k).into_vec()
    };
    ids.sort_unstable();
    ids
}

/// Uniform sample without replacement of `ceil(fraction * N)` clients.
pub fn sample_clients(all: &[ClientState], fraction: f64, round: usize, seed: u64) -> Vec<&ClientState> {
    sample_client_ids(all.len(), fraction, round, seed)
        .into_iter()
        .map(|i| &all[i])
        .collect()
}

pub fn local_epoch_seed(seed: u64, round: usize, client_id: usize, epoch: usize) -> u64 {
    derive_seed(seed, &[tag::LOCAL, round as u64, client_id as u64, epoch as u64])
}

/// DP-SGD parameters for a client holding `n` examples.
pub fn client_dpsgd_params(cfg: &FederatedConfig, n: usize) -> DpSgdParams {
    DpSgdParams {
        clip_norm: cfg.dp_sgd.clip_norm,
        noise_multiplier: cfg.dp_sgd.noise_multiplier,
        batch_size: cfg.batch_size.min(n).max(1),
        dataset_size: n,
        delta: cfg.dp_sgd.delta,
    }
}

/// Train a copy of the global model on one client. `clip` is the current
/// DP-FedAvg update clip (ignored in other modes).
pub fn local_train(
    client: &ClientState,
    global: &LogisticModel,
    cfg: &FederatedConfig,
    round: usize,
    clip: f64,
) -> Result<ClientUpdate> {
    if let Some(ex) = client.examples.iter().find(|e| e.features.dim() != global.dim()) {
        return Err(Error::DimensionMismatch {
            expected: global.dim(),
            actual: ex.features.dim(),
        });
    }
    let loss_before = global.bce_loss(&client.examples)?;
    let mut m = global.clone();
    let sgd = cfg.sgd();
    for epoch in 0..cfg.local_epochs {
        let seed = local_epoch_seed(cfg.seed, round, client.client_id, epoch);
        m = match cfg.mode {
            TrainingMode::DpSgd => {
                let p = client_dpsgd_params(cfg, client.examples.len());
                dpsgd_epoch(&m, &client.examples, &p, cfg.lr, seed)?.0
            }
            _ => sgd_epoch(&m, &client.examples, &sgd, seed)?,
        };
    }
    let raw: Vec<f64> = m.to_flat().iter().zip(global.to_flat()).map(|(a, b)| a - b).collect();
    let raw_norm = l2_norm(&raw);
    let (delta, local_model, unclipped) = if cfg.mode == TrainingMode::DpFedavg {
        (clip_vector(&raw, clip)?, None, raw_norm <= clip)
    } else {
        (raw, Some(m), true)
    };
    Ok(ClientUpdate {
        client_id: client.client_id,
        update_norm: l2_norm(&delta),
        delta,
        n_examples: client.examples.len(),
        unclipped,
        local_model,
        loss_before,
    })
}

pub enum Aggregation<'a> {
    /// Example-count-weighted average.
    Weighted,
    /// Unweighted average, then server noise.
    DpFlat(&'a DpFedAvgParams),
}

fn sorted(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.client_id);
    v
}

fn check_updates(updates: &[ClientUpdate]) -> Result<usize> {
    let first = updates.first().ok_or(Error::Empty("update list"))?;
    let dim = first.delta.len();
    if let Some(u) = updates.iter().find(|u| u.delta.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: u.delta.len(),
        });
    }
    Ok(dim)
}

/// Weighted sum `sum_i w_i x_i` in ascending client order, starting from the
/// first term.
fn weighted_sum<'a>(items: impl Iterator<Item = (f64, &'a [f64])>) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    for (w, x) in items {
        match acc.as_mut() {
            None => acc = Some(x.iter().map(|v| w * v).collect()),
            Some(a) => a.iter_mut().zip(x).for_each(|(s, v)| *s += w * v),
        }
    }
    acc.unwrap_or_default()
}

/// Aggregate client deltas into one server delta.
pub fn fedavg_aggregate<R: rand::Rng + ?Sized>(
    updates: &[ClientUpdate],
    how: Aggregation<'_>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_updates(updates)?;
    let ups = sorted(updates);
    match how {
        Aggregation::Weighted => {
            let total: usize = ups.iter().map(|u| u.n_examples).sum();
            if total == 0 {
                return Err(Error::Undefined("weighted average of updates with no examples"));
            }
            Ok(weighted_sum(ups.iter().map(|u| (u.n_examples as f64 / total as f64, u.delta.as_slice()))))
        }
        Aggregation::DpFlat(params) => {
            let w = 1.0 / ups.len() as f64;
            let mean = weighted_sum(ups.iter().map(|u| (w, u.delta.as_slice())));
            dp_fedavg_noise(&mean, params, rng)
        }
    }
}

/// Example-weighted average of the locally trained models. Equal to
/// `global + weighted mean delta` in exact arithmetic.
pub fn average_models(updates: &[ClientUpdate]) -> Result<LogisticModel> {
    check_updates(updates)?;
    let ups = sorted(updates);
    let total: usize = ups.iter().map(|u| u.n_examples).sum();
    let flats = ups
        .iter()
        .map(|u| {
            u.local_model
                .as_ref()
                .map(LogisticModel::to_flat)
                .ok_or_else(|| Error::invalid("update", "local model withheld"))
        })
        .collect::<Result<Vec<_>>>()?;
    let avg = weighted_sum(
        ups.iter()
            .zip(&flats)
            .map(|(u, f)| (u.n_examples as f64 / total as f64, f.as_slice())),
    );
    LogisticModel::from_flat(&avg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub model_hash: String,
    pub mean_client_loss: f64,
    pub sampled_clients: Vec<usize>,
    pub aggregate_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub update_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub privacy: Option<AccountantReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub rounds: Vec<RoundRecord>,
    pub notes: Vec<String>,
}

impl TrainingHistory {
    /// One JSON object per round.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.rounds {
            let line = serde_json::to_string(r).map_err(|source| Error::Json {
                context: "history".into(),
                source,
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io("history", e))?;
        }
        Ok(())
    }

    pub fn final_privacy(&self) -> Option<&AccountantReport> {
        self.rounds.last().and_then(|r| r.privacy.as_ref())
    }
}

/// Privacy bookkeeping across rounds.
struct Accountant {
    participations: Vec<u64>,
    dpsgd_cache: HashMap<usize, AccountantReport>,
    worst_dpsgd: Option<AccountantReport>,
}

impl Accountant {
    fn new(n: usize) -> Self {
        Self {
            participations: vec![0; n],
            dpsgd_cache: HashMap::new(),
            worst_dpsgd: None,
        }
    }

    fn record(&mut self, cfg: &FederatedConfig, clients: &[ClientState], ids: &[usize], round: usize) -> Result<Option<AccountantReport>> {
        for &i in ids {
            self.participations[i] += 1;
        }
        match cfg.mode {
            TrainingMode::Plain | TrainingMode::MetricDp => Ok(None),
            TrainingMode::DpSgd => {
                if cfg.dp_sgd.noise_multiplier == 0.0 || cfg.local_epochs == 0 {
                    return Ok(None);
                }
                for &i in ids {
                    let n = clients[i].examples.len();
                    let rep = match self.dpsgd_cache.entry(n) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => e.insert(client_dpsgd_params(cfg, n).account(cfg.local_epochs as u64)?),
                    };
                    if self.worst_dpsgd.as_ref().is_none_or(|w| rep.epsilon > w.epsilon) {
                        self.worst_dpsgd = Some(rep.clone());
                    }
                }
                let max_p = self.participations.iter().copied().max().unwrap_or(0);
                Ok(self.worst_dpsgd.clone().map(|mut r| {
                    r.epsilon_all_participations = Some(r.epsilon * max_p as f64);
                    r.max_participations = Some(max_p);
                    r
                }))
            }
            TrainingMode::DpFedavg => {
                if cfg.dp_fedavg.noise_multiplier == 0.0 {
                    return Ok(None);
                }
                let p = DpFedAvgParams {
                    rounds: round + 1,
                    ..cfg.dp_fedavg_params()
                };
                p.account().map(Some)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: LogisticModel,
    pub history: TrainingHistory,
}

/// Run the federated rounds over prepared clients.
pub fn train_federated(clients: &[ClientState], init: LogisticModel, cfg: &FederatedConfig) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let mut history = TrainingHistory::default();
    if let Some(c) = clients.iter().find(|c| c.features != FeaturePrivacy::Raw) {
        if let FeaturePrivacy::MetricDp { eta } = c.features {
            history.notes.push(format!(
                "metric-dp eta={eta}: client features perturbed at construction; raw embeddings were not retained"
            ));
        }
    }
    let mut global = init;
    let mut clip = cfg.dp_fedavg.update_clip;
    let mut accountant = Accountant::new(clients.len());
    for round in 0..cfg.rounds {
        let ids = sample_client_ids(clients.len(), cfg.sample_fraction, round, cfg.seed);
        let updates: Vec<ClientUpdate> = ids
            .par_iter()
            .map(|&i| local_train(&clients[i], &global, cfg, round, clip))
            .collect::<Result<_>>()?;
        let mean_loss = updates.iter().map(|u| u.loss_before).sum::<f64>() / updates.len() as f64;
        let round_clip = clip;
        let before = global.to_flat();
        match cfg.mode {
            TrainingMode::DpFedavg => {
                let params = DpFedAvgParams {
                    update_clip: clip,
                    clients_per_round: updates.len(),
                    ..cfg.dp_fedavg_params()
                };
                let mut rng = rng_from(cfg.seed, &[tag::SERVER, round as u64]);
                let agg = fedavg_aggregate(&updates, Aggregation::DpFlat(&params), &mut rng)?;
                global.add_flat(&agg)?;
                if cfg.dp_fedavg.adaptive {
                    let unclipped = updates.iter().filter(|u| u.unclipped).count();
                    let b = noisy_unclipped_fraction(unclipped, updates.len(), cfg.dp_fedavg.indicator_noise_std, &mut rng)?;
                    clip = adaptive_clip_update(clip, b, cfg.dp_fedavg.target_quantile, cfg.dp_fedavg.clip_lr);
                }
            }
            _ => global = average_models(&updates)?,
        }
        let step: Vec<f64> = global.to_flat().iter().zip(&before).map(|(a, b)| a - b).collect();
        let privacy = accountant.record(cfg, clients, &ids, round)?;
        history.rounds.push(RoundRecord {
            round,
            model_hash: global.fingerprint(),
            mean_client_loss: mean_loss,
            sampled_clients: ids,
            aggregate_norm: l2_norm(&step),
            update_clip: (cfg.mode == TrainingMode::DpFedavg).then_some(round_clip),
            privacy,
        });
    }
    Ok(TrainingOutcome { model: global, history })
}

/// Build clients from the split and train.
pub fn run_training(
    train: &[Conversation],
    warmup: &[Segment],
    embedder: &Embedder,
    cfg: &FederatedConfig,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let clients = build_clients(train, warmup, embedder, &ClientBuildOptions::from_config(cfg))?;
    train_federated(&clients, LogisticModel::zeros(embedder.dimension()), cfg)
}

/// Plain SGD over pooled data for `epochs` epochs with the federated seed
/// schedule of a single client 0.
pub fn train_centralized(
    examples: &[TrainingExample],
    init: LogisticModel,
    sgd: &SgdParams,
    epochs: usize,
    seed: u64,
) -> Result<LogisticModel> {
    let mut m = init;
    for epoch in 0..epochs {
        m = sgd_epoch(&m, examples, sgd, local_epoch_seed(seed, epoch, 0, 0))?;
    }
    Ok(m)
}

pub fn embed_segments(embedder: &Embedder, segs: &[Segment]) -> Result<Vec<TrainingExample>> {
    segs.par_iter()
        .map(|s| {
            Ok(TrainingExample {
                features: embedder.embed_segment(s)?,
                label: s.label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::segment_all;
    use crate::embed::EmbedderSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(id: &str, label: Label, n: usize) -> Conversation {
        let sig = if label.is_positive() { " <risk>" } else { "" };
        Conversation::new(id, label, (0..n).map(|i| ("a".to_string(), format!("{id}-{i}{sig}")))).unwrap()
    }

    fn embedder() -> Embedder {
        Embedder::from_spec(&EmbedderSpec::Synthetic {
            dimension: 8,
            separation: 6.0,
            noise_scale: 1.0,
            seed: 1,
        })
        .unwrap()
    }

    fn warmup() -> Vec<Segment> {
        let convs: Vec<Conversation> = (0..12)
            .map(|i| conv(&format!("wp{i}"), Label::Positive, 20))
            .chain((0..12).map(|i| conv(&format!("wn{i}"), Label::Negative, 20)))
            .collect();
        segment_all(&convs, MAX_SEGMENT_LEN).unwrap()
    }

    fn opts(n: usize) -> ClientBuildOptions {
        ClientBuildOptions {
            n_clients: n,
            seed: 4,
            oversample_step: None,
            metric_dp_eta: None,
        }
    }

    fn update(id: usize, delta: Vec<f64>, n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            update_norm: l2_norm(&delta),
            delta,
            n_examples: n,
            unclipped: true,
            local_model: None,
            loss_before: 0.0,
        }
    }

    #[test]
    fn og_client_counts() {
        // one 4-segment positive conversation and plenty of negatives
        let mut train = vec![conv("p", Label::Positive, 4 * 150)];
        train.extend((0..30).map(|i| conv(&format!("n{i}"), Label::Negative, 10)));
        let clients = build_clients(&train, &warmup(), &embedder(), &opts(300)).unwrap();
        let og = clients.iter().find(|c| c.kind == ClientKind::Og).expect("some OG client");
        assert_eq!(og.n_own, 4);
        assert_eq!(og.examples.len(), 24);
        let non = clients.iter().find(|c| c.kind == ClientKind::NonOg).unwrap();
        assert_eq!(non.n_own, 11);
        assert_eq!(non.examples.len(), 31);
        for c in &clients {
            let pos = c.examples.iter().filter(|e| e.label.is_positive()).count();
            assert!(pos >= WARMUP_PER_LABEL && c.examples.len() - pos >= WARMUP_PER_LABEL);
        }
        assert_eq!(clients, build_clients(&train, &warmup(), &embedder(), &opts(300)).unwrap());
    }

    #[test]
    fn build_rejects_thin_inputs() {
        let train: Vec<_> = (0..30).map(|i| conv(&format!("n{i}"), Label::Negative, 10)).collect();
        let thin = warmup().into_iter().filter(|s| !s.label.is_positive()).collect::<Vec<_>>();
        assert!(matches!(build_clients(&train, &thin, &embedder(), &opts(5)), Err(Error::Insufficient(_))));
        let few: Vec<_> = train[..5].to_vec();
        assert!(build_clients(&few, &warmup(), &embedder(), &opts(5)).is_err());
    }

    #[test]
    fn metric_dp_clients_hold_perturbed_own_features() {
        let mut train = vec![conv("p", Label::Positive, 40)];
        train.extend((0..20).map(|i| conv(&format!("n{i}"), Label::Negative, 10)));
        let raw = build_clients(&train, &warmup(), &embedder(), &opts(4)).unwrap();
        let private = build_clients(&train, &warmup(), &embedder(), &ClientBuildOptions { metric_dp_eta: Some(5.0), ..opts(4) }).unwrap();
        for (r, p) in raw.iter().zip(&private) {
            assert_eq!(p.features, FeaturePrivacy::MetricDp { eta: 5.0 });
            assert!(r.examples[..r.n_own].iter().zip(&p.examples[..p.n_own]).all(|(a, b)| a.features != b.features));
            assert_eq!(r.examples[r.n_own..], p.examples[p.n_own..]);
        }
    }

    #[test]
    fn sampling() {
        assert_eq!(sample_client_ids(10, 1.0, 3, 1), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_client_ids(10_000, 0.1, 0, 1).len(), 1000);
        assert_eq!(sample_client_ids(100, 0.25, 7, 9), sample_client_ids(100, 0.25, 7, 9));
        assert_ne!(sample_client_ids(100, 0.25, 7, 9), sample_client_ids(100, 0.25, 8, 9));
        assert_eq!(clients_per_round(7, 0.5), 4);
    }

    #[test]
    fn aggregation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let z = fedavg_aggregate(&[update(0, d.clone(), 5), update(1, neg, 5)], Aggregation::Weighted, &mut rng).unwrap();
        assert!(z.iter().all(|x| *x == 0.0));

        let (d1, d2) = (vec![4.0, 0.0], vec![0.0, 8.0]);
        let agg = fedavg_aggregate(&[update(1, d1.clone(), 1), update(0, d2.clone(), 3)], Aggregation::Weighted, &mut rng).unwrap();
        assert_eq!(agg, vec![1.0, 6.0]);

        let p = DpFedAvgParams { noise_multiplier: 0.0, clients_per_round: 2, total_clients: 2, ..Default::default() };
        let flat = fedavg_aggregate(&[update(1, d1, 1), update(0, d2, 3)], Aggregation::DpFlat(&p), &mut rng).unwrap();
        assert_eq!(flat, vec![2.0, 4.0]);
        assert!(fedavg_aggregate(&[], Aggregation::Weighted, &mut rng).is_err());
    }

    #[test]
    fn aggregation_is_order_independent() {
        let ups: Vec<ClientUpdate> = (0..7).map(|i| update(i, vec![0.1 * i as f64, 1.0 / (i + 1) as f64, 3.3], i + 2)).collect();
        let mut rev = ups.clone();
        rev.reverse();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = fedavg_aggregate(&ups, Aggregation::Weighted, &mut rng).unwrap();
        let b = fedavg_aggregate(&rev, Aggregation::Weighted, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    fn simple_client(id: usize, n: usize) -> ClientState {
        let examples = (0..n)
            .map(|i| TrainingExample {
                features: EmbeddingVector::new(vec![i as f64 * 0.3 - 1.0, 1.0, (i % 3) as f64]).unwrap(),
                label: if i % 2 == 0 { Label::Positive } else { Label::Negative },
            })
            .collect();
        ClientState { client_id: id, examples, n_own: n, kind: ClientKind::Og, features: FeaturePrivacy::Raw }
    }

    #[test]
    fn local_train_modes() {
        let c = simple_client(0, 12);
        let g = LogisticModel::zeros(3);
        let cfg = FederatedConfig { local_epochs: 0, ..Default::default() };
        assert!(local_train(&c, &g, &cfg, 0, 1.0).unwrap().delta.iter().all(|x| *x == 0.0));

        let cfg = FederatedConfig { local_epochs: 20, lr: 1.0, mode: TrainingMode::DpFedavg, ..Default::default() };
        let u = local_train(&c, &g, &cfg, 0, 0.05).unwrap();
        assert!(u.update_norm <= 0.05 + 1e-12);
        assert!(u.local_model.is_none());
        assert!(!u.unclipped);
    }

    #[test]
    fn single_client_equals_centralized() {
        let c = simple_client(0, 40);
        let cfg = FederatedConfig {
            total_clients: 1,
            rounds: 6,
            sample_fraction: 1.0,
            local_epochs: 1,
            lr: 0.3,
            batch_size: 7,
            seed: 21,
            ..Default::default()
        };
        let fed = train_federated(std::slice::from_ref(&c), LogisticModel::zeros(3), &cfg).unwrap();
        let central = train_centralized(&c.examples, LogisticModel::zeros(3), &cfg.sgd(), 6, 21).unwrap();
        assert_eq!(fed.model.to_checkpoint(), central.to_checkpoint());
        assert_eq!(fed.history.rounds.len(), 6);
    }

    #[test]
    fn zero_rounds_returns_init() {
        let c = simple_client(0, 5);
        let init = LogisticModel { weights: vec![0.5, 0.25, -1.0], bias: 2.0 };
        let cfg = FederatedConfig { rounds: 0, total_clients: 1, ..Default::default() };
        let out = train_federated(&[c], init.clone(), &cfg).unwrap();
        assert_eq!(out.model, init);
        assert!(out.history.rounds.is_empty());
    }

    #[test]
    fn dp_fedavg_history_tracks_budget_and_clip() {
        let clients: Vec<ClientState> = (0..10).map(|i| simple_client(i, 10 + i)).collect();
        let cfg = FederatedConfig {
            total_clients: 10,
            rounds: 4,
            sample_fraction: 0.5,
            local_epochs: 2,
            lr: 0.5,
            mode: TrainingMode::DpFedavg,
            dp_fedavg: DpFedAvgSettings { update_clip: 0.1, noise_multiplier: 1.0, adaptive: true, indicator_noise_std: 1.0, ..Default::default() },
            seed: 3,
            ..Default::default()
        };
        let out = train_federated(&clients, LogisticModel::zeros(3), &cfg).unwrap();
        let eps: Vec<f64> = out.history.rounds.iter().map(|r| r.privacy.as_ref().unwrap().epsilon).collect();
        assert!(eps.windows(2).all(|w| w[1] > w[0]));
        let clips: Vec<f64> = out.history.rounds.iter().map(|r| r.update_clip.unwrap()).collect();
        assert_eq!(clips[0], 0.1);
        assert!(clips.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn dp_sgd_history_reports_linear_composition() {
        let clients: Vec<ClientState> = (0..4).map(|i| simple_client(i, 16)).collect();
        let cfg = FederatedConfig {
            total_clients: 4,
            rounds: 3,
            sample_fraction: 1.0,
            local_epochs: 1,
            batch_size: 4,
            mode: TrainingMode::DpSgd,
            seed: 1,
            ..Default::default()
        };
        let out = train_federated(&clients, LogisticModel::zeros(3), &cfg).unwrap();
        let last = out.history.final_privacy().unwrap();
        assert_eq!(last.max_participations, Some(3));
        assert!((last.epsilon_all_participations.unwrap() - 3.0 * last.epsilon).abs() < 1e-12);
        assert!((last.q - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("dp-fedavg".parse::<TrainingMode>().unwrap(), TrainingMode::DpFedavg);
        assert_eq!("metric_dp".parse::<TrainingMode>().unwrap(), TrainingMode::MetricDp);
        assert!("bogus".parse::<TrainingMode>().is_err());
    }
}
