//! Federated orchestration.
//!
//! A run builds a synthetic teacher task, partitions it across clients,
//! initializes the global adapters, and then repeats: parallel local training,
//! upload, aggregation, download. Every message is serialized with
//! [`crate::adapters::wire`] and metered into a [`CommLedger`], which is
//! reconciled against the closed-form prediction before the run returns.

mod client;
mod partition;

pub use client::{local_train, ClientState, LocalOptions, LocalPrivacy, LocalResult, Shard};
pub use partition::{partition, PartitionMode, PartitionSpec};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::wire::{self, BlockKind, Message, Parts, WireError};
use crate::adapters::{effective_updates, init_lora, init_sb, Adapter, AdapterError, Method, RInit, DEFAULT_ALPHA};
use crate::aggregation::{aggregate, divergence, AggregateResult, AggregationError, ClientUpdate};
use crate::commcost::{per_client_costs, ArchCatalog, CommError, CommLedger, CostBreakdown};
use crate::linalg::{LinalgError, Matrix};
use crate::model::{forward_loss, make_teacher_task, ArchShape, Batch, LossKind, ModelError, ModelKind, TeacherSpec};
use crate::privacy::{calibrate_sigma, PrivacyError, RdpAccountant};
use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("communication ledger: {0}")]
    Comm(#[from] CommError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Student model and synthetic teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub model: ModelKind,
    pub input_dim: usize,
    /// Hidden width; required for the MLP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    pub output_dim: usize,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub teacher: TeacherSpec,
}

fn default_loss() -> LossKind {
    LossKind::Squared
}

impl TaskConfig {
    pub fn shape(&self) -> Result<ArchShape, FedError> {
        Ok(match self.model {
            ModelKind::Linear => ArchShape::linear(self.input_dim, self.output_dim, self.loss)?,
            ModelKind::Mlp => {
                let hidden = self
                    .hidden_dim
                    .ok_or_else(|| FedError::Config("the mlp model needs `hidden_dim`".into()))?;
                ArchShape::mlp(self.input_dim, hidden, self.output_dim, self.loss)?
            }
        })
    }
}

/// DP-SGD settings. Exactly one of `sigma` and `epsilon` must be set; a
/// target `epsilon` is turned into the smallest sufficient `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub clip_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    1e-5
}

/// Where the Fed-SB frames are estimated from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitSource {
    /// A batch held by the server, drawn from the task distribution.
    #[default]
    Server,
    /// A fraction of every client's shard.
    Clients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub source: InitSource,
    pub server_samples: usize,
    /// Fraction of each shard used when `source = "clients"` (at least one row).
    pub client_fraction: f64,
    pub r_init: RInit,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            source: InitSource::Server,
            server_samples: 256,
            client_fraction: 0.001,
            r_init: RInit::Zero,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Plain `1/c` average.
    #[default]
    Uniform,
    /// Clients weighted by shard size.
    DatasetSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub seed: u64,
    pub method: Method,
    pub rank: usize,
    /// Per-client ranks for rank-heterogeneous Fed-SB; each at most `rank`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_ranks: Option<Vec<usize>>,
    pub clients: usize,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub partition: PartitionMode,
    #[serde(default)]
    pub weighting: Weighting,
    pub task: TaskConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacyConfig>,
    #[serde(default)]
    pub init: InitConfig,
}

fn one() -> usize {
    1
}

fn default_batch() -> usize {
    32
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl FederationConfig {
    /// A small linear-task configuration with every other field at its default.
    pub fn linear(method: Method, input_dim: usize, output_dim: usize, rank: usize, clients: usize, rounds: usize) -> Self {
        Self {
            seed: 0,
            method,
            rank,
            client_ranks: None,
            clients,
            rounds,
            local_epochs: 1,
            batch_size: default_batch(),
            lr: 0.05,
            alpha: DEFAULT_ALPHA,
            partition: PartitionMode::Iid,
            weighting: Weighting::Uniform,
            task: TaskConfig {
                model: ModelKind::Linear,
                input_dim,
                hidden_dim: None,
                output_dim,
                loss: LossKind::Squared,
                teacher: TeacherSpec::default(),
            },
            privacy: None,
            init: InitConfig::default(),
        }
    }

    /// Rank of every client, in client order.
    pub fn ranks(&self) -> Vec<usize> {
        self.client_ranks.clone().unwrap_or_else(|| vec![self.rank; self.clients])
    }

    pub fn validate(&self) -> Result<ArchShape, FedError> {
        let bad = |m: String| Err(FedError::Config(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return bad("local_epochs and batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        let shape = self.task.shape()?;
        let max_rank = shape.sites().iter().map(|s| s.m.min(s.n)).min().unwrap_or(0);
        if self.rank == 0 || self.rank > max_rank {
            return bad(format!("rank must lie in 1..={max_rank}, got {}", self.rank));
        }
        if let Some(ranks) = &self.client_ranks {
            if self.method != Method::FedSb {
                return bad("client_ranks is only supported by fed-sb".into());
            }
            if ranks.len() != self.clients {
                return bad(format!("{} client ranks for {} clients", ranks.len(), self.clients));
            }
            if let Some(r) = ranks.iter().find(|&&r| r == 0 || r > self.rank) {
                return bad(format!("client rank {r} outside 1..={}", self.rank));
            }
        }
        if self.task.teacher.samples < self.clients {
            return bad(format!(
                "{} samples cannot be split across {} clients",
                self.task.teacher.samples, self.clients
            ));
        }
        if self.partition == PartitionMode::PerSource && self.task.teacher.sources < self.clients {
            return bad("per-source partitioning needs at least one source per client".into());
        }
        if self.init.source == InitSource::Server && self.init.server_samples == 0 {
            return bad("server_samples must be at least 1".into());
        }
        if !(self.init.client_fraction > 0.0 && self.init.client_fraction <= 1.0) {
            return bad("client_fraction must lie in (0, 1]".into());
        }
        if let Some(p) = &self.privacy {
            if p.clip_norm.is_nan() || p.clip_norm <= 0.0 {
                return bad("clip_norm must be positive".into());
            }
            if !(p.delta > 0.0 && p.delta < 1.0) {
                return bad("delta must lie in (0, 1)".into());
            }
            match (p.sigma, p.epsilon) {
                (Some(_), Some(_)) => return bad("set either sigma or epsilon, not both".into()),
                (None, None) => return bad("privacy needs sigma or epsilon".into()),
                (Some(s), None) if !(s >= 0.0 && s.is_finite()) => return bad("sigma must be finite and >= 0".into()),
                (Some(s), None) if s > 0.0 && p.clip_norm.is_infinite() => {
                    return bad("noise needs a finite clip_norm".into())
                }
                (None, Some(e)) if !(e > 0.0 && e.is_finite()) => return bad("epsilon must be positive".into()),
                (None, Some(_)) if p.clip_norm.is_infinite() => return bad("noise needs a finite clip_norm".into()),
                _ => {}
            }
        }
        Ok(shape)
    }
}

/// Metrics of one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    /// Loss of every client on its own shard after local training.
    pub client_losses: Vec<f64>,
    /// Loss of the aggregated model on the whole training set.
    pub global_loss: f64,
    pub divergence: f64,
    /// Parameters uploaded by all clients.
    pub upload: u64,
    /// Parameters downloaded by all clients.
    pub download: u64,
    /// Worst-case client `ε` after this round.
    pub epsilon: Option<f64>,
}

#[derive(Debug)]
pub struct FederationOutcome {
    pub reports: Vec<RoundReport>,
    pub init_loss: f64,
    /// Global adapter state after the last round.
    pub global_adapters: Vec<Adapter>,
    pub initial_base: Vec<Matrix>,
    /// Base weights after any folded updates.
    pub base: Vec<Matrix>,
    /// `(base − initial_base) + effective(global_adapters)` per site.
    pub total_update: Vec<Matrix>,
    pub teacher_delta: Vec<Matrix>,
    pub ledger: CommLedger,
    pub predicted: Vec<CostBreakdown>,
    /// Noise multiplier actually used, when private.
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    /// One accountant per client.
    pub accountants: Vec<RdpAccountant>,
    pub shard_sizes: Vec<usize>,
    pub shard_reads: Vec<usize>,
}

impl FederationOutcome {
    pub fn final_loss(&self) -> f64 {
        self.reports.last().map_or(self.init_loss, |r| r.global_loss)
    }

    pub fn max_divergence(&self) -> f64 {
        self.reports.iter().map(|r| r.divergence).fold(0.0, f64::max)
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.reports.last().and_then(|r| r.epsilon)
    }

    /// Accountant of the client with the largest `ε`.
    pub fn worst_accountant(&self) -> Option<&RdpAccountant> {
        let delta = self.delta?;
        self.accountants
            .iter()
            .max_by(|a, b| {
                let ea = a.epsilon(delta).unwrap_or(0.0);
                let eb = b.epsilon(delta).unwrap_or(0.0);
                ea.total_cmp(&eb)
            })
    }
}

fn init_batch(cfg: &FederationConfig, task_draw: impl Fn(usize, u64) -> Result<Batch, FedError>, shards: &[Batch]) -> Result<Batch, FedError> {
    match cfg.init.source {
        InitSource::Server => task_draw(cfg.init.server_samples, derive_seed(cfg.seed, "init-batch", 0)),
        InitSource::Clients => {
            let parts: Vec<Batch> = shards
                .iter()
                .map(|s| {
                    let take = ((s.len() as f64 * cfg.init.client_fraction).ceil() as usize).clamp(1, s.len());
                    s.select(&(0..take).collect::<Vec<_>>())
                })
                .collect();
            Ok(Batch::concat(&parts.iter().collect::<Vec<_>>())?)
        }
    }
}

fn initial_adapters(
    cfg: &FederationConfig,
    shape: &ArchShape,
    base: &[Matrix],
    batch: impl FnOnce() -> Result<Batch, FedError>,
) -> Result<Vec<Adapter>, FedError> {
    let sites = shape.sites();
    match cfg.method {
        Method::FedSb => {
            let batch = batch()?;
            let ranks = vec![cfg.rank; sites.len()];
            let triples = init_sb(shape, base, &batch, cfg.lr, &ranks, cfg.init.r_init)?;
            Ok(triples.into_iter().map(Adapter::Sb).collect())
        }
        method => sites
            .iter()
            .enumerate()
            .map(|(k, site)| {
                let pair = init_lora(site, cfg.rank, cfg.alpha, derive_seed(cfg.seed, "lora-init", k as u64))?;
                Ok(if method == Method::FfaLora {
                    Adapter::FrozenA(pair)
                } else {
                    Adapter::Lora(pair)
                })
            })
            .collect(),
    }
}

fn adapters_for_rank(global: &[Adapter], rank: usize) -> Result<Vec<Adapter>, FedError> {
    global
        .iter()
        .map(|a| match a {
            Adapter::Sb(t) if t.rank() != rank => Ok(Adapter::Sb(t.with_rank(rank)?)),
            other => Ok(other.clone()),
        })
        .collect()
}

/// What one client receives after aggregation.
fn download_message(
    method: Method,
    agg: &AggregateResult,
    updates: &[ClientUpdate],
    next: &[Adapter],
) -> Result<Message, FedError> {
    let c = updates.len();
    match method {
        Method::FedIt | Method::FfaLora | Method::FedSb => Ok(Message::from_adapters(method, next, Parts::Trainable)),
        Method::FLora | Method::FedExLora => {
            let mut msg = Message::new(method);
            for (site, global) in agg.global_update.iter().enumerate() {
                let (m, n) = global.shape();
                let r = updates[0].adapters[site].rank();
                let stacked = c * (m + n) * r;
                let dense = if method == Method::FLora { m * n } else { m * n + (m + n) * r };
                if stacked <= dense {
                    let (big_b, big_a) = match (method, &agg.stacked) {
                        (Method::FLora, Some(s)) => s[site].clone(),
                        _ => {
                            let pairs: Vec<_> = updates
                                .iter()
                                .map(|u| match &u.adapters[site] {
                                    Adapter::Lora(p) => Ok(p),
                                    _ => Err(AggregationError::WrongAdapter {
                                        client: u.client,
                                        site,
                                    }),
                                })
                                .collect::<Result<_, _>>()?;
                            let bs: Vec<&Matrix> = pairs.iter().map(|p| &p.b).collect();
                            let as_: Vec<&Matrix> = pairs.iter().map(|p| &p.a).collect();
                            (Matrix::hstack(&bs)?, Matrix::vstack(&as_)?)
                        }
                    };
                    msg.push(BlockKind::StackedB, site, big_b);
                    msg.push(BlockKind::StackedA, site, big_a);
                } else if method == Method::FLora {
                    msg.push(BlockKind::Dense, site, global.clone());
                } else {
                    let Adapter::Lora(mean) = &agg.adapters[site] else {
                        return Err(FedError::Config("fedex aggregate is not a lora pair".into()));
                    };
                    let residual = agg
                        .residual
                        .as_ref()
                        .ok_or_else(|| FedError::Config("fedex aggregate lacks a residual".into()))?;
                    msg.push(BlockKind::LoraB, site, mean.b.clone());
                    msg.push(BlockKind::LoraA, site, mean.a.clone());
                    msg.push(BlockKind::Dense, site, residual[site].clone());
                }
            }
            Ok(msg)
        }
    }
}

fn metered(msg: &Message) -> Result<u64, FedError> {
    Ok(wire::param_count(&msg.encode())? as u64)
}

/// Resolves the noise multiplier, calibrating for the most exposed client
/// when a target `ε` is given.
fn resolve_sigma(cfg: &FederationConfig, opts: &LocalOptions, shard_sizes: &[usize]) -> Result<Option<f64>, FedError> {
    let Some(p) = &cfg.privacy else { return Ok(None) };
    if let Some(s) = p.sigma {
        return Ok(Some(s));
    }
    let target = p.epsilon.expect("validated");
    let mut sigma: f64 = 0.0;
    for &len in shard_sizes {
        let steps = cfg.rounds as u64 * opts.steps_per_round(len);
        sigma = sigma.max(calibrate_sigma(target, p.delta, opts.sample_rate(len), steps)?);
    }
    Ok(Some(sigma))
}

/// Runs `cfg.rounds` federated rounds.
pub fn run_federation(cfg: &FederationConfig) -> Result<FederationOutcome, FedError> {
    let shape = cfg.validate()?;
    let task = make_teacher_task(&shape, &cfg.task.teacher, derive_seed(cfg.seed, "task", 0))?;
    let shard_rows = partition(
        &task.sources,
        PartitionSpec {
            mode: cfg.partition,
            clients: cfg.clients,
        },
        derive_seed(cfg.seed, "partition", 0),
    )?;
    let shard_data: Vec<Batch> = shard_rows.iter().map(|rows| task.data.select(rows)).collect();
    let shard_sizes: Vec<usize> = shard_data.iter().map(Batch::len).collect();

    let mut opts = LocalOptions {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        privacy: None,
    };
    let sigma = resolve_sigma(cfg, &opts, &shard_sizes)?;
    if let (Some(p), Some(s)) = (&cfg.privacy, sigma) {
        opts.privacy = Some(LocalPrivacy {
            clip_norm: p.clip_norm,
            noise_multiplier: s,
        });
    }

    let initial_base = task.base.clone();
    let mut base = initial_base.clone();
    let draw = |n: usize, seed: u64| -> Result<Batch, FedError> { Ok(task.draw(n, seed)?.0) };
    let mut global = initial_adapters(cfg, &shape, &base, || init_batch(cfg, draw, &shard_data))?;

    let ranks = cfg.ranks();
    let mut clients: Vec<ClientState> = Vec::with_capacity(cfg.clients);
    let mut ledger = CommLedger::default();
    let mut setup = Vec::with_capacity(cfg.clients);
    for (id, data) in shard_data.into_iter().enumerate() {
        let adapters = adapters_for_rank(&global, ranks[id])?;
        setup.push(metered(&Message::from_adapters(cfg.method, &adapters, Parts::All))?);
        clients.push(ClientState {
            id,
            shard: Shard::new(data),
            adapters,
            steps: 0,
            seed: derive_seed(cfg.seed, "client", id as u64),
        });
    }
    ledger.record_setup(setup);

    let site_shapes: Vec<(String, usize, usize)> = shape.sites().iter().map(|s| (s.name.clone(), s.m, s.n)).collect();
    let catalog = ArchCatalog::from_shapes("simulated", &site_shapes);
    let rank_u64: Vec<u64> = ranks.iter().map(|&r| r as u64).collect();
    let predicted = per_client_costs(&catalog, cfg.method, &rank_u64)?;

    let delta = cfg.privacy.as_ref().map(|p| p.delta);
    let mut accountants = vec![RdpAccountant::new(); cfg.clients];
    let init_loss = forward_loss(&shape, &base, &effective_updates(&global), &task.data)?;
    let mut reports = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let results: Vec<LocalResult> = clients
            .par_iter_mut()
            .map(|c| local_train(c, cfg.method, &shape, &base, &opts, round))
            .collect::<Result<_, _>>()?;

        let mut updates = Vec::with_capacity(results.len());
        let mut upload = Vec::with_capacity(results.len());
        for (res, size) in results.iter().zip(&shard_sizes) {
            upload.push(metered(&Message::from_adapters(cfg.method, &res.update.adapters, Parts::Trainable))?);
            let mut u = res.update.clone();
            if cfg.weighting == Weighting::DatasetSize {
                u.weight = *size as f64;
            }
            updates.push(u);
        }

        let agg = aggregate(cfg.method, &updates, derive_seed(cfg.seed, "flora-reinit", round as u64))?;
        let div = divergence(&updates, &agg)?;

        let fold = if agg.folds_update { Some(&agg.global_update) } else { agg.residual.as_ref() };
        if let Some(fold) = fold {
            for (w, d) in base.iter_mut().zip(fold) {
                w.axpy(1.0, d)?;
            }
        }
        global = agg.adapters.clone();

        let mut download = Vec::with_capacity(clients.len());
        for c in clients.iter_mut() {
            let next = adapters_for_rank(&global, ranks[c.id])?;
            download.push(metered(&download_message(cfg.method, &agg, &updates, &next)?)?);
            c.adapters = next;
        }
        ledger.ledger_record(round, cfg.method, upload, download);

        let epsilon = match (opts.privacy, delta) {
            (Some(p), Some(delta)) if p.noise_multiplier > 0.0 => {
                let mut worst: f64 = 0.0;
                for ((acc, res), &len) in accountants.iter_mut().zip(&results).zip(&shard_sizes) {
                    acc.compose(p.noise_multiplier, opts.sample_rate(len), res.steps)?;
                    worst = worst.max(acc.epsilon(delta)?);
                }
                Some(worst)
            }
            _ => None,
        };

        let entry = ledger.rounds.last().expect("just recorded");
        reports.push(RoundReport {
            round,
            client_losses: results.iter().map(|r| r.loss).collect(),
            global_loss: forward_loss(&shape, &base, &effective_updates(&global), &task.data)?,
            divergence: div,
            upload: entry.upload_total(),
            download: entry.download_total(),
            epsilon,
        });
    }

    ledger.reconcile(&predicted)?;

    let total_update = base
        .iter()
        .zip(&initial_base)
        .zip(effective_updates(&global))
        .map(|((b, b0), e)| b.sub(b0).and_then(|d| d.add(&e)))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(FederationOutcome {
        reports,
        init_loss,
        global_adapters: global,
        initial_base,
        base,
        total_update,
        teacher_delta: task.delta().to_vec(),
        ledger,
        predicted,
        sigma,
        delta,
        accountants,
        shard_sizes,
        shard_reads: clients.iter().map(|c| c.shard.reads()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rounds_reports_init_only() {
        let cfg = FederationConfig::linear(Method::FedSb, 6, 4, 2, 3, 0);
        let out = run_federation(&cfg).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(out.total_update, vec![Matrix::zeros(4, 6)]);
        assert_eq!(out.final_loss(), out.init_loss);
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = FederationConfig::linear(Method::FedIt, 6, 4, 5, 3, 1);
        assert!(matches!(cfg.validate(), Err(FedError::Config(_))));
        cfg.rank = 2;
        cfg.client_ranks = Some(vec![1, 2, 2]);
        assert!(cfg.validate().is_err());
        cfg.client_ranks = None;
        cfg.privacy = Some(PrivacyConfig {
            clip_norm: 1.0,
            sigma: Some(1.0),
            epsilon: Some(3.0),
            delta: 1e-5,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ledger_matches_prediction_for_every_method() {
        for method in Method::ALL {
            let mut cfg = FederationConfig::linear(method, 6, 5, 2, 3, 2);
            cfg.task.teacher.samples = 60;
            let out = run_federation(&cfg).unwrap();
            assert_eq!(out.reports.len(), 2);
            assert!(out.ledger.reconcile(&out.predicted).is_ok());
        }
    }
}
