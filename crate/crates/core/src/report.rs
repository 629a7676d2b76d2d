//! Machine-readable run artifacts.
//!
//! Every CSV starts with a `schema_version` column. Artifacts are rendered in
//! memory first and only then written, so a failed run leaves no files behind.
//!
//! | file                 | content                                          |
//! |----------------------|--------------------------------------------------|
//! | `rounds.csv`         | one row per round                                |
//! | `summary.json`       | final metrics, privacy and communication totals  |
//! | `accountant.json`    | RDP ledger of the most exposed client            |
//! | `costs.csv`          | predicted per-client counts and measured totals  |
//! | `global_adapter.bin` | final global adapters in the wire layout         |
//! | `config.toml`        | the exact configuration that produced the run    |

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::adapters::wire::{Message, Parts};
use crate::adapters::Method;
use crate::commcost::{millions_2dp, CostBreakdown};
use crate::config::ConfigError;
use crate::fedsim::{FederationConfig, FederationOutcome};
use crate::privacy::AccountantDump;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Privacy(#[from] crate::privacy::PrivacyError),
}

#[derive(Debug, Serialize)]
struct RoundRow {
    schema_version: u32,
    round: usize,
    global_loss: f64,
    divergence: f64,
    mean_client_loss: f64,
    max_client_loss: f64,
    upload: u64,
    download: u64,
    epsilon: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct CommSummary {
    pub setup_total: u64,
    pub upload_total: u64,
    pub download_total: u64,
    pub predicted_upload_per_client: u64,
    pub predicted_download_per_client: u64,
    pub reported: u64,
    pub reported_millions: String,
    pub reconciled: bool,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub method: Method,
    pub rank: usize,
    pub clients: usize,
    pub rounds: usize,
    pub seed: u64,
    pub init_loss: f64,
    pub final_loss: f64,
    pub max_divergence: f64,
    pub mean_divergence: f64,
    /// `‖total update − ΔW*‖_F` against the first source's teacher.
    pub teacher_distance: f64,
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub shard_sizes: Vec<usize>,
    pub comm: CommSummary,
}

impl Summary {
    pub fn new(cfg: &FederationConfig, out: &FederationOutcome) -> Summary {
        let n = out.reports.len();
        let mean_divergence = if n == 0 {
            0.0
        } else {
            out.reports.iter().map(|r| r.divergence).sum::<f64>() / n as f64
        };
        let teacher_distance = out
            .total_update
            .iter()
            .zip(&out.teacher_delta)
            .map(|(u, d)| u.sub(d).map_or(f64::NAN, |x| x.frobenius_norm().powi(2)))
            .sum::<f64>()
            .sqrt();
        let first = &out.predicted[0];
        Summary {
            schema_version: SCHEMA_VERSION,
            method: cfg.method,
            rank: cfg.rank,
            clients: cfg.clients,
            rounds: cfg.rounds,
            seed: cfg.seed,
            init_loss: out.init_loss,
            final_loss: out.final_loss(),
            max_divergence: out.max_divergence(),
            mean_divergence,
            teacher_distance,
            sigma: out.sigma,
            delta: out.delta,
            epsilon: out.epsilon(),
            shard_sizes: out.shard_sizes.clone(),
            comm: CommSummary {
                setup_total: out.ledger.setup.iter().sum(),
                upload_total: out.ledger.total_upload(),
                download_total: out.ledger.total_download(),
                predicted_upload_per_client: first.upload_per_client,
                predicted_download_per_client: first.download_per_client,
                reported: first.reported,
                reported_millions: millions_2dp(first.reported),
                reconciled: out.ledger.reconcile(&out.predicted).is_ok(),
            },
        }
    }
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum AccountantFile {
    Private(AccountantDump),
    Public { private: bool, epsilon: Option<f64> },
}

#[derive(Debug, Serialize)]
struct CostRow<'a> {
    schema_version: u32,
    arch: &'a str,
    method: &'a str,
    rank: u64,
    clients: u64,
    client: Option<usize>,
    upload_per_client: u64,
    download_per_client: u64,
    setup_per_client: u64,
    server_receive: u64,
    server_send: u64,
    reported: u64,
    reported_millions: String,
    measured_upload: Option<u64>,
    measured_download: Option<u64>,
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `costs.csv` for a set of breakdowns (one row each).
pub fn costs_csv(rows: &[CostBreakdown]) -> Result<String, ReportError> {
    csv_string(rows.iter().map(|b| cost_row(b, None, None)))
}

fn cost_row(b: &CostBreakdown, client: Option<usize>, measured: Option<(u64, u64)>) -> CostRow<'_> {
    CostRow {
        schema_version: SCHEMA_VERSION,
        arch: &b.arch,
        method: b.method.name(),
        rank: b.rank,
        clients: b.clients,
        client,
        upload_per_client: b.upload_per_client,
        download_per_client: b.download_per_client,
        setup_per_client: b.setup_per_client,
        server_receive: b.server_receive,
        server_send: b.server_send,
        reported: b.reported,
        reported_millions: millions_2dp(b.reported),
        measured_upload: measured.map(|m| m.0),
        measured_download: measured.map(|m| m.1),
    }
}

/// All artifacts of one run, rendered but not yet written.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub files: Vec<(String, Vec<u8>)>,
}

impl RunArtifacts {
    pub fn render(cfg: &FederationConfig, config_toml: &str, out: &FederationOutcome) -> Result<Self, ReportError> {
        let rounds = csv_string(out.reports.iter().map(|r| {
            let n = r.client_losses.len().max(1) as f64;
            RoundRow {
                schema_version: SCHEMA_VERSION,
                round: r.round,
                global_loss: r.global_loss,
                divergence: r.divergence,
                mean_client_loss: r.client_losses.iter().sum::<f64>() / n,
                max_client_loss: r.client_losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                upload: r.upload,
                download: r.download,
                epsilon: r.epsilon,
            }
        }))?;
        let summary = serde_json::to_string_pretty(&Summary::new(cfg, out))?;
        let accountant = match (out.worst_accountant(), out.delta, out.sigma) {
            (Some(acc), Some(delta), Some(s)) if s > 0.0 => AccountantFile::Private(acc.dump(delta)?),
            _ => AccountantFile::Public {
                private: cfg.privacy.is_some(),
                epsilon: None,
            },
        };
        let accountant = serde_json::to_string_pretty(&accountant)?;
        let measured: Vec<(u64, u64)> = (0..out.predicted.len())
            .map(|i| {
                let up = out.ledger.rounds.iter().map(|e| e.upload[i]).sum();
                let down = out.ledger.rounds.iter().map(|e| e.download[i]).sum::<u64>() + out.ledger.setup[i];
                (up, down)
            })
            .collect();
        let costs = csv_string(
            out.predicted
                .iter()
                .zip(measured)
                .enumerate()
                .map(|(i, (b, m))| cost_row(b, Some(i), Some(m))),
        )?;
        let checkpoint = Message::from_adapters(cfg.method, &out.global_adapters, Parts::All).encode();
        Ok(Self {
            files: vec![
                ("config.toml".into(), config_toml.as_bytes().to_vec()),
                ("rounds.csv".into(), rounds.into_bytes()),
                ("summary.json".into(), (summary + "\n").into_bytes()),
                ("accountant.json".into(), (accountant + "\n").into_bytes()),
                ("costs.csv".into(), costs.into_bytes()),
                ("global_adapter.bin".into(), checkpoint),
            ],
        })
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    /// Writes every file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| ReportError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[derive(Debug, Serialize)]
struct SweepRow {
    schema_version: u32,
    method: &'static str,
    rank: usize,
    seed: u64,
    final_loss: f64,
    max_divergence: f64,
    mean_divergence: f64,
    epsilon: Option<f64>,
    upload_total: u64,
    download_total: u64,
    reported: u64,
}

/// `sweep.csv`: one row per run.
pub fn sweep_csv(runs: &[(FederationConfig, FederationOutcome)]) -> Result<String, ReportError> {
    csv_string(runs.iter().map(|(cfg, out)| {
        let s = Summary::new(cfg, out);
        SweepRow {
            schema_version: SCHEMA_VERSION,
            method: cfg.method.name(),
            rank: cfg.rank,
            seed: cfg.seed,
            final_loss: s.final_loss,
            max_divergence: s.max_divergence,
            mean_divergence: s.mean_divergence,
            epsilon: s.epsilon,
            upload_total: s.comm.upload_total,
            download_total: s.comm.download_total,
            reported: s.comm.reported,
        }
    }))
}

/// Directory name of one sweep member.
pub fn sweep_member_dir(cfg: &FederationConfig) -> String {
    format!("{}-r{}-s{}", cfg.method.name(), cfg.rank, cfg.seed)
}
