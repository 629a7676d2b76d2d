//! Communicated-parameter accounting.
//!
//! Per adapted site `m × n` at rank `r` with `c` clients, one round moves:
//!
//! | method     | upload / client | download / client            |
//! |------------|-----------------|------------------------------|
//! | FedIT      | `(m+n)r`        | `(m+n)r`                     |
//! | FFA-LoRA   | `mr`            | `mr`                         |
//! | Fed-SB     | `r²`            | `r²`                         |
//! | FLoRA      | `(m+n)r`        | `min(c(m+n)r, mn)`           |
//! | FedEx-LoRA | `(m+n)r`        | `min(c(m+n)r, mn + (m+n)r)`  |
//!
//! The exact methods download either every client's factors (from which the
//! aggregate can be rebuilt) or the dense result, whichever is smaller.
//! FedEx-LoRA's dense form carries the averaged factors next to the residual.
//! The initial adapter state is broadcast once before the first round.
//!
//! The headline figure ([`CostBreakdown::reported`]) is the per-client upload
//! for FedIT, FFA-LoRA and Fed-SB, and `Σ min(c(m+n)r, mn)` for the two
//! methods that transfer an exact dense update.

use std::fmt;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::adapters::Method;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommError {
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("catalog line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot read catalog: {0}")]
    Io(String),
    #[error("rank {rank} invalid for site {site} ({m}x{n})")]
    Rank {
        site: String,
        m: u64,
        n: u64,
        rank: u64,
    },
    #[error("client count must be at least 1 and match the number of ranks")]
    NoClients,
    #[error("round {round} {field}: measured {measured} parameters, predicted {predicted}")]
    Mismatch {
        round: usize,
        field: String,
        measured: u64,
        predicted: u64,
    },
}

/// One adapted matrix shape with its number of occurrences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CatalogSite {
    pub name: String,
    pub m: u64,
    pub n: u64,
    pub multiplicity: u64,
}

/// Adapted sites of an architecture, plus densely trained extras.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArchCatalog {
    pub name: String,
    pub sites: Vec<CatalogSite>,
    /// Parameters outside the adapters that every method trains and exchanges.
    pub extra: u64,
}

const BUILTIN: [(&str, &str); 5] = [
    ("llama32-3b", include_str!("../catalogs/llama32-3b.txt")),
    ("mistral-7b", include_str!("../catalogs/mistral-7b.txt")),
    ("gemma2-9b", include_str!("../catalogs/gemma2-9b.txt")),
    ("bert-base", include_str!("../catalogs/bert-base.txt")),
    ("toy2site", include_str!("../catalogs/toy2site.txt")),
];

impl ArchCatalog {
    /// Names of the built-in catalogs.
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Result<ArchCatalog, CommError> {
        let key = name.to_ascii_lowercase();
        BUILTIN
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, text)| ArchCatalog::parse(text))
            .unwrap_or_else(|| Err(CommError::UnknownArch(name.to_string())))
    }

    /// A built-in name, or else a path to a catalog file.
    pub fn resolve(name_or_path: &str) -> Result<ArchCatalog, CommError> {
        match Self::builtin(name_or_path) {
            Err(CommError::UnknownArch(_)) if Path::new(name_or_path).is_file() => {
                let text = std::fs::read_to_string(name_or_path).map_err(|e| CommError::Io(e.to_string()))?;
                ArchCatalog::parse(&text)
            }
            other => other,
        }
    }

    /// Parses `arch <name>`, `site <name> <m> <n> <mult>` and
    /// `extra <name> <count>` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<ArchCatalog, CommError> {
        let mut name = None;
        let mut sites: Vec<CatalogSite> = Vec::new();
        let mut extra = 0u64;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: &str| CommError::Parse {
                line,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = content.split_whitespace().collect();
            let num = |s: &str| -> Result<u64, CommError> {
                match s.parse::<u64>() {
                    Ok(v) if v >= 1 => Ok(v),
                    _ => Err(err(&format!("expected a positive integer, got `{s}`"))),
                }
            };
            match fields.as_slice() {
                ["arch", n] => name = Some(n.to_string()),
                ["site", n, m, cols, mult] => {
                    if sites.iter().any(|s| s.name == *n) {
                        return Err(err(&format!("duplicate site `{n}`")));
                    }
                    sites.push(CatalogSite {
                        name: n.to_string(),
                        m: num(m)?,
                        n: num(cols)?,
                        multiplicity: num(mult)?,
                    });
                }
                ["extra", _, count] => extra += num(count)?,
                _ => return Err(err(&format!("unrecognized line `{content}`"))),
            }
        }
        let name = name.ok_or(CommError::Parse {
            line: 0,
            msg: "missing `arch` line".into(),
        })?;
        if sites.is_empty() {
            return Err(CommError::Parse {
                line: 0,
                msg: "no sites".into(),
            });
        }
        Ok(ArchCatalog { name, sites, extra })
    }

    /// Catalog of explicit site shapes, each with multiplicity one.
    pub fn from_shapes(name: &str, shapes: &[(String, usize, usize)]) -> ArchCatalog {
        ArchCatalog {
            name: name.to_string(),
            sites: shapes
                .iter()
                .map(|(n, m, cols)| CatalogSite {
                    name: n.clone(),
                    m: *m as u64,
                    n: *cols as u64,
                    multiplicity: 1,
                })
                .collect(),
            extra: 0,
        }
    }

    pub fn site_instances(&self) -> u64 {
        self.sites.iter().map(|s| s.multiplicity).sum()
    }
}

/// Counts for one site shape (a single instance, not multiplied).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SiteCost {
    pub name: String,
    pub multiplicity: u64,
    pub upload: u64,
    pub download: u64,
    pub setup: u64,
    pub reported: u64,
}

/// Parameter counts of one round for one architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub arch: String,
    pub method: Method,
    pub rank: u64,
    pub clients: u64,
    pub sites: Vec<SiteCost>,
    pub upload_per_client: u64,
    pub download_per_client: u64,
    /// Sum of all client uploads (what the server receives).
    pub server_receive: u64,
    /// Sum of all client downloads (what the server sends).
    pub server_send: u64,
    /// One-time initial broadcast per client.
    pub setup_per_client: u64,
    pub reported: u64,
}

/// `count` in millions, rounded half-up to two decimals.
pub fn millions_2dp(count: u64) -> String {
    let hundredths = (count + 5_000) / 10_000;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// `count` in thousands, rounded half-up to two decimals.
pub fn thousands_2dp(count: u64) -> String {
    let hundredths = (count + 5) / 10;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

impl CostBreakdown {
    pub fn reported_millions(&self) -> String {
        millions_2dp(self.reported)
    }
}

impl fmt::Display for CostBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} r={} c={}: {}M",
            self.arch,
            self.method.label(),
            self.rank,
            self.clients,
            self.reported_millions()
        )
    }
}

/// Per-instance counts for one site.
pub fn site_cost(method: Method, m: u64, n: u64, r: u64, c: u64) -> (u64, u64, u64, u64) {
    let pair = (m + n) * r;
    let stacked = c * pair;
    let dense = m * n;
    // (upload, download, setup, reported)
    match method {
        Method::FedIt => (pair, pair, pair, pair),
        Method::FfaLora => (m * r, m * r, pair, m * r),
        Method::FedSb => (r * r, r * r, pair + r * r, r * r),
        Method::FLora => (pair, stacked.min(dense), pair, stacked.min(dense)),
        Method::FedExLora => (pair, stacked.min(dense + pair), pair, stacked.min(dense)),
    }
}

fn check_rank(site: &CatalogSite, r: u64) -> Result<(), CommError> {
    if r == 0 || r > site.m.min(site.n) {
        return Err(CommError::Rank {
            site: site.name.clone(),
            m: site.m,
            n: site.n,
            rank: r,
        });
    }
    Ok(())
}

/// Exact counts for one round with every client at rank `r`.
pub fn cost_per_round(arch: &ArchCatalog, method: Method, r: u64, clients: u64) -> Result<CostBreakdown, CommError> {
    cost_per_round_hetero(arch, method, &vec![r; clients as usize], clients)
        .map(|mut b| {
            b.rank = r;
            b
        })
}

/// Counts for Fed-SB clients of differing ranks sharing one basis. Per-client
/// fields report the first client; totals cover all clients. Other methods
/// require equal ranks.
pub fn cost_per_round_hetero(
    arch: &ArchCatalog,
    method: Method,
    ranks: &[u64],
    clients: u64,
) -> Result<CostBreakdown, CommError> {
    if clients == 0 || ranks.len() as u64 != clients {
        return Err(CommError::NoClients);
    }
    let r_max = *ranks.iter().max().expect("nonempty");
    let mut sites = Vec::with_capacity(arch.sites.len());
    let (mut up_total, mut down_total) = (0u64, 0u64);
    for site in &arch.sites {
        for &r in ranks {
            check_rank(site, r)?;
        }
        let (up, down, setup, reported) = site_cost(method, site.m, site.n, ranks[0], clients);
        for &r in ranks {
            let (u, d, _, _) = site_cost(method, site.m, site.n, r, clients);
            up_total += u * site.multiplicity;
            down_total += d * site.multiplicity;
        }
        let setup = if method == Method::FedSb {
            // shared r_max basis plus the client's core
            (site.m + site.n) * r_max + ranks[0] * ranks[0]
        } else {
            setup
        };
        sites.push(SiteCost {
            name: site.name.clone(),
            multiplicity: site.multiplicity,
            upload: up,
            download: down,
            setup,
            reported,
        });
    }
    let total = |f: fn(&SiteCost) -> u64| sites.iter().map(|s| f(s) * s.multiplicity).sum::<u64>() + arch.extra;
    let clients_in_ranks = ranks.len() as u64;
    let extra_all = arch.extra * clients_in_ranks;
    Ok(CostBreakdown {
        arch: arch.name.clone(),
        method,
        rank: r_max,
        clients,
        upload_per_client: total(|s| s.upload),
        download_per_client: total(|s| s.download),
        server_receive: up_total + extra_all,
        server_send: down_total + extra_all,
        setup_per_client: total(|s| s.setup),
        reported: total(|s| s.reported),
        sites,
    })
}

/// One breakdown per client, each with that client's own per-client fields.
pub fn per_client_costs(arch: &ArchCatalog, method: Method, ranks: &[u64]) -> Result<Vec<CostBreakdown>, CommError> {
    (0..ranks.len())
        .map(|i| {
            let mut rotated = ranks.to_vec();
            rotated.rotate_left(i);
            cost_per_round_hetero(arch, method, &rotated, ranks.len() as u64)
        })
        .collect()
}

/// Parameters actually moved in one round, as metered from encoded messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub method: Method,
    pub upload: Vec<u64>,
    pub download: Vec<u64>,
}

impl LedgerEntry {
    pub fn upload_total(&self) -> u64 {
        self.upload.iter().sum()
    }

    pub fn download_total(&self) -> u64 {
        self.download.iter().sum()
    }
}

/// Single-writer record of measured communication.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CommLedger {
    /// One-time initial broadcast, per client.
    pub setup: Vec<u64>,
    pub rounds: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn record_setup(&mut self, per_client: Vec<u64>) {
        self.setup = per_client;
    }

    pub fn ledger_record(&mut self, round: usize, method: Method, upload: Vec<u64>, download: Vec<u64>) {
        self.rounds.push(LedgerEntry {
            round,
            method,
            upload,
            download,
        });
    }

    pub fn total_upload(&self) -> u64 {
        self.rounds.iter().map(LedgerEntry::upload_total).sum()
    }

    pub fn total_download(&self) -> u64 {
        self.rounds.iter().map(LedgerEntry::download_total).sum::<u64>() + self.setup.iter().sum::<u64>()
    }

    /// Checks every measured count against per-client predictions, exactly.
    pub fn reconcile(&self, predicted: &[CostBreakdown]) -> Result<(), CommError> {
        let mismatch = |round: usize, field: String, measured: u64, predicted: u64| CommError::Mismatch {
            round,
            field,
            measured,
            predicted,
        };
        for (i, (&measured, p)) in self.setup.iter().zip(predicted).enumerate() {
            if measured != p.setup_per_client {
                return Err(mismatch(0, format!("setup client {i}"), measured, p.setup_per_client));
            }
        }
        for entry in &self.rounds {
            for (i, p) in predicted.iter().enumerate() {
                let up = entry.upload.get(i).copied().unwrap_or(0);
                if up != p.upload_per_client {
                    return Err(mismatch(entry.round, format!("upload client {i}"), up, p.upload_per_client));
                }
                let down = entry.download.get(i).copied().unwrap_or(0);
                if down != p.download_per_client {
                    return Err(mismatch(entry.round, format!("download client {i}"), down, p.download_per_client));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for name in ArchCatalog::builtin_names() {
            let cat = ArchCatalog::builtin(name).unwrap();
            assert_eq!(cat.name, name);
        }
        assert_eq!(ArchCatalog::builtin("llama32-3b").unwrap().site_instances(), 196);
        assert!(matches!(ArchCatalog::builtin("gpt-5"), Err(CommError::UnknownArch(_))));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ArchCatalog::parse("arch x\nsite a 0 2 1\n").unwrap_err();
        assert!(matches!(err, CommError::Parse { line: 2, .. }));
        assert!(ArchCatalog::parse("site a 1 2 1\n").is_err());
        assert!(ArchCatalog::parse("arch x\nsite a 1 2 1\nsite a 1 2 1\n").is_err());
    }

    #[test]
    fn toy_hand_counts() {
        let toy = ArchCatalog::builtin("toy2site").unwrap();
        // (8+6)·2 + (4+8)·2
        let fedit = cost_per_round(&toy, Method::FedIt, 2, 3).unwrap();
        assert_eq!(fedit.upload_per_client, 52);
        assert_eq!(fedit.server_receive, 156);
        let ffa = cost_per_round(&toy, Method::FfaLora, 2, 3).unwrap();
        assert_eq!(ffa.upload_per_client, 8 * 2 + 4 * 2);
        let sb = cost_per_round(&toy, Method::FedSb, 1, 3).unwrap();
        assert_eq!(sb.upload_per_client, 2);
        // min(3·28, 48) + min(3·24, 32)
        let flora = cost_per_round(&toy, Method::FLora, 2, 3).unwrap();
        assert_eq!(flora.download_per_client, 48 + 32);
        let fedex = cost_per_round(&toy, Method::FedExLora, 2, 3).unwrap();
        assert_eq!(fedex.download_per_client, 76 + 56);
        assert_eq!(fedex.reported, 80);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(millions_2dp(2_825_000), "2.83");
        assert_eq!(millions_2dp(2_824_999), "2.82");
        assert_eq!(millions_2dp(83_886_080), "83.89");
        assert_eq!(thousands_2dp(1_181_955), "1181.96");
    }

    #[test]
    fn rank_is_validated() {
        let toy = ArchCatalog::builtin("toy2site").unwrap();
        assert!(cost_per_round(&toy, Method::FedSb, 0, 2).is_err());
        assert!(cost_per_round(&toy, Method::FedSb, 5, 2).is_err());
        assert!(cost_per_round(&toy, Method::FedSb, 1, 0).is_err());
    }

    #[test]
    fn reconcile_flags_mismatch() {
        let toy = ArchCatalog::builtin("toy2site").unwrap();
        let p = cost_per_round(&toy, Method::FedSb, 2, 2).unwrap();
        let mut ledger = CommLedger::default();
        ledger.record_setup(vec![p.setup_per_client; 2]);
        ledger.ledger_record(0, Method::FedSb, vec![8, 8], vec![8, 8]);
        assert!(ledger.reconcile(&[p.clone(), p.clone()]).is_ok());
        ledger.ledger_record(1, Method::FedSb, vec![8, 9], vec![8, 8]);
        assert!(matches!(
            ledger.reconcile(&[p.clone(), p]),
            Err(CommError::Mismatch { round: 1, measured: 9, .. })
        ));
    }
}
