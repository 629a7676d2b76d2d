//! Splitting a dataset across clients.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::FedError;
use crate::seeds::rng_from_seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    /// Uniformly random disjoint shards whose sizes differ by at most one.
    #[default]
    Iid,
    /// Every source goes wholly to one client (source `s` to client `s mod c`).
    PerSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub clients: usize,
}

/// Row indices of each client's shard.
///
/// `sources[i]` is the source of row `i`; it is only consulted in
/// [`PartitionMode::PerSource`].
pub fn partition(sources: &[usize], spec: PartitionSpec, seed: u64) -> Result<Vec<Vec<usize>>, FedError> {
    let n = sources.len();
    let c = spec.clients;
    if c == 0 {
        return Err(FedError::Config("client count must be at least 1".into()));
    }
    if n == 0 {
        return Err(FedError::Config("cannot partition an empty dataset".into()));
    }
    if c > n {
        return Err(FedError::Config(format!("{c} clients but only {n} samples")));
    }
    match spec.mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng_from_seed(seed));
            let (base, extra) = (n / c, n % c);
            let mut out = Vec::with_capacity(c);
            let mut start = 0;
            for k in 0..c {
                let len = base + usize::from(k < extra);
                out.push(idx[start..start + len].to_vec());
                start += len;
            }
            Ok(out)
        }
        PartitionMode::PerSource => {
            let n_sources = sources.iter().max().map_or(0, |m| m + 1);
            if n_sources < c {
                return Err(FedError::Config(format!(
                    "{n_sources} sources cannot cover {c} clients"
                )));
            }
            let mut out = vec![Vec::new(); c];
            for (i, &s) in sources.iter().enumerate() {
                out[s % c].push(i);
            }
            Ok(out)
        }
    }
}
