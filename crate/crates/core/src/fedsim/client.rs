//! Client state and local training.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;

use super::FedError;
use crate::adapters::{apply_flat_step, effective_updates, flat_trainable_gradient, Adapter, Method};
use crate::aggregation::ClientUpdate;
use crate::model::{forward_loss, per_sample_gradients, ArchShape, Batch};
use crate::privacy::{dp_sgd_step, mean_gradient, PrivacyParams};
use crate::seeds::{derive_seed, rng_from_seed};

/// A client's private data. Every read is counted so tests can verify that
/// training one client never touches another client's shard.
#[derive(Debug)]
pub struct Shard {
    data: Batch,
    reads: AtomicUsize,
}

impl Shard {
    pub fn new(data: Batch) -> Self {
        Self {
            data,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn read(&self) -> &Batch {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

#[derive(Debug)]
pub struct ClientState {
    pub id: usize,
    pub shard: Shard,
    pub adapters: Vec<Adapter>,
    pub steps: u64,
    pub seed: u64,
}

/// DP-SGD settings of local training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPrivacy {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub privacy: Option<LocalPrivacy>,
}

impl LocalOptions {
    /// Optimizer steps one client takes per round.
    pub fn steps_per_round(&self, shard_len: usize) -> u64 {
        (self.epochs * shard_len.div_ceil(self.batch_size)) as u64
    }

    /// Sampling rate of one step for the accountant.
    pub fn sample_rate(&self, shard_len: usize) -> f64 {
        (self.batch_size as f64 / shard_len as f64).min(1.0)
    }
}

/// Result of one client's local round.
#[derive(Debug, Clone)]
pub struct LocalResult {
    pub update: ClientUpdate,
    /// Mean loss on the client's shard after training.
    pub loss: f64,
    pub steps: u64,
}

/// Runs `epochs` passes of (DP-)SGD over shuffled fixed-size batches of the
/// client's shard, updating only the trainable adapter parts.
pub fn local_train(
    client: &mut ClientState,
    method: Method,
    shape: &ArchShape,
    base: &[crate::linalg::Matrix],
    opts: &LocalOptions,
    round: usize,
) -> Result<LocalResult, FedError> {
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(FedError::Config("epochs and batch size must be at least 1".into()));
    }
    let data = client.shard.read();
    let n = data.len();
    let params = opts.privacy.map(|p| PrivacyParams {
        clip_norm: p.clip_norm,
        noise_multiplier: p.noise_multiplier,
        delta: 0.5,
        sample_rate: opts.sample_rate(n),
        steps: 1,
    });
    let mut steps = 0;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let shuffle_seed = derive_seed(client.seed, "shuffle", ((round as u64) << 20) | epoch as u64);
        order.shuffle(&mut rng_from_seed(shuffle_seed));
        for chunk in order.chunks(opts.batch_size) {
            let batch = data.select(chunk);
            let updates = effective_updates(&client.adapters);
            let per_sample = per_sample_gradients(shape, base, &updates, &batch)?;
            let flat: Vec<Vec<f64>> = per_sample
                .iter()
                .map(|g| flat_trainable_gradient(&client.adapters, g))
                .collect::<Result<_, _>>()?;
            let step = match &params {
                Some(p) => dp_sgd_step(&flat, p, derive_seed(client.seed, "dp-noise", client.steps))?,
                None => mean_gradient(&flat)?,
            };
            apply_flat_step(&mut client.adapters, opts.lr, &step);
            client.steps += 1;
            steps += 1;
        }
    }
    let loss = forward_loss(shape, base, &effective_updates(&client.adapters), data)?;
    Ok(LocalResult {
        update: ClientUpdate {
            client: client.id,
            method,
            adapters: client.adapters.clone(),
            weight: 1.0,
        },
        loss,
        steps,
    })
}
