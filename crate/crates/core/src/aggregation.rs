//! Server-side aggregation for the five federated strategies.
//!
//! Every aggregator consumes one complete round of [`ClientUpdate`]s and
//! returns the new global adapter state together with the reconstructed global
//! update `ΔW^agg` for each site. Client weights default to 1, giving the plain
//! `1/c` average; dataset-size weighting is obtained by setting
//! [`ClientUpdate::weight`].

use thiserror::Error;

use crate::adapters::{init_lora, Adapter, AdapterError, LoraPair, Method, SbTriple};
use crate::linalg::{LinalgError, Matrix};
use crate::model::Site;
use crate::seeds::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("no client updates to aggregate")]
    NoClients,
    #[error("client {client} sent a {got} update in a {expected} round")]
    MixedMethods {
        client: usize,
        expected: Method,
        got: Method,
    },
    #[error("client {client} has {got} sites, expected {expected}")]
    SiteCount {
        client: usize,
        expected: usize,
        got: usize,
    },
    #[error("client {client} site {site}: adapter kind does not match the method")]
    WrongAdapter { client: usize, site: usize },
    #[error("client {client} site {site}: rank {got} differs from rank {expected}")]
    RankMismatch {
        client: usize,
        site: usize,
        expected: usize,
        got: usize,
    },
    #[error("client {client} site {site}: rank {rank} exceeds the global rank {max}")]
    RankExceeds {
        client: usize,
        site: usize,
        rank: usize,
        max: usize,
    },
    #[error("client {client} site {site}: frozen factors differ from client {reference}")]
    FrozenMismatch {
        client: usize,
        reference: usize,
        site: usize,
    },
    #[error("client {client} has non-positive weight {weight}")]
    BadWeight { client: usize, weight: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// One client's adapter state at the end of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub method: Method,
    /// One adapter per site.
    pub adapters: Vec<Adapter>,
    pub weight: f64,
}

impl ClientUpdate {
    pub fn new(client: usize, method: Method, adapters: Vec<Adapter>) -> Self {
        Self {
            client,
            method,
            adapters,
            weight: 1.0,
        }
    }
}

/// Output of one aggregation step.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    /// Adapter state broadcast to clients for the next round.
    pub adapters: Vec<Adapter>,
    /// Dense correction folded into the base weights (FedEx-LoRA).
    pub residual: Option<Vec<Matrix>>,
    /// Stacked `([B₁ … B_c], (1/c)[A₁; …; A_c])` per site (FLoRA).
    pub stacked: Option<Vec<(Matrix, Matrix)>>,
    /// Reconstructed global update `ΔW^agg` per site.
    pub global_update: Vec<Matrix>,
    /// Whether `global_update` is folded into the base weights and the
    /// adapters restart from zero (FLoRA).
    pub folds_update: bool,
}

fn check_round(updates: &[ClientUpdate], method: Method) -> Result<usize, AggregationError> {
    let first = updates.first().ok_or(AggregationError::NoClients)?;
    let sites = first.adapters.len();
    for u in updates {
        if u.method != method {
            return Err(AggregationError::MixedMethods {
                client: u.client,
                expected: method,
                got: u.method,
            });
        }
        if u.adapters.len() != sites {
            return Err(AggregationError::SiteCount {
                client: u.client,
                expected: sites,
                got: u.adapters.len(),
            });
        }
        if !(u.weight > 0.0 && u.weight.is_finite()) {
            return Err(AggregationError::BadWeight {
                client: u.client,
                weight: u.weight,
            });
        }
    }
    Ok(sites)
}

fn normalized_weights(updates: &[ClientUpdate]) -> (Vec<f64>, f64) {
    let w: Vec<f64> = updates.iter().map(|u| u.weight).collect();
    let total = w.iter().sum();
    (w, total)
}

/// `Σ wᵢ Mᵢ / Σ wᵢ`, accumulated in client order.
fn weighted_mean(items: &[Matrix], weights: &[f64], total: f64) -> Result<Matrix, AggregationError> {
    let first = items.first().ok_or(AggregationError::NoClients)?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for (m, &w) in items.iter().zip(weights) {
        acc.axpy(w, m)?;
    }
    Ok(acc.scale(1.0 / total))
}

fn lora_at(u: &ClientUpdate, site: usize) -> Result<&LoraPair, AggregationError> {
    match (&u.adapters[site], u.method) {
        (Adapter::Lora(p), Method::FedIt | Method::FedExLora | Method::FLora) => Ok(p),
        (Adapter::FrozenA(p), Method::FfaLora) => Ok(p),
        _ => Err(AggregationError::WrongAdapter {
            client: u.client,
            site,
        }),
    }
}

fn sb_at(u: &ClientUpdate, site: usize) -> Result<&SbTriple, AggregationError> {
    match &u.adapters[site] {
        Adapter::Sb(t) => Ok(t),
        _ => Err(AggregationError::WrongAdapter {
            client: u.client,
            site,
        }),
    }
}

fn lora_pairs(updates: &[ClientUpdate], site: usize) -> Result<Vec<&LoraPair>, AggregationError> {
    let pairs: Vec<&LoraPair> = updates.iter().map(|u| lora_at(u, site)).collect::<Result<_, _>>()?;
    let rank = pairs[0].rank();
    let shape = (pairs[0].b.rows(), pairs[0].a.cols());
    for (u, p) in updates.iter().zip(&pairs) {
        if p.rank() != rank || (p.b.rows(), p.a.cols()) != shape {
            return Err(AggregationError::RankMismatch {
                client: u.client,
                site,
                expected: rank,
                got: p.rank(),
            });
        }
    }
    Ok(pairs)
}

/// Averaged factors `(B̄, Ā)` of one site.
fn mean_factors(pairs: &[&LoraPair], w: &[f64], total: f64) -> Result<LoraPair, AggregationError> {
    let bs: Vec<Matrix> = pairs.iter().map(|p| p.b.clone()).collect();
    let as_: Vec<Matrix> = pairs.iter().map(|p| p.a.clone()).collect();
    Ok(LoraPair {
        b: weighted_mean(&bs, w, total)?,
        a: weighted_mean(&as_, w, total)?,
        alpha: pairs[0].alpha,
    })
}

/// FedIT: average `B` and `A` separately.
pub fn agg_fedit(updates: &[ClientUpdate]) -> Result<AggregateResult, AggregationError> {
    let sites = check_round(updates, Method::FedIt)?;
    let (w, total) = normalized_weights(updates);
    let mut adapters = Vec::with_capacity(sites);
    let mut global = Vec::with_capacity(sites);
    for site in 0..sites {
        let mean = mean_factors(&lora_pairs(updates, site)?, &w, total)?;
        global.push(mean.effective_update());
        adapters.push(Adapter::Lora(mean));
    }
    Ok(AggregateResult {
        adapters,
        residual: None,
        stacked: None,
        global_update: global,
        folds_update: false,
    })
}

/// FedEx-LoRA: FedIT plus `W_err = mean(s·BᵢAᵢ) − s·B̄Ā`.
pub fn agg_fedex(updates: &[ClientUpdate]) -> Result<AggregateResult, AggregationError> {
    let sites = check_round(updates, Method::FedExLora)?;
    let (w, total) = normalized_weights(updates);
    let mut adapters = Vec::with_capacity(sites);
    let mut residual = Vec::with_capacity(sites);
    let mut global = Vec::with_capacity(sites);
    for site in 0..sites {
        let pairs = lora_pairs(updates, site)?;
        let mean = mean_factors(&pairs, &w, total)?;
        let products: Vec<Matrix> = pairs.iter().map(|p| p.effective_update()).collect();
        let ideal = weighted_mean(&products, &w, total)?;
        let vanilla = mean.effective_update();
        let err = ideal.sub(&vanilla)?;
        global.push(vanilla.add(&err)?);
        residual.push(err);
        adapters.push(Adapter::Lora(mean));
    }
    Ok(AggregateResult {
        adapters,
        residual: Some(residual),
        stacked: None,
        global_update: global,
        folds_update: false,
    })
}

/// FLoRA: stacked product `[B₁ … B_c] · (1/c)[A₁; …; A_c]`, then fresh adapters
/// drawn from `seed` and shared by every client.
pub fn agg_flora(updates: &[ClientUpdate], seed: u64) -> Result<AggregateResult, AggregationError> {
    let sites = check_round(updates, Method::FLora)?;
    let (w, total) = normalized_weights(updates);
    let mut adapters = Vec::with_capacity(sites);
    let mut stacked = Vec::with_capacity(sites);
    let mut global = Vec::with_capacity(sites);
    for site in 0..sites {
        let pairs = lora_pairs(updates, site)?;
        let scaled_b: Vec<Matrix> = pairs.iter().map(|p| p.b.scale(p.scaling())).collect();
        let weighted_a: Vec<Matrix> = pairs
            .iter()
            .zip(&w)
            .map(|(p, wi)| p.a.scale(wi / total))
            .collect();
        let big_b = Matrix::hstack(&scaled_b.iter().collect::<Vec<_>>())?;
        let big_a = Matrix::vstack(&weighted_a.iter().collect::<Vec<_>>())?;
        global.push(big_b.matmul(&big_a)?);
        stacked.push((big_b, big_a));

        let p0 = pairs[0];
        let shape = Site {
            name: format!("site{site}"),
            m: p0.b.rows(),
            n: p0.a.cols(),
        };
        let fresh = init_lora(&shape, p0.rank(), p0.alpha, derive_seed(seed, "flora-reinit", site as u64))?;
        adapters.push(Adapter::Lora(fresh));
    }
    Ok(AggregateResult {
        adapters,
        residual: None,
        stacked: Some(stacked),
        global_update: global,
        folds_update: true,
    })
}

/// FFA-LoRA: `A` frozen and shared, average `B`.
pub fn agg_ffa(updates: &[ClientUpdate]) -> Result<AggregateResult, AggregationError> {
    let sites = check_round(updates, Method::FfaLora)?;
    let (w, total) = normalized_weights(updates);
    let mut adapters = Vec::with_capacity(sites);
    let mut global = Vec::with_capacity(sites);
    for site in 0..sites {
        let pairs = lora_pairs(updates, site)?;
        for (u, p) in updates.iter().zip(&pairs).skip(1) {
            if !p.a.bit_eq(&pairs[0].a) {
                return Err(AggregationError::FrozenMismatch {
                    client: u.client,
                    reference: updates[0].client,
                    site,
                });
            }
        }
        let bs: Vec<Matrix> = pairs.iter().map(|p| p.b.clone()).collect();
        let mean = LoraPair {
            b: weighted_mean(&bs, &w, total)?,
            a: pairs[0].a.clone(),
            alpha: pairs[0].alpha,
        };
        global.push(mean.effective_update());
        adapters.push(Adapter::FrozenA(mean));
    }
    Ok(AggregateResult {
        adapters,
        residual: None,
        stacked: None,
        global_update: global,
        folds_update: false,
    })
}

fn fedsb_impl(updates: &[ClientUpdate], homogeneous: bool) -> Result<AggregateResult, AggregationError> {
    let sites = check_round(updates, Method::FedSb)?;
    let (w, total) = normalized_weights(updates);
    let mut adapters = Vec::with_capacity(sites);
    let mut global = Vec::with_capacity(sites);
    for site in 0..sites {
        let triples: Vec<&SbTriple> = updates.iter().map(|u| sb_at(u, site)).collect::<Result<_, _>>()?;
        let reference = triples[0];
        let r_max = reference.basis_rank();
        for (u, t) in updates.iter().zip(&triples) {
            if !t.b.bit_eq(&reference.b) || !t.a.bit_eq(&reference.a) {
                return Err(AggregationError::FrozenMismatch {
                    client: u.client,
                    reference: updates[0].client,
                    site,
                });
            }
            if homogeneous && t.rank() != reference.rank() {
                return Err(AggregationError::RankMismatch {
                    client: u.client,
                    site,
                    expected: reference.rank(),
                    got: t.rank(),
                });
            }
            if t.rank() > r_max {
                return Err(AggregationError::RankExceeds {
                    client: u.client,
                    site,
                    rank: t.rank(),
                    max: r_max,
                });
            }
        }
        let global_rank = if homogeneous { reference.rank() } else { r_max };
        let cores: Vec<Matrix> = triples
            .iter()
            .map(|t| t.r.padded(global_rank, global_rank))
            .collect::<Result<_, _>>()?;
        let agg = SbTriple {
            b: reference.b.clone(),
            r: weighted_mean(&cores, &w, total)?,
            a: reference.a.clone(),
        };
        global.push(agg.effective_update());
        adapters.push(Adapter::Sb(agg));
    }
    Ok(AggregateResult {
        adapters,
        residual: None,
        stacked: None,
        global_update: global,
        folds_update: false,
    })
}

/// Fed-SB: average the trainable cores `R`; frozen frames must be identical.
pub fn agg_fedsb(updates: &[ClientUpdate]) -> Result<AggregateResult, AggregationError> {
    fedsb_impl(updates, true)
}

/// Rank-heterogeneous Fed-SB: client cores cover the leading `rᵢ` directions
/// of a shared `r_max` basis and are zero-padded to `r_max × r_max`.
pub fn agg_fedsb_hetero(updates: &[ClientUpdate]) -> Result<AggregateResult, AggregationError> {
    fedsb_impl(updates, false)
}

/// Dispatches on `method`. `seed` is only used by FLoRA's re-initialization;
/// Fed-SB always goes through the heterogeneous path, which reduces to the
/// homogeneous one when all ranks agree.
pub fn aggregate(method: Method, updates: &[ClientUpdate], seed: u64) -> Result<AggregateResult, AggregationError> {
    match method {
        Method::FedIt => agg_fedit(updates),
        Method::FedExLora => agg_fedex(updates),
        Method::FLora => agg_flora(updates, seed),
        Method::FfaLora => agg_ffa(updates),
        Method::FedSb => agg_fedsb_hetero(updates),
    }
}

/// Weighted mean of the client effective updates per site.
pub fn ideal_update(updates: &[ClientUpdate]) -> Result<Vec<Matrix>, AggregationError> {
    let first = updates.first().ok_or(AggregationError::NoClients)?;
    let (w, total) = normalized_weights(updates);
    (0..first.adapters.len())
        .map(|site| {
            let items: Vec<Matrix> = updates.iter().map(|u| u.adapters[site].effective_update()).collect();
            weighted_mean(&items, &w, total)
        })
        .collect()
}

/// `‖ΔW^agg − mean ΔWᵢ‖_F`, summed in quadrature over sites.
pub fn divergence(updates: &[ClientUpdate], result: &AggregateResult) -> Result<f64, AggregationError> {
    let ideal = ideal_update(updates)?;
    let mut sq = 0.0;
    for (g, i) in result.global_update.iter().zip(&ideal) {
        let d = g.sub(i)?.frobenius_norm();
        sq += d * d;
    }
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lora(b: &[&[f64]], a: &[&[f64]], alpha: f64) -> LoraPair {
        LoraPair {
            b: Matrix::from_rows(b).unwrap(),
            a: Matrix::from_rows(a).unwrap(),
            alpha,
        }
    }

    fn orthogonal_pair(method: Method) -> Vec<ClientUpdate> {
        let wrap = |p| match method {
            Method::FfaLora => Adapter::FrozenA(p),
            _ => Adapter::Lora(p),
        };
        vec![
            ClientUpdate::new(0, method, vec![wrap(lora(&[&[1.0], &[0.0]], &[&[1.0, 0.0]], 1.0))]),
            ClientUpdate::new(1, method, vec![wrap(lora(&[&[0.0], &[1.0]], &[&[0.0, 1.0]], 1.0))]),
        ]
    }

    #[test]
    fn fedit_is_inexact_on_orthogonal_clients() {
        let ups = orthogonal_pair(Method::FedIt);
        let res = agg_fedit(&ups).unwrap();
        assert_eq!(res.global_update[0], Matrix::from_rows(&[&[0.25, 0.25], &[0.25, 0.25]]).unwrap());
        assert!((divergence(&ups, &res).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fedex_residual_on_orthogonal_clients() {
        let ups = orthogonal_pair(Method::FedExLora);
        let res = agg_fedex(&ups).unwrap();
        let expected = Matrix::from_rows(&[&[0.25, -0.25], &[-0.25, 0.25]]).unwrap();
        assert_eq!(res.residual.as_ref().unwrap()[0], expected);
        assert!(divergence(&ups, &res).unwrap() < 1e-15);
    }

    #[test]
    fn single_client_is_identity() {
        let p = lora(&[&[1.0], &[2.0]], &[&[3.0, 4.0]], 1.0);
        let up = vec![ClientUpdate::new(0, Method::FedExLora, vec![Adapter::Lora(p.clone())])];
        let res = agg_fedex(&up).unwrap();
        assert_eq!(res.residual.unwrap()[0], Matrix::zeros(2, 2));
        assert_eq!(res.adapters[0], Adapter::Lora(p.clone()));

        let up = vec![ClientUpdate::new(0, Method::FLora, vec![Adapter::Lora(p.clone())])];
        let res = agg_flora(&up, 1).unwrap();
        assert_eq!(res.global_update[0], p.effective_update());
        match &res.adapters[0] {
            Adapter::Lora(fresh) => assert_eq!(fresh.b, Matrix::zeros(2, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn sb(rank: usize, core: Matrix) -> Adapter {
        Adapter::Sb(SbTriple {
            b: Matrix::identity(rank).padded(3, rank).unwrap(),
            r: core,
            a: Matrix::identity(rank).padded(rank, 3).unwrap(),
        })
    }

    #[test]
    fn fedsb_averages_cores() {
        let ups = vec![
            ClientUpdate::new(0, Method::FedSb, vec![sb(2, Matrix::identity(2))]),
            ClientUpdate::new(1, Method::FedSb, vec![sb(2, Matrix::identity(2).scale(3.0))]),
        ];
        let res = agg_fedsb(&ups).unwrap();
        match &res.adapters[0] {
            Adapter::Sb(t) => assert_eq!(t.r, Matrix::identity(2).scale(2.0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hetero_padding_by_hand() {
        let frame = sb(2, Matrix::identity(2));
        let Adapter::Sb(full) = frame else { unreachable!() };
        let small = SbTriple {
            r: Matrix::from_rows(&[&[2.0]]).unwrap(),
            ..full.clone()
        };
        let ups = vec![
            ClientUpdate::new(0, Method::FedSb, vec![Adapter::Sb(small)]),
            ClientUpdate::new(1, Method::FedSb, vec![Adapter::Sb(full)]),
        ];
        assert!(matches!(agg_fedsb(&ups), Err(AggregationError::RankMismatch { .. })));
        let res = agg_fedsb_hetero(&ups).unwrap();
        let Adapter::Sb(t) = &res.adapters[0] else { unreachable!() };
        assert_eq!(t.r, Matrix::from_rows(&[&[1.5, 0.0], &[0.0, 0.5]]).unwrap());
        assert!(divergence(&ups, &res).unwrap() < 1e-15);
    }

    #[test]
    fn frozen_mismatch_is_rejected() {
        let mut ups = orthogonal_pair(Method::FfaLora);
        assert!(matches!(agg_ffa(&ups), Err(AggregationError::FrozenMismatch { .. })));
        let a = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        for u in &mut ups {
            if let Adapter::FrozenA(p) = &mut u.adapters[0] {
                p.a = a.clone();
            }
        }
        let res = agg_ffa(&ups).unwrap();
        assert!(divergence(&ups, &res).unwrap() < 1e-15);
    }

    #[test]
    fn mixed_methods_are_rejected() {
        let mut ups = orthogonal_pair(Method::FedIt);
        ups[1].method = Method::FedExLora;
        assert!(matches!(agg_fedit(&ups), Err(AggregationError::MixedMethods { client: 1, .. })));
        assert_eq!(agg_fedit(&[]), Err(AggregationError::NoClients));
    }

    #[test]
    fn weights_change_the_mean() {
        let mut ups = vec![
            ClientUpdate::new(0, Method::FedSb, vec![sb(1, Matrix::identity(1))]),
            ClientUpdate::new(1, Method::FedSb, vec![sb(1, Matrix::zeros(1, 1))]),
        ];
        ups[0].weight = 3.0;
        let res = agg_fedsb(&ups).unwrap();
        let Adapter::Sb(t) = &res.adapters[0] else { unreachable!() };
        assert_eq!(t.r.get(0, 0), 0.75);
    }
}
