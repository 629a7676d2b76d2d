//! The invariant suite behind `fedsb verify`.
//!
//! Each check has a stable name and reports pass or fail with a short detail
//! line. A [`Fault`] can be injected to confirm that the harness notices a
//! broken aggregator.

use std::fmt;
use std::str::FromStr;

use crate::adapters::wire::{Message, Parts};
use crate::adapters::{Adapter, LoraPair, Method, SbTriple, DEFAULT_ALPHA};
use crate::aggregation::{
    agg_fedex, agg_fedit, agg_fedsb, agg_fedsb_hetero, agg_ffa, agg_flora, divergence, AggregateResult, ClientUpdate,
};
use crate::commcost::{cost_per_round, ArchCatalog};
use crate::fedsim::{run_federation, FederationConfig, PrivacyConfig};
use crate::linalg::{gaussian_matrix, svd, Matrix};
use crate::privacy::accountant::{rdp_sampled_gaussian, rdp_sampled_gaussian_series};
use crate::privacy::{accountant_epsilon, calibrate_sigma, dp_sgd_step, mean_gradient, noise_decompose_lora, noise_decompose_sb, PrivacyParams};
use crate::seeds::{derive_seed, rng_from_seed};
use rand::Rng;

/// Deliberate defects for exercising the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// FedEx-LoRA drops its residual, degrading to FedIT.
    SkipWErr,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skip-werr" => Ok(Fault::SkipWErr),
            other => Err(format!("unknown fault `{other}` (known: skip-werr)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<28} {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name,
            passed,
            detail: detail.into(),
        });
    }
}

/// Random `(B, A)` LoRA pair with Gaussian entries.
fn random_pair(m: usize, n: usize, r: usize, seed: u64) -> LoraPair {
    LoraPair {
        b: gaussian_matrix(m, r, 1.0, derive_seed(seed, "b", 0)),
        a: gaussian_matrix(r, n, 1.0, derive_seed(seed, "a", 0)),
        alpha: DEFAULT_ALPHA,
    }
}

/// Shared orthonormal frames of rank `r` for an `m × n` site.
pub fn random_frames(m: usize, n: usize, r: usize, seed: u64) -> (Matrix, Matrix) {
    let f = svd(&gaussian_matrix(m, n, 1.0, seed)).expect("gaussian matrices are finite");
    (
        f.u.submatrix(0..m, 0..r),
        f.v.submatrix(0..n, 0..r).transpose(),
    )
}

/// One round of random client updates on a single `m × n` site.
///
/// With `hetero` set, Fed-SB clients draw ranks in `1..=r` over a shared rank-`r` basis.
pub fn random_round(method: Method, m: usize, n: usize, r: usize, c: usize, seed: u64, hetero: bool) -> Vec<ClientUpdate> {
    let mut rng = rng_from_seed(derive_seed(seed, "round", 0));
    let shared_a = gaussian_matrix(r, n, 1.0, derive_seed(seed, "shared-a", 0));
    let (fb, fa) = random_frames(m, n, r, derive_seed(seed, "frames", 0));
    (0..c)
        .map(|i| {
            let s = derive_seed(seed, "client", i as u64);
            let adapter = match method {
                Method::FedIt | Method::FedExLora | Method::FLora => Adapter::Lora(random_pair(m, n, r, s)),
                Method::FfaLora => Adapter::FrozenA(LoraPair {
                    a: shared_a.clone(),
                    ..random_pair(m, n, r, s)
                }),
                Method::FedSb => {
                    let ri = if hetero { rng.random_range(1..=r) } else { r };
                    Adapter::Sb(SbTriple {
                        b: fb.clone(),
                        r: gaussian_matrix(ri, ri, 1.0, s),
                        a: fa.clone(),
                    })
                }
            };
            ClientUpdate::new(i, method, vec![adapter])
        })
        .collect()
}

/// FedEx-LoRA aggregation, optionally with the residual removed.
pub fn fedex_with_fault(updates: &[ClientUpdate], fault: Option<Fault>) -> AggregateResult {
    let mut res = agg_fedex(updates).expect("valid fedex round");
    if fault == Some(Fault::SkipWErr) {
        res.global_update = res.adapters.iter().map(Adapter::effective_update).collect();
        res.residual = None;
    }
    res
}

const EXACT_TOL: f64 = 1e-12;

fn instance_shape(rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let m = rng.random_range(1..=32);
    let n = rng.random_range(1..=32);
    let r = rng.random_range(1..=8.min(m).min(n));
    let c = rng.random_range(1..=16);
    (m, n, r, c)
}

fn exactness_check(
    report: &mut VerifyReport,
    name: &'static str,
    instances: usize,
    seed: u64,
    mut run: impl FnMut(usize, usize, usize, usize, u64) -> f64,
) {
    let mut rng = rng_from_seed(derive_seed(seed, name, 0));
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let (m, n, r, c) = instance_shape(&mut rng);
        let d = run(m, n, r, c, derive_seed(seed, name, k as u64 + 1));
        worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
    }
    report.push(name, worst < EXACT_TOL, format!("max divergence {worst:.3e} over {instances} instances"));
}

/// Runs every check; `fault` injects a defect.
pub fn run_suite(fault: Option<Fault>) -> VerifyReport {
    let mut report = VerifyReport::default();
    let seed = 0x5eed;
    let instances = 100;

    // linear algebra
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let a = gaussian_matrix(7 + k % 3, 5 + k % 4, 1.0, derive_seed(seed, "svd", k as u64));
        let f = svd(&a).expect("finite");
        let ortho = |q: &Matrix| {
            q.transpose()
                .matmul(q)
                .and_then(|g| g.sub(&Matrix::identity(q.cols())))
                .map_or(f64::INFINITY, |d| d.frobenius_norm())
        };
        let recon = f.reconstruct().sub(&a).map_or(f64::INFINITY, |d| d.frobenius_norm());
        worst = worst.max(ortho(&f.u)).max(ortho(&f.v)).max(recon);
    }
    report.push("svd-orthonormality", worst < 1e-10, format!("max error {worst:.3e}"));

    // aggregation
    let pair = |b: &[f64], a: &[f64]| {
        Adapter::Lora(LoraPair {
            b: Matrix::new(2, 1, b.to_vec()).expect("2x1"),
            a: Matrix::new(1, 2, a.to_vec()).expect("1x2"),
            alpha: 1.0,
        })
    };
    let orth = vec![
        ClientUpdate::new(0, Method::FedIt, vec![pair(&[1.0, 0.0], &[1.0, 0.0])]),
        ClientUpdate::new(1, Method::FedIt, vec![pair(&[0.0, 1.0], &[0.0, 1.0])]),
    ];
    let d = agg_fedit(&orth).and_then(|res| divergence(&orth, &res)).unwrap_or(f64::NAN);
    report.push("fedit-inexactness", (d - 0.5).abs() < EXACT_TOL, format!("orthogonal rank-1 pair divergence {d}"));

    exactness_check(&mut report, "fedex-exactness", instances, seed, |m, n, r, c, s| {
        let ups = random_round(Method::FedExLora, m, n, r, c, s, false);
        divergence(&ups, &fedex_with_fault(&ups, fault)).unwrap_or(f64::NAN)
    });
    exactness_check(&mut report, "flora-exactness", instances, seed, |m, n, r, c, s| {
        let ups = random_round(Method::FLora, m, n, r, c, s, false);
        agg_flora(&ups, s).and_then(|res| divergence(&ups, &res)).unwrap_or(f64::NAN)
    });
    exactness_check(&mut report, "ffa-exactness", instances, seed, |m, n, r, c, s| {
        let ups = random_round(Method::FfaLora, m, n, r, c, s, false);
        agg_ffa(&ups).and_then(|res| divergence(&ups, &res)).unwrap_or(f64::NAN)
    });
    exactness_check(&mut report, "fedsb-exactness", instances, seed, |m, n, r, c, s| {
        let ups = random_round(Method::FedSb, m, n, r, c, s, false);
        agg_fedsb(&ups).and_then(|res| divergence(&ups, &res)).unwrap_or(f64::NAN)
    });
    exactness_check(&mut report, "fedsb-hetero-exactness", instances, seed, |m, n, r, c, s| {
        let ups = random_round(Method::FedSb, m, n, r, c, s, true);
        agg_fedsb_hetero(&ups).and_then(|res| divergence(&ups, &res)).unwrap_or(f64::NAN)
    });
    exactness_check(&mut report, "fedex-flora-equivalence", instances, seed, |m, n, r, c, s| {
        let ups = random_round(Method::FedExLora, m, n, r, c, s, false);
        let as_flora: Vec<ClientUpdate> = ups
            .iter()
            .map(|u| ClientUpdate {
                method: Method::FLora,
                ..u.clone()
            })
            .collect();
        let fedex = fedex_with_fault(&ups, fault);
        match agg_flora(&as_flora, s) {
            Ok(flora) => fedex.global_update[0]
                .sub(&flora.global_update[0])
                .map_or(f64::NAN, |d| d.frobenius_norm()),
            Err(_) => f64::NAN,
        }
    });

    // noise decompositions
    let mut rng = rng_from_seed(derive_seed(seed, "noise", 0));
    let (mut lora_err, mut min_second, mut sb_err, mut sb_zero) = (0.0_f64, f64::INFINITY, 0.0_f64, true);
    for k in 0..instances as u64 {
        let (m, n, r, _) = instance_shape(&mut rng);
        let s = |label| derive_seed(seed, label, k);
        let (b, a) = (gaussian_matrix(m, r, 1.0, s("b")), gaussian_matrix(r, n, 1.0, s("a")));
        let (xb, xa) = (gaussian_matrix(m, r, 0.3, s("xb")), gaussian_matrix(r, n, 0.3, s("xa")));
        let scale = 2.0;
        if let Ok(d) = noise_decompose_lora(&b, &a, &xb, &xa, scale) {
            let direct = b
                .add(&xb)
                .and_then(|bb| bb.matmul(&a.add(&xa)?))
                .and_then(|p| p.sub(&b.matmul(&a)?))
                .map(|x| x.scale(scale));
            lora_err = lora_err.max(direct.and_then(|x| x.sub(&d.total)).map_or(f64::INFINITY, |x| x.max_abs()));
            min_second = min_second.min(d.second_order.frobenius_norm());
        }
        let (fb, fa) = random_frames(m, n, r, s("frames"));
        let (core, xi) = (gaussian_matrix(r, r, 1.0, s("r")), gaussian_matrix(r, r, 0.3, s("xr")));
        if let Ok(d) = noise_decompose_sb(&fb, &fa, &xi) {
            sb_zero &= d.second_order.as_slice().iter().all(|v| v.to_bits() == 0);
            let direct = fb
                .matmul(&core.add(&xi).expect("same shape"))
                .and_then(|x| x.matmul(&fa))
                .and_then(|x| x.sub(&fb.matmul(&core)?.matmul(&fa)?));
            sb_err = sb_err.max(direct.and_then(|x| x.sub(&d.total)).map_or(f64::INFINITY, |x| x.max_abs()));
        }
    }
    report.push(
        "lora-noise-decomposition",
        lora_err < EXACT_TOL && min_second > 0.0,
        format!("max error {lora_err:.3e}, min second-order norm {min_second:.3e}"),
    );
    report.push(
        "sb-noise-linearity",
        sb_zero && sb_err < EXACT_TOL,
        format!("second order exactly zero: {sb_zero}, max error {sb_err:.3e}"),
    );

    // DP-SGD
    let grads: Vec<Vec<f64>> = (0..16)
        .map(|k| gaussian_matrix(1, 12, 0.2, derive_seed(seed, "grad", k)).into_vec())
        .collect();
    let plain = mean_gradient(&grads).expect("nonempty");
    let degenerate = PrivacyParams {
        clip_norm: f64::INFINITY,
        noise_multiplier: 0.0,
        delta: 1e-5,
        sample_rate: 0.1,
        steps: 1,
    };
    let same = dp_sgd_step(&grads, &degenerate, 1).is_ok_and(|g| g.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits()));
    report.push("dp-degenerate", same, "sigma 0, no clipping equals the plain mean bitwise");

    // accountant
    let mut worst: f64 = 0.0;
    for (q, sigma) in [(0.01, 1.0), (0.05, 0.8), (0.2, 2.0)] {
        for alpha in [2.0, 8.0, 32.0] {
            let a = rdp_sampled_gaussian(q, sigma, alpha);
            let b = rdp_sampled_gaussian_series(q, sigma, alpha);
            worst = worst.max((a - b).abs() / a.abs().max(1e-300));
        }
    }
    let closed = (rdp_sampled_gaussian(1.0, 1.5, 3.25) - 3.25 / 4.5).abs();
    report.push(
        "accountant-consistency",
        worst < 1e-8 && closed < 1e-14,
        format!("binomial vs series rel err {worst:.3e}, full-batch err {closed:.3e}"),
    );
    let mut ok = true;
    let mut detail = String::new();
    for target in [1.0, 3.0, 5.0, 7.5, 10.0] {
        match calibrate_sigma(target, 1e-5, 0.01, 1000).and_then(|s| Ok((s, accountant_epsilon(s, 0.01, 1000, 1e-5)?))) {
            Ok((s, e)) => {
                ok &= e <= target;
                detail.push_str(&format!("eps {target}: sigma {s:.4} "));
            }
            Err(e) => {
                ok = false;
                detail.push_str(&format!("eps {target}: {e} "));
            }
        }
    }
    report.push("calibration-roundtrip", ok, detail.trim_end().to_string());

    // communication
    let mut failures = Vec::new();
    for method in Method::ALL {
        let mut cfg = FederationConfig::linear(method, 6, 5, 2, 3, 2);
        cfg.task.teacher.samples = 48;
        cfg.batch_size = 8;
        if method == Method::FedSb {
            cfg.client_ranks = Some(vec![1, 2, 2]);
        }
        if method == Method::FedIt {
            cfg.privacy = Some(PrivacyConfig {
                clip_norm: 1.0,
                sigma: Some(1.0),
                epsilon: None,
                delta: 1e-5,
            });
        }
        match run_federation(&cfg) {
            Ok(out) if out.ledger.reconcile(&out.predicted).is_ok() => {}
            Ok(_) => failures.push(method.name().to_string()),
            Err(e) => failures.push(format!("{}: {e}", method.name())),
        }
    }
    report.push(
        "cost-reconciliation",
        failures.is_empty(),
        if failures.is_empty() { "measured equals predicted for all methods".into() } else { failures.join(", ") },
    );
    let toy = ArchCatalog::builtin("toy2site").expect("built-in");
    let costs: Vec<_> = [2, 5, 25, 100]
        .iter()
        .filter_map(|&c| cost_per_round(&toy, Method::FedSb, 2, c).ok())
        .map(|b| (b.upload_per_client, b.download_per_client))
        .collect();
    report.push(
        "fedsb-cost-client-independence",
        costs.len() == 4 && costs.windows(2).all(|w| w[0] == w[1]),
        format!("per-client (up, down) {:?}", costs.first()),
    );

    // serialization
    let ups = random_round(Method::FedSb, 5, 4, 3, 1, seed, false);
    let bytes = Message::from_adapters(Method::FedSb, &ups[0].adapters, Parts::All).encode();
    let back = Message::decode(&bytes).ok().and_then(|m| m.to_adapters(DEFAULT_ALPHA).ok());
    report.push("checkpoint-roundtrip", back.as_ref() == Some(&ups[0].adapters), format!("{} bytes", bytes.len()));

    report
}
