//! Rényi DP accountant for the sampled Gaussian mechanism.
//!
//! `γ(α)` is the order-`α` RDP of one step with sampling rate `q` and noise
//! multiplier `σ`. Integer orders use the binomial expansion; fractional orders
//! use the two-sided series with complementary error functions. Composition
//! over `T` steps is additive and the conversion to `(ε, δ)` is
//! `ε = min_α [T·γ(α) + log(1/δ)/(α − 1)]` over [`RDP_ORDERS`].

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::PrivacyError;

const ORDER_COUNT: usize = 252;

/// Rényi orders `1.25, 1.5, …, 64`.
pub const RDP_ORDERS: [f64; ORDER_COUNT] = {
    let mut out = [0.0; ORDER_COUNT];
    let mut i = 0;
    while i < ORDER_COUNT {
        out[i] = 1.25 + 0.25 * i as f64;
        i += 1;
    }
    out
};

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(eᵃ − eᵇ)` for `a ≥ b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    // exp_m1 keeps precision when a ≈ b
    (a - b).exp_m1().ln() + b
}

/// `log(erfc(x))` with an asymptotic expansion where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        let v = erfc(x);
        if v > 0.0 {
            return v.ln();
        }
    }
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * PI.ln() + series.ln()
}

fn ln_binom_int(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = i as f64;
        let term = ln_binom_int(alpha, i)
            + fi * q.ln()
            + (alpha - i) as f64 * (1.0 - q).ln()
            + (fi * fi - fi) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let s2 = 2.0 * sigma * sigma;
    // generalized binomial coefficient tracked as sign and log-magnitude
    let (mut log_coef, mut positive) = (0.0_f64, true);
    let mut i = 0u32;
    loop {
        let fi = f64::from(i);
        let j = alpha - fi;
        let log_t0 = log_coef + fi * q.ln() + j * (1.0 - q).ln();
        let log_t1 = log_coef + j * q.ln() + fi * (1.0 - q).ln();
        let log_e0 = -LN_2 + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let log_e1 = -LN_2 + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let log_s0 = log_t0 + (fi * fi - fi) / s2 + log_e0;
        let log_s1 = log_t1 + (j * j - j) / s2 + log_e1;
        if positive {
            a0 = log_add(a0, log_s0);
            a1 = log_add(a1, log_s1);
        } else {
            a0 = log_sub(a0, log_s0);
            a1 = log_sub(a1, log_s1);
        }
        let ratio = (alpha - fi) / (fi + 1.0);
        if ratio == 0.0 || i > 10_000 || log_s0.max(log_s1) < -30.0 {
            break;
        }
        log_coef += ratio.abs().ln();
        if ratio < 0.0 {
            positive = !positive;
        }
        i += 1;
    }
    log_add(a0, a1)
}

/// Order-`α` RDP of one sampled Gaussian step.
pub fn rdp_sampled_gaussian(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    log_a / (alpha - 1.0)
}

/// Only the fractional-order series, exposed for cross-checking the binomial path.
pub fn rdp_sampled_gaussian_series(q: f64, sigma: f64, alpha: f64) -> f64 {
    log_a_frac(q, sigma, alpha) / (alpha - 1.0)
}

fn epsilon_from_rdp(rdp: &[f64], delta: f64) -> (f64, f64) {
    let log_inv_delta = (1.0 / delta).ln();
    RDP_ORDERS
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| (r + log_inv_delta / (a - 1.0), a))
        .fold((f64::INFINITY, f64::NAN), |best, cur| if cur.0 < best.0 { cur } else { best })
}

fn check(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<(), PrivacyError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::Invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(PrivacyError::Invalid(format!("sample rate must lie in (0, 1], got {q}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) || (steps > 0 && sigma == 0.0) {
        return Err(PrivacyError::Invalid(format!("noise multiplier must be positive, got {sigma}")));
    }
    Ok(())
}

/// `ε` after `steps` sampled Gaussian steps.
pub fn accountant_epsilon(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<f64, PrivacyError> {
    check(sigma, q, steps, delta)?;
    if steps == 0 {
        return Ok(0.0);
    }
    let rdp: Vec<f64> = RDP_ORDERS
        .iter()
        .map(|&a| steps as f64 * rdp_sampled_gaussian(q, sigma, a))
        .collect();
    Ok(epsilon_from_rdp(&rdp, delta).0.max(0.0))
}

const SIGMA_TOL: f64 = 1e-4;
const SIGMA_MAX: f64 = 1e4;

/// Smallest `σ` (to within 1e-4) whose `ε` does not exceed `target_eps`.
pub fn calibrate_sigma(target_eps: f64, delta: f64, q: f64, steps: u64) -> Result<f64, PrivacyError> {
    if !(target_eps > 0.0 && target_eps.is_finite()) {
        return Err(PrivacyError::Invalid(format!("target epsilon must be positive, got {target_eps}")));
    }
    check(1.0, q, steps, delta)?;
    if steps == 0 {
        return Ok(0.0);
    }
    let eps = |s: f64| accountant_epsilon(s, q, steps, delta);
    let mut hi = 1.0;
    while eps(hi)? > target_eps {
        hi *= 2.0;
        if hi > SIGMA_MAX {
            return Err(PrivacyError::Unreachable {
                target: target_eps,
                best: eps(SIGMA_MAX)?,
                sigma: SIGMA_MAX,
            });
        }
    }
    let mut lo = 0.0;
    while hi - lo > SIGMA_TOL {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Sequential privacy ledger composing heterogeneous steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RdpAccountant {
    rdp: Vec<f64>,
    steps: u64,
    last: Option<(f64, f64)>,
}

/// Audit record of an accountant state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantDump {
    pub sigma: Option<f64>,
    pub sample_rate: Option<f64>,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub best_order: Option<f64>,
    pub orders: Vec<OrderEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEntry {
    pub alpha: f64,
    pub rdp: f64,
    pub epsilon: f64,
}

impl RdpAccountant {
    pub fn new() -> Self {
        Self {
            rdp: vec![0.0; ORDER_COUNT],
            steps: 0,
            last: None,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Records `steps` steps at `(σ, q)`.
    pub fn compose(&mut self, sigma: f64, q: f64, steps: u64) -> Result<(), PrivacyError> {
        check(sigma, q, steps, 0.5)?;
        if self.rdp.is_empty() {
            self.rdp = vec![0.0; ORDER_COUNT];
        }
        for (acc, &a) in self.rdp.iter_mut().zip(RDP_ORDERS.iter()) {
            *acc += steps as f64 * rdp_sampled_gaussian(q, sigma, a);
        }
        self.steps += steps;
        self.last = Some((sigma, q));
        Ok(())
    }

    pub fn epsilon(&self, delta: f64) -> Result<f64, PrivacyError> {
        check(1.0, 0.5, 0, delta)?;
        if self.steps == 0 {
            return Ok(0.0);
        }
        Ok(epsilon_from_rdp(&self.rdp, delta).0.max(0.0))
    }

    pub fn dump(&self, delta: f64) -> Result<AccountantDump, PrivacyError> {
        let epsilon = self.epsilon(delta)?;
        let log_inv_delta = (1.0 / delta).ln();
        let orders = if self.steps == 0 {
            Vec::new()
        } else {
            RDP_ORDERS
                .iter()
                .zip(&self.rdp)
                .map(|(&alpha, &rdp)| OrderEntry {
                    alpha,
                    rdp,
                    epsilon: rdp + log_inv_delta / (alpha - 1.0),
                })
                .collect()
        };
        let best_order = (self.steps > 0).then(|| epsilon_from_rdp(&self.rdp, delta).1);
        Ok(AccountantDump {
            sigma: self.last.map(|l| l.0),
            sample_rate: self.last.map(|l| l.1),
            steps: self.steps,
            delta,
            epsilon,
            best_order,
            orders,
        })
    }
}
