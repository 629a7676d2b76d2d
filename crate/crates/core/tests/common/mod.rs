//! Reference implementations used as test oracles.
//!
//! Everything here is written from the mathematical definitions with plain
//! loops, nalgebra, or numerical integration. None of it calls into the code
//! under test except for data containers.

#![allow(dead_code)]

use fedsb::adapters::Adapter;
use fedsb::aggregation::ClientUpdate;
use fedsb::linalg::Matrix;

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect()).collect()
}

pub fn naive_matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, p) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn dense_scale(a: &Dense, s: f64) -> Dense {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

pub fn dense_add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn dense_cols(a: &Dense, cols: usize) -> Dense {
    a.iter().map(|r| r[..cols].to_vec()).collect()
}

pub fn dense_rows(a: &Dense, rows: usize) -> Dense {
    a[..rows].to_vec()
}

/// `max |a − b|` over entries.
pub fn max_diff(a: &Matrix, b: &Dense) -> f64 {
    assert_eq!(a.rows(), b.len());
    let mut worst: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        assert_eq!(a.cols(), row.len());
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((a.get(i, j) - v).abs());
        }
    }
    worst
}

pub fn frob_diff(a: &Matrix, b: &Dense) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, v)| (i, j, *v)))
        .map(|(i, j, v)| (a.get(i, j) - v).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `ΔW` of one adapter from raw factors.
pub fn oracle_update(adapter: &Adapter) -> Dense {
    match adapter {
        Adapter::Lora(p) | Adapter::FrozenA(p) => {
            let r = p.a.rows() as f64;
            dense_scale(&naive_matmul(&to_dense(&p.b), &to_dense(&p.a)), p.alpha / r)
        }
        Adapter::Sb(t) => {
            let k = t.r.rows();
            let b = dense_cols(&to_dense(&t.b), k);
            let a = dense_rows(&to_dense(&t.a), k);
            naive_matmul(&naive_matmul(&b, &to_dense(&t.r)), &a)
        }
    }
}

/// Weighted mean of client updates, one matrix per site.
pub fn oracle_mean(updates: &[ClientUpdate]) -> Vec<Dense> {
    let sites = updates[0].adapters.len();
    let total: f64 = updates.iter().map(|u| u.weight).sum();
    (0..sites)
        .map(|s| {
            let mut acc: Option<Dense> = None;
            for u in updates {
                let d = dense_scale(&oracle_update(&u.adapters[s]), u.weight / total);
                acc = Some(match acc {
                    None => d,
                    Some(a) => dense_add(&a, &d),
                });
            }
            acc.expect("at least one client")
        })
        .collect()
}

pub fn to_nalgebra(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j))
}

/// Singular values from nalgebra, sorted non-increasing.
pub fn nalgebra_singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_nalgebra(m).svd(false, false).singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// `‖M − best rank-r approximation‖_F` via nalgebra.
pub fn nalgebra_truncation_error(m: &Matrix, r: usize) -> f64 {
    let s = nalgebra_singular_values(m);
    s[r.min(s.len())..].iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Subsampled-Gaussian Rényi divergence `D_α(μ_mix ‖ μ₀)` by Simpson quadrature,
/// with `μ₀ = N(0, σ²)`, `μ₁ = N(1, σ²)`, `μ_mix = (1−q)μ₀ + qμ₁`.
pub fn rdp_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    let s2 = sigma * sigma;
    // log of μ₀(x) · ((1−q) + q·μ₁(x)/μ₀(x))^α
    let log_integrand = |x: f64| {
        let log_mu0 = -x * x / (2.0 * s2) - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        let log_ratio = (2.0 * x - 1.0) / (2.0 * s2);
        let log_mix = if q == 1.0 {
            log_ratio
        } else {
            // log((1−q) + q e^{log_ratio}) computed stably
            let (a, b) = ((1.0 - q).ln(), q.ln() + log_ratio);
            let hi = a.max(b);
            hi + ((a - hi).exp() + (b - hi).exp()).ln()
        };
        log_mu0 + alpha * log_mix
    };
    let lo = -40.0 * sigma - 2.0;
    let hi = alpha + 40.0 * sigma + 2.0;
    let h = sigma / 50.0;
    let n = (((hi - lo) / h).ceil() as usize).max(2) & !1usize;
    let h = (hi - lo) / n as f64;
    let logs: Vec<f64> = (0..=n).map(|i| log_integrand(lo + i as f64 * h)).collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, l) in logs.iter().enumerate() {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sum += w * (l - peak).exp();
    }
    let log_integral = peak + (sum * h / 3.0).ln();
    log_integral / (alpha - 1.0)
}

/// Orders used by the oracle conversion: 1.25, 1.5, …, 64.
pub fn oracle_orders() -> Vec<f64> {
    (5..=256).map(|k| k as f64 * 0.25).collect()
}

/// `ε = min_α T·RDP(α) + ln(1/δ)/(α−1)` over the oracle orders.
pub fn epsilon_quadrature(sigma: f64, q: f64, steps: u64, delta: f64) -> f64 {
    oracle_orders()
        .into_iter()
        .map(|a| steps as f64 * rdp_quadrature(q, sigma, a) + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// Central finite-difference derivative of `f` with step `h`.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
