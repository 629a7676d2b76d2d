//! Pinned targets and tolerances for the acceptance run.
//!
//! The `acceptance` test target prints one line per check in the form
//! `PASS [n] name  detail` and exits non-zero if any line fails.

use std::fmt;

use fedsb::adapters::Method;

/// Published per-round communication in millions, compared at two decimals.
pub const LLAMA_FEDSB: [(u64, &str); 3] = [(120, "2.83"), (160, "5.02"), (200, "7.85")];

/// Published Mistral-7B column `(method, rank, millions)` at 25 clients.
pub const MISTRAL: [(Method, u64, &str); 7] = [
    (Method::FedIt, 32, "83.88"),
    (Method::FfaLora, 32, "41.94"),
    (Method::FedExLora, 32, "2097.34"),
    (Method::FLora, 32, "2097.34"),
    (Method::FedSb, 120, "3.22"),
    (Method::FedSb, 160, "5.73"),
    (Method::FedSb, 200, "8.96"),
];

/// Published Gemma-2 9B column, matched within [`GEMMA_REL_TOL`].
pub const GEMMA: [(Method, u64, f64); 7] = [
    (Method::FedIt, 32, 108.04),
    (Method::FfaLora, 32, 54.02),
    (Method::FedExLora, 32, 2701.12),
    (Method::FLora, 32, 2701.12),
    (Method::FedSb, 120, 4.23),
    (Method::FedSb, 160, 7.53),
    (Method::FedSb, 200, 11.76),
];

pub const COST_CLIENTS: u64 = 25;
pub const GEMMA_REL_TOL: f64 = 0.01;
pub const COST_BUDGET_SECS: f64 = 1.0;

pub const EXACT_INSTANCES: usize = 500;
pub const EXACT_TOL: f64 = 1e-12;
pub const FEDIT_ORTHOGONAL_DIVERGENCE: f64 = 0.5;
pub const EXACT_BUDGET_SECS: f64 = 30.0;
pub const DECOMPOSITION_BUDGET_SECS: f64 = 10.0;

pub const ACCOUNTANT_REL_TOL: f64 = 0.02;
pub const BUDGETS: [f64; 5] = [1.0, 3.0, 5.0, 7.5, 10.0];
pub const SQRT_T_RANGE: (f64, f64) = (1.8, 2.2);
pub const ACCOUNTANT_BUDGET_SECS: f64 = 60.0;

pub const FD_TOL: f64 = 1e-6;

pub const SANITY_LOSS: f64 = 1e-4;
pub const SANITY_ROUNDS: usize = 200;
pub const FULL_RANK_LOSS: f64 = 1e-6;
pub const NOISE_SEEDS: u64 = 10;

pub const INIT_SPAN_ANGLE: f64 = 0.1;

/// One reported check.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Line {
    pub fn new(criterion: u8, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            criterion,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let tag = if self.criterion == 0 { "[+]".to_string() } else { format!("[{}]", self.criterion) };
        write!(f, "{status} {tag} {:<40} {}", self.name, self.detail)
    }
}

/// `|got − want| ≤ tol · |want|`
pub fn within_rel(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs()
}
