//! Adapter parameterizations and their initialization.
//!
//! * [`LoraPair`]: `ΔW = (α/r)·B·A` with `B ∈ ℝ^{m×r}`, `A ∈ ℝ^{r×n}`; both trained
//!   (FedIT, FedEx-LoRA, FLoRA) or with `A` frozen (FFA-LoRA).
//! * [`SbTriple`]: `ΔW = B·R·A` with `B`, `A` frozen orthonormal frames and only
//!   the `r×r` matrix `R` trained (Fed-SB). No `α/r` scaling is applied.

pub mod wire;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gaussian_matrix, truncated_svd, LinalgError, Matrix};
use crate::model::{per_sample_gradients, ArchShape, Batch, GradientSet, ModelError, Site};

/// Default LoRA scaling numerator for the LoRA-based baselines.
pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("gradient shape {got:?} does not match site shape {expected:?}")]
    GradientShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("initialization batch is empty")]
    EmptyInitBatch,
    #[error("expected {expected} per-site ranks, got {got}")]
    RankCount { expected: usize, got: usize },
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Federated fine-tuning strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fedit")]
    FedIt,
    #[serde(rename = "fedex-lora")]
    FedExLora,
    #[serde(rename = "flora")]
    FLora,
    #[serde(rename = "ffa-lora")]
    FfaLora,
    #[serde(rename = "fed-sb")]
    FedSb,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FedIt,
        Method::FedExLora,
        Method::FLora,
        Method::FfaLora,
        Method::FedSb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedIt => "fedit",
            Method::FedExLora => "fedex-lora",
            Method::FLora => "flora",
            Method::FfaLora => "ffa-lora",
            Method::FedSb => "fed-sb",
        }
    }

    /// Display label used in cost tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::FedIt => "FedIT",
            Method::FedExLora => "FedEx-LoRA",
            Method::FLora => "FLoRA",
            Method::FfaLora => "FFA-LoRA",
            Method::FedSb => "Fed-SB",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Method::FedIt => 1,
            Method::FedExLora => 2,
            Method::FLora => 3,
            Method::FfaLora => 4,
            Method::FedSb => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.tag() == tag)
    }

    /// Whether server aggregation reproduces the mean of client updates.
    pub fn is_exact(self) -> bool {
        self != Method::FedIt
    }

    pub fn uses_lora_pair(self) -> bool {
        self != Method::FedSb
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = AdapterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "fedit" => Ok(Method::FedIt),
            "fedex" | "fedexlora" => Ok(Method::FedExLora),
            "flora" => Ok(Method::FLora),
            "ffa" | "ffalora" => Ok(Method::FfaLora),
            "fedsb" | "sb" => Ok(Method::FedSb),
            _ => Err(AdapterError::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `m × r`
    pub b: Matrix,
    /// `r × n`
    pub a: Matrix,
    pub alpha: f64,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn effective_update(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("lora factors have consistent shapes")
            .scale(self.scaling())
    }
}

/// Frozen frames `B`, `A` with trainable core `R`.
///
/// `R` may be smaller than the frame rank (rank-heterogeneous clients); it then
/// acts on the leading `R.rows()` basis directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SbTriple {
    /// `m × r_max`, orthonormal columns.
    pub b: Matrix,
    /// `r × r`, `r ≤ r_max`.
    pub r: Matrix,
    /// `r_max × n`, orthonormal rows.
    pub a: Matrix,
}

impl SbTriple {
    pub fn rank(&self) -> usize {
        self.r.rows()
    }

    pub fn basis_rank(&self) -> usize {
        self.b.cols()
    }

    /// Leading `rank()` columns of `B`.
    pub fn active_b(&self) -> Matrix {
        self.b.submatrix(0..self.b.rows(), 0..self.rank())
    }

    /// Leading `rank()` rows of `A`.
    pub fn active_a(&self) -> Matrix {
        self.a.submatrix(0..self.rank(), 0..self.a.cols())
    }

    /// The same frames with the core truncated to its leading `rank × rank` block.
    pub fn with_rank(&self, rank: usize) -> Result<SbTriple, AdapterError> {
        if rank == 0 || rank > self.basis_rank() {
            return Err(AdapterError::RankOutOfRange {
                rank,
                max: self.basis_rank(),
            });
        }
        let core = if rank <= self.rank() {
            self.r.submatrix(0..rank, 0..rank)
        } else {
            self.r.padded(rank, rank)?
        };
        Ok(SbTriple {
            b: self.b.clone(),
            r: core,
            a: self.a.clone(),
        })
    }

    pub fn effective_update(&self) -> Matrix {
        if self.rank() == self.basis_rank() {
            self.b.matmul(&self.r).and_then(|br| br.matmul(&self.a))
        } else {
            self.active_b()
                .matmul(&self.r)
                .and_then(|br| br.matmul(&self.active_a()))
        }
        .expect("sb factors have consistent shapes")
    }
}

/// Per-site adapter state.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    /// Both factors trainable.
    Lora(LoraPair),
    /// Only `B` trainable; `A` frozen and shared.
    FrozenA(LoraPair),
    /// Only `R` trainable.
    Sb(SbTriple),
}

/// Gradient restricted to the trainable parts, in [`Adapter::trainable_parts`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableGrad(pub Vec<Matrix>);

impl TrainableGrad {
    pub fn len(&self) -> usize {
        self.0.iter().map(Matrix::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Adapter {
    pub fn site_shape(&self) -> (usize, usize) {
        match self {
            Adapter::Lora(p) | Adapter::FrozenA(p) => (p.b.rows(), p.a.cols()),
            Adapter::Sb(t) => (t.b.rows(), t.a.cols()),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Adapter::Lora(p) | Adapter::FrozenA(p) => p.rank(),
            Adapter::Sb(t) => t.rank(),
        }
    }

    pub fn effective_update(&self) -> Matrix {
        match self {
            Adapter::Lora(p) | Adapter::FrozenA(p) => p.effective_update(),
            Adapter::Sb(t) => t.effective_update(),
        }
    }

    pub fn trainable_parts(&self) -> Vec<&Matrix> {
        match self {
            Adapter::Lora(p) => vec![&p.b, &p.a],
            Adapter::FrozenA(p) => vec![&p.b],
            Adapter::Sb(t) => vec![&t.r],
        }
    }

    fn trainable_parts_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Adapter::Lora(p) => vec![&mut p.b, &mut p.a],
            Adapter::FrozenA(p) => vec![&mut p.b],
            Adapter::Sb(t) => vec![&mut t.r],
        }
    }

    pub fn frozen_parts(&self) -> Vec<&Matrix> {
        match self {
            Adapter::Lora(_) => vec![],
            Adapter::FrozenA(p) => vec![&p.a],
            Adapter::Sb(t) => vec![&t.b, &t.a],
        }
    }

    pub fn trainable_len(&self) -> usize {
        self.trainable_parts().iter().map(|m| m.len()).sum()
    }

    /// Chain rule from `∂loss/∂ΔW` to the trainable parts.
    pub fn trainable_gradient(&self, grad: &Matrix) -> Result<TrainableGrad, AdapterError> {
        let expected = self.site_shape();
        if grad.shape() != expected {
            return Err(AdapterError::GradientShape {
                expected,
                got: grad.shape(),
            });
        }
        Ok(match self {
            Adapter::Lora(p) => {
                let s = p.scaling();
                TrainableGrad(vec![
                    grad.matmul(&p.a.transpose())?.scale(s),
                    p.b.transpose().matmul(grad)?.scale(s),
                ])
            }
            Adapter::FrozenA(p) => TrainableGrad(vec![grad.matmul(&p.a.transpose())?.scale(p.scaling())]),
            Adapter::Sb(t) => {
                let dr = t
                    .active_b()
                    .transpose()
                    .matmul(grad)?
                    .matmul(&t.active_a().transpose())?;
                TrainableGrad(vec![dr])
            }
        })
    }

    /// `θ ← θ − lr · step` over the trainable parts, `step` flattened in part order.
    pub fn apply_step(&mut self, lr: f64, step: &[f64]) {
        assert_eq!(step.len(), self.trainable_len(), "step length mismatch");
        let mut offset = 0;
        for part in self.trainable_parts_mut() {
            let n = part.len();
            for (p, g) in part.as_mut_slice().iter_mut().zip(&step[offset..offset + n]) {
                *p -= lr * g;
            }
            offset += n;
        }
    }
}

/// Total trainable coordinates across sites.
pub fn trainable_len(adapters: &[Adapter]) -> usize {
    adapters.iter().map(Adapter::trainable_len).sum()
}

/// Per-site effective updates.
pub fn effective_updates(adapters: &[Adapter]) -> Vec<Matrix> {
    adapters.iter().map(Adapter::effective_update).collect()
}

/// Maps a per-site full gradient to one flat vector over all trainable coordinates.
pub fn flat_trainable_gradient(adapters: &[Adapter], grads: &GradientSet) -> Result<Vec<f64>, AdapterError> {
    let mut out = Vec::with_capacity(trainable_len(adapters));
    for (adapter, g) in adapters.iter().zip(&grads.0) {
        for part in adapter.trainable_gradient(g)?.0 {
            out.extend_from_slice(part.as_slice());
        }
    }
    Ok(out)
}

/// Applies a flat step produced against [`flat_trainable_gradient`]'s layout.
pub fn apply_flat_step(adapters: &mut [Adapter], lr: f64, step: &[f64]) {
    assert_eq!(step.len(), trainable_len(adapters), "step length mismatch");
    let mut offset = 0;
    for a in adapters {
        let n = a.trainable_len();
        a.apply_step(lr, &step[offset..offset + n]);
        offset += n;
    }
}

fn check_rank(site: &Site, r: usize) -> Result<(), AdapterError> {
    let max = site.m.min(site.n);
    if r == 0 || r > max {
        return Err(AdapterError::RankOutOfRange { rank: r, max });
    }
    Ok(())
}

/// Standard LoRA start: `A ~ N(0, 1/r)`, `B = 0`.
pub fn init_lora(site: &Site, r: usize, alpha: f64, seed: u64) -> Result<LoraPair, AdapterError> {
    check_rank(site, r)?;
    Ok(LoraPair {
        b: Matrix::zeros(site.m, r),
        a: gaussian_matrix(r, site.n, 1.0 / (r as f64).sqrt(), seed),
        alpha,
    })
}

/// Starting value of `R` for Fed-SB.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RInit {
    /// Start exactly at the pre-trained model.
    #[default]
    Zero,
    /// `R = diag(S_r)`: start after the estimated first step.
    SigmaStep,
}

/// Fed-SB frames from an estimated update: `B = U_r`, `A = V_rᵀ`.
pub fn sb_from_update(update: &Matrix, r: usize, policy: RInit) -> Result<SbTriple, AdapterError> {
    let max = update.rows().min(update.cols());
    if r == 0 || r > max {
        return Err(AdapterError::RankOutOfRange { rank: r, max });
    }
    let svd = truncated_svd(update, r)?;
    let core = match policy {
        RInit::Zero => Matrix::zeros(r, r),
        RInit::SigmaStep => Matrix::diag(r, r, &svd.s),
    };
    Ok(SbTriple {
        b: svd.u,
        r: core,
        a: svd.v.transpose(),
    })
}

/// Estimated first full fine-tuning step `−lr · mean ∇W` at `ΔW = 0`, per site.
pub fn estimated_first_step(
    shape: &ArchShape,
    base: &[Matrix],
    init_batch: &Batch,
    lr: f64,
) -> Result<Vec<Matrix>, AdapterError> {
    if init_batch.is_empty() {
        return Err(AdapterError::EmptyInitBatch);
    }
    let per_sample = per_sample_gradients(shape, base, &shape.zero_updates(), init_batch)?;
    let mean = GradientSet::mean(&per_sample)?;
    Ok(mean.0.into_iter().map(|g| g.scale(-lr)).collect())
}

/// Fed-SB initialization for every site of `shape` with per-site ranks.
pub fn init_sb(
    shape: &ArchShape,
    base: &[Matrix],
    init_batch: &Batch,
    lr: f64,
    ranks: &[usize],
    policy: RInit,
) -> Result<Vec<SbTriple>, AdapterError> {
    if ranks.len() != shape.sites().len() {
        return Err(AdapterError::RankCount {
            expected: shape.sites().len(),
            got: ranks.len(),
        });
    }
    for (site, &r) in shape.sites().iter().zip(ranks) {
        check_rank(site, r)?;
    }
    let steps = estimated_first_step(shape, base, init_batch, lr)?;
    steps
        .iter()
        .zip(ranks)
        .map(|(g, &r)| sb_from_update(g, r, policy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;

    fn site(m: usize, n: usize) -> Site {
        Site { name: "w".into(), m, n }
    }

    #[test]
    fn sb_zero_core_is_zero_update() {
        let t = sb_from_update(&gaussian_matrix(5, 4, 1.0, 1), 3, RInit::Zero).unwrap();
        assert_eq!(t.effective_update(), Matrix::zeros(5, 4));
    }

    #[test]
    fn sb_identity_frames_embed_core() {
        let r = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let t = SbTriple {
            b: Matrix::identity(2).padded(4, 2).unwrap(),
            r: r.clone(),
            a: Matrix::identity(2).padded(2, 3).unwrap(),
        };
        assert_eq!(t.effective_update(), r.padded(4, 3).unwrap());
    }

    #[test]
    fn lora_outer_product() {
        let p = LoraPair {
            b: Matrix::from_rows(&[&[1.0], &[2.0]]).unwrap(),
            a: Matrix::from_rows(&[&[3.0, 4.0]]).unwrap(),
            alpha: 1.0,
        };
        assert_eq!(
            p.effective_update(),
            Matrix::from_rows(&[&[3.0, 4.0], &[6.0, 8.0]]).unwrap()
        );
    }

    #[test]
    fn sb_gradient_of_projected_matrix_is_core() {
        let t = sb_from_update(&gaussian_matrix(6, 5, 1.0, 2), 3, RInit::Zero).unwrap();
        let m = gaussian_matrix(3, 3, 1.0, 3);
        let g = t.b.matmul(&m).unwrap().matmul(&t.a).unwrap();
        let dr = Adapter::Sb(t).trainable_gradient(&g).unwrap();
        assert!(dr.0[0].sub(&m).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn ffa_gradient_has_no_a_part() {
        let p = init_lora(&site(4, 3), 2, 16.0, 1).unwrap();
        let g = Adapter::FrozenA(p).trainable_gradient(&gaussian_matrix(4, 3, 1.0, 5)).unwrap();
        assert_eq!(g.0.len(), 1);
        assert_eq!(g.0[0].shape(), (4, 2));
    }

    #[test]
    fn gradient_shape_mismatch() {
        let p = init_lora(&site(4, 3), 2, 16.0, 1).unwrap();
        assert!(matches!(
            Adapter::Lora(p).trainable_gradient(&Matrix::zeros(3, 3)),
            Err(AdapterError::GradientShape { .. })
        ));
    }

    #[test]
    fn lora_init_properties() {
        let p = init_lora(&site(64, 64), 8, 16.0, 42).unwrap();
        assert_eq!(p.effective_update(), Matrix::zeros(64, 64));
        assert!(p.a.bit_eq(&init_lora(&site(64, 64), 8, 16.0, 42).unwrap().a));
        assert!(init_lora(&site(4, 3), 4, 16.0, 1).is_err());
        assert!(init_lora(&site(4, 3), 0, 16.0, 1).is_err());
    }

    #[test]
    fn lora_init_variance() {
        // A ~ N(0, 1/r): sample variance within 10%.
        let r = 64;
        let p = init_lora(&site(64, 64), r, 16.0, 7).unwrap();
        let n = p.a.len() as f64;
        let var = p.a.as_slice().iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var * r as f64 - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn sb_frames_are_orthonormal_and_rank_bounded() {
        let t = sb_from_update(&gaussian_matrix(7, 6, 1.0, 8), 3, RInit::SigmaStep).unwrap();
        let btb = t.b.transpose().matmul(&t.b).unwrap();
        let aat = t.a.matmul(&t.a.transpose()).unwrap();
        assert!(btb.sub(&Matrix::identity(3)).unwrap().frobenius_norm() < 1e-8);
        assert!(aat.sub(&Matrix::identity(3)).unwrap().frobenius_norm() < 1e-8);
        let s = svd(&t.effective_update()).unwrap().s;
        assert!(s[3] < 1e-10);
    }

    #[test]
    fn sigma_step_reproduces_truncated_update() {
        let g = gaussian_matrix(5, 5, 1.0, 4);
        let t = sb_from_update(&g, 5, RInit::SigmaStep).unwrap();
        assert!(t.effective_update().sub(&g).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn heterogeneous_view_uses_leading_block() {
        let full = sb_from_update(&gaussian_matrix(6, 6, 1.0, 4), 4, RInit::SigmaStep).unwrap();
        let small = full.with_rank(2).unwrap();
        let padded = SbTriple {
            r: small.r.padded(4, 4).unwrap(),
            ..full.clone()
        };
        assert!(small.effective_update().sub(&padded.effective_update()).unwrap().max_abs() < 1e-12);
        assert!(full.with_rank(5).is_err());
    }

    #[test]
    fn init_errors() {
        let shape = ArchShape::linear(3, 2, crate::model::LossKind::Squared).unwrap();
        let base = shape.zero_updates();
        let empty = Batch::new(Matrix::zeros(0, 3), Matrix::zeros(0, 2)).unwrap();
        assert_eq!(
            init_sb(&shape, &base, &empty, 0.1, &[1], RInit::Zero),
            Err(AdapterError::EmptyInitBatch)
        );
        let batch = Batch::new(Matrix::zeros(1, 3), Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(
            init_sb(&shape, &base, &batch, 0.1, &[3], RInit::Zero),
            Err(AdapterError::RankOutOfRange { rank: 3, max: 2 })
        ));
    }

    #[test]
    fn apply_step_touches_only_trainable_parts() {
        let t = sb_from_update(&gaussian_matrix(4, 4, 1.0, 1), 2, RInit::Zero).unwrap();
        let mut a = Adapter::Sb(t.clone());
        a.apply_step(0.5, &[1.0, 2.0, 3.0, 4.0]);
        if let Adapter::Sb(after) = &a {
            assert!(after.b.bit_eq(&t.b) && after.a.bit_eq(&t.a));
            assert_eq!(after.r.as_slice(), &[-0.5, -1.0, -1.5, -2.0]);
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("fed-sb".parse::<Method>().unwrap(), Method::FedSb);
        assert_eq!("FedEx".parse::<Method>().unwrap(), Method::FedExLora);
        assert_eq!("ffa-lora".parse::<Method>().unwrap(), Method::FfaLora);
        assert!("lora-xs".parse::<Method>().is_err());
        for m in Method::ALL {
            assert_eq!(Method::from_tag(m.tag()), Some(m));
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
