//! Splitting the perturbation of a private adapter into noise orders.
//!
//! For LoRA, privatizing both factors gives
//! `s(B+ξ_B)(A+ξ_A) − sBA = s(ξ_B A + B ξ_A) + s ξ_B ξ_A`, where the last term
//! is a product of two noise matrices. For the SB triple the update is linear
//! in the trained core, so `B(R+ξ_R)A − BRA = B ξ_R A` has no second-order term.

use crate::linalg::{LinalgError, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDecomposition {
    pub first_order: Matrix,
    pub second_order: Matrix,
    /// `first_order + second_order`
    pub total: Matrix,
}

pub fn noise_decompose_lora(
    b: &Matrix,
    a: &Matrix,
    xi_b: &Matrix,
    xi_a: &Matrix,
    scaling: f64,
) -> Result<NoiseDecomposition, LinalgError> {
    let first = xi_b.matmul(a)?.add(&b.matmul(xi_a)?)?.scale(scaling);
    let second = xi_b.matmul(xi_a)?.scale(scaling);
    let total = first.add(&second)?;
    Ok(NoiseDecomposition {
        first_order: first,
        second_order: second,
        total,
    })
}

pub fn noise_decompose_sb(b: &Matrix, a: &Matrix, xi_r: &Matrix) -> Result<NoiseDecomposition, LinalgError> {
    let first = b.matmul(xi_r)?.matmul(a)?;
    let second = Matrix::zeros(first.rows(), first.cols());
    let total = first.add(&second)?;
    Ok(NoiseDecomposition {
        first_order: first,
        second_order: second,
        total,
    })
}
