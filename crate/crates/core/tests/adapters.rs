mod common;

use common::*;
use fedsb::adapters::wire::{Message, Parts};
use fedsb::adapters::{
    apply_flat_step, effective_updates, flat_trainable_gradient, init_lora, init_sb, Adapter, LoraPair, Method, RInit,
    SbTriple,
};
use fedsb::linalg::{gaussian_matrix, principal_angles, svd, Matrix};
use fedsb::model::{batch_gradient, forward_loss, make_teacher_task, ArchShape, LossKind, Site, TeacherSpec};
use proptest::prelude::*;

fn site(m: usize, n: usize) -> Site {
    Site { name: "w".into(), m, n }
}

fn orthonormal_frames(m: usize, n: usize, r: usize, seed: u64) -> (Matrix, Matrix) {
    let f = svd(&gaussian_matrix(m, n, 1.0, seed)).unwrap();
    (f.u.submatrix(0..m, 0..r), f.v.submatrix(0..n, 0..r).transpose())
}

#[test]
fn effective_update_hand_cases() {
    let lora = LoraPair {
        b: Matrix::from_rows(&[&[1.0], &[2.0]]).unwrap(),
        a: Matrix::from_rows(&[&[3.0, 4.0]]).unwrap(),
        alpha: 1.0,
    };
    assert_eq!(lora.effective_update(), Matrix::from_rows(&[&[3.0, 4.0], &[6.0, 8.0]]).unwrap());

    let eye = |m: usize, r: usize| Matrix::from_fn(m, r, |i, j| if i == j { 1.0 } else { 0.0 });
    let core = gaussian_matrix(2, 2, 1.0, 3);
    let sb = SbTriple { b: eye(4, 2), r: core.clone(), a: eye(3, 2).transpose() };
    let upd = sb.effective_update();
    assert!(upd.submatrix(0..2, 0..2).bit_eq(&core));
    assert_eq!(upd.frobenius_norm(), core.frobenius_norm());
    let zero = SbTriple { r: Matrix::zeros(2, 2), ..sb };
    assert_eq!(zero.effective_update(), Matrix::zeros(4, 3));
}

#[test]
fn sb_gradient_is_orthonormal_projection() {
    let (b, a) = orthonormal_frames(7, 5, 3, 11);
    let m = gaussian_matrix(3, 3, 1.0, 12);
    let g = b.matmul(&m).unwrap().matmul(&a).unwrap();
    let sb = Adapter::Sb(SbTriple { b, r: Matrix::zeros(3, 3), a });
    let parts = sb.trainable_gradient(&g).unwrap().0;
    assert_eq!(parts.len(), 1);
    assert!(parts[0].sub(&m).unwrap().max_abs() < 1e-12);
}

#[test]
fn ffa_gradient_has_no_a_part() {
    let pair = init_lora(&site(4, 3), 2, 16.0, 1).unwrap();
    let ffa = Adapter::FrozenA(pair.clone());
    let g = ffa.trainable_gradient(&gaussian_matrix(4, 3, 1.0, 2)).unwrap();
    assert_eq!(g.0.len(), 1);
    assert_eq!(g.0[0].shape(), (4, 2));
    assert_eq!(Adapter::Lora(pair).trainable_gradient(&gaussian_matrix(4, 3, 1.0, 2)).unwrap().0.len(), 2);
}

#[test]
fn lora_init_contract() {
    let p = init_lora(&site(64, 64), 8, 16.0, 5).unwrap();
    assert_eq!(p.effective_update(), Matrix::zeros(64, 64));
    assert!(p.a.bit_eq(&init_lora(&site(64, 64), 8, 16.0, 5).unwrap().a));
    let big = init_lora(&site(64, 64), 64, 16.0, 6).unwrap();
    let n = big.a.len() as f64;
    let mean = big.a.as_slice().iter().sum::<f64>() / n;
    let var = big.a.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var * 64.0 - 1.0).abs() < 0.1, "variance {var}");
    assert!(init_lora(&site(4, 3), 0, 16.0, 1).is_err());
    assert!(init_lora(&site(4, 3), 4, 16.0, 1).is_err());
}

/// Max |FD − analytic| over every trainable coordinate of every site.
fn adapter_fd_error(shape: &ArchShape, adapters: &[Adapter], seed: u64) -> f64 {
    let task = make_teacher_task(shape, &TeacherSpec { samples: 6, ..TeacherSpec::default() }, seed).unwrap();
    let loss_at = |ad: &[Adapter]| forward_loss(shape, &task.base, &effective_updates(ad), &task.data).unwrap();
    let grads = batch_gradient(shape, &task.base, &effective_updates(adapters), &task.data).unwrap();
    let analytic = flat_trainable_gradient(adapters, &grads).unwrap();
    let mut worst: f64 = 0.0;
    for (k, g) in analytic.iter().enumerate() {
        let f = |h: f64| {
            let mut ad = adapters.to_vec();
            let mut step = vec![0.0; analytic.len()];
            step[k] = -h;
            apply_flat_step(&mut ad, 1.0, &step);
            loss_at(&ad)
        };
        worst = worst.max((central_diff(f, 0.0, 1e-5) - g).abs());
    }
    worst
}

fn adapters_for(method: Method, shape: &ArchShape, r: usize, seed: u64) -> Vec<Adapter> {
    shape
        .sites()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let s_seed = seed + i as u64;
            let pair = LoraPair {
                b: gaussian_matrix(s.m, r, 0.3, s_seed),
                a: gaussian_matrix(r, s.n, 0.3, s_seed ^ 7),
                alpha: 2.0 * r as f64,
            };
            match method {
                Method::FfaLora => Adapter::FrozenA(pair),
                Method::FedSb => {
                    let (b, a) = orthonormal_frames(s.m, s.n, r, s_seed);
                    Adapter::Sb(SbTriple { b, r: gaussian_matrix(r, r, 0.3, s_seed ^ 3), a })
                }
                _ => Adapter::Lora(pair),
            }
        })
        .collect()
}

#[test]
fn adapter_gradients_match_finite_differences() {
    for loss in [LossKind::Squared, LossKind::CrossEntropy] {
        for shape in [ArchShape::linear(4, 3, loss).unwrap(), ArchShape::mlp(4, 5, 3, loss).unwrap()] {
            for method in [Method::FedIt, Method::FfaLora, Method::FedSb] {
                let ad = adapters_for(method, &shape, 2, 40);
                let err = adapter_fd_error(&shape, &ad, 41);
                assert!(err < 1e-6, "{method} {:?} {loss:?}: {err}", shape.kind());
            }
        }
    }
}

#[test]
fn sb_r_gradient_matches_finite_differences_on_3x3_core() {
    let shape = ArchShape::linear(5, 4, LossKind::Squared).unwrap();
    let ad = adapters_for(Method::FedSb, &shape, 3, 9);
    assert!(adapter_fd_error(&shape, &ad, 10) < 1e-6);
}

#[test]
fn frozen_parts_survive_training_steps() {
    let shape = ArchShape::linear(5, 4, LossKind::Squared).unwrap();
    let task = make_teacher_task(&shape, &TeacherSpec { samples: 20, ..TeacherSpec::default() }, 3).unwrap();
    for method in [Method::FfaLora, Method::FedSb] {
        let mut ad = adapters_for(method, &shape, 2, 1);
        let frozen: Vec<Matrix> = ad[0].frozen_parts().into_iter().cloned().collect();
        for _ in 0..25 {
            let g = batch_gradient(&shape, &task.base, &effective_updates(&ad), &task.data).unwrap();
            let step = flat_trainable_gradient(&ad, &g).unwrap();
            apply_flat_step(&mut ad, 0.05, &step);
        }
        for (before, after) in frozen.iter().zip(ad[0].frozen_parts()) {
            assert!(before.bit_eq(after), "{method}");
        }
    }
}

fn rank_r_task(samples: usize, seed: u64) -> (ArchShape, fedsb::model::TeacherTask) {
    let shape = ArchShape::linear(8, 10, LossKind::Squared).unwrap();
    let spec = TeacherSpec { samples, delta_rank: Some(2), ..TeacherSpec::default() };
    let task = make_teacher_task(&shape, &spec, seed).unwrap();
    (shape, task)
}

fn nalgebra_leading_left(m: &nalgebra::DMatrix<f64>, r: usize) -> Matrix {
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    Matrix::from_fn(m.nrows(), r, |i, j| u[(i, idx[j])])
}

#[test]
fn sb_init_spans_the_gradient_column_space() {
    let (shape, task) = rank_r_task(200, 5);
    let sb = &init_sb(&shape, &task.base, &task.data, 0.1, &[2], RInit::Zero).unwrap()[0];
    let gram = sb.b.transpose().matmul(&sb.b).unwrap();
    assert!(gram.sub(&Matrix::identity(2)).unwrap().frobenius_norm() < 1e-8);
    // ∇W of the mean squared loss at ΔW = 0 is −2 ΔW* XᵀX / N
    let x = to_nalgebra(task.data.inputs());
    let g = to_nalgebra(&task.delta()[0]) * (x.transpose() * &x) * (-2.0 / 200.0);
    let want = nalgebra_leading_left(&g, 2);
    let angles = principal_angles(&sb.b, &want).unwrap();
    assert!(angles.iter().all(|&a| a < 1e-6), "{angles:?}");
}

#[test]
fn tenth_of_a_percent_init_batch_reproduces_column_span() {
    let (shape, task) = rank_r_task(10_000, 6);
    let full = &init_sb(&shape, &task.base, &task.data, 0.1, &[2], RInit::Zero).unwrap()[0];
    let idx: Vec<usize> = (0..10).collect();
    let small = &init_sb(&shape, &task.base, &task.data.select(&idx), 0.1, &[2], RInit::Zero).unwrap()[0];
    let b_angle = principal_angles(&full.b, &small.b).unwrap().into_iter().fold(0.0, f64::max);
    assert!(b_angle < 0.1, "B span angle {b_angle}");
}

#[test]
fn sigma_step_starts_at_the_estimated_step() {
    let (shape, task) = rank_r_task(100, 2);
    let sb = &init_sb(&shape, &task.base, &task.data, 0.1, &[2], RInit::SigmaStep).unwrap()[0];
    let g = batch_gradient(&shape, &task.base, &shape.zero_updates(), &task.data).unwrap();
    let step = g.0[0].scale(-0.1);
    assert!(sb.effective_update().sub(&step).unwrap().frobenius_norm() < 1e-10 * step.frobenius_norm());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sb_update_rank_is_bounded(m in 2usize..=16, n in 2usize..=16, r in 1usize..=8, seed in any::<u64>()) {
        let r = r.min(m).min(n);
        let (b, a) = orthonormal_frames(m, n, r, seed);
        let upd = SbTriple { b, r: gaussian_matrix(r, r, 1.0, seed ^ 9), a }.effective_update();
        let s = svd(&upd).unwrap().s;
        prop_assert!(s.get(r).is_none_or(|&v| v < 1e-10));
    }

    #[test]
    fn effective_updates_match_oracle(m in 1usize..=12, n in 1usize..=12, r in 1usize..=6, seed in any::<u64>()) {
        let r = r.min(m).min(n);
        let shape = ArchShape::linear(n, m, LossKind::Squared).unwrap();
        for method in [Method::FedIt, Method::FfaLora, Method::FedSb] {
            let ad = &adapters_for(method, &shape, r, seed)[0];
            prop_assert!(max_diff(&ad.effective_update(), &oracle_update(ad)) < 1e-12);
        }
    }

    #[test]
    fn wire_round_trip(m in 1usize..=10, n in 1usize..=10, r in 1usize..=5, seed in any::<u64>()) {
        let r = r.min(m).min(n);
        let shape = ArchShape::linear(n, m, LossKind::Squared).unwrap();
        for method in [Method::FedIt, Method::FfaLora, Method::FedSb] {
            let ad = adapters_for(method, &shape, r, seed);
            let msg = Message::from_adapters(method, &ad, Parts::All);
            let bytes = msg.encode();
            let back = Message::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &msg);
            let alpha = match &ad[0] { Adapter::Lora(p) | Adapter::FrozenA(p) => p.alpha, Adapter::Sb(_) => 1.0 };
            prop_assert_eq!(back.to_adapters(alpha).unwrap(), ad);
            prop_assert_eq!(fedsb::adapters::wire::param_count(&bytes).unwrap(), msg.param_count());
        }
    }
}
