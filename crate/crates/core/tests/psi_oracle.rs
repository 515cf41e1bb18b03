mod common;

use common::{k_direct, random_state};
use nalgebra::DMatrix;
use sclvm::psi::{psi1, psi2, psi_mc_oracle, psi_stats};
use sclvm::kernels::gram;
use sclvm::LatentPoint;

#[test]
fn closed_forms_agree_with_monte_carlo() {
    let (s, _) = random_state(7, 4, 3, 2, 2, 1);
    let exact = psi_stats(&s.q, &s.labels, &s.inducing, &s.kernel).unwrap();
    let mc = psi_mc_oracle(&s.q, &s.labels, &s.inducing, &s.kernel, 1_000_000, 99).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let z = (exact.psi1[(i, j)] - mc.stats.psi1[(i, j)]).abs() / mc.psi1_se[(i, j)].max(1e-300);
            assert!(z < 3.0, "Ψ1[{i},{j}] off by {z:.2} SE");
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            let z = (exact.psi2[(i, j)] - mc.stats.psi2[(i, j)]).abs() / mc.psi2_se[(i, j)].max(1e-300);
            assert!(z < 3.0, "Ψ2[{i},{j}] off by {z:.2} SE");
        }
    }
    assert!((exact.psi0 - mc.stats.psi0).abs() < 1e-9 * exact.psi0);
}

#[test]
fn psi2_is_exactly_symmetric() {
    let (s, _) = random_state(8, 9, 5, 2, 2, 1);
    let p2 = psi2(&s.q, &s.labels, &s.inducing, &s.kernel).unwrap();
    assert_eq!(p2, p2.transpose());
    let ev = p2.clone().symmetric_eigen().eigenvalues;
    assert!(ev.min() >= -1e-8 * p2.trace().abs());
}

#[test]
fn near_deterministic_psi1_matches_direct_kernel() {
    let (mut s, _) = random_state(9, 5, 4, 2, 2, 1);
    s.q.variances = DMatrix::from_element(5, 4, 1e-14);
    let p1 = psi1(&s.q, &s.labels, &s.inducing, &s.kernel).unwrap();
    for i in 0..5 {
        for j in 0..4 {
            let a: Vec<f64> = s.q.means.row(i).iter().copied().collect();
            let b: Vec<f64> = s.inducing.inputs.row(j).iter().copied().collect();
            let k = k_direct(&s.kernel, &a, s.labels[i], &b, s.inducing.labels[j]);
            assert!((p1[(i, j)] - k).abs() < 1e-10);
        }
    }
}

#[test]
fn gram_matches_entrywise_and_is_positive_definite() {
    let (s, _) = random_state(10, 8, 1, 2, 2, 1);
    let pts: Vec<LatentPoint> = (0..8)
        .map(|i| LatentPoint::from_row(&s.q.means.row(i).iter().copied().collect::<Vec<_>>(), 2, s.labels[i]))
        .collect();
    let jit = 1e-6 * 2.0;
    let g = gram(&pts, &s.kernel, jit).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let a: Vec<f64> = s.q.means.row(i).iter().copied().collect();
            let b: Vec<f64> = s.q.means.row(j).iter().copied().collect();
            let k = k_direct(&s.kernel, &a, s.labels[i], &b, s.labels[j]) + if i == j { jit } else { 0.0 };
            assert!((g[(i, j)] - k).abs() < 1e-14);
        }
    }
    assert!(g.symmetric_eigen().eigenvalues.min() > 0.0);
}
