//! Small dense helpers shared by the solver modules.

use nalgebra::{DMatrix, SymmetricEigen};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pairwise (tree) summation. The reduction order depends only on the
/// slice length, so results are reproducible regardless of how the terms
/// were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Golub–Welsch nodes and weights for a symmetric Jacobi matrix with zero
/// diagonal and the given off-diagonal, scaled by the total mass `mu0`.
fn golub_welsch(off_diag: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = off_diag.len() + 1;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for (i, &b) in off_diag.iter().enumerate() {
        jac[(i, i + 1)] = b;
        jac[(i + 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize: the rule is exactly symmetric about zero
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Probabilists' Gauss–Hermite rule: `sum w_i g(z_i) ≈ E[g(Z)]`, Z ~ N(0,1).
/// Exact for polynomials of degree `2n - 1`.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature order must be positive");
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let off: Vec<f64> = (1..n).map(|i| (i as f64).sqrt()).collect();
    golub_welsch(&off, 1.0)
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature order must be positive");
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let off: Vec<f64> = (1..n)
        .map(|i| {
            let k = i as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&off, 2.0)
}

/// The dimensional constant `C_d` with `E|sqrt(2 s) Z| = C_d sqrt(s)`:
/// `C_d = 2 Γ((d+1)/2) / Γ(d/2)`.
pub fn heat_mean_displacement_constant(d: usize) -> f64 {
    assert!(d >= 1);
    // r(d) = Γ((d+1)/2) / Γ(d/2), r(d+2) = r(d) (d+1)/d
    let mut r = if d % 2 == 1 {
        1.0 / std::f64::consts::PI.sqrt()
    } else {
        std::f64::consts::PI.sqrt() / 2.0
    };
    let mut k = if d % 2 == 1 { 1 } else { 2 };
    while k < d {
        r *= (k as f64 + 1.0) / k as f64;
        k += 2;
    }
    2.0 * r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let (z, w) = gauss_hermite_normal(7);
        let m = |p: i32| -> f64 { z.iter().zip(&w).map(|(z, w)| w * z.powi(p)).sum() };
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(12) - 10395.0).abs() < 1e-6);
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(9);
        let int: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(16)).sum();
        assert!((int - 2.0 / 17.0).abs() < 1e-13);
    }

    #[test]
    fn displacement_constant_matches_half_normal() {
        // d = 1: E|N(0, 2s)| = 2 sqrt(s / pi)
        assert!((heat_mean_displacement_constant(1) - 2.0 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
        // d = 2: Rayleigh mean, sqrt(pi/2) * sqrt(2) = sqrt(pi)
        assert!((heat_mean_displacement_constant(2) - std::f64::consts::PI.sqrt()).abs() < 1e-15);
        // d = 3: chi_3 mean 2 sqrt(2/pi), scaled by sqrt(2)
        let c3 = 2.0 * (2.0 / std::f64::consts::PI).sqrt() * 2f64.sqrt();
        assert!((heat_mean_displacement_constant(3) - c3).abs() < 1e-14);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
    }
}
