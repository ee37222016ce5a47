//! Small numerical helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Default cap on dense Hermitian dimensions.
pub const DENSE_CAP: usize = 4096;

/// Relative gap under which two Hermitian eigenvalues are treated as degenerate.
const DEGENERACY_TOL: f64 = 1e-10;

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `ln Σ exp(x_i)`, returning `-inf` for an empty input.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let mut acc = NeumaierSum::new();
    for x in &xs {
        acc.add((x - max).exp());
    }
    max + acc.value().ln()
}

/// `ln(e^a + e^b)`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigendecomposition of a Hermitian matrix with deterministic output.
///
/// Eigenvalues come back ascending. Inside each degenerate cluster the basis is
/// rebuilt by pivoted Gram-Schmidt on the projected computational basis vectors,
/// and every eigenvector is phased so its first largest component is real positive.
pub fn hermitian_eig(h: &DMatrix<Complex64>, cap: usize) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let d = h.nrows();
    if h.ncols() != d {
        return Err(Error::DimensionMismatch(format!("{}x{} matrix is not square", d, h.ncols())));
    }
    if d > cap {
        return Err(Error::DimensionCap { dim: d, cap });
    }
    if d == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let herm = (h + h.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(herm);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::<Complex64>::zeros(d, d);
    for (c, &i) in order.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }

    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut start = 0;
    while start < d {
        let mut end = start + 1;
        while end < d && (values[end] - values[end - 1]).abs() <= DEGENERACY_TOL * scale {
            end += 1;
        }
        if end - start > 1 {
            canonicalize_cluster(&mut vecs, start, end);
        }
        start = end;
    }
    for c in 0..d {
        fix_phase(&mut vecs, c);
    }
    Ok((values, vecs))
}

fn canonicalize_cluster(vecs: &mut DMatrix<Complex64>, start: usize, end: usize) {
    let d = vecs.nrows();
    let r = end - start;
    let block = vecs.columns(start, r).into_owned();
    // Coordinates of P e_k in the cluster basis are the conjugated k-th row of the block.
    let mut cand: Vec<DVector<Complex64>> =
        (0..d).map(|k| DVector::from_iterator(r, (0..r).map(|j| block[(k, j)].conj()))).collect();
    let mut chosen: Vec<DVector<Complex64>> = Vec::with_capacity(r);
    for _ in 0..r {
        let mut best = 0;
        let mut best_norm = -1.0;
        for (k, v) in cand.iter().enumerate() {
            let n = v.norm();
            if n > best_norm * (1.0 + 1e-12) {
                best = k;
                best_norm = n;
            }
        }
        let u = &cand[best] / Complex64::new(best_norm, 0.0);
        for v in cand.iter_mut() {
            let proj = u.dotc(v);
            *v -= &u * proj;
        }
        chosen.push(u);
    }
    for (j, u) in chosen.iter().enumerate() {
        let col = &block * u;
        vecs.set_column(start + j, &col);
    }
}

fn fix_phase(vecs: &mut DMatrix<Complex64>, c: usize) {
    let col = vecs.column(c);
    let max = col.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return;
    }
    let pivot = col.iter().position(|z| z.norm() >= max * (1.0 - 1e-9)).unwrap_or(0);
    let z = col[pivot];
    let phase = z.conj() / z.norm();
    let norm = col.norm();
    let mut col = vecs.column_mut(c);
    for x in col.iter_mut() {
        *x = *x * phase / norm;
    }
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky().map(|c| c.inverse()).or_else(|| m.clone().try_inverse())?;
    Some((&inv + inv.transpose()) * 0.5)
}

/// Extreme eigenvalues of a real symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let ev = SymmetricEigen::new(sym).eigenvalues;
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Solve `a x = b` with full pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().full_piv_lu();
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Natural log of the binomial coefficient.
///
/// Exact when the coefficient fits in `u128`; otherwise a ratio form of Stirling's
/// series that keeps the absolute error near one ulp of the result.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    if k == 0 {
        return 0.0;
    }
    if let Some(c) = binomial_exact(n, k) {
        if c < (1u128 << 100) {
            return (c as f64).ln();
        }
    }
    if k < 64 {
        let mut s = NeumaierSum::new();
        for i in 0..k {
            s.add(((n - i) as f64 / (i + 1) as f64).ln());
        }
        return s.value();
    }
    let (nf, kf) = (n as f64, k as f64);
    let rest = nf - kf;
    let mut s = NeumaierSum::new();
    s.add(kf * (nf / kf).ln());
    s.add(-rest * (-kf / nf).ln_1p());
    s.add(0.5 * (nf / (2.0 * std::f64::consts::PI * kf * rest)).ln());
    s.add(stirling_tail(nf) - stirling_tail(kf) - stirling_tail(rest));
    s.value()
}

/// `ln Γ(x+1) − (x ln x − x + ½ ln 2πx)` for `x ≥ 64`.
fn stirling_tail(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}

/// Exact binomial coefficient when it fits in `u128`.
pub fn binomial_exact(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// `ln n!` via exact summation for small n and Stirling series beyond.
pub fn ln_factorial(n: u64) -> f64 {
    if n < 256 {
        let mut s = NeumaierSum::new();
        for i in 2..=n {
            s.add((i as f64).ln());
        }
        return s.value();
    }
    let x = n as f64 + 1.0;
    // ln Γ(x) Stirling series; relative error far below double precision for x ≥ 256.
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series =
        inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 / 1188.0))));
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + series
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let xs = [0.1, -2.0, 3.5];
        let direct: f64 = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs) - direct).abs() < 1e-14);
        assert_eq!(log_sum_exp(Vec::<f64>::new()), f64::NEG_INFINITY);
        assert!((log_add(1.0, 2.0) - (1f64.exp() + 2f64.exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn binomials_agree_between_exact_and_stirling() {
        assert_eq!(binomial_exact(10, 3), Some(120));
        let n = 300;
        let k = 120;
        let stirling = ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k);
        let mut exact = 0.0;
        for i in 0..k {
            exact += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
        assert!((stirling - exact).abs() < 1e-9 * exact);
    }

    #[test]
    fn large_binomials_match_summation() {
        for (n, k) in [(300u64, 120u64), (5000, 1234), (1 << 20, 300_000)] {
            let mut exact = NeumaierSum::new();
            for i in 0..k {
                exact.add(((n - i) as f64).ln() - ((i + 1) as f64).ln());
            }
            let e = exact.value();
            assert!((ln_binomial(n, k) - e).abs() < 1e-9 * e.max(1.0), "{n} {k}");
        }
        assert_eq!(ln_binomial(7, 0), 0.0);
        assert!((ln_binomial(10, 3) - 120f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cluster_is_canonical() {
        // Any rotation inside a degenerate eigenspace yields the same basis.
        let mut h = DMatrix::<Complex64>::zeros(3, 3);
        h[(2, 2)] = Complex64::new(1.0, 0.0);
        let (c, s) = (0.6f64, 0.8f64);
        let mut u = DMatrix::<Complex64>::identity(3, 3);
        u[(0, 0)] = Complex64::new(c, 0.0);
        u[(0, 1)] = Complex64::new(-s, 0.0);
        u[(1, 0)] = Complex64::new(0.0, s);
        u[(1, 1)] = Complex64::new(0.0, c);
        // Mix the degenerate block with a non-trivial generator first.
        let mut g = DMatrix::<Complex64>::zeros(3, 3);
        g[(0, 0)] = Complex64::new(0.3, 0.0);
        g[(1, 1)] = Complex64::new(0.3, 0.0);
        g[(2, 2)] = Complex64::new(1.0, 0.0);
        let h1 = &u * &g * u.adjoint();
        let (v0, b0) = hermitian_eig(&g, DENSE_CAP).unwrap();
        let (v1, b1) = hermitian_eig(&h1, DENSE_CAP).unwrap();
        for (a, b) in v0.iter().zip(&v1) {
            assert!((a - b).abs() < 1e-14);
        }
        // u acts inside the degenerate block, so both bases agree exactly.
        for (a, b) in b0.iter().zip(b1.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        let _ = h;
    }
}
