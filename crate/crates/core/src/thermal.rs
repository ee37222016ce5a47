//! Generalized thermal states `exp(-Σ θ^j X_j)/Z` and their information geometry.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, log_sum_exp, NeumaierSum};
use crate::operators::{self, Factor, FactorThermo, ObservableSet, Representation};

/// Probabilities below this are treated as rank deficiency on the dense path.
pub const PROB_FLOOR: f64 = 1e-300;
/// Logarithmic-mean kernel switches to its diagonal branch below this log gap.
pub const KERNEL_LOG_GAP: f64 = 1e-12;
/// Newton iteration cap for moment matching.
pub const MAX_NEWTON: usize = 100;

/// Generalized inverse temperature, one component per observable slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InverseTemperature(pub Vec<f64>);

impl InverseTemperature {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.iter().all(|t| t.is_finite()) {
            Ok(Self(theta))
        } else {
            Err(Error::InvalidParameter("inverse temperature must be finite".into()))
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Cold-bath inverse temperature (slot 0).
    pub fn beta1(&self) -> f64 {
        self.0[0]
    }

    /// Hot-bath inverse temperature in the two-bath layout.
    pub fn beta2(&self) -> Option<f64> {
        self.0.get(1).copied()
    }

    pub fn gamma1(&self) -> Option<f64> {
        self.0.get(2).copied()
    }

    pub fn gamma2(&self) -> Option<f64> {
        self.0.get(3).copied()
    }
}

/// Expectation values `η_j = tr X_j τ_θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DualCoordinates(pub Vec<f64>);

/// Canonical-correlation (Kubo–Mori) Fisher matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub j: DMatrix<f64>,
    pub scale: f64,
}

impl FisherMatrix {
    /// Smallest eigenvalue relative to the trace.
    pub fn psd_ratio(&self) -> f64 {
        let (lo, _) = linalg::sym_eig_range(&self.j);
        lo / self.j.trace().abs().max(f64::MIN_POSITIVE)
    }
}

/// A joint-eigenvalue class of a commuting thermal state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralClass {
    /// Log-probability of each state in the class.
    pub ln_p: f64,
    pub ln_mult: f64,
    pub count: Option<u64>,
    pub values: Vec<f64>,
}

/// Spectrum of a thermal state in descending probability order.
#[derive(Debug, Clone)]
pub enum Spectrum {
    /// Eigen-log-probabilities with eigenvectors as columns, in matching order.
    Dense { ln_p: Vec<f64>, basis: DMatrix<Complex64> },
    /// Joint-eigenvalue classes of a commuting set.
    Classes(Vec<SpectralClass>),
    /// Independent factors, summarized; the ordered spectrum is produced on demand.
    Factored(Vec<FactorThermo>),
}

/// `τ_θ` together with its cached free entropy.
#[derive(Debug, Clone)]
pub struct ThermalState {
    pub theta: InverseTemperature,
    pub free_entropy: f64,
    pub scale: f64,
    pub spectrum: Spectrum,
}

/// Order classes by descending probability with the fixed tie-break.
pub(crate) fn tie_break(fa: f64, va: &[f64], fb: f64, vb: &[f64]) -> Ordering {
    fa.total_cmp(&fb).then_with(|| va.iter().sum::<f64>().total_cmp(&vb.iter().sum::<f64>())).then_with(|| {
        for (x, y) in va.iter().zip(vb) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = NeumaierSum::new();
    for (x, y) in a.iter().zip(b) {
        s.add(x * y);
    }
    s.value()
}

fn check_theta(obs: &ObservableSet, theta: &InverseTemperature) -> Result<()> {
    if theta.len() != obs.k() {
        return Err(Error::DimensionMismatch(format!("θ has {} components, K = {}", theta.len(), obs.k())));
    }
    if theta.0.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidParameter("θ must be finite".into()));
    }
    Ok(())
}

fn generator(mats: &[DMatrix<Complex64>], theta: &[f64]) -> DMatrix<Complex64> {
    let d = mats[0].nrows();
    let mut h = DMatrix::<Complex64>::zeros(d, d);
    for (x, t) in mats.iter().zip(theta) {
        h += x * Complex64::new(*t, 0.0);
    }
    h
}

/// Sort value classes into a descending thermal spectrum at `theta`.
pub fn sorted_classes(classes: Vec<operators::ValueClass>, theta: &[f64]) -> (f64, Vec<SpectralClass>) {
    let mut tagged: Vec<(f64, operators::ValueClass)> =
        classes.into_iter().map(|c| (dot(theta, &c.values), c)).collect();
    tagged.sort_by(|a, b| tie_break(a.0, &a.1.values, b.0, &b.1.values));
    let phi = log_sum_exp(tagged.iter().map(|(f, c)| c.ln_mult - f));
    let out = tagged
        .into_iter()
        .map(|(f, c)| SpectralClass { ln_p: -f - phi, ln_mult: c.ln_mult, count: c.count, values: c.values })
        .collect();
    (phi, out)
}

/// Build `τ_θ` for an observable set.
pub fn build_thermal_state(obs: &ObservableSet, theta: &InverseTemperature) -> Result<ThermalState> {
    check_theta(obs, theta)?;
    let (phi, spectrum) = match obs.representation() {
        Representation::Dense(m) => {
            let h = generator(m, theta.as_slice());
            let (e, basis) = operators::dense_eig(&h)?;
            let phi = log_sum_exp(e.iter().map(|x| -x));
            if !phi.is_finite() {
                return Err(Error::Overflow("dense free entropy".into()));
            }
            let ln_p = e.iter().map(|x| -x - phi).collect();
            (phi, Spectrum::Dense { ln_p, basis })
        }
        Representation::Diagonal(_) => {
            let js = operators::joint_spectrum(obs)?;
            let classes = js
                .entries
                .into_iter()
                .map(|e| operators::ValueClass { values: e.values, ln_mult: e.ln_mult, count: e.count })
                .collect();
            let (phi, cls) = sorted_classes(classes, theta.as_slice());
            (phi, Spectrum::Classes(cls))
        }
        Representation::Product(f) => {
            let parts: Vec<FactorThermo> = f.iter().map(|x| x.thermo(theta.as_slice())).collect();
            let phi = parts.iter().map(|p| p.phi).sum();
            (phi, Spectrum::Factored(parts))
        }
    };
    if !phi.is_finite() {
        return Err(Error::Overflow("free entropy".into()));
    }
    Ok(ThermalState { theta: theta.clone(), free_entropy: phi, scale: obs.scale(), spectrum })
}

/// `φ_λ(θ) = log Z`.
pub fn free_entropy(obs: &ObservableSet, theta: &InverseTemperature) -> Result<f64> {
    if let Representation::Product(f) = obs.representation() {
        check_theta(obs, theta)?;
        return Ok(f.iter().map(|x| x.thermo(theta.as_slice()).phi).sum());
    }
    Ok(build_thermal_state(obs, theta)?.free_entropy)
}

/// Diagonal matrix elements of every observable in the state's eigenbasis.
fn dense_diagonals(basis: &DMatrix<Complex64>, mats: &[DMatrix<Complex64>]) -> Vec<Vec<f64>> {
    mats.iter()
        .map(|x| {
            let xv = x * basis;
            (0..basis.ncols()).map(|c| basis.column(c).dotc(&xv.column(c)).re).collect()
        })
        .collect()
}

/// `η_j = tr X_j τ`.
pub fn dual_coordinates(state: &ThermalState, obs: &ObservableSet) -> Result<DualCoordinates> {
    let k = obs.k();
    let eta = match (&state.spectrum, obs.representation()) {
        (Spectrum::Dense { ln_p, basis }, Representation::Dense(m)) => {
            let diag = dense_diagonals(basis, m);
            diag.iter()
                .map(|dj| {
                    let mut s = NeumaierSum::new();
                    for (lp, x) in ln_p.iter().zip(dj) {
                        s.add(lp.exp() * x);
                    }
                    s.value()
                })
                .collect()
        }
        (Spectrum::Classes(c), _) => (0..k)
            .map(|j| {
                let mut s = NeumaierSum::new();
                for cl in c {
                    s.add((cl.ln_p + cl.ln_mult).exp() * cl.values[j]);
                }
                s.value()
            })
            .collect(),
        (Spectrum::Factored(parts), _) => (0..k).map(|j| parts.iter().map(|p| p.eta[j]).sum()).collect(),
        _ => return Err(Error::BasisMismatch),
    };
    Ok(DualCoordinates(eta))
}

/// Logarithmic mean `(p − q)/(ln p − ln q)` from log-probabilities.
#[inline]
pub fn kubo_mori_kernel(lp: f64, lq: f64) -> f64 {
    let gap = lp - lq;
    if gap.abs() < KERNEL_LOG_GAP {
        // Symmetric midpoint keeps the kernel exactly symmetric.
        return (0.5 * (lp + lq)).exp();
    }
    (lp.exp() - lq.exp()) / gap
}

/// Kubo–Mori Fisher matrix (covariance on commuting representations).
pub fn fisher_matrix(state: &ThermalState, obs: &ObservableSet) -> Result<FisherMatrix> {
    let k = obs.k();
    let mut j = DMatrix::zeros(k, k);
    match (&state.spectrum, obs.representation()) {
        (Spectrum::Dense { ln_p, basis }, Representation::Dense(m)) => {
            if let Some((index, lp)) = ln_p.iter().enumerate().find(|(_, lp)| lp.exp() < PROB_FLOOR) {
                return Err(Error::RankDeficient { index, value: lp.exp() });
            }
            let d = ln_p.len();
            let rot: Vec<DMatrix<Complex64>> = m.iter().map(|x| basis.adjoint() * x * basis).collect();
            let mut kernel = DMatrix::<f64>::zeros(d, d);
            for a in 0..d {
                for b in 0..d {
                    kernel[(a, b)] = kubo_mori_kernel(ln_p[a], ln_p[b]);
                }
            }
            let eta: Vec<f64> = rot.iter().map(|x| (0..d).map(|a| ln_p[a].exp() * x[(a, a)].re).sum()).collect();
            for i in 0..k {
                for l in i..k {
                    let mut s = NeumaierSum::new();
                    for a in 0..d {
                        for b in 0..d {
                            s.add(kernel[(a, b)] * (rot[i][(a, b)] * rot[l][(b, a)]).re);
                        }
                    }
                    j[(i, l)] = s.value() - eta[i] * eta[l];
                    j[(l, i)] = j[(i, l)];
                }
            }
        }
        (Spectrum::Classes(c), _) => {
            let eta = dual_coordinates(state, obs)?.0;
            for i in 0..k {
                for l in i..k {
                    let mut s = NeumaierSum::new();
                    for cl in c {
                        s.add((cl.ln_p + cl.ln_mult).exp() * (cl.values[i] - eta[i]) * (cl.values[l] - eta[l]));
                    }
                    j[(i, l)] = s.value();
                    j[(l, i)] = j[(i, l)];
                }
            }
        }
        (Spectrum::Factored(parts), _) => {
            for p in parts {
                j += &p.cov;
            }
        }
        _ => return Err(Error::BasisMismatch),
    }
    Ok(FisherMatrix { j, scale: state.scale })
}

/// `S = −Σ m p ln p`.
pub fn von_neumann_entropy(state: &ThermalState) -> f64 {
    let mut s = NeumaierSum::new();
    match &state.spectrum {
        Spectrum::Dense { ln_p, .. } => {
            for lp in ln_p {
                s.add(-lp.exp() * lp);
            }
        }
        Spectrum::Classes(c) => {
            for cl in c {
                s.add(-(cl.ln_p + cl.ln_mult).exp() * cl.ln_p);
            }
        }
        Spectrum::Factored(parts) => {
            for p in parts {
                s.add(p.entropy);
            }
        }
    }
    s.value()
}

/// `Σ θ^j η_j + φ`.
pub fn legendre_entropy(state: &ThermalState, obs: &ObservableSet) -> Result<f64> {
    let eta = dual_coordinates(state, obs)?;
    Ok(dot(state.theta.as_slice(), &eta.0) + state.free_entropy)
}

/// Thermodynamic data at a single θ.
#[derive(Debug, Clone)]
pub struct ThermoPoint {
    pub phi: f64,
    pub eta: Vec<f64>,
    pub fisher: DMatrix<f64>,
    pub entropy: f64,
}

/// φ, η, J and S at θ in one pass.
pub fn thermo_point(obs: &ObservableSet, theta: &InverseTemperature) -> Result<ThermoPoint> {
    let state = build_thermal_state(obs, theta)?;
    let eta = dual_coordinates(&state, obs)?.0;
    let fisher = fisher_matrix(&state, obs)?.j;
    let entropy = von_neumann_entropy(&state);
    Ok(ThermoPoint { phi: state.free_entropy, eta, fisher, entropy })
}

/// A general (not necessarily thermal) state.
#[derive(Debug, Clone)]
pub enum DensityOperator {
    /// Full density matrix.
    Dense(DMatrix<Complex64>),
    /// Probabilities of the computational basis states of a diagonal set.
    Diagonal(Vec<f64>),
}

impl DensityOperator {
    /// Expectation values of the observables.
    pub fn expectations(&self, obs: &ObservableSet) -> Result<DualCoordinates> {
        match (self, obs.representation()) {
            (DensityOperator::Dense(rho), Representation::Dense(m)) => {
                Ok(DualCoordinates(m.iter().map(|x| (rho * x).trace().re).collect()))
            }
            (DensityOperator::Diagonal(p), Representation::Diagonal(v)) => Ok(DualCoordinates(
                v.iter()
                    .map(|xj| {
                        let mut s = NeumaierSum::new();
                        for (pi, x) in p.iter().zip(xj) {
                            s.add(pi * x);
                        }
                        s.value()
                    })
                    .collect(),
            )),
            _ => Err(Error::BasisMismatch),
        }
    }

    /// Von Neumann entropy.
    pub fn entropy(&self) -> Result<f64> {
        let spec = match self {
            DensityOperator::Dense(rho) => operators::dense_eig(rho)?.0,
            DensityOperator::Diagonal(p) => p.clone(),
        };
        let mut s = NeumaierSum::new();
        for p in spec {
            if p > 0.0 {
                s.add(-p * p.ln());
            }
        }
        Ok(s.value())
    }

    /// Dense form of a thermal state.
    pub fn from_thermal(state: &ThermalState) -> Result<Self> {
        match &state.spectrum {
            Spectrum::Dense { ln_p, basis } => {
                let d = DVector::from_iterator(ln_p.len(), ln_p.iter().map(|l| Complex64::new(l.exp(), 0.0)));
                Ok(DensityOperator::Dense(basis * DMatrix::from_diagonal(&d) * basis.adjoint()))
            }
            _ => Err(Error::BasisMismatch),
        }
    }
}

fn xlogx_sum(p: &[f64]) -> f64 {
    let mut s = NeumaierSum::new();
    for &x in p {
        if x > 0.0 {
            s.add(x * x.ln());
        }
    }
    s.value()
}

/// `D(ρ‖σ) = tr ρ (log ρ − log σ)` for a general ρ against a thermal σ.
pub fn relative_entropy(rho: &DensityOperator, sigma: &ThermalState, obs: &ObservableSet) -> Result<f64> {
    match (rho, &sigma.spectrum, obs.representation()) {
        (DensityOperator::Dense(r), Spectrum::Dense { ln_p, basis }, Representation::Dense(_)) => {
            let (ev, _) = operators::dense_eig(r)?;
            let rot = basis.adjoint() * r * basis;
            let mut cross = NeumaierSum::new();
            for (a, lp) in ln_p.iter().enumerate() {
                cross.add(rot[(a, a)].re * lp);
            }
            Ok(xlogx_sum(&ev) - cross.value())
        }
        (DensityOperator::Diagonal(p), _, Representation::Diagonal(v)) => {
            let theta = sigma.theta.as_slice();
            let mut s = NeumaierSum::new();
            for (st, &ps) in p.iter().enumerate() {
                if ps > 0.0 {
                    let f: f64 = (0..theta.len()).map(|j| theta[j] * v[j][st]).sum();
                    s.add(ps * (ps.ln() + f + sigma.free_entropy));
                }
            }
            Ok(s.value())
        }
        _ => Err(Error::BasisMismatch),
    }
}

/// `D(τ_a‖τ_b)` evaluated directly on the spectra.
pub fn relative_entropy_thermal(a: &ThermalState, b: &ThermalState, obs: &ObservableSet) -> Result<f64> {
    let tb = b.theta.as_slice();
    match (&a.spectrum, &b.spectrum, obs.representation()) {
        (Spectrum::Dense { .. }, Spectrum::Dense { .. }, Representation::Dense(_)) => {
            relative_entropy(&DensityOperator::from_thermal(a)?, b, obs)
        }
        (Spectrum::Classes(ca), Spectrum::Classes(_), _) => {
            let mut s = NeumaierSum::new();
            for cl in ca {
                let lq = -dot(tb, &cl.values) - b.free_entropy;
                s.add((cl.ln_p + cl.ln_mult).exp() * (cl.ln_p - lq));
            }
            Ok(s.value())
        }
        (Spectrum::Factored(_), Spectrum::Factored(_), Representation::Product(f)) => {
            let ta = a.theta.as_slice();
            let mut s = NeumaierSum::new();
            for fac in f {
                s.add(factor_relative_entropy(fac, ta, tb));
            }
            Ok(s.value())
        }
        _ => Err(Error::BasisMismatch),
    }
}

fn factor_relative_entropy(fac: &Factor, ta: &[f64], tb: &[f64]) -> f64 {
    let (classes, n): (Vec<(&[f64], f64)>, f64) = match fac {
        Factor::Classes(c) => (c.iter().map(|v| (v.values.as_slice(), v.ln_mult)).collect(), 1.0),
        Factor::Iid { levels, sites } => (levels.iter().map(|v| (v.as_slice(), 0.0)).collect(), *sites as f64),
    };
    let fa: Vec<f64> = classes.iter().map(|(x, _)| dot(ta, x)).collect();
    let fb: Vec<f64> = classes.iter().map(|(x, _)| dot(tb, x)).collect();
    let pa = log_sum_exp(classes.iter().zip(&fa).map(|((_, m), f)| m - f));
    let pb = log_sum_exp(classes.iter().zip(&fb).map(|((_, m), f)| m - f));
    let mut s = NeumaierSum::new();
    for (((_, m), a), b) in classes.iter().zip(&fa).zip(&fb) {
        let la = -a - pa;
        let lb = -b - pb;
        s.add((m + la).exp() * (la - lb));
    }
    s.value() * n
}

/// Find θ̃ with `η(θ̃) = target` by damped Newton iteration.
pub fn effective_temperature(
    obs: &ObservableSet,
    target: &DualCoordinates,
    initial: &InverseTemperature,
) -> Result<InverseTemperature> {
    match_moments(obs, target, initial, false)
}

/// Moment matching; with `polish` the iteration continues past the tolerance until
/// the residual stops decreasing, giving θ to working precision.
pub fn match_moments(
    obs: &ObservableSet,
    target: &DualCoordinates,
    initial: &InverseTemperature,
    polish: bool,
) -> Result<InverseTemperature> {
    let k = obs.k();
    if target.0.len() != k {
        return Err(Error::DimensionMismatch("target η has the wrong length".into()));
    }
    let (lo, hi) = obs.spectral_ranges()?;
    for j in 0..k {
        let span = (hi[j] - lo[j]).abs().max(f64::MIN_POSITIVE);
        if !(target.0[j] > lo[j] + 1e-12 * span && target.0[j] < hi[j] - 1e-12 * span) {
            return Err(Error::OutOfRange { component: j });
        }
    }
    let tnorm = target.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-9 * (1.0 + tnorm);
    let resid = |eta: &[f64]| -> f64 { eta.iter().zip(&target.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() };
    let mut theta = initial.clone();
    let mut point = thermo_point(obs, &theta)?;
    let mut r = resid(&point.eta);
    let mut iterations = 0;
    while iterations < MAX_NEWTON {
        if !polish && r <= tol {
            break;
        }
        iterations += 1;
        let rhs = DVector::from_iterator(k, point.eta.iter().zip(&target.0).map(|(a, b)| a - b));
        let Some(step) = linalg::solve(&point.fisher, &rhs) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = InverseTemperature(theta.0.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect());
            if let Ok(p) = thermo_point(obs, &cand) {
                let rc = resid(&p.eta);
                if rc.is_finite() && rc < r {
                    theta = cand;
                    point = p;
                    r = rc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        let snorm = step.norm() * t;
        let thnorm = theta.0.iter().map(|x| x * x).sum::<f64>().sqrt();
        if r <= tol && (!polish || snorm <= 1e-15 * (1.0 + thnorm)) {
            break;
        }
    }
    if r <= tol {
        Ok(theta)
    } else {
        Err(Error::NoConvergence { iterations, residual: r, best: theta.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::Label;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn qubit_z() -> ObservableSet {
        let sz = DMatrix::from_row_slice(2, 2, &[c(1.), c(0.), c(0.), c(-1.)]);
        ObservableSet::dense(vec![Label::A1], vec![sz], 1.0).unwrap()
    }

    fn qubit_zx() -> ObservableSet {
        let sz = DMatrix::from_row_slice(2, 2, &[c(1.), c(0.), c(0.), c(-1.)]);
        let sx = DMatrix::from_row_slice(2, 2, &[c(0.), c(1.), c(1.), c(0.)]);
        ObservableSet::dense(vec![Label::A1, Label::B1], vec![sz, sx], 1.0).unwrap()
    }

    fn th(v: &[f64]) -> InverseTemperature {
        InverseTemperature(v.to_vec())
    }

    #[test]
    fn qubit_state_matches_two_level_closed_form() {
        let s = build_thermal_state(&qubit_z(), &th(&[1.0])).unwrap();
        let z = 2.0 * 1f64.cosh();
        assert!((s.free_entropy - z.ln()).abs() < 1e-14);
        if let Spectrum::Dense { ln_p, .. } = &s.spectrum {
            assert!((ln_p[0].exp() - 1f64.exp() / z).abs() < 1e-14);
            assert!((ln_p[1].exp() - (-1f64).exp() / z).abs() < 1e-14);
        } else {
            panic!("dense spectrum expected");
        }
        let eta = dual_coordinates(&s, &qubit_z()).unwrap();
        assert!((eta.0[0] + 1f64.tanh()).abs() < 1e-14);
        let j = fisher_matrix(&s, &qubit_z()).unwrap();
        assert!((j.j[(0, 0)] - 1.0 / 1f64.cosh().powi(2)).abs() < 1e-13);
        // S = φ − β tanh β at β = 1.
        let expect = z.ln() - 1f64.tanh();
        assert!((von_neumann_entropy(&s) - expect).abs() < 1e-14);
        assert!((expect - 0.365_334).abs() < 1e-6);
    }

    #[test]
    fn zero_theta_is_uniform() {
        let s = build_thermal_state(&qubit_zx(), &th(&[0.0, 0.0])).unwrap();
        assert!((s.free_entropy - 2f64.ln()).abs() < 1e-15);
        assert!((von_neumann_entropy(&s) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pure_state_limit() {
        let s = build_thermal_state(&qubit_z(), &th(&[50.0])).unwrap();
        assert!(von_neumann_entropy(&s) < 1e-20);
    }

    #[test]
    fn effective_temperature_inverts_tanh() {
        let obs = qubit_z();
        let got = effective_temperature(&obs, &DualCoordinates(vec![-2f64.tanh()]), &th(&[0.3])).unwrap();
        assert!((got.0[0] - 2.0).abs() < 1e-9);
        let same = effective_temperature(&obs, &DualCoordinates(vec![-0.5f64.tanh()]), &th(&[0.5])).unwrap();
        assert_eq!(same.0[0], 0.5);
        assert!(matches!(
            effective_temperature(&obs, &DualCoordinates(vec![-1.5]), &th(&[0.0])),
            Err(Error::OutOfRange { component: 0 })
        ));
    }

    #[test]
    fn qubit_relative_entropy_two_outcomes() {
        let obs = qubit_z();
        let a = build_thermal_state(&obs, &th(&[1.0])).unwrap();
        let b = build_thermal_state(&obs, &th(&[0.5])).unwrap();
        let p = [1f64.exp() / (2.0 * 1f64.cosh()), (-1f64).exp() / (2.0 * 1f64.cosh())];
        let q = [0.5f64.exp() / (2.0 * 0.5f64.cosh()), (-0.5f64).exp() / (2.0 * 0.5f64.cosh())];
        let direct: f64 = p.iter().zip(&q).map(|(x, y)| x * (x.ln() - y.ln())).sum();
        let d = relative_entropy_thermal(&a, &b, &obs).unwrap();
        assert!((d - direct).abs() < 1e-14);
        assert!(relative_entropy_thermal(&a, &a, &obs).unwrap().abs() < 1e-14);
    }

    #[test]
    fn kernel_is_logarithmic_mean() {
        let (p, q) = (0.3f64, 0.1f64);
        assert!((kubo_mori_kernel(p.ln(), q.ln()) - (p - q) / (p.ln() - q.ln())).abs() < 1e-15);
        assert!((kubo_mori_kernel(p.ln(), p.ln()) - p).abs() < 1e-15);
    }
}
