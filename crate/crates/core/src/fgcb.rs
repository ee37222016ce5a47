//! Asymptotic Fisher densities, the generalized Carnot bound and its
//! second-order refinement.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::operators::{Label, ObservableSet, Quantity};
use crate::thermal::{self, InverseTemperature};

/// Step for finite-difference Hessians of an analytic density.
pub const DENSITY_FD_STEP: f64 = 1e-5;

/// An intensive free-entropy density `φ(θ) = lim φ_λ(θ)/λ`.
pub trait PhiDensity: Send + Sync {
    fn phi(&self, theta: &[f64]) -> f64;

    /// Exact gradient when available.
    fn gradient(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Exact Hessian when available.
    fn hessian(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// Anything that can provide an analytic density and finite-scale observables.
pub trait DensitySource {
    fn labels(&self) -> Vec<Label>;
    fn analytic_density(&self) -> Option<Box<dyn PhiDensity>>;
    fn observables(&self, lambda: f64) -> Result<ObservableSet>;
}

/// How densities are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMode {
    Analytic,
    Numeric { lambda_ref: f64, richardson: bool },
}

/// Where a set of densities came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityOrigin {
    Analytic,
    ExactDerivatives,
    FiniteScale { lambda_ref: f64, richardson: bool },
}

/// φ, η and g at θ₀ together with g⁻¹.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticDensities {
    pub labels: Vec<Label>,
    pub theta0: Vec<f64>,
    pub phi: f64,
    pub eta: Vec<f64>,
    #[serde(skip)]
    pub g: DMatrix<f64>,
    #[serde(skip)]
    pub g_inv: DMatrix<f64>,
    pub origin: DensityOrigin,
}

impl AsymptoticDensities {
    /// Assemble from a Fisher density, checking positivity and invertibility.
    pub fn from_parts(
        labels: Vec<Label>,
        theta0: Vec<f64>,
        phi: f64,
        eta: Vec<f64>,
        g: DMatrix<f64>,
        origin: DensityOrigin,
    ) -> Result<Self> {
        let g = (&g + g.transpose()) * 0.5;
        let (lo, _) = linalg::sym_eig_range(&g);
        let ratio = lo / g.trace().abs().max(f64::MIN_POSITIVE);
        if !(ratio > 1e-10) {
            return Err(Error::SingularG { ratio });
        }
        let g_inv = linalg::spd_inverse(&g).ok_or(Error::SingularG { ratio })?;
        let k = g.nrows();
        let resid = (&g * &g_inv - DMatrix::<f64>::identity(k, k)).abs().max();
        if resid > 1e-8 {
            return Err(Error::SingularG { ratio });
        }
        Ok(Self { labels, theta0, phi, eta, g, g_inv, origin })
    }
}

/// Central-difference gradient and Hessian of a scalar function.
pub fn finite_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> (Vec<f64>, DMatrix<f64>) {
    let k = x.len();
    let at = |d: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for (i, s) in d {
            y[*i] += s;
        }
        f(&y)
    };
    let f0 = f(x);
    let mut grad = vec![0.0; k];
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        let fp = at(&[(i, h)]);
        let fm = at(&[(i, -h)]);
        grad[i] = (fp - fm) / (2.0 * h);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in (i + 1)..k {
            let v = (at(&[(i, h), (j, h)]) - at(&[(i, h), (j, -h)]) - at(&[(i, -h), (j, h)]) + at(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (grad, hess)
}

/// Densities at θ₀, either from the analytic φ or from `J(θ₀; λ)/λ`.
pub fn estimate_densities(
    model: &dyn DensitySource,
    theta0: &InverseTemperature,
    mode: DensityMode,
) -> Result<AsymptoticDensities> {
    let labels = model.labels();
    let t = theta0.as_slice();
    match mode {
        DensityMode::Analytic => {
            let dens =
                model.analytic_density().ok_or_else(|| Error::NoClosedForm("analytic free-entropy density".into()))?;
            let phi = dens.phi(t);
            let (grad, hess, origin) = match (dens.gradient(t), dens.hessian(t)) {
                (Some(g), Some(h)) => (g, h, DensityOrigin::ExactDerivatives),
                (g, h) => {
                    let (fg, fh) = finite_difference(&|x| dens.phi(x), t, DENSITY_FD_STEP);
                    (g.unwrap_or(fg), h.unwrap_or(fh), DensityOrigin::Analytic)
                }
            };
            let eta = grad.iter().map(|x| -x).collect();
            AsymptoticDensities::from_parts(labels, t.to_vec(), phi, eta, hess, origin)
        }
        DensityMode::Numeric { lambda_ref, richardson } => {
            let at = |lambda: f64| -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
                let obs = model.observables(lambda)?;
                let p = thermal::thermo_point(&obs, theta0)?;
                let s = obs.scale();
                Ok((p.phi / s, p.eta.iter().map(|e| e / s).collect(), p.fisher / s))
            };
            let (phi, eta, g) = if richardson {
                let (p1, e1, g1) = at(lambda_ref)?;
                let (p2, e2, g2) = at(2.0 * lambda_ref)?;
                (2.0 * p2 - p1, e2.iter().zip(&e1).map(|(a, b)| 2.0 * a - b).collect(), g2 * 2.0 - g1)
            } else {
                at(lambda_ref)?
            };
            AsymptoticDensities::from_parts(
                labels,
                t.to_vec(),
                phi,
                eta,
                g,
                DensityOrigin::FiniteScale { lambda_ref, richardson },
            )
        }
    }
}

/// Target heats absorbed from the baths, with the weights of the heat norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatVector {
    pub dq_a2: f64,
    pub dq_b1: f64,
    pub dq_b2: f64,
    pub beta0: f64,
    pub gamma0: f64,
}

impl HeatVector {
    /// Heats with the default norm weights derived from θ₀.
    pub fn new(dq_a2: f64, dq_b1: f64, dq_b2: f64, theta0: &InverseTemperature, labels: &[Label]) -> Self {
        let (beta0, gamma0) = default_weights(theta0, labels);
        Self { dq_a2, dq_b1, dq_b2, beta0, gamma0 }
    }

    pub fn zero(theta0: &InverseTemperature, labels: &[Label]) -> Self {
        Self::new(0.0, 0.0, 0.0, theta0, labels)
    }

    /// `‖Q‖² = β₀²ΔQ_{A2}² + γ₀²(ΔQ_{B1}² + ΔQ_{B2}²)`.
    pub fn norm_sq(&self) -> f64 {
        self.beta0 * self.beta0 * self.dq_a2 * self.dq_a2
            + self.gamma0 * self.gamma0 * (self.dq_b1 * self.dq_b1 + self.dq_b2 * self.dq_b2)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Heat on a labeled slot; the distinguished slot carries none.
    pub fn for_label(&self, label: Label) -> f64 {
        match (label.bath, label.quantity) {
            (2, Quantity::A) => self.dq_a2,
            (1, Quantity::B) => self.dq_b1,
            (2, Quantity::B) => self.dq_b2,
            _ => 0.0,
        }
    }

    /// Heats for every non-distinguished slot, in slot order. Nonzero heats on
    /// quantities absent from `labels` are rejected.
    pub fn slot_heats(&self, labels: &[Label]) -> Result<Vec<f64>> {
        for (label, q) in [(Label::A2, self.dq_a2), (Label::B1, self.dq_b1), (Label::B2, self.dq_b2)] {
            if q != 0.0 && !labels.contains(&label) {
                return Err(Error::InvalidParameter(format!("heat given for absent quantity {label}")));
            }
        }
        Ok(labels.iter().skip(1).map(|l| self.for_label(*l)).collect())
    }

    /// Same vector with every heat multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { dq_a2: self.dq_a2 * s, dq_b1: self.dq_b1 * s, dq_b2: self.dq_b2 * s, ..*self }
    }
}

/// Default norm weights: β₀ = |β₁| and γ₀ = max(|γ₁|, |γ₂|, β₀).
pub fn default_weights(theta0: &InverseTemperature, labels: &[Label]) -> (f64, f64) {
    let beta0 = theta0.beta1().abs();
    let gamma0 = labels
        .iter()
        .zip(theta0.as_slice())
        .filter(|(l, _)| l.quantity == Quantity::B)
        .map(|(_, t)| t.abs())
        .fold(beta0, f64::max);
    (beta0, gamma0)
}

/// Second-order work coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FgcbCoefficients {
    /// Labels of the non-distinguished slots, indexing `matrix`.
    pub labels: Vec<Label>,
    /// Symmetric `C_kl` with correction `Σ C_kl Q_k Q_l / λ`.
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    pub c_aa: f64,
    pub c_ab: [f64; 2],
    pub c_bb: [[f64; 2]; 2],
}

impl FgcbCoefficients {
    /// `Σ C_kl Q_k Q_l` for slot-ordered heats.
    pub fn quadratic_form(&self, heats: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..heats.len() {
            for l in 0..heats.len() {
                s += self.matrix[(k, l)] * heats[k] * heats[l];
            }
        }
        s
    }

    /// The quadratic form evaluated on a heat vector.
    pub fn form(&self, q: &HeatVector) -> f64 {
        let heats: Vec<f64> = self.labels.iter().map(|l| q.for_label(*l)).collect();
        self.quadratic_form(&heats)
    }

    /// Smallest eigenvalue of the coefficient matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        if self.matrix.nrows() == 0 {
            return 0.0;
        }
        linalg::sym_eig_range(&self.matrix).0
    }
}

fn cold_beta(theta0: &InverseTemperature) -> Result<f64> {
    let b1 = theta0.beta1();
    if b1 > 0.0 && b1.is_finite() {
        Ok(b1)
    } else {
        Err(Error::ZeroColdTemperature(b1))
    }
}

/// Coefficients from `g⁻¹(θ₀)` with the cold-bath energy slot eliminated.
pub fn fgcb_coefficients(dens: &AsymptoticDensities, theta0: &InverseTemperature) -> Result<FgcbCoefficients> {
    let b1 = cold_beta(theta0)?;
    let k = dens.labels.len();
    if theta0.len() != k || dens.g_inv.nrows() != k {
        return Err(Error::DimensionMismatch("θ₀ and densities disagree on K".into()));
    }
    let t = theta0.as_slice();
    let gi = &dens.g_inv;
    let mut m = DMatrix::zeros(k - 1, k - 1);
    for a in 1..k {
        for b in a..k {
            let v = (gi[(a, b)] - t[a] / b1 * gi[(0, b)] - t[b] / b1 * gi[(0, a)]
                + t[a] * t[b] / (b1 * b1) * gi[(0, 0)])
                / (2.0 * b1);
            m[(a - 1, b - 1)] = v;
            m[(b - 1, a - 1)] = v;
        }
    }
    let labels: Vec<Label> = dens.labels[1..].to_vec();
    let pos = |l: Label| labels.iter().position(|x| *x == l);
    let entry = |a: Option<usize>, b: Option<usize>| match (a, b) {
        (Some(a), Some(b)) => m[(a, b)],
        _ => 0.0,
    };
    let (a2, b1s, b2s) = (pos(Label::A2), pos(Label::B1), pos(Label::B2));
    let bs = [b1s, b2s];
    let c_aa = entry(a2, a2);
    let c_ab = [2.0 * entry(a2, bs[0]), 2.0 * entry(a2, bs[1])];
    let c_bb = [[entry(bs[0], bs[0]), entry(bs[0], bs[1])], [entry(bs[1], bs[0]), entry(bs[1], bs[1])]];
    Ok(FgcbCoefficients { labels, matrix: m, c_aa, c_ab, c_bb })
}

/// First-order bound `ΔQ_{A2} − Σ_{k≠0} (θ^k/β₁) Q_k`.
pub fn gcb_bound(q: &HeatVector, theta0: &InverseTemperature, labels: &[Label]) -> Result<f64> {
    let b1 = cold_beta(theta0)?;
    let heats = q.slot_heats(labels)?;
    let t = theta0.as_slice();
    let mut w = 0.0;
    for (idx, (label, h)) in labels.iter().skip(1).zip(&heats).enumerate() {
        if label.quantity == Quantity::A {
            w += h;
        }
        w -= t[idx + 1] / b1 * h;
    }
    Ok(w)
}

/// Second-order bound `GCB(Q) − Σ C_kl Q_k Q_l / λ`.
pub fn fgcb_bound(q: &HeatVector, theta0: &InverseTemperature, lambda: f64, coeffs: &FgcbCoefficients) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("λ must be positive, got {lambda}")));
    }
    let mut labels = vec![Label::A1];
    labels.extend_from_slice(&coeffs.labels);
    Ok(gcb_bound(q, theta0, &labels)? - coeffs.form(q) / lambda)
}
