//! Concrete bath models with closed-form references.
//!
//! Units: ħ = k_B = 1. Slot layouts:
//! * `iid_two_level`, `ising_chain`: (cold energy, hot energy), θ = (β_c, β_h);
//! * `spin_half_bath`: (H = ħω Σσ_z, B = Σσ_θ), θ = (β, γ);
//! * `fermi_gas_well`: (H_c, H_h, N_c, N_h), θ = (β_c, β_h, −β_cμ_c, −β_hμ_h).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgcb::{DensitySource, PhiDensity};
use crate::linalg::{binomial_exact, ln_binomial};
use crate::operators::{Factor, Label, ObservableSet, ValueClass};
use crate::thermal::InverseTemperature;

/// Largest spin-½ bath built as dense matrices.
pub const SPIN_DENSE_MAX_SITES: u64 = 12;
/// Largest per-bath size for enumerated diagonal builds.
pub const ENUMERATION_MAX_SITES: u64 = 10;

/// A bath model and its physical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Two baths of independent two-level sites with gaps `ħω_c`, `ħω_h`.
    IidTwoLevel { omega_c: f64, omega_h: f64 },
    /// Two periodic classical Ising rings with couplings `J_c`, `J_h`.
    IsingChain { j_c: f64, j_h: f64 },
    /// One bath of spin-½ sites carrying `ħωσ_z` and `σ_θ = cos θ σ_z + sin θ σ_x`.
    SpinHalfBath { omega: f64, angle: f64 },
    /// Two ideal Fermi gases in 1D infinite wells of length `λ l_b`.
    FermiGasWell { l_c: f64, l_h: f64, mass: f64, cutoff: f64 },
}

/// Observables at one scale together with the analytic density, if any.
pub struct Instance {
    pub obs: ObservableSet,
    pub density: Option<Box<dyn PhiDensity>>,
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::IidTwoLevel { .. } => "iid_two_level",
            ModelSpec::IsingChain { .. } => "ising_chain",
            ModelSpec::SpinHalfBath { .. } => "spin_half_bath",
            ModelSpec::FermiGasWell { .. } => "fermi_gas_well",
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        match self {
            ModelSpec::IidTwoLevel { .. } | ModelSpec::IsingChain { .. } => vec![Label::A1, Label::A2],
            ModelSpec::SpinHalfBath { .. } => vec![Label::A1, Label::B1],
            ModelSpec::FermiGasWell { .. } => vec![Label::A1, Label::A2, Label::B1, Label::B2],
        }
    }

    /// Whether every observable commutes.
    pub fn is_commutative(&self) -> bool {
        !matches!(self, ModelSpec::SpinHalfBath { angle, .. } if angle.sin().abs() > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            ModelSpec::IidTwoLevel { omega_c, omega_h } => {
                pos("omega_c", omega_c)?;
                pos("omega_h", omega_h)
            }
            ModelSpec::IsingChain { j_c, j_h } => {
                pos("j_c", j_c)?;
                pos("j_h", j_h)
            }
            ModelSpec::SpinHalfBath { omega, angle } => {
                pos("omega", omega)?;
                if (0.0..=PI / 2.0).contains(&angle) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("angle must lie in [0, π/2], got {angle}")))
                }
            }
            ModelSpec::FermiGasWell { l_c, l_h, mass, cutoff } => {
                pos("l_c", l_c)?;
                pos("l_h", l_h)?;
                pos("mass", mass)?;
                pos("cutoff", cutoff)
            }
        }
    }

    /// Site count for discrete models.
    fn sites(&self, lambda: f64) -> Result<u64> {
        if lambda >= 1.0 && lambda.fract() == 0.0 && lambda < 1e15 {
            Ok(lambda as u64)
        } else {
            Err(Error::InvalidParameter(format!("{} needs an integer site count, got {lambda}", self.name())))
        }
    }
}

/// Default Fermi cutoff so that `e^{β(μ−E)} < 1e-12` in both baths.
pub fn fermi_default_cutoff(theta0: &InverseTemperature) -> f64 {
    let t = theta0.as_slice();
    (0..2)
        .map(|b| {
            let beta = t[b];
            let mu = -t[b + 2] / beta;
            mu.max(0.0) + 30.0 / beta
        })
        .fold(0.0, f64::max)
}

/// Fermi level spacing constant `E₀ = π²/(2 m l²)`.
pub fn fermi_e0(mass: f64, length: f64) -> f64 {
    PI * PI / (2.0 * mass * length * length)
}

/// Number of levels below the cutoff at scale λ.
pub fn fermi_levels(mass: f64, length: f64, cutoff: f64, lambda: f64) -> u64 {
    ((cutoff / fermi_e0(mass, length)).sqrt() * lambda).floor() as u64
}

/// Level density prefactor `c = l √(2m)/(2π)` per unit λ.
pub fn fermi_prefactor(mass: f64, length: f64) -> f64 {
    length * (2.0 * mass).sqrt() / (2.0 * PI)
}

fn fermi_factors(mass: f64, lengths: [f64; 2], cutoff: f64, lambda: f64) -> Result<Vec<Factor>> {
    let mut out = Vec::new();
    for (b, &l) in lengths.iter().enumerate() {
        let e0 = fermi_e0(mass, l);
        let levels = fermi_levels(mass, l, cutoff, lambda);
        if levels < 1 {
            return Err(Error::InvalidParameter(format!("bath {} has no level below the cutoff", b + 1)));
        }
        for i in 1..=levels {
            let e = e0 * (i * i) as f64 / (lambda * lambda);
            let mut occ = vec![0.0; 4];
            occ[b] = e;
            occ[b + 2] = 1.0;
            out.push(Factor::Classes(vec![
                ValueClass { values: vec![0.0; 4], ln_mult: 0.0, count: Some(1) },
                ValueClass { values: occ, ln_mult: 0.0, count: Some(1) },
            ]));
        }
    }
    Ok(out)
}

/// Energy classes of a periodic Ising ring: `w` (even) domain walls give
/// energy `−J(n − 2w)` with multiplicity `2·C(n, w)`.
pub fn ising_classes(j: f64, n: u64, slot: usize, k: usize) -> Vec<ValueClass> {
    (0..=n)
        .step_by(2)
        .map(|w| {
            let mut values = vec![0.0; k];
            values[slot] = -j * (n as f64 - 2.0 * w as f64);
            let count = binomial_exact(n, w).and_then(|c| c.checked_mul(2)).and_then(|c| u64::try_from(c).ok());
            let ln_mult = match count {
                Some(c) if c < (1u64 << 53) => (c as f64).ln(),
                _ => std::f64::consts::LN_2 + ln_binomial(n, w),
            };
            ValueClass { values, ln_mult, count }
        })
        .collect()
}

/// Energy of one periodic Ising configuration encoded in the low `n` bits.
pub fn ising_energy(j: f64, n: u64, cfg: u64) -> f64 {
    let spin = |i: u64| if (cfg >> (i % n)) & 1 == 0 { 1.0 } else { -1.0 };
    -j * (0..n).map(|i| spin(i) * spin(i + 1)).sum::<f64>()
}

fn kron_sum_site(op: &DMatrix<Complex64>, n: u64) -> DMatrix<Complex64> {
    let n = n as usize;
    let d = 1usize << n;
    let mut out = DMatrix::<Complex64>::zeros(d, d);
    let id = DMatrix::<Complex64>::identity(2, 2);
    for site in 0..n {
        let mut m = DMatrix::<Complex64>::identity(1, 1);
        for s in 0..n {
            m = m.kronecker(if s == site { op } else { &id });
        }
        out += m;
    }
    out
}

/// Single-site spin matrices `(ħω σ_z, σ_θ)`.
pub fn spin_site_ops(omega: f64, angle: f64) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let c = |x: f64| Complex64::new(x, 0.0);
    let h = DMatrix::from_row_slice(2, 2, &[c(omega), c(0.0), c(0.0), c(-omega)]);
    let (ct, st) = (angle.cos(), angle.sin());
    let b = DMatrix::from_row_slice(2, 2, &[c(ct), c(st), c(st), c(-ct)]);
    (h, b)
}

/// Observables at scale λ in the cheapest exact form, plus the analytic density.
pub fn instantiate(spec: &ModelSpec, lambda: f64) -> Result<Instance> {
    spec.validate()?;
    let labels = spec.labels();
    let obs = match *spec {
        ModelSpec::IidTwoLevel { omega_c, omega_h } => {
            let n = spec.sites(lambda)?;
            ObservableSet::product(
                labels,
                vec![
                    Factor::Iid { levels: vec![vec![0.0, 0.0], vec![omega_c, 0.0]], sites: n },
                    Factor::Iid { levels: vec![vec![0.0, 0.0], vec![0.0, omega_h]], sites: n },
                ],
                n as f64,
            )?
        }
        ModelSpec::IsingChain { j_c, j_h } => {
            let n = spec.sites(lambda)?;
            ObservableSet::product(
                labels,
                vec![Factor::Classes(ising_classes(j_c, n, 0, 2)), Factor::Classes(ising_classes(j_h, n, 1, 2))],
                n as f64,
            )?
        }
        ModelSpec::SpinHalfBath { omega, angle } => {
            let n = spec.sites(lambda)?;
            if n > SPIN_DENSE_MAX_SITES {
                return Err(Error::ScaleTooLarge(format!(
                    "spin-½ bath with {n} sites exceeds the dense limit {SPIN_DENSE_MAX_SITES}"
                )));
            }
            let (h, b) = spin_site_ops(omega, angle);
            ObservableSet::dense(labels, vec![kron_sum_site(&h, n), kron_sum_site(&b, n)], n as f64)?
        }
        ModelSpec::FermiGasWell { l_c, l_h, mass, cutoff } => {
            if !(lambda > 0.0) {
                return Err(Error::InvalidParameter(format!("λ must be positive, got {lambda}")));
            }
            ObservableSet::product(labels, fermi_factors(mass, [l_c, l_h], cutoff, lambda)?, lambda)?
        }
    };
    Ok(Instance { obs, density: analytic_density(spec) })
}

/// Every joint configuration listed explicitly as a diagonal set.
pub fn instantiate_enumerated(spec: &ModelSpec, lambda: f64) -> Result<ObservableSet> {
    spec.validate()?;
    let labels = spec.labels();
    match *spec {
        ModelSpec::IidTwoLevel { omega_c, omega_h } => {
            let n = spec.sites(lambda)?;
            check_enumerable(n)?;
            let per = 1u64 << n;
            let mut a1 = Vec::with_capacity((per * per) as usize);
            let mut a2 = Vec::with_capacity((per * per) as usize);
            for c in 0..per {
                for h in 0..per {
                    a1.push(omega_c * c.count_ones() as f64);
                    a2.push(omega_h * h.count_ones() as f64);
                }
            }
            ObservableSet::diagonal(labels, vec![a1, a2], n as f64)
        }
        ModelSpec::IsingChain { j_c, j_h } => {
            let n = spec.sites(lambda)?;
            check_enumerable(n)?;
            let per = 1u64 << n;
            let ec: Vec<f64> = (0..per).map(|c| ising_energy(j_c, n, c)).collect();
            let eh: Vec<f64> = (0..per).map(|c| ising_energy(j_h, n, c)).collect();
            let mut a1 = Vec::with_capacity((per * per) as usize);
            let mut a2 = Vec::with_capacity((per * per) as usize);
            for &c in &ec {
                for &h in &eh {
                    a1.push(c);
                    a2.push(h);
                }
            }
            ObservableSet::diagonal(labels, vec![a1, a2], n as f64)
        }
        ModelSpec::FermiGasWell { l_c, l_h, mass, cutoff } => {
            let lc = fermi_levels(mass, l_c, cutoff, lambda);
            let lh = fermi_levels(mass, l_h, cutoff, lambda);
            check_enumerable(lc)?;
            check_enumerable(lh)?;
            let level = |l: f64, i: u64| fermi_e0(mass, l) * (i * i) as f64 / (lambda * lambda);
            let occ = |l: f64, levels: u64, cfg: u64| -> (f64, f64) {
                let e = (1..=levels).filter(|i| (cfg >> (i - 1)) & 1 == 1).map(|i| level(l, i)).sum();
                (e, cfg.count_ones() as f64)
            };
            let mut vals = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
            for c in 0..(1u64 << lc) {
                let (ec, nc) = occ(l_c, lc, c);
                for h in 0..(1u64 << lh) {
                    let (eh, nh) = occ(l_h, lh, h);
                    vals[0].push(ec);
                    vals[1].push(eh);
                    vals[2].push(nc);
                    vals[3].push(nh);
                }
            }
            ObservableSet::diagonal(labels, vals, lambda)
        }
        ModelSpec::SpinHalfBath { .. } => Err(Error::NonCommuting { norm: f64::NAN }),
    }
}

fn check_enumerable(n: u64) -> Result<()> {
    if n <= ENUMERATION_MAX_SITES {
        Ok(())
    } else {
        Err(Error::ScaleTooLarge(format!("enumeration limited to {ENUMERATION_MAX_SITES} sites per bath")))
    }
}

/// Two independent two-level baths with levels `{0, ω}`.
#[derive(Debug, Clone, Copy)]
pub struct TwoLevelDensity {
    pub omega_c: f64,
    pub omega_h: f64,
}

fn two_level(beta: f64, omega: f64) -> (f64, f64, f64) {
    // φ = ln(1 + e^{−βω}); mean ω p; variance ω² p(1−p) with p = 1/(1+e^{βω}).
    let x = beta * omega;
    let phi = if x > 0.0 { (-x).exp().ln_1p() } else { -x + x.exp().ln_1p() };
    let p = 1.0 / (1.0 + x.exp());
    (phi, omega * p, omega * omega * p * (1.0 - p))
}

impl PhiDensity for TwoLevelDensity {
    fn phi(&self, t: &[f64]) -> f64 {
        two_level(t[0], self.omega_c).0 + two_level(t[1], self.omega_h).0
    }
    fn gradient(&self, t: &[f64]) -> Option<Vec<f64>> {
        Some(vec![-two_level(t[0], self.omega_c).1, -two_level(t[1], self.omega_h).1])
    }
    fn hessian(&self, t: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[two_level(t[0], self.omega_c).2, 0.0, 0.0, two_level(t[1], self.omega_h).2],
        ))
    }
}

/// Transfer-matrix density `ln(2 cosh βJ)` per Ising bath.
#[derive(Debug, Clone, Copy)]
pub struct IsingDensity {
    pub j_c: f64,
    pub j_h: f64,
}

fn ln_2cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p()
}

impl PhiDensity for IsingDensity {
    fn phi(&self, t: &[f64]) -> f64 {
        ln_2cosh(t[0] * self.j_c) + ln_2cosh(t[1] * self.j_h)
    }
    fn gradient(&self, t: &[f64]) -> Option<Vec<f64>> {
        Some(vec![self.j_c * (t[0] * self.j_c).tanh(), self.j_h * (t[1] * self.j_h).tanh()])
    }
    fn hessian(&self, t: &[f64]) -> Option<DMatrix<f64>> {
        let s = |b: f64, j: f64| j * j / (b * j).cosh().powi(2);
        Some(DMatrix::from_row_slice(2, 2, &[s(t[0], self.j_c), 0.0, 0.0, s(t[1], self.j_h)]))
    }
}

/// Single-site spin-½ density `ln(2 cosh r)`, `r = |(βħω + γ cos θ, γ sin θ)|`.
#[derive(Debug, Clone, Copy)]
pub struct SpinHalfDensity {
    pub omega: f64,
    pub angle: f64,
}

impl SpinHalfDensity {
    fn field(&self, t: &[f64]) -> (f64, f64, f64) {
        let vz = t[0] * self.omega + t[1] * self.angle.cos();
        let vx = t[1] * self.angle.sin();
        (vz, vx, vz.hypot(vx))
    }
}

impl PhiDensity for SpinHalfDensity {
    fn phi(&self, t: &[f64]) -> f64 {
        ln_2cosh(self.field(t).2)
    }
    fn gradient(&self, t: &[f64]) -> Option<Vec<f64>> {
        let (vz, vx, r) = self.field(t);
        if r == 0.0 {
            return Some(vec![0.0, 0.0]);
        }
        let th = r.tanh();
        let (c, s) = (self.angle.cos(), self.angle.sin());
        Some(vec![th * self.omega * vz / r, th * (c * vz + s * vx) / r])
    }
    fn hessian(&self, t: &[f64]) -> Option<DMatrix<f64>> {
        let (vz, vx, r) = self.field(t);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        // Rows of dv/dθ: v_z = (ħω, cos θ), v_x = (0, sin θ).
        let a = DMatrix::from_row_slice(2, 2, &[self.omega, c, 0.0, s]);
        let m = a.transpose() * &a;
        if r < 1e-8 {
            // ln cosh r ≈ r²/2 near the origin.
            return Some(m);
        }
        let grad_r = nalgebra::DVector::from_vec(vec![(self.omega * vz) / r, (c * vz + s * vx) / r]);
        let outer = &grad_r * grad_r.transpose();
        let hess_r = (m - &outer) / r;
        let sech2 = 1.0 / r.cosh().powi(2);
        Some(hess_r * r.tanh() + outer * sech2)
    }
}

/// Low-temperature (Sommerfeld) free-entropy density of two 1D Fermi gases:
/// `φ_b = β_b c_b [4μ_b^{3/2}/3 + π² μ_b^{−1/2}/(6β_b²)]`.
#[derive(Debug, Clone, Copy)]
pub struct FermiSommerfeldDensity {
    pub c: [f64; 2],
}

impl FermiSommerfeldDensity {
    fn mu(t: &[f64], b: usize) -> (f64, f64) {
        let beta = t[b];
        (beta, -t[b + 2] / beta)
    }
}

impl PhiDensity for FermiSommerfeldDensity {
    fn phi(&self, t: &[f64]) -> f64 {
        (0..2)
            .map(|b| {
                let (beta, mu) = Self::mu(t, b);
                beta * self.c[b] * (4.0 / 3.0 * mu.powf(1.5) + PI * PI / (6.0 * beta * beta * mu.sqrt()))
            })
            .sum()
    }
    fn gradient(&self, t: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; 4];
        for b in 0..2 {
            let (beta, mu) = Self::mu(t, b);
            let c = self.c[b];
            let b2m2 = beta * beta * mu * mu;
            g[b] = -c * (8.0 * b2m2 + PI * PI) / (12.0 * beta * beta * mu.sqrt());
            g[b + 2] = -c * (24.0 * b2m2 - PI * PI) / (12.0 * beta * beta * mu.powf(1.5));
        }
        Some(g)
    }
    fn hessian(&self, t: &[f64]) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(4, 4);
        for b in 0..2 {
            let (beta, mu) = Self::mu(t, b);
            let (sh, sn, v) = sommerfeld_moments(self.c[b], beta, mu);
            h[(b, b)] = sh;
            h[(b + 2, b + 2)] = sn;
            h[(b, b + 2)] = v;
            h[(b + 2, b)] = v;
        }
        Some(h)
    }
}

/// `(σ²_H, σ²_N, V_HN)` per unit λ at low temperature.
pub fn sommerfeld_moments(c: f64, beta: f64, mu: f64) -> (f64, f64, f64) {
    let b2m2 = beta * beta * mu * mu;
    let b3 = beta.powi(3);
    (
        c * (8.0 * b2m2 + PI * PI) / (8.0 * b3 * mu.sqrt()),
        c * (8.0 * b2m2 + PI * PI) / (8.0 * b3 * mu.powf(2.5)),
        c * (24.0 * b2m2 - PI * PI) / (24.0 * b3 * mu.powf(1.5)),
    )
}

/// Analytic free-entropy density of a model.
pub fn analytic_density(spec: &ModelSpec) -> Option<Box<dyn PhiDensity>> {
    match *spec {
        ModelSpec::IidTwoLevel { omega_c, omega_h } => Some(Box::new(TwoLevelDensity { omega_c, omega_h })),
        ModelSpec::IsingChain { j_c, j_h } => Some(Box::new(IsingDensity { j_c, j_h })),
        ModelSpec::SpinHalfBath { omega, angle } => Some(Box::new(SpinHalfDensity { omega, angle })),
        ModelSpec::FermiGasWell { l_c, l_h, mass, .. } => {
            Some(Box::new(FermiSommerfeldDensity { c: [fermi_prefactor(mass, l_c), fermi_prefactor(mass, l_h)] }))
        }
    }
}

impl DensitySource for ModelSpec {
    fn labels(&self) -> Vec<Label> {
        ModelSpec::labels(self)
    }
    fn analytic_density(&self) -> Option<Box<dyn PhiDensity>> {
        analytic_density(self)
    }
    fn observables(&self, lambda: f64) -> Result<ObservableSet> {
        Ok(instantiate(self, lambda)?.obs)
    }
}

/// Closed-form Fermi-gas quantities at low temperature.
#[derive(Debug, Clone, Serialize)]
pub struct FermiReference {
    /// Per bath (cold, hot).
    pub sigma_h2: [f64; 2],
    pub sigma_n2: [f64; 2],
    pub v_hn: [f64; 2],
    pub c_hh: f64,
    pub c_nn_hh: f64,
    pub c_nn_cc: f64,
    pub c_nn_ch: f64,
    pub c_hn_h: f64,
    pub c_hn_c: f64,
    /// Both baths satisfy βμ ≥ 20.
    pub valid: bool,
}

/// Closed-form reference values.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceValues {
    /// The closed-form coefficient (C_AA for two-bath energy models, C_BB for the spin bath).
    pub coefficient: Option<f64>,
    /// Asymptotic Fisher density in the model's slot layout, row-major.
    pub g: Vec<f64>,
    pub fermi: Option<FermiReference>,
    /// Residual of `2x sinh 2x − cosh 2x − 1` at `x = β_b J_b`, per bath (cold, hot).
    pub ising_coupling_residual: Option<[f64; 2]>,
    /// `1/(2β)`, the θ → 0 limit of the spin-bath coefficient at resonance.
    pub resonance_limit: Option<f64>,
}

/// The optimal-coupling residual `2x sinh 2x − cosh 2x − 1`.
pub fn ising_coupling_residual(x: f64) -> f64 {
    2.0 * x * (2.0 * x).sinh() - (2.0 * x).cosh() - 1.0
}

/// Root of the optimal-coupling residual in `x = βJ`.
pub fn ising_optimal_coupling() -> f64 {
    let (mut lo, mut hi) = (0.1, 5.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ising_coupling_residual(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Published spin-bath coefficient
/// `x^{3/2} / (2β³(ħω)² sin²θ tanh √x)`, `x = (βħω)² + γ² + 2γβħω cos θ`.
pub fn spin_half_coefficient(beta: f64, gamma: f64, omega: f64, angle: f64) -> f64 {
    let x = (beta * omega).powi(2) + gamma * gamma + 2.0 * gamma * beta * omega * angle.cos();
    x.powf(1.5) / (2.0 * beta.powi(3) * omega * omega * angle.sin().powi(2) * x.sqrt().tanh())
}

/// Reference values for a model at θ₀.
pub fn analytic_reference(spec: &ModelSpec, theta0: &InverseTemperature) -> Result<ReferenceValues> {
    spec.validate()?;
    let t = theta0.as_slice();
    if t.len() != spec.labels().len() {
        return Err(Error::DimensionMismatch("θ₀ does not match the model".into()));
    }
    let g = analytic_density(spec)
        .and_then(|d| d.hessian(t))
        .map(|h| h.transpose().iter().copied().collect())
        .unwrap_or_default();
    let mut out =
        ReferenceValues { coefficient: None, g, fermi: None, ising_coupling_residual: None, resonance_limit: None };
    match *spec {
        ModelSpec::IidTwoLevel { omega_c, omega_h } => {
            let (bc, bh) = (t[0], t[1]);
            let sl = two_level(bc, omega_c).2;
            let sh = two_level(bh, omega_h).2;
            out.coefficient = Some(bh * bh / (2.0 * sl * bc.powi(3)) + 1.0 / (2.0 * sh * bc));
        }
        ModelSpec::IsingChain { j_c, j_h } => {
            let (bc, bh) = (t[0], t[1]);
            out.coefficient = Some(
                bh * bh * (bc * j_c).cosh().powi(2) / (2.0 * bc.powi(3) * j_c * j_c)
                    + (bh * j_h).cosh().powi(2) / (2.0 * bc * j_h * j_h),
            );
            out.ising_coupling_residual = Some([ising_coupling_residual(bc * j_c), ising_coupling_residual(bh * j_h)]);
        }
        ModelSpec::SpinHalfBath { omega, angle } => {
            if angle.sin() == 0.0 {
                return Err(Error::NoClosedForm("spin bath at θ = 0 (charges are dependent)".into()));
            }
            out.coefficient = Some(spin_half_coefficient(t[0], t[1], omega, angle));
            out.resonance_limit = Some(1.0 / (2.0 * t[0]));
        }
        ModelSpec::FermiGasWell { l_c, l_h, mass, .. } => {
            out.fermi = Some(fermi_reference(mass, [l_c, l_h], t));
        }
    }
    Ok(out)
}

fn fermi_reference(mass: f64, lengths: [f64; 2], t: &[f64]) -> FermiReference {
    let c = [fermi_prefactor(mass, lengths[0]), fermi_prefactor(mass, lengths[1])];
    let (bc, bh) = (t[0], t[1]);
    let (mc, mh) = (-t[2] / bc, -t[3] / bh);
    let (shc, snc, vc) = sommerfeld_moments(c[0], bc, mc);
    let (shh, snh, vh) = sommerfeld_moments(c[1], bh, mh);
    let r = bh / bc;
    let pi2 = PI * PI;
    // Closed forms written for equal lengths; the per-bath prefactor enters as 1/(2c_b π²).
    let kc = 1.0 / (2.0 * c[0] * pi2);
    let kh = 1.0 / (2.0 * c[1] * pi2);
    let frac = |mu: f64, b: f64| (8.0 * b * b * mu * mu + pi2) / (24.0 * b * b * mu * mu + pi2);
    let c_hh = 9.0 * bc * bc * (kc * r * r * mc.sqrt() * frac(mc, bc) + kh * r.powi(3) * mh.sqrt() * frac(mh, bc * r));
    let c_nn_hh = 9.0
        * bc
        * bc
        * (kc * r * r * mh * mh * mc.sqrt() * frac(mc, bc) + kh * r.powi(3) * mh.powf(2.5) * frac(mh, bc * r));
    let denom_c = 24.0 * bc * bc * mc * mc + pi2;
    let c_nn_cc = 24.0 * pi2 * kc * mc.powf(2.5) * bc * bc / denom_c;
    let c_nn_ch = 24.0 * pi2 * kc * r * mh * mc.powf(1.5) * bc * bc / denom_c;
    let c_hn_h = -6.0
        * bc
        * bc
        * (3.0 * kc * r * r * mh * mc.sqrt() * frac(mc, bc)
            + kh * r.powi(3) * mh.powf(1.5) * (24.0 * bc * bc * r * r * mh * mh - pi2)
                / (24.0 * bc * bc * r * r * mh * mh + pi2));
    let c_hn_c = -24.0 * pi2 * kc * r * mc.powf(1.5) * bc * bc / denom_c;
    FermiReference {
        sigma_h2: [shc, shh],
        sigma_n2: [snc, snh],
        v_hn: [vc, vh],
        c_hh,
        c_nn_hh,
        c_nn_cc,
        c_nn_ch,
        c_hn_h,
        c_hn_c,
        valid: bc * mc >= 20.0 && bh * mh >= 20.0,
    }
}
