//! Bath observables and their joint spectra.
//!
//! Three storage forms are supported. `Dense` holds complex Hermitian matrices and
//! is the only form allowed to be non-commuting. `Diagonal` holds eigenvalues in a
//! shared computational basis, one entry per basis state. `Product` holds the
//! observables of independent subsystems (factors); a factor is either an explicit
//! list of value classes or `n` i.i.d. copies of a single-site spectrum, in which
//! case its joint eigenvalues are indexed by occupation-count type classes.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, binomial_exact, ln_factorial, log_sum_exp, NeumaierSum, DENSE_CAP};

/// Hermiticity tolerance, relative to the largest entry.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Absolute tolerance on the commutator max entry.
pub const COMMUTATOR_TOL: f64 = 1e-10;
/// Smallest admissible Gram eigenvalue relative to the largest.
pub const GRAM_TOL: f64 = 1e-10;
/// Default cap on materialized joint spectra.
pub const CLASS_CAP: usize = 1 << 24;

/// Kind of conserved quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quantity {
    /// The work-carrying quantity (energy in most models).
    A,
    /// An auxiliary conserved charge.
    B,
}

/// Which bath a quantity belongs to and what kind it is. Baths are numbered from 1;
/// bath 1 is the cold bath whose quantity-A slot is distinguished.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label {
    pub bath: u8,
    pub quantity: Quantity,
}

impl Label {
    pub const A1: Label = Label { bath: 1, quantity: Quantity::A };
    pub const A2: Label = Label { bath: 2, quantity: Quantity::A };
    pub const B1: Label = Label { bath: 1, quantity: Quantity::B };
    pub const B2: Label = Label { bath: 2, quantity: Quantity::B };

    pub fn new(bath: u8, quantity: Quantity) -> Self {
        Self { bath, quantity }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let q = match self.quantity {
            Quantity::A => "A",
            Quantity::B => "B",
        };
        write!(f, "{}{}", q, self.bath)
    }
}

/// One joint-eigenvalue class of a factor: shared values and multiplicity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueClass {
    pub values: Vec<f64>,
    pub ln_mult: f64,
    /// Exact multiplicity when it fits in 64 bits.
    pub count: Option<u64>,
}

/// An independent subsystem of a product representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// Explicit value classes.
    Classes(Vec<ValueClass>),
    /// `sites` i.i.d. copies of a single-site spectrum, `levels[l]` being the value
    /// tuple of single-site level `l`.
    Iid { levels: Vec<Vec<f64>>, sites: u64 },
}

/// Thermodynamic summary of a single factor at fixed θ.
#[derive(Debug, Clone)]
pub struct FactorThermo {
    pub phi: f64,
    pub eta: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub entropy: f64,
}

impl Factor {
    /// Value classes of this factor, building type classes for i.i.d. factors.
    pub fn classes(&self, cap: usize) -> Result<Vec<ValueClass>> {
        match self {
            Factor::Classes(c) => Ok(c.clone()),
            Factor::Iid { levels, sites } => type_classes(levels, *sites, cap),
        }
    }

    /// Number of value classes without building them (upper bound for i.i.d.).
    pub fn class_count(&self) -> f64 {
        match self {
            Factor::Classes(c) => c.len() as f64,
            Factor::Iid { levels, sites } => {
                let d = levels.len() as u64;
                if d == 0 {
                    return 0.0;
                }
                (ln_factorial(sites + d - 1) - ln_factorial(d - 1) - ln_factorial(*sites)).exp()
            }
        }
    }

    /// Natural log of the factor's Hilbert-space dimension.
    pub fn ln_dim(&self) -> f64 {
        match self {
            Factor::Classes(c) => log_sum_exp(c.iter().map(|v| v.ln_mult)),
            Factor::Iid { levels, sites } => *sites as f64 * (levels.len() as f64).ln(),
        }
    }

    /// Exact dimension when it fits in 64 bits.
    pub fn dim_exact(&self) -> Option<u64> {
        match self {
            Factor::Classes(c) => c.iter().try_fold(0u64, |acc, v| acc.checked_add(v.count?)),
            Factor::Iid { levels, sites } => {
                let d = levels.len() as u64;
                let e = u32::try_from(*sites).ok()?;
                d.checked_pow(e)
            }
        }
    }

    /// Per-coordinate spectral range.
    pub fn range(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let (base, n): (Vec<&Vec<f64>>, f64) = match self {
            Factor::Classes(c) => (c.iter().map(|v| &v.values).collect(), 1.0),
            Factor::Iid { levels, sites } => (levels.iter().collect(), *sites as f64),
        };
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        for v in base {
            for j in 0..k {
                lo[j] = lo[j].min(v[j] * n);
                hi[j] = hi[j].max(v[j] * n);
            }
        }
        (lo, hi)
    }

    /// Free entropy, mean, covariance and entropy of the tilted factor.
    pub fn thermo(&self, theta: &[f64]) -> FactorThermo {
        let k = theta.len();
        let (classes, n): (Vec<(&[f64], f64)>, f64) = match self {
            Factor::Classes(c) => (c.iter().map(|v| (v.values.as_slice(), v.ln_mult)).collect(), 1.0),
            Factor::Iid { levels, sites } => (levels.iter().map(|v| (v.as_slice(), 0.0)).collect(), *sites as f64),
        };
        let f: Vec<f64> = classes.iter().map(|(x, _)| dot(theta, x)).collect();
        let lw: Vec<f64> = classes.iter().zip(&f).map(|((_, lm), fc)| lm - fc).collect();
        let phi = log_sum_exp(lw.iter().copied());
        let probs: Vec<f64> = lw.iter().map(|l| (l - phi).exp()).collect();
        let mut eta = vec![0.0; k];
        for j in 0..k {
            let mut s = NeumaierSum::new();
            for ((x, _), p) in classes.iter().zip(&probs) {
                s.add(p * x[j]);
            }
            eta[j] = s.value();
        }
        let mut cov = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let mut s = NeumaierSum::new();
                for ((x, _), p) in classes.iter().zip(&probs) {
                    s.add(p * (x[i] - eta[i]) * (x[j] - eta[j]));
                }
                cov[(i, j)] = s.value() * n;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let mut ent = NeumaierSum::new();
        // Per-state log-probability is -f - phi whatever the class multiplicity.
        for (fc, p) in f.iter().zip(&probs) {
            ent.add(p * (fc + phi));
        }
        FactorThermo { phi: phi * n, eta: eta.iter().map(|e| e * n).collect(), cov, entropy: ent.value() * n }
    }
}

/// Storage form of an observable set.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    /// One complex matrix per observable.
    Dense(Vec<DMatrix<Complex64>>),
    /// `values[j][s]` is the eigenvalue of observable `j` on basis state `s`.
    Diagonal(Vec<Vec<f64>>),
    /// Independent factors; the joint space is their tensor product.
    Product(Vec<Factor>),
}

/// K labeled bath observables sharing one representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSet {
    labels: Vec<Label>,
    repr: Representation,
    scale: f64,
}

/// Outcome of [`validate`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub representation: &'static str,
    pub hermiticity_residuals: Vec<f64>,
    /// Eigenvalues of the unit-diagonal Gram matrix of `{X_1..X_K, I}`, ascending.
    pub gram_spectrum: Vec<f64>,
    pub commutator_norm: f64,
    pub passed: bool,
}

/// One entry of a joint spectrum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumEntry {
    pub values: Vec<f64>,
    /// Log of the unnormalized weight (zero for the bare spectrum).
    pub ln_weight: f64,
    pub ln_mult: f64,
    pub count: Option<u64>,
}

/// Simultaneous eigenvalues of a commuting set with multiplicities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointSpectrum {
    pub entries: Vec<SpectrumEntry>,
    pub ln_dim: f64,
    pub dim: Option<u64>,
}

impl JointSpectrum {
    /// Total multiplicity, exact when every count is known.
    pub fn total_count(&self) -> Option<u64> {
        self.entries.iter().try_fold(0u64, |acc, e| acc.checked_add(e.count?))
    }

    /// Log of the total multiplicity.
    pub fn ln_total(&self) -> f64 {
        log_sum_exp(self.entries.iter().map(|e| e.ln_mult))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ObservableSet {
    fn check_labels(labels: &[Label], k: usize) -> Result<()> {
        if labels.len() != k || k == 0 {
            return Err(Error::DimensionMismatch(format!("{} labels for {} observables", labels.len(), k)));
        }
        if labels[0] != Label::A1 {
            return Err(Error::InvalidParameter("slot 0 must be the cold-bath quantity A1".into()));
        }
        let mut seen = labels.to_vec();
        seen.sort();
        seen.dedup();
        if seen.len() != labels.len() {
            return Err(Error::InvalidParameter("duplicate observable labels".into()));
        }
        Ok(())
    }

    fn check_scale(scale: f64) -> Result<()> {
        if scale.is_finite() && scale > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")))
        }
    }

    /// Dense Hermitian observables on a `d`-dimensional space.
    pub fn dense(labels: Vec<Label>, mats: Vec<DMatrix<Complex64>>, scale: f64) -> Result<Self> {
        Self::check_labels(&labels, mats.len())?;
        Self::check_scale(scale)?;
        let d = mats[0].nrows();
        for m in &mats {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimensionMismatch(format!("expected {d}x{d}, found {}x{}", m.nrows(), m.ncols())));
            }
        }
        Ok(Self { labels, repr: Representation::Dense(mats), scale })
    }

    /// Diagonal observables; `values[j]` lists the eigenvalues of observable `j`.
    pub fn diagonal(labels: Vec<Label>, values: Vec<Vec<f64>>, scale: f64) -> Result<Self> {
        Self::check_labels(&labels, values.len())?;
        Self::check_scale(scale)?;
        let d = values[0].len();
        if values.iter().any(|v| v.len() != d) || d == 0 {
            return Err(Error::DimensionMismatch("diagonal observables differ in length".into()));
        }
        Ok(Self { labels, repr: Representation::Diagonal(values), scale })
    }

    /// Sum over `n` i.i.d. sites of a single-site diagonal factor;
    /// `site_values[j][l]` is observable `j` on single-site level `l`.
    pub fn iid_sum(labels: Vec<Label>, site_values: Vec<Vec<f64>>, n: u64, scale: f64) -> Result<Self> {
        Self::check_labels(&labels, site_values.len())?;
        let d0 = site_values[0].len();
        if site_values.iter().any(|v| v.len() != d0) || d0 == 0 {
            return Err(Error::DimensionMismatch("single-site factors differ in length".into()));
        }
        let levels = (0..d0).map(|l| site_values.iter().map(|v| v[l]).collect()).collect();
        Self::product(labels, vec![Factor::Iid { levels, sites: n }], scale)
    }

    /// Product of independent factors. Every factor value tuple has length K.
    pub fn product(labels: Vec<Label>, factors: Vec<Factor>, scale: f64) -> Result<Self> {
        Self::check_scale(scale)?;
        let k = labels.len();
        Self::check_labels(&labels, k)?;
        if factors.is_empty() {
            return Err(Error::DimensionMismatch("product without factors".into()));
        }
        for f in &factors {
            let ok = match f {
                Factor::Classes(c) => !c.is_empty() && c.iter().all(|v| v.values.len() == k),
                Factor::Iid { levels, sites } => {
                    !levels.is_empty() && *sites > 0 && levels.iter().all(|v| v.len() == k)
                }
            };
            if !ok {
                return Err(Error::DimensionMismatch("factor value tuples must have length K".into()));
            }
        }
        Ok(Self { labels, repr: Representation::Product(factors), scale })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn representation(&self) -> &Representation {
        &self.repr
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// Slot index of a label.
    pub fn slot(&self, label: Label) -> Option<usize> {
        self.labels.iter().position(|l| *l == label)
    }

    /// Natural log of the joint dimension.
    pub fn ln_dim(&self) -> f64 {
        match &self.repr {
            Representation::Dense(m) => (m[0].nrows() as f64).ln(),
            Representation::Diagonal(v) => (v[0].len() as f64).ln(),
            Representation::Product(f) => f.iter().map(Factor::ln_dim).sum(),
        }
    }

    /// Joint dimension when it fits in 64 bits.
    pub fn dim(&self) -> Option<u64> {
        match &self.repr {
            Representation::Dense(m) => Some(m[0].nrows() as u64),
            Representation::Diagonal(v) => Some(v[0].len() as u64),
            Representation::Product(f) => f.iter().try_fold(1u64, |acc, x| acc.checked_mul(x.dim_exact()?)),
        }
    }

    /// Whether the set is stored in a commuting form or is dense but commuting.
    pub fn is_commutative(&self) -> bool {
        match &self.repr {
            Representation::Dense(m) => max_commutator(m) <= COMMUTATOR_TOL,
            _ => true,
        }
    }

    /// Smallest and largest eigenvalue of each observable.
    pub fn spectral_ranges(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.k();
        match &self.repr {
            Representation::Dense(m) => {
                let mut lo = Vec::with_capacity(k);
                let mut hi = Vec::with_capacity(k);
                for x in m {
                    let (ev, _) = linalg::hermitian_eig(x, DENSE_CAP)?;
                    lo.push(ev[0]);
                    hi.push(*ev.last().unwrap());
                }
                Ok((lo, hi))
            }
            Representation::Diagonal(v) => Ok((
                v.iter().map(|x| x.iter().copied().fold(f64::INFINITY, f64::min)).collect(),
                v.iter().map(|x| x.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect(),
            )),
            Representation::Product(f) => {
                let mut lo = vec![0.0; k];
                let mut hi = vec![0.0; k];
                for fac in f {
                    let (l, h) = fac.range(k);
                    for j in 0..k {
                        lo[j] += l[j];
                        hi[j] += h[j];
                    }
                }
                Ok((lo, hi))
            }
        }
    }

    /// Per-state value tuples of a diagonal set.
    pub fn diagonal_state(&self, s: usize) -> Option<Vec<f64>> {
        match &self.repr {
            Representation::Diagonal(v) => Some(v.iter().map(|x| x[s]).collect()),
            _ => None,
        }
    }
}

fn max_commutator(m: &[DMatrix<Complex64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.len() {
        for j in (i + 1)..m.len() {
            let c = &m[i] * &m[j] - &m[j] * &m[i];
            worst = worst.max(linalg::max_abs(&c));
        }
    }
    worst
}

/// Check Hermiticity, representation consistency and linear independence.
pub fn validate(obs: &ObservableSet) -> Result<ValidationReport> {
    let k = obs.k();
    let mut herm = Vec::new();
    let (gram, comm, rep) = match &obs.repr {
        Representation::Dense(m) => {
            for (i, x) in m.iter().enumerate() {
                let scale = linalg::max_abs(x);
                let r = linalg::max_abs(&(x - x.adjoint()));
                herm.push(r);
                if r > HERMITIAN_TOL * scale.max(f64::MIN_POSITIVE) {
                    return Err(Error::NonHermitian { index: i, residual: r });
                }
            }
            let d = m[0].nrows() as f64;
            let mut g = DMatrix::zeros(k + 1, k + 1);
            for i in 0..k {
                for j in i..k {
                    let t: Complex64 = m[i].map(|z| z.conj()).component_mul(&m[j]).sum();
                    g[(i, j)] = t.re / d;
                    g[(j, i)] = g[(i, j)];
                }
                g[(i, k)] = m[i].trace().re / d;
                g[(k, i)] = g[(i, k)];
            }
            g[(k, k)] = 1.0;
            (g, max_commutator(m), "dense")
        }
        Representation::Diagonal(v) => {
            let d = v[0].len() as f64;
            let mut g = DMatrix::zeros(k + 1, k + 1);
            for i in 0..k {
                for j in i..k {
                    g[(i, j)] = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum::<f64>() / d;
                    g[(j, i)] = g[(i, j)];
                }
                g[(i, k)] = v[i].iter().sum::<f64>() / d;
                g[(k, i)] = g[(i, k)];
            }
            g[(k, k)] = 1.0;
            (g, 0.0, "diagonal")
        }
        Representation::Product(f) => {
            // Uniform moments: the θ = 0 state is the normalized identity.
            let zero = vec![0.0; k];
            let mut eta = vec![0.0; k];
            let mut cov = DMatrix::zeros(k, k);
            for fac in f {
                let t = fac.thermo(&zero);
                for (e, x) in eta.iter_mut().zip(&t.eta) {
                    *e += x;
                }
                cov += t.cov;
            }
            let mut g = DMatrix::zeros(k + 1, k + 1);
            for i in 0..k {
                for j in 0..k {
                    g[(i, j)] = cov[(i, j)] + eta[i] * eta[j];
                }
                g[(i, k)] = eta[i];
                g[(k, i)] = eta[i];
            }
            g[(k, k)] = 1.0;
            (g, 0.0, "product")
        }
    };
    // Unit diagonal makes the rank test independent of the units of each quantity.
    let mut norm = gram.clone();
    for i in 0..=k {
        for j in 0..=k {
            let s = (gram[(i, i)] * gram[(j, j)]).sqrt();
            norm[(i, j)] = if s > 0.0 { gram[(i, j)] / s } else { 0.0 };
        }
    }
    let mut spec: Vec<f64> = nalgebra::SymmetricEigen::new(norm).eigenvalues.iter().copied().collect();
    spec.sort_by(f64::total_cmp);
    let ratio = spec[0] / spec[k].max(f64::MIN_POSITIVE);
    if !(ratio > GRAM_TOL) {
        return Err(Error::DegenerateObservables { ratio });
    }
    Ok(ValidationReport {
        representation: rep,
        hermiticity_residuals: herm,
        gram_spectrum: spec,
        commutator_norm: comm,
        passed: true,
    })
}

/// Eigendecomposition of a dense Hermitian matrix with the default dimension cap.
pub fn dense_eig(h: &DMatrix<Complex64>) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    linalg::hermitian_eig(h, DENSE_CAP)
}

/// Merge classes with equal value tuples.
///
/// Values are compared after quantization at `1e-10` of each coordinate's range so
/// that sums of the same integers in different orders land on the same key.
pub fn merge_classes(classes: Vec<ValueClass>) -> Vec<ValueClass> {
    if classes.is_empty() {
        return classes;
    }
    let k = classes[0].values.len();
    let quanta: Vec<f64> = (0..k)
        .map(|j| {
            let m = classes.iter().map(|c| c.values[j].abs()).fold(0.0, f64::max);
            1e-10 * m.max(1.0)
        })
        .collect();
    // Key: quantized values. Entry: values, log multiplicities, exact count.
    type Group = (Vec<f64>, Vec<f64>, Option<u64>);
    let mut groups: BTreeMap<Vec<i64>, Group> = BTreeMap::new();
    for c in classes {
        let key: Vec<i64> = c.values.iter().zip(&quanta).map(|(v, q)| (v / q).round() as i64).collect();
        match groups.get_mut(&key) {
            Some((_, lms, count)) => {
                lms.push(c.ln_mult);
                *count = match (*count, c.count) {
                    (Some(a), Some(b)) => a.checked_add(b),
                    _ => None,
                };
            }
            None => {
                groups.insert(key, (c.values, vec![c.ln_mult], c.count));
            }
        }
    }
    groups
        .into_values()
        .map(|(values, lms, count)| ValueClass {
            values,
            ln_mult: match count {
                Some(c) if c < (1u64 << 53) => (c as f64).ln(),
                _ => log_sum_exp(lms),
            },
            count,
        })
        .collect()
}

/// Occupation-count type classes of `sites` i.i.d. copies of `levels`.
pub fn type_classes(levels: &[Vec<f64>], sites: u64, cap: usize) -> Result<Vec<ValueClass>> {
    let d = levels.len();
    let k = levels[0].len();
    let approx = Factor::Iid { levels: levels.to_vec(), sites }.class_count();
    if approx > cap as f64 {
        return Err(Error::ScaleTooLarge(format!("{approx:.3e} type classes exceed cap {cap}")));
    }
    let mut out = Vec::new();
    let mut counts = vec![0u64; d];
    fn rec(
        l: usize,
        left: u64,
        counts: &mut [u64],
        levels: &[Vec<f64>],
        k: usize,
        sites: u64,
        out: &mut Vec<ValueClass>,
    ) {
        let d = counts.len();
        if l + 1 == d {
            counts[l] = left;
            let mut values = vec![0.0; k];
            for (c, lev) in counts.iter().zip(levels) {
                for j in 0..k {
                    values[j] += *c as f64 * lev[j];
                }
            }
            let count = multinomial_exact(sites, counts);
            let ln_mult = match count {
                Some(c) if c < (1u64 << 53) => (c as f64).ln(),
                _ => {
                    let mut left = sites;
                    let mut acc = NeumaierSum::new();
                    for c in counts.iter() {
                        acc.add(linalg::ln_binomial(left, *c));
                        left -= c;
                    }
                    acc.value()
                }
            };
            out.push(ValueClass { values, ln_mult, count });
            return;
        }
        for c in 0..=left {
            counts[l] = c;
            rec(l + 1, left - c, counts, levels, k, sites, out);
        }
    }
    rec(0, sites, &mut counts, levels, k, sites, &mut out);
    Ok(merge_classes(out))
}

fn multinomial_exact(n: u64, counts: &[u64]) -> Option<u64> {
    let mut left = n;
    let mut acc: u128 = 1;
    for c in counts {
        acc = acc.checked_mul(binomial_exact(left, *c)?)?;
        left -= c;
    }
    u64::try_from(acc).ok()
}

/// Product of factor class lists, merged by value tuple.
pub fn product_classes(factors: &[Factor], cap: usize) -> Result<Vec<ValueClass>> {
    let total: f64 = factors.iter().map(Factor::class_count).product();
    if total > cap as f64 {
        return Err(Error::ScaleTooLarge(format!("{total:.3e} product classes exceed cap {cap}")));
    }
    let mut acc: Vec<ValueClass> = Vec::new();
    for (i, f) in factors.iter().enumerate() {
        let cls = f.classes(cap)?;
        if i == 0 {
            acc = cls;
            continue;
        }
        let mut next = Vec::with_capacity(acc.len() * cls.len());
        for a in &acc {
            for b in &cls {
                next.push(ValueClass {
                    values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
                    ln_mult: a.ln_mult + b.ln_mult,
                    count: a.count.zip(b.count).and_then(|(x, y)| x.checked_mul(y)),
                });
            }
        }
        acc = merge_classes(next);
    }
    Ok(acc)
}

/// Simultaneous eigenvalues with multiplicities for a commuting set.
pub fn joint_spectrum(obs: &ObservableSet) -> Result<JointSpectrum> {
    joint_spectrum_capped(obs, CLASS_CAP)
}

/// [`joint_spectrum`] with an explicit cap on the number of classes.
pub fn joint_spectrum_capped(obs: &ObservableSet, cap: usize) -> Result<JointSpectrum> {
    let k = obs.k();
    let classes = match &obs.repr {
        Representation::Dense(m) => {
            let norm = max_commutator(m);
            if norm > COMMUTATOR_TOL {
                return Err(Error::NonCommuting { norm });
            }
            // A generic combination separates every joint eigenspace.
            let d = m[0].nrows();
            let mut h = DMatrix::<Complex64>::zeros(d, d);
            for (j, x) in m.iter().enumerate() {
                let c = 1.0 + 0.7548776662466927 * (j as f64 + 1.0).powf(1.3);
                h += x * Complex64::new(c, 0.0);
            }
            let (_, v) = dense_eig(&h)?;
            let mut out = Vec::with_capacity(d);
            for c in 0..d {
                let col = v.column(c);
                let values = m.iter().map(|x| (col.adjoint() * x * col)[(0, 0)].re).collect();
                out.push(ValueClass { values, ln_mult: 0.0, count: Some(1) });
            }
            merge_classes(out)
        }
        Representation::Diagonal(v) => {
            let d = v[0].len();
            if d > cap {
                return Err(Error::ScaleTooLarge(format!("{d} states exceed cap {cap}")));
            }
            let out = (0..d)
                .map(|s| ValueClass { values: (0..k).map(|j| v[j][s]).collect(), ln_mult: 0.0, count: Some(1) })
                .collect();
            merge_classes(out)
        }
        Representation::Product(f) => product_classes(f, cap)?,
    };
    let entries: Vec<SpectrumEntry> = classes
        .into_iter()
        .map(|c| SpectrumEntry { values: c.values, ln_weight: 0.0, ln_mult: c.ln_mult, count: c.count })
        .collect();
    Ok(JointSpectrum { entries, ln_dim: obs.ln_dim(), dim: obs.dim() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sz() -> DMatrix<Complex64> {
        DMatrix::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)])
    }

    fn sx() -> DMatrix<Complex64> {
        DMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)])
    }

    #[test]
    fn pauli_pair_validates() {
        let obs = ObservableSet::dense(vec![Label::A1, Label::B1], vec![sz(), sx()], 1.0).unwrap();
        let r = validate(&obs).unwrap();
        assert!(r.passed);
        assert_eq!(r.gram_spectrum.len(), 3);
    }

    #[test]
    fn dependent_pair_is_rejected() {
        let obs = ObservableSet::dense(vec![Label::A1, Label::B1], vec![sz(), sz() * c(2., 0.)], 1.0).unwrap();
        assert!(matches!(validate(&obs), Err(Error::DegenerateObservables { .. })));
    }

    #[test]
    fn non_hermitian_is_rejected() {
        let mut x = sz();
        x[(0, 1)] = c(0.0, 1e-6);
        let obs = ObservableSet::dense(vec![Label::A1], vec![x], 1.0).unwrap();
        assert!(matches!(validate(&obs), Err(Error::NonHermitian { .. })));
    }

    #[test]
    fn qubit_joint_spectrum() {
        let obs = ObservableSet::dense(vec![Label::A1], vec![sz()], 1.0).unwrap();
        let js = joint_spectrum(&obs).unwrap();
        let mut vals: Vec<f64> = js.entries.iter().map(|e| e.values[0]).collect();
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] + 1.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        assert_eq!(js.total_count(), Some(2));
    }

    #[test]
    fn non_commuting_joint_spectrum_fails() {
        let obs = ObservableSet::dense(vec![Label::A1, Label::B1], vec![sz(), sx()], 1.0).unwrap();
        assert!(matches!(joint_spectrum(&obs), Err(Error::NonCommuting { .. })));
    }

    #[test]
    fn iid_sigma_z_three_sites() {
        let obs = ObservableSet::iid_sum(vec![Label::A1], vec![vec![1.0, -1.0]], 3, 3.0).unwrap();
        let js = joint_spectrum(&obs).unwrap();
        let mut got: Vec<(i64, u64)> =
            js.entries.iter().map(|e| (e.values[0].round() as i64, e.count.unwrap())).collect();
        got.sort();
        assert_eq!(got, vec![(-3, 1), (-1, 3), (1, 3), (3, 1)]);
        assert_eq!(js.total_count(), Some(8));
        assert_eq!(js.dim, Some(8));
    }

    #[test]
    fn ising_pair_by_enumeration() {
        // H = -J (s1 s2 + s2 s1) over the four configurations.
        let energies: Vec<f64> = (0..4)
            .map(|cfg| {
                let s1 = if cfg & 1 == 0 { 1.0 } else { -1.0 };
                let s2 = if cfg & 2 == 0 { 1.0 } else { -1.0 };
                -2.0 * s1 * s2
            })
            .collect();
        let obs = ObservableSet::diagonal(vec![Label::A1], vec![energies], 2.0).unwrap();
        let js = joint_spectrum(&obs).unwrap();
        let got: Vec<(i64, u64)> = js.entries.iter().map(|e| (e.values[0] as i64, e.count.unwrap())).collect();
        assert_eq!(got, vec![(-2, 2), (2, 2)]);
    }

    #[test]
    fn dense_eig_examples() {
        let (v, _) = dense_eig(&sx()).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-14 && (v[1] - 1.0).abs() < 1e-14);
        let (v, _) = dense_eig(&(sz() + sx())).unwrap();
        assert!((v[1] - 2f64.sqrt()).abs() < 1e-14 && (v[0] + 2f64.sqrt()).abs() < 1e-14);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1., 0.), c(2., 0.), c(3., 0.)]));
        let (v, b) = dense_eig(&d).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
        assert!((b - DMatrix::<Complex64>::identity(3, 3)).iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn dense_cap_enforced() {
        let big = DMatrix::<Complex64>::zeros(5, 5);
        assert!(matches!(linalg::hermitian_eig(&big, 4), Err(Error::DimensionCap { .. })));
    }
}
