//! The ideal final thermal state and the rank-matching permutation protocol.
//!
//! The protocol sends the i-th most probable eigenstate of `τ_{θ₀}` to the i-th
//! most probable eigenstate of `τ_{θ_λ}`. Commuting spectra are coupled class by
//! class: two descending class lists are walked together and split wherever their
//! cumulative state counts disagree. Very large two-factor products are streamed in
//! probability order inside a window that carries all but a negligible tail of the
//! mass, so the joint class list is never materialized.

mod stream;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fgcb::{self, FgcbCoefficients, HeatVector};
use crate::linalg::{self, NeumaierSum};
use crate::operators::{self, Label, ObservableSet, Quantity, Representation};
use crate::thermal::{
    self, build_thermal_state, dot, match_moments, thermo_point, DensityOperator, DualCoordinates, InverseTemperature,
    Spectrum, ThermalState,
};

/// Most slots a class-based coupling handles.
pub const MAX_SLOTS: usize = 4;
/// Relative residual accepted from the θ_λ solver.
pub const SOLVER_TOL: f64 = 1e-9;
const SOLVER_MAX_ITER: usize = 200;

/// Ideal final inverse temperature and the quality of the solve.
#[derive(Debug, Clone, Serialize)]
pub struct IdealFinalTemperature {
    pub theta_lambda: InverseTemperature,
    /// Relative entropy gap, then one relative heat gap per non-distinguished slot.
    pub residuals: Vec<f64>,
    /// `β_{λ1} β₁ ≥ 0`.
    pub sign_ok: bool,
    pub iterations: usize,
}

fn rel(gap: f64, scale: f64) -> f64 {
    gap.abs() / (1.0 + scale.abs())
}

/// Solve `S(τ_θ) = S(τ_{θ₀})` and `tr X_k(τ_{θ₀} − τ_θ) = Q_k` for every `k ≠ 0`.
pub fn solve_ideal_final_temperature(
    obs: &ObservableSet,
    theta0: &InverseTemperature,
    q: &HeatVector,
    lambda: f64,
) -> Result<IdealFinalTemperature> {
    let k = obs.k();
    if theta0.len() != k {
        return Err(Error::DimensionMismatch(format!("θ₀ has {} components, K = {k}", theta0.len())));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("λ must be positive, got {lambda}")));
    }
    let heats = q.slot_heats(obs.labels())?;
    let p0 = thermo_point(obs, theta0)?;
    let s0 = p0.entropy;
    let target: Vec<f64> = (1..k).map(|j| p0.eta[j] - heats[j - 1]).collect();
    let (lo, hi) = obs.spectral_ranges()?;
    for j in 1..k {
        let t = target[j - 1];
        if !(t > lo[j] && t < hi[j]) {
            return Err(Error::HullViolation { component: j });
        }
    }
    if heats.iter().all(|h| *h == 0.0) {
        return Ok(IdealFinalTemperature {
            theta_lambda: theta0.clone(),
            residuals: vec![0.0; k],
            sign_ok: true,
            iterations: 0,
        });
    }

    let t0 = theta0.as_slice();
    let eval = |theta: &InverseTemperature| -> Result<(Vec<f64>, thermal::ThermoPoint)> {
        let p = thermo_point(obs, theta)?;
        let mut r = Vec::with_capacity(k);
        r.push(rel(p.entropy - s0, s0));
        for j in 1..k {
            r.push(rel(p.eta[j] - target[j - 1], target[j - 1]));
        }
        Ok((r, p))
    };
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    // Linearized start: dS = θ·dη = 0 fixes the change of the distinguished moment.
    let mut deta = vec![0.0; k];
    if t0[0] != 0.0 {
        deta[0] = (1..k).map(|j| t0[j] * heats[j - 1]).sum::<f64>() / t0[0];
    }
    for j in 1..k {
        deta[j] = -heats[j - 1];
    }
    let (mut r, mut point) = eval(theta0)?;
    let mut res = norm(&r);
    let mut theta = theta0.clone();
    if let Some(step) = linalg::solve(&p0.fisher, &DVector::from_vec(deta)) {
        let cand = InverseTemperature(t0.iter().zip(step.iter()).map(|(a, s)| a - s).collect());
        if let Ok((rc, pc)) = eval(&cand) {
            if norm(&rc) < res {
                (theta, r, point, res) = (cand, rc.clone(), pc, norm(&rc));
            }
        }
    }

    let mut iterations = 0;
    while iterations < SOLVER_MAX_ITER {
        iterations += 1;
        let th = theta.as_slice();
        let j = &point.fisher;
        // Rows scaled to relative units; ∂S/∂θ = −θᵀJ and ∂η/∂θ = −J.
        let mut jac = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        let srow = 1.0 + s0.abs();
        for c in 0..k {
            jac[(0, c)] = -(0..k).map(|i| th[i] * j[(i, c)]).sum::<f64>() / srow;
        }
        rhs[0] = -(point.entropy - s0) / srow;
        for row in 1..k {
            let sc = 1.0 + target[row - 1].abs();
            for c in 0..k {
                jac[(row, c)] = -j[(row, c)] / sc;
            }
            rhs[row] = -(point.eta[row] - target[row - 1]) / sc;
        }
        // Equilibrate rows so each has unit max entry.
        for row in 0..k {
            let m = (0..k).map(|c| jac[(row, c)].abs()).fold(0.0, f64::max);
            if m > 0.0 {
                for c in 0..k {
                    jac[(row, c)] /= m;
                }
                rhs[row] /= m;
            }
        }
        let Some(step) = linalg::solve(&jac, &rhs) else {
            break;
        };
        // Trust region: the family has faces at infinity that can look attractive to
        // a residual-only line search, so a step may not outgrow θ itself.
        let thn = th.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut t = (0.5 * (1.0 + thn) / step.norm()).min(1.0);
        let mut accepted = false;
        for _ in 0..60 {
            let cand = InverseTemperature(th.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect());
            if let Ok((rc, pc)) = eval(&cand) {
                let nc = norm(&rc);
                if nc.is_finite() && nc < res {
                    theta = cand;
                    point = pc;
                    r = rc;
                    res = nc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        let thn = theta.0.iter().map(|x| x * x).sum::<f64>().sqrt();
        if res <= SOLVER_TOL && step.norm() * t <= 1e-15 * (1.0 + thn) {
            break;
        }
    }
    if !(res <= SOLVER_TOL) {
        return Err(Error::NoConvergence { iterations, residual: res, best: theta.0 });
    }
    let sign_ok = theta.0[0] * t0[0] >= 0.0;
    if !sign_ok {
        return Err(Error::SignViolation { beta0: t0[0], beta_lambda: theta.0[0] });
    }
    Ok(IdealFinalTemperature { theta_lambda: theta, residuals: r, sign_ok, iterations })
}

/// Which construction produced an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolPath {
    /// Eigenvectors of dense matrices, commuting or not.
    Dense,
    /// Every basis state of a diagonal set, coupled by an explicit permutation.
    Enumerated,
    /// Materialized joint-value classes.
    Classes,
    /// Two-factor product streamed in probability order.
    Streamed,
}

/// A maximal block of states moved together by the coupling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingRun {
    /// Rank of the initial class in the descending spectrum of `τ_{θ₀}`.
    pub from_rank: usize,
    /// Rank of the final class in the descending spectrum of `τ_{θ_λ}`.
    pub to_rank: usize,
    pub ln_count: f64,
    pub count: Option<u64>,
    pub from_values: Vec<f64>,
    pub to_values: Vec<f64>,
}

/// The rank-matched assignment.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// `perm[s]` is the basis state receiving the population of basis state `s`. On
    /// the dense path indices are eigenvector ranks of the two thermal states.
    Permutation(Vec<usize>),
    /// Run-length coupling between class lists.
    Runs(Vec<CouplingRun>),
    /// Too large to store; only the number of runs is kept.
    Streamed { runs: u64 },
}

/// Everything measured on `ρ_opt`.
#[derive(Debug, Clone, Serialize)]
pub struct ProtocolOutcome {
    pub path: ProtocolPath,
    pub labels: Vec<Label>,
    pub theta0: InverseTemperature,
    pub theta_lambda: InverseTemperature,
    #[serde(skip)]
    pub coupling: Coupling,
    /// `η(θ₀)`.
    pub initial_expectations: Vec<f64>,
    pub rho_opt_expectations: Vec<f64>,
    /// `tr X_j (τ_{θ₀} − ρ_opt)` for every slot.
    pub slot_heats: Vec<f64>,
    pub achieved_heats: HeatVector,
    /// `tr (A₁ + A₂)(τ_{θ₀} − ρ_opt)`.
    pub work: f64,
    pub entropy_initial: f64,
    pub entropy_final: f64,
    pub d_to_ideal: f64,
    pub d_to_initial: f64,
    pub xi_lambda: Option<InverseTemperature>,
    pub eta_gap: f64,
    /// Largest observable spread inside a probability-degenerate final class group.
    pub degenerate_spread: f64,
    /// Initial-state mass covered by the coupling (below one only when streamed).
    pub captured_mass: f64,
    /// `η_opt` recomputed as `Σ p x` rather than from the heats, for the work identity.
    #[serde(skip)]
    direct_expectations: Vec<f64>,
    #[serde(skip)]
    pub state: Option<DensityOperator>,
}

impl ProtocolOutcome {
    /// `|Σ θ₀ʲ Δη_j − D(ρ_opt‖τ_{θ₀})|` relative to the size of the terms.
    pub fn second_law_residual(&self) -> f64 {
        let t = self.theta0.as_slice();
        let mut s = NeumaierSum::new();
        let mut scale = self.d_to_initial.abs();
        for (th, h) in t.iter().zip(&self.slot_heats) {
            s.add(-th * h);
            scale += (th * h).abs();
        }
        let r = (s.value() - self.d_to_initial).abs();
        if scale == 0.0 {
            r
        } else {
            r / scale
        }
    }

    /// `|S(ρ_opt) − S(τ_{θ₀})| / S(τ_{θ₀})`.
    pub fn entropy_residual(&self) -> f64 {
        let d = (self.entropy_final - self.entropy_initial).abs();
        if self.entropy_initial == 0.0 {
            d
        } else {
            d / self.entropy_initial.abs()
        }
    }

    /// Work minus `−(ΔA₁ + ΔA₂)` computed from the directly summed expectations.
    pub fn work_identity_residual(&self) -> f64 {
        let direct: f64 = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.quantity == Quantity::A)
            .map(|(j, _)| self.initial_expectations[j] - self.direct_expectations[j])
            .sum();
        (self.work - direct).abs() / (1.0 + self.initial_expectations.iter().map(|x| x.abs()).sum::<f64>())
    }
}

/// Knobs of the protocol construction.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolOptions {
    /// Materialize product spectra up to this many joint classes.
    pub materialize_cap: usize,
    /// Keep the run list when it has at most this many runs.
    pub store_cap: usize,
    /// Stream two-factor products even when they could be materialized.
    pub force_stream: bool,
    /// Half-width of the streamed window in standard deviations of `θ₀·X`.
    pub window_z: f64,
    /// Per-factor classes with marginal mass below `e^{−box_nats}` are dropped.
    pub box_nats: f64,
    /// Polish ξ_λ to working precision.
    pub polish_xi: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            materialize_cap: 1 << 21,
            store_cap: 1 << 20,
            force_stream: false,
            window_z: 8.0,
            box_nats: 36.0,
            polish_xi: true,
        }
    }
}

/// One class (or state) fed to the coupling walk.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Item {
    /// Log-probability of each state under the stream's own θ.
    pub ln_p: f64,
    pub ln_mult: f64,
    pub count: Option<u64>,
    pub values: [f64; MAX_SLOTS],
    /// Placeholder states that align ranks and carry no mass.
    pub skip: bool,
}

impl Item {
    fn from_slice(ln_p: f64, ln_mult: f64, count: Option<u64>, v: &[f64]) -> Self {
        let mut values = [0.0; MAX_SLOTS];
        values[..v.len()].copy_from_slice(v);
        Self { ln_p, ln_mult, count, values, skip: false }
    }
}

/// Accumulates the coupling pieces.
pub(crate) struct Sink<'a> {
    k: usize,
    theta0: &'a [f64],
    phi0: f64,
    mass: NeumaierSum,
    delta: [NeumaierSum; MAX_SLOTS],
    final_x: [NeumaierSum; MAX_SLOTS],
    d_ideal: NeumaierSum,
    d_init: NeumaierSum,
    neg_entropy: NeumaierSum,
    pub runs_seen: u64,
    runs: Option<Vec<CouplingRun>>,
    store_cap: usize,
    tie_lnp: f64,
    tie_rank: usize,
    tie_lo: [f64; MAX_SLOTS],
    tie_hi: [f64; MAX_SLOTS],
    spread: f64,
}

impl<'a> Sink<'a> {
    pub(crate) fn new(k: usize, theta0: &'a [f64], phi0: f64, store_cap: usize) -> Self {
        Self {
            k,
            theta0,
            phi0,
            mass: NeumaierSum::new(),
            delta: [NeumaierSum::new(); MAX_SLOTS],
            final_x: [NeumaierSum::new(); MAX_SLOTS],
            d_ideal: NeumaierSum::new(),
            d_init: NeumaierSum::new(),
            neg_entropy: NeumaierSum::new(),
            runs_seen: 0,
            runs: (store_cap > 0).then(Vec::new),
            store_cap,
            tie_lnp: f64::NAN,
            tie_rank: usize::MAX,
            tie_lo: [0.0; MAX_SLOTS],
            tie_hi: [0.0; MAX_SLOTS],
            spread: 0.0,
        }
    }

    fn track_ties(&mut self, b: &Item, b_rank: usize) {
        if b_rank == self.tie_rank {
            return;
        }
        self.tie_rank = b_rank;
        if b.ln_p == self.tie_lnp {
            for j in 0..self.k {
                self.tie_lo[j] = self.tie_lo[j].min(b.values[j]);
                self.tie_hi[j] = self.tie_hi[j].max(b.values[j]);
                self.spread = self.spread.max(self.tie_hi[j] - self.tie_lo[j]);
            }
        } else {
            self.tie_lnp = b.ln_p;
            self.tie_lo = b.values;
            self.tie_hi = b.values;
        }
    }

    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn piece(
        &mut self,
        w: f64,
        ln_base: f64,
        a: &Item,
        a_rank: usize,
        b: &Item,
        b_rank: usize,
        count: Option<u64>,
    ) {
        self.runs_seen += 1;
        self.track_ties(b, b_rank);
        if a.skip {
            return;
        }
        let m = w * (ln_base + a.ln_p).exp();
        self.mass.add(m);
        let k = self.k;
        let lp0_b = -dot(self.theta0, &b.values[..k]) - self.phi0;
        for j in 0..k {
            self.delta[j].add(m * (b.values[j] - a.values[j]));
            self.final_x[j].add(m * b.values[j]);
        }
        self.d_ideal.add(m * (a.ln_p - b.ln_p));
        self.d_init.add(m * (a.ln_p - lp0_b));
        self.neg_entropy.add(m * a.ln_p);
        if let Some(runs) = &mut self.runs {
            if runs.len() < self.store_cap {
                runs.push(CouplingRun {
                    from_rank: a_rank,
                    to_rank: b_rank,
                    ln_count: ln_base + w.ln(),
                    count,
                    from_values: a.values[..k].to_vec(),
                    to_values: b.values[..k].to_vec(),
                });
            } else {
                self.runs = None;
            }
        }
    }
}

/// Couple two descending item sequences using exact integer counts.
fn walk_exact<A, B>(mut a: A, mut b: B, sink: &mut Sink) -> Result<()>
where
    A: Iterator<Item = Item>,
    B: Iterator<Item = Item>,
{
    let (mut ca, mut cb) = (a.next(), b.next());
    let (mut ra, mut rb) = (0usize, 0usize);
    let count = |x: &Option<Item>| x.as_ref().and_then(|i| i.count).unwrap_or(0);
    let (mut rem_a, mut rem_b) = (count(&ca), count(&cb));
    while let (Some(x), Some(y)) = (ca.as_ref(), cb.as_ref()) {
        let m = rem_a.min(rem_b);
        if m > 0 {
            sink.piece(m as f64, 0.0, x, ra, y, rb, Some(m));
        }
        rem_a -= m;
        rem_b -= m;
        if rem_a == 0 {
            ca = a.next();
            ra += 1;
            rem_a = count(&ca);
        }
        if rem_b == 0 {
            cb = b.next();
            rb += 1;
            rem_b = count(&cb);
        }
    }
    if ca.is_some() || cb.is_some() {
        return Err(Error::DimensionMismatch("initial and final spectra have different sizes".into()));
    }
    Ok(())
}

/// Couple two descending item sequences with log-domain counts.
///
/// Remaining counts are kept as mantissas against a shared log base that is moved
/// to the larger side whenever a new class arrives, so neither side overflows.
pub(crate) fn walk_float<A, B>(mut a: A, mut b: B, sink: &mut Sink) -> Result<()>
where
    A: Iterator<Item = Item>,
    B: Iterator<Item = Item>,
{
    let (Some(mut xa), Some(mut xb)) = (a.next(), b.next()) else {
        return Ok(());
    };
    let (mut ra, mut rb) = (0usize, 0usize);
    let mut base = xa.ln_mult.max(xb.ln_mult);
    let mut rem_a = (xa.ln_mult - base).exp();
    let mut rem_b = (xb.ln_mult - base).exp();
    loop {
        let m = rem_a.min(rem_b);
        if m > 0.0 {
            sink.piece(m, base, &xa, ra, &xb, rb, None);
        }
        if rem_a <= rem_b {
            rem_b -= rem_a;
            rem_a = 0.0;
        } else {
            rem_a -= rem_b;
            rem_b = 0.0;
        }
        if rem_a == 0.0 {
            let Some(n) = a.next() else { break };
            xa = n;
            ra += 1;
            let other = if rem_b > 0.0 { base + rem_b.ln() } else { f64::NEG_INFINITY };
            base = xa.ln_mult.max(other);
            rem_a = (xa.ln_mult - base).exp();
            rem_b = (other - base).exp();
        }
        if rem_b == 0.0 {
            let Some(n) = b.next() else { break };
            xb = n;
            rb += 1;
            let other = if rem_a > 0.0 { base + rem_a.ln() } else { f64::NEG_INFINITY };
            base = xb.ln_mult.max(other);
            rem_b = (xb.ln_mult - base).exp();
            rem_a = (other - base).exp();
        }
    }
    Ok(())
}

/// Sums gathered by a walk, normalized by the captured mass.
struct Walked {
    delta: Vec<f64>,
    final_x: Vec<f64>,
    d_ideal: f64,
    d_init: f64,
    entropy: f64,
    mass: f64,
    runs: Option<Vec<CouplingRun>>,
    runs_seen: u64,
    spread: f64,
}

impl From<Sink<'_>> for Walked {
    fn from(s: Sink<'_>) -> Self {
        let m = s.mass.value();
        let k = s.k;
        Walked {
            delta: (0..k).map(|j| s.delta[j].value() / m).collect(),
            final_x: (0..k).map(|j| s.final_x[j].value() / m).collect(),
            d_ideal: s.d_ideal.value() / m,
            d_init: s.d_init.value() / m,
            entropy: -s.neg_entropy.value() / m,
            mass: m,
            runs: s.runs,
            runs_seen: s.runs_seen,
            spread: s.spread,
        }
    }
}

fn class_items(classes: &[thermal::SpectralClass]) -> impl Iterator<Item = Item> + '_ {
    classes.iter().map(|c| Item::from_slice(c.ln_p, c.ln_mult, c.count, &c.values))
}

fn check_slots(k: usize) -> Result<()> {
    if k > MAX_SLOTS {
        Err(Error::DimensionMismatch(format!("class couplings support at most {MAX_SLOTS} slots, got {k}")))
    } else {
        Ok(())
    }
}

/// Build `ρ_opt` for the states `τ_{θ₀}` and `τ_{θ_λ}` of `obs`.
pub fn build_optimal_protocol(
    obs: &ObservableSet,
    state0: &ThermalState,
    state_lambda: &ThermalState,
) -> Result<ProtocolOutcome> {
    build_optimal_protocol_with(obs, state0, state_lambda, &ProtocolOptions::default())
}

/// [`build_optimal_protocol`] with explicit options.
pub fn build_optimal_protocol_with(
    obs: &ObservableSet,
    state0: &ThermalState,
    state_lambda: &ThermalState,
    opts: &ProtocolOptions,
) -> Result<ProtocolOutcome> {
    let k = obs.k();
    if state0.theta.len() != k || state_lambda.theta.len() != k {
        return Err(Error::DimensionMismatch("thermal states do not match the observable set".into()));
    }
    let eta0 = thermal::dual_coordinates(state0, obs)?.0;
    let entropy_initial = thermal::von_neumann_entropy(state0);
    let t0 = state0.theta.as_slice();
    let phi0 = state0.free_entropy;

    let (path, walked, coupling, state) = match (obs.representation(), &state0.spectrum, &state_lambda.spectrum) {
        (
            Representation::Dense(mats),
            Spectrum::Dense { ln_p: lp0, basis: b0 },
            Spectrum::Dense { ln_p: lpl, basis: bl },
        ) => {
            check_slots(k)?;
            let diag = |basis: &DMatrix<Complex64>| -> Vec<[f64; MAX_SLOTS]> {
                let mut out = vec![[0.0; MAX_SLOTS]; basis.ncols()];
                for (j, x) in mats.iter().enumerate() {
                    let xv = x * basis;
                    for (c, o) in out.iter_mut().enumerate() {
                        o[j] = basis.column(c).dotc(&xv.column(c)).re;
                    }
                }
                out
            };
            let (x0, xl) = (diag(b0), diag(bl));
            let a = lp0.iter().zip(&x0).map(|(lp, v)| Item {
                ln_p: *lp,
                ln_mult: 0.0,
                count: Some(1),
                values: *v,
                skip: false,
            });
            let b = lpl.iter().zip(&xl).map(|(lp, v)| Item {
                ln_p: *lp,
                ln_mult: 0.0,
                count: Some(1),
                values: *v,
                skip: false,
            });
            let mut sink = Sink::new(k, t0, phi0, 0);
            walk_exact(a, b, &mut sink)?;
            let d = lp0.len();
            let pd = DVector::from_iterator(d, lp0.iter().map(|l| Complex64::new(l.exp(), 0.0)));
            let rho = bl * DMatrix::from_diagonal(&pd) * bl.adjoint();
            (
                ProtocolPath::Dense,
                Walked::from(sink),
                Coupling::Permutation((0..d).collect()),
                Some(DensityOperator::Dense(rho)),
            )
        }
        (Representation::Diagonal(v), _, _) => {
            check_slots(k)?;
            let d = v[0].len();
            let vals: Vec<[f64; MAX_SLOTS]> = (0..d)
                .map(|s| {
                    let mut x = [0.0; MAX_SLOTS];
                    for (j, col) in v.iter().enumerate() {
                        x[j] = col[s];
                    }
                    x
                })
                .collect();
            let order = |theta: &[f64]| -> (Vec<usize>, Vec<f64>) {
                let f: Vec<f64> = vals.iter().map(|x| dot(theta, &x[..k])).collect();
                let mut idx: Vec<usize> = (0..d).collect();
                idx.sort_unstable_by(|&x, &y| {
                    thermal::tie_break(f[x], &vals[x][..k], f[y], &vals[y][..k]).then(x.cmp(&y))
                });
                (idx, f)
            };
            let (o0, f0) = order(t0);
            let tl = state_lambda.theta.as_slice();
            let (ol, fl) = order(tl);
            let phil = state_lambda.free_entropy;
            let a = o0.iter().map(|&s| Item {
                ln_p: -f0[s] - phi0,
                ln_mult: 0.0,
                count: Some(1),
                values: vals[s],
                skip: false,
            });
            let b = ol.iter().map(|&s| Item {
                ln_p: -fl[s] - phil,
                ln_mult: 0.0,
                count: Some(1),
                values: vals[s],
                skip: false,
            });
            let mut sink = Sink::new(k, t0, phi0, 0);
            walk_exact(a, b, &mut sink)?;
            let mut perm = vec![0usize; d];
            let mut probs = vec![0.0; d];
            for (&sa, &sb) in o0.iter().zip(&ol) {
                perm[sa] = sb;
                probs[sb] = (-f0[sa] - phi0).exp();
            }
            (
                ProtocolPath::Enumerated,
                Walked::from(sink),
                Coupling::Permutation(perm),
                Some(DensityOperator::Diagonal(probs)),
            )
        }
        (Representation::Product(factors), _, _) => {
            check_slots(k)?;
            let total: f64 = factors.iter().map(operators::Factor::class_count).product();
            let materialize = !opts.force_stream && total <= opts.materialize_cap as f64;
            if materialize {
                let classes = operators::product_classes(factors, opts.materialize_cap)?;
                let (_, c0) = thermal::sorted_classes(classes.clone(), t0);
                let (_, cl) = thermal::sorted_classes(classes, state_lambda.theta.as_slice());
                let c0 = relabel(c0, t0, phi0);
                let cl = relabel(cl, state_lambda.theta.as_slice(), state_lambda.free_entropy);
                let store = if c0.len() <= opts.store_cap { opts.store_cap } else { 0 };
                let mut sink = Sink::new(k, t0, phi0, store);
                if c0.iter().chain(&cl).all(|c| c.count.is_some()) {
                    walk_exact(class_items(&c0), class_items(&cl), &mut sink)?;
                } else {
                    walk_float(class_items(&c0), class_items(&cl), &mut sink)?;
                }
                let w = Walked::from(sink);
                let coupling = match &w.runs {
                    Some(r) => Coupling::Runs(r.clone()),
                    None => Coupling::Streamed { runs: w.runs_seen },
                };
                (ProtocolPath::Classes, w, coupling, None)
            } else if factors.len() == 2 {
                let mut sink = Sink::new(k, t0, phi0, 0);
                stream::couple_two_factors(factors, state0, state_lambda, &eta0, opts, &mut sink)?;
                let w = Walked::from(sink);
                let runs = w.runs_seen;
                (ProtocolPath::Streamed, w, Coupling::Streamed { runs }, None)
            } else {
                return Err(Error::ScaleTooLarge(format!(
                    "{total:.3e} joint classes over {} factors; streaming needs exactly two",
                    factors.len()
                )));
            }
        }
        (Representation::Dense(_), _, _) => return Err(Error::BasisMismatch),
    };

    let slot_heats: Vec<f64> = walked.delta.iter().map(|d| -d).collect();
    let rho_x: Vec<f64> = eta0.iter().zip(&walked.delta).map(|(e, d)| e + d).collect();
    let labels = obs.labels().to_vec();
    let work: f64 = labels.iter().zip(&slot_heats).filter(|(l, _)| l.quantity == Quantity::A).map(|(_, h)| h).sum();
    let heat_of = |l: Label| labels.iter().position(|x| *x == l).map(|j| slot_heats[j]).unwrap_or(0.0);
    let achieved = HeatVector::new(heat_of(Label::A2), heat_of(Label::B1), heat_of(Label::B2), &state0.theta, &labels);

    let xi = match_moments(obs, &DualCoordinates(rho_x.clone()), &state_lambda.theta, opts.polish_xi).ok();
    let eta_l = thermal::dual_coordinates(state_lambda, obs)?.0;
    let eta_gap = match &xi {
        Some(x) => {
            let ex = thermo_point(obs, x)?.eta;
            eta_l.iter().zip(&ex).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        }
        None => eta_l.iter().zip(&rho_x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
    };

    Ok(ProtocolOutcome {
        path,
        labels,
        theta0: state0.theta.clone(),
        theta_lambda: state_lambda.theta.clone(),
        coupling,
        initial_expectations: eta0,
        rho_opt_expectations: rho_x,
        slot_heats,
        achieved_heats: achieved,
        work,
        entropy_initial,
        entropy_final: walked.entropy,
        d_to_ideal: walked.d_ideal,
        d_to_initial: walked.d_init,
        xi_lambda: xi,
        eta_gap,
        degenerate_spread: walked.spread,
        captured_mass: walked.mass,
        direct_expectations: walked.final_x,
        state,
    })
}

/// Re-express class log-probabilities against the exact free entropy of the state.
fn relabel(mut c: Vec<thermal::SpectralClass>, theta: &[f64], phi: f64) -> Vec<thermal::SpectralClass> {
    for cl in &mut c {
        cl.ln_p = -dot(theta, &cl.values) - phi;
    }
    c
}

/// Solve for θ_λ, build both thermal states and run the protocol.
pub fn run_protocol(
    obs: &ObservableSet,
    theta0: &InverseTemperature,
    q: &HeatVector,
    lambda: f64,
    opts: &ProtocolOptions,
) -> Result<(IdealFinalTemperature, ProtocolOutcome)> {
    let ideal = solve_ideal_final_temperature(obs, theta0, q, lambda)?;
    let s0 = build_thermal_state(obs, theta0)?;
    let sl = build_thermal_state(obs, &ideal.theta_lambda)?;
    let out = build_optimal_protocol_with(obs, &s0, &sl, opts)?;
    Ok((ideal, out))
}

/// How closely an outcome attains the second-order bound.
#[derive(Debug, Clone, Serialize)]
pub struct AchievabilityReport {
    /// Non-distinguished slot labels indexing the heat vectors below.
    pub labels: Vec<Label>,
    pub target_heats: Vec<f64>,
    pub achieved_heats: Vec<f64>,
    pub heat_errors: Vec<f64>,
    pub max_heat_error: f64,
    pub q_norm: f64,
    /// `max_heat_error / (‖Q‖²/λ)`; zero when `Q = 0`.
    pub heat_error_ratio: f64,
    pub work: f64,
    pub gcb_target: f64,
    pub gcb_achieved: f64,
    pub fgcb_target: f64,
    /// `FGCB(Q) − ΔW`.
    pub work_gap: f64,
    /// `GCB(Q) − ΔW`.
    pub deficit_target: f64,
    /// `GCB(Q_achieved) − ΔW`.
    pub deficit_achieved: f64,
    /// `deficit · λ / ‖Q‖²` with the target and achieved heats.
    pub normalized_deficit_target: f64,
    pub normalized_deficit_achieved: f64,
    /// `Σ C_kl Q_k Q_l / ‖Q‖²` at the target and achieved heats.
    pub form_target: f64,
    pub form_achieved: f64,
    pub d_to_ideal: f64,
    pub eta_gap: f64,
    /// `3λ^{5/8} ≤ ‖Q‖ ≤ λ/3`.
    pub in_window: bool,
    pub window: (f64, f64),
}

/// Compare an outcome against the first- and second-order bounds at heats `q`.
pub fn achievability_report(
    outcome: &ProtocolOutcome,
    q: &HeatVector,
    lambda: f64,
    coeffs: &FgcbCoefficients,
) -> Result<AchievabilityReport> {
    let labels = &outcome.labels;
    let target = q.slot_heats(labels)?;
    let achieved: Vec<f64> = outcome.slot_heats[1..].to_vec();
    let errors: Vec<f64> = target.iter().zip(&achieved).map(|(t, a)| (a - t).abs()).collect();
    let max_err = errors.iter().copied().fold(0.0, f64::max);
    let q_norm = q.norm();
    let qn2 = q_norm * q_norm;
    let ratio = |x: f64| if qn2 > 0.0 { x / (qn2 / lambda) } else { 0.0 };
    let per = |x: f64| if qn2 > 0.0 { x / qn2 } else { 0.0 };
    let ach = HeatVector { ..outcome.achieved_heats };
    let ach = HeatVector { beta0: q.beta0, gamma0: q.gamma0, ..ach };
    let gcb_t = fgcb::gcb_bound(q, &outcome.theta0, labels)?;
    let gcb_a = fgcb::gcb_bound(&ach, &outcome.theta0, labels)?;
    let fgcb_t = fgcb::fgcb_bound(q, &outcome.theta0, lambda, coeffs)?;
    let window = (3.0 * lambda.powf(5.0 / 8.0), lambda / 3.0);
    Ok(AchievabilityReport {
        labels: labels[1..].to_vec(),
        target_heats: target,
        achieved_heats: achieved,
        heat_errors: errors,
        max_heat_error: max_err,
        q_norm,
        heat_error_ratio: ratio(max_err),
        work: outcome.work,
        gcb_target: gcb_t,
        gcb_achieved: gcb_a,
        fgcb_target: fgcb_t,
        work_gap: fgcb_t - outcome.work,
        deficit_target: gcb_t - outcome.work,
        deficit_achieved: gcb_a - outcome.work,
        normalized_deficit_target: per(gcb_t - outcome.work) * lambda,
        normalized_deficit_achieved: per(gcb_a - outcome.work) * lambda,
        form_target: per(coeffs.form(q)),
        form_achieved: per(coeffs.form(&ach)),
        d_to_ideal: outcome.d_to_ideal,
        eta_gap: outcome.eta_gap,
        in_window: q_norm >= window.0 && q_norm <= window.1,
        window,
    })
}

/// The three divergences of the Pythagorean relation and its residual.
#[derive(Debug, Clone, Serialize)]
pub struct PythagoreanCheck {
    pub theta_star: InverseTemperature,
    pub d_rho_theta: f64,
    pub d_rho_star: f64,
    pub d_star_theta: f64,
    /// `D(ρ‖τ_θ) − D(ρ‖τ_{θ*}) − D(τ_{θ*}‖τ_θ)`.
    pub residual: f64,
}

impl PythagoreanCheck {
    /// `|residual| / (1 + D(ρ‖τ_θ))`.
    pub fn relative_residual(&self) -> f64 {
        self.residual.abs() / (1.0 + self.d_rho_theta.abs())
    }
}

/// Project `ρ` onto the thermal family and measure the Pythagorean residual.
pub fn pythagorean_check(rho: &DensityOperator, sigma: &ThermalState, obs: &ObservableSet) -> Result<PythagoreanCheck> {
    let eta = rho.expectations(obs)?;
    let theta_star = match_moments(obs, &eta, &sigma.theta, true)?;
    let star = build_thermal_state(obs, &theta_star)?;
    let d_rho_theta = thermal::relative_entropy(rho, sigma, obs)?;
    let d_rho_star = thermal::relative_entropy(rho, &star, obs)?;
    let d_star_theta = thermal::relative_entropy_thermal(&star, sigma, obs)?;
    Ok(PythagoreanCheck {
        theta_star,
        d_rho_theta,
        d_rho_star,
        d_star_theta,
        residual: d_rho_theta - d_rho_star - d_star_theta,
    })
}
