//! Invariant suites run by `fbe verify`.

use fbe_core::fgcb::{estimate_densities, fgcb_bound, fgcb_coefficients, finite_difference, gcb_bound};
use fbe_core::models::{instantiate, instantiate_enumerated};
use fbe_core::protocol::{build_optimal_protocol, pythagorean_check, run_protocol, ProtocolOptions};
use fbe_core::{
    build_thermal_state, fisher_matrix, free_entropy, DensityMode, DensityOperator, HeatVector, InverseTemperature,
    Label, ModelSpec, ObservableSet, ProtocolOutcome, VERSION,
};
use log::info;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{LoadedConfig, Tolerances};
use crate::table::{Cell, Table};

/// A model instance small enough for every suite.
#[derive(Debug, Clone)]
pub struct Case {
    pub spec: ModelSpec,
    pub theta0: InverseTemperature,
    pub lambda: f64,
}

pub fn default_cases() -> Vec<Case> {
    let t = |v: &[f64]| InverseTemperature(v.to_vec());
    vec![
        Case { spec: ModelSpec::IidTwoLevel { omega_c: 1.0, omega_h: 1.3 }, theta0: t(&[1.0, 0.5]), lambda: 50.0 },
        Case { spec: ModelSpec::IsingChain { j_c: 1.0, j_h: 1.0 }, theta0: t(&[1.0, 0.5]), lambda: 8.0 },
        Case { spec: ModelSpec::SpinHalfBath { omega: 1.0, angle: 0.8 }, theta0: t(&[1.0, -1.0]), lambda: 3.0 },
        Case {
            spec: ModelSpec::FermiGasWell { l_c: 1.0, l_h: 1.3, mass: 1.0, cutoff: 200.0 },
            theta0: t(&[1.0, 0.5, -5.0, -2.0]),
            lambda: 1.0,
        },
    ]
}

/// Configured models at their first scale, or the default set.
pub fn cases_from(cfg: Option<&LoadedConfig>) -> Vec<Case> {
    let Some(cfg) = cfg else { return default_cases() };
    let c = &cfg.config;
    c.models()
        .into_iter()
        .map(|spec| {
            let fallback = default_cases().into_iter().find(|d| d.spec.name() == spec.name()).map_or(1.0, |d| d.lambda);
            Case { spec, theta0: c.theta0(), lambda: c.lambdas.first().copied().unwrap_or(fallback) }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub subject: String,
    pub cases: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub error: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_residual <= self.tolerance
    }
}

fn result(suite: &'static str, subject: &str, tolerance: f64, r: Result<(usize, f64), fbe_core::Error>) -> SuiteResult {
    let (cases, max_residual, error) = match r {
        Ok((n, m)) => (n, m, None),
        Err(e) => (0, f64::NAN, Some(e.to_string())),
    };
    SuiteResult { suite, subject: subject.to_string(), cases, max_residual, tolerance, error }
}

fn random_hermitian(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
    let a = DMatrix::from_fn(d, d, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    (&a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

fn pythagoras(seed: u64, count: usize) -> Result<(usize, f64), fbe_core::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..count {
        let d = rng.gen_range(4..=12);
        let labels = vec![Label::A1, Label::B1];
        let theta = InverseTemperature(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let (obs, rho) = if trial % 2 == 0 {
            let mats = vec![random_hermitian(d, &mut rng), random_hermitian(d, &mut rng)];
            let a = DMatrix::from_fn(d, d, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let m = &a * a.adjoint() + DMatrix::identity(d, d) * Complex64::new(0.05, 0.0);
            let tr = m.trace();
            (ObservableSet::dense(labels, mats, 1.0)?, DensityOperator::Dense(m / tr))
        } else {
            let values = (0..2).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            (
                ObservableSet::diagonal(labels, values, 1.0)?,
                DensityOperator::Diagonal(w.iter().map(|x| x / s).collect()),
            )
        };
        let sigma = build_thermal_state(&obs, &theta)?;
        worst = worst.max(pythagorean_check(&rho, &sigma, &obs)?.relative_residual());
    }
    Ok((count, worst))
}

fn fisher_vs_hessian(case: &Case) -> Result<(usize, f64), fbe_core::Error> {
    let obs = instantiate(&case.spec, case.lambda)?.obs;
    let t0 = &case.theta0.0;
    let k = t0.len();
    let mut worst = 0.0f64;
    let total = 3usize.pow(k as u32);
    for idx in 0..total {
        let t: Vec<f64> = (0..k)
            .map(|a| {
                let step = [-0.1, 0.0, 0.1][(idx / 3usize.pow(a as u32)) % 3];
                t0[a] + step * t0[a].abs().max(0.1)
            })
            .collect();
        let state = build_thermal_state(&obs, &InverseTemperature(t.clone()))?;
        let j = fisher_matrix(&state, &obs)?.j;
        let f = |x: &[f64]| free_entropy(&obs, &InverseTemperature(x.to_vec())).unwrap_or(f64::NAN);
        let (_, h) = finite_difference(&f, &t, 1e-4);
        let scale = j.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = (&h - &j).iter().fold(0.0f64, |m, x| m.max(x.abs())) / scale;
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok((total, worst))
}

/// Protocols between `θ₀` and a few nearby thermal targets.
fn protocol_runs(case: &Case, seed: u64) -> Result<Vec<ProtocolOutcome>, fbe_core::Error> {
    let obs = instantiate(&case.spec, case.lambda)?.obs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = build_thermal_state(&obs, &case.theta0)?;
    let mut outs = Vec::new();
    for _ in 0..4 {
        let t: Vec<f64> = case.theta0.0.iter().map(|x| x + rng.gen_range(-0.2..0.2) * x.abs().max(0.1)).collect();
        let sl = build_thermal_state(&obs, &InverseTemperature(t))?;
        outs.push(build_optimal_protocol(&obs, &s0, &sl)?);
    }
    Ok(outs)
}

fn bound_order(case: &Case, seed: u64, count: usize) -> Result<(usize, f64), fbe_core::Error> {
    let labels = case.spec.labels();
    let dens = estimate_densities(&case.spec, &case.theta0, DensityMode::Analytic)?;
    let co = fgcb_coefficients(&dens, &case.theta0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..count {
        let mut draw = |l: Label| if labels.contains(&l) { rng.gen_range(-10.0..10.0) } else { 0.0 };
        let q = HeatVector::new(draw(Label::A2), draw(Label::B1), draw(Label::B2), &case.theta0, &labels);
        let lambda = 10f64.powf(rng.gen_range(0.0..6.0));
        worst = worst.max(fgcb_bound(&q, &case.theta0, lambda, &co)? - gcb_bound(&q, &case.theta0, &labels)?);
    }
    Ok((count, worst.max(0.0)))
}

fn numbers(o: &ProtocolOutcome) -> Vec<f64> {
    let mut v = o.theta_lambda.0.clone();
    v.extend(&o.rho_opt_expectations);
    v.extend(&o.slot_heats);
    v.extend([o.work, o.entropy_initial, o.entropy_final, o.d_to_ideal, o.d_to_initial, o.captured_mass]);
    v
}

fn compressed_vs_enumerated() -> Result<(usize, f64), fbe_core::Error> {
    let t0 = InverseTemperature(vec![1.0, 0.5]);
    let mut worst = 0.0f64;
    let mut n = 0;
    for spec in [ModelSpec::IidTwoLevel { omega_c: 1.0, omega_h: 1.3 }, ModelSpec::IsingChain { j_c: 1.0, j_h: 0.8 }] {
        for sites in [4.0, 6.0, 8.0] {
            let a = instantiate(&spec, sites)?.obs;
            let b = instantiate_enumerated(&spec, sites)?;
            let q = HeatVector::new(0.05 * sites, 0.0, 0.0, &t0, a.labels());
            let opts = ProtocolOptions::default();
            let (_, oa) = run_protocol(&a, &t0, &q, sites, &opts)?;
            let (_, ob) = run_protocol(&b, &t0, &q, sites, &opts)?;
            for (x, y) in numbers(&oa).iter().zip(numbers(&ob)) {
                worst = worst.max((x - y).abs() / 1f64.max(x.abs()).max(y.abs()));
            }
            n += 1;
        }
    }
    Ok((n, worst))
}

pub fn run_suites(cfg: Option<&LoadedConfig>, seed: u64) -> Vec<SuiteResult> {
    let tol = cfg.map(|c| c.config.tolerances.clone()).unwrap_or_default();
    let t = |o: Option<f64>, d: f64| o.unwrap_or(d);
    let Tolerances { pythagoras: tp, hessian: th, entropy: te, second_law: ts, bound_order: tb, .. } = tol;
    let cases = cases_from(cfg);
    let mut out = vec![result("pythagorean", "random states", t(tp, 1e-9), pythagoras(seed, 100))];
    let per_case: Vec<Vec<SuiteResult>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let name = case.spec.name();
            info!("verifying {name}");
            let mut r = vec![result("fisher_hessian", name, t(th, 1e-4), fisher_vs_hessian(case))];
            match protocol_runs(case, seed.wrapping_add(i as u64)) {
                Ok(outs) => {
                    let e = outs.iter().map(ProtocolOutcome::entropy_residual).fold(0.0, f64::max);
                    let s = outs.iter().map(ProtocolOutcome::second_law_residual).fold(0.0, f64::max);
                    r.push(result("entropy_preservation", name, t(te, 1e-12), Ok((outs.len(), e))));
                    r.push(result("second_law", name, t(ts, 1e-9), Ok((outs.len(), s))));
                }
                Err(e) => {
                    r.push(result("entropy_preservation", name, t(te, 1e-12), Err(e.clone())));
                    r.push(result("second_law", name, t(ts, 1e-9), Err(e)));
                }
            }
            r.push(result(
                "bound_order",
                name,
                t(tb, 1e-12),
                bound_order(case, seed.wrapping_add(100 + i as u64), 1000),
            ));
            r
        })
        .collect();
    out.extend(per_case.into_iter().flatten());
    out.push(result("compressed_vs_enumerated", "iid and Ising, n <= 8", 1e-12, compressed_vs_enumerated()));
    out
}

pub fn table(results: &[SuiteResult], hash: &str) -> Table {
    let mut table = Table::new(&[
        "suite",
        "subject",
        "cases",
        "max_residual",
        "tolerance",
        "status",
        "message",
        "config_hash",
        "version",
    ]);
    for r in results {
        table.push(vec![
            r.suite.into(),
            r.subject.clone().into(),
            Cell::Int(r.cases as u64),
            r.max_residual.into(),
            r.tolerance.into(),
            (if r.passed() { "pass" } else { "fail" }).into(),
            r.error.clone().map_or(Cell::Empty, Cell::Text),
            hash.into(),
            VERSION.into(),
        ]);
    }
    table
}
