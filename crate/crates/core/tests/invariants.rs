//! Randomized checks of the structural identities every module promises.

use fbe_core::fgcb::{
    estimate_densities, fgcb_bound, fgcb_coefficients, gcb_bound, AsymptoticDensities, DensityMode, DensityOrigin,
    HeatVector,
};
use fbe_core::models::ModelSpec;
use fbe_core::operators::{joint_spectrum, Label, ObservableSet};
use fbe_core::protocol::{build_optimal_protocol, Coupling};
use fbe_core::thermal::{
    build_thermal_state, dual_coordinates, effective_temperature, fisher_matrix, free_entropy, legendre_entropy,
    von_neumann_entropy, DensityOperator, InverseTemperature,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hermitian(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
    let a = DMatrix::from_fn(d, d, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    (&a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

fn dense_pair(d: usize, seed: u64) -> ObservableSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ObservableSet::dense(vec![Label::A1, Label::B1], vec![hermitian(d, &mut rng), hermitian(d, &mut rng)], 1.0).unwrap()
}

fn random_state(d: usize, seed: u64) -> DMatrix<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let a = DMatrix::from_fn(d, d, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let m = &a * a.adjoint() + DMatrix::identity(d, d) * Complex64::new(0.05, 0.0);
    let tr = m.trace();
    m / tr
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn theta(v: &[f64]) -> InverseTemperature {
    InverseTemperature(v.to_vec())
}

fn model_theta(spec: &ModelSpec) -> InverseTemperature {
    match spec {
        ModelSpec::FermiGasWell { .. } => theta(&[1.0, 0.5, -50.0, -20.0]),
        ModelSpec::SpinHalfBath { .. } => theta(&[1.0, -1.0]),
        _ => theta(&[1.0, 0.5]),
    }
}

fn models() -> Vec<ModelSpec> {
    vec![
        ModelSpec::IidTwoLevel { omega_c: 1.0, omega_h: 1.3 },
        ModelSpec::IsingChain { j_c: 1.0, j_h: 1.0 },
        ModelSpec::SpinHalfBath { omega: 1.0, angle: 0.8 },
        ModelSpec::FermiGasWell { l_c: 1.0, l_h: 1.5, mass: 1.0, cutoff: 1000.0 },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_and_hessian_of_free_entropy(d in 2usize..7, seed in any::<u64>(), t0 in -1.0f64..1.0, t1 in -1.0f64..1.0) {
        let obs = dense_pair(d, seed);
        let th = theta(&[t0, t1]);
        let state = build_thermal_state(&obs, &th).unwrap();
        let eta = dual_coordinates(&state, &obs).unwrap().0;
        let j = fisher_matrix(&state, &obs).unwrap().j;
        let phi = |x: &[f64]| free_entropy(&obs, &theta(x)).unwrap();
        let (grad, _) = fbe_core::fgcb::finite_difference(&phi, &[t0, t1], 1e-5);
        let (_, hess) = fbe_core::fgcb::finite_difference(&phi, &[t0, t1], 1e-4);
        let gscale = eta.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-3);
        for k in 0..2 {
            prop_assert!((-grad[k] - eta[k]).abs() <= 1e-6 * gscale, "η {k}: {} vs {}", -grad[k], eta[k]);
        }
        prop_assert!(max_abs(&(&hess - &j)) <= 1e-4 * max_abs(&j));
        // Symmetric and positive semidefinite.
        prop_assert!(max_abs(&(&j - j.transpose())) <= 1e-10 * max_abs(&j));
        let ev = j.clone().symmetric_eigenvalues();
        prop_assert!(ev.min() >= -1e-10 * j.trace());
    }

    #[test]
    fn legendre_identity(d in 2usize..7, seed in any::<u64>(), t0 in -2.0f64..2.0, t1 in -2.0f64..2.0) {
        let obs = dense_pair(d, seed);
        let state = build_thermal_state(&obs, &theta(&[t0, t1])).unwrap();
        let s = von_neumann_entropy(&state);
        let l = legendre_entropy(&state, &obs).unwrap();
        prop_assert!((s - l).abs() <= 1e-10 * s.abs().max(1e-3));
    }

    #[test]
    fn thermal_state_maximizes_entropy(d in 2usize..9, seed in any::<u64>()) {
        let obs = dense_pair(d, seed);
        let rho = DensityOperator::Dense(random_state(d, seed));
        let eta = rho.expectations(&obs).unwrap();
        let tt = effective_temperature(&obs, &eta, &theta(&[0.0, 0.0])).unwrap();
        let tau = build_thermal_state(&obs, &tt).unwrap();
        prop_assert!(rho.entropy().unwrap() <= von_neumann_entropy(&tau) + 1e-10);
    }

    #[test]
    fn compressed_sites_match_enumeration(n in 1u64..9, levels in 2usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let site: Vec<Vec<f64>> = (0..2).map(|_| (0..levels).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let compressed = ObservableSet::iid_sum(vec![Label::A1, Label::A2], site.clone(), n, n as f64).unwrap();
        let total = (levels as u64).pow(n as u32);
        let spec = joint_spectrum(&compressed).unwrap();
        prop_assert_eq!(spec.total_count(), Some(total));
        prop_assert!((spec.ln_total() - (total as f64).ln()).abs() <= 1e-12 * (total as f64).ln().max(1.0));
        let mut vals = vec![Vec::new(), Vec::new()];
        for cfg in 0..total {
            let mut c = cfg;
            let (mut a, mut b) = (0.0, 0.0);
            for _ in 0..n {
                let l = (c % levels as u64) as usize;
                c /= levels as u64;
                a += site[0][l];
                b += site[1][l];
            }
            vals[0].push(a);
            vals[1].push(b);
        }
        let enumerated = ObservableSet::diagonal(vec![Label::A1, Label::A2], vals, n as f64).unwrap();
        let th = theta(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let (sc, se) = (build_thermal_state(&compressed, &th).unwrap(), build_thermal_state(&enumerated, &th).unwrap());
        prop_assert!((sc.free_entropy - se.free_entropy).abs() <= 1e-10 * se.free_entropy.abs().max(1.0));
        let (ec, ee) = (dual_coordinates(&sc, &compressed).unwrap().0, dual_coordinates(&se, &enumerated).unwrap().0);
        for k in 0..2 {
            prop_assert!((ec[k] - ee[k]).abs() <= 1e-10 * ee[k].abs().max(1.0));
        }
        let (jc, je) = (fisher_matrix(&sc, &compressed).unwrap().j, fisher_matrix(&se, &enumerated).unwrap().j);
        prop_assert!(max_abs(&(&jc - &je)) <= 1e-10 * max_abs(&je).max(1.0));
    }

    #[test]
    fn rank_matched_protocol_is_a_spectrum_preserving_permutation(
        d in 2usize..14,
        seed in any::<u64>(),
        t in prop::array::uniform4(-1.5f64..1.5),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Small integer values produce genuine ties.
        let vals: Vec<Vec<f64>> = (0..2).map(|_| (0..d).map(|_| rng.gen_range(0..4) as f64).collect()).collect();
        let obs = match ObservableSet::diagonal(vec![Label::A1, Label::A2], vals.clone(), 1.0) {
            Ok(o) => o,
            Err(_) => return Ok(()),
        };
        let s0 = build_thermal_state(&obs, &theta(&[t[0], t[1]])).unwrap();
        let sl = build_thermal_state(&obs, &theta(&[t[2], t[3]])).unwrap();
        let out = build_optimal_protocol(&obs, &s0, &sl).unwrap();
        let Coupling::Permutation(perm) = &out.coupling else { panic!("permutation expected") };
        let mut seen = perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..d).collect::<Vec<_>>());
        let Some(DensityOperator::Diagonal(p)) = &out.state else { panic!("diagonal state expected") };
        let q: Vec<f64> = (0..d).map(|i| (-(t[0] * vals[0][i] + t[1] * vals[1][i]) - s0.free_entropy).exp()).collect();
        let (mut a, mut b) = (p.clone(), q);
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert!(out.entropy_residual() <= 1e-12);
        prop_assert!(out.second_law_residual() <= 1e-9);
        prop_assert!(out.work_identity_residual() <= 1e-12);
        prop_assert!(out.d_to_ideal >= -1e-12 && out.d_to_initial >= -1e-12);
    }

    #[test]
    fn refined_bound_never_exceeds_the_first_order_bound(
        which in 0usize..4,
        q in prop::array::uniform3(-5.0f64..5.0),
        lambda in 1.0f64..1e4,
    ) {
        let spec = models()[which].clone();
        let t0 = model_theta(&spec);
        let dens = estimate_densities(&spec, &t0, DensityMode::Analytic).unwrap();
        let c = fgcb_coefficients(&dens, &t0).unwrap();
        let labels = spec.labels();
        let has = |l: Label| labels.contains(&l);
        let hv = HeatVector::new(
            if has(Label::A2) { q[0] } else { 0.0 },
            if has(Label::B1) { q[1] } else { 0.0 },
            if has(Label::B2) { q[2] } else { 0.0 },
            &t0,
            &labels,
        );
        let g = gcb_bound(&hv, &t0, &labels).unwrap();
        let f = fgcb_bound(&hv, &t0, lambda, &c).unwrap();
        prop_assert!(c.min_eigenvalue() >= -1e-10 * c.matrix.abs().max());
        prop_assert!(f <= g + 1e-12);
        prop_assert_eq!(c.c_bb[0][1], c.c_bb[1][0]);
    }

    #[test]
    fn coefficients_match_the_second_order_entropy_constraint(seed in any::<u64>(), k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
        let g = &a * a.transpose() + DMatrix::identity(k, k) * 0.3;
        let labels = [Label::A1, Label::A2, Label::B1, Label::B2][..k].to_vec();
        let mut th = vec![rng.gen_range(0.2..2.0)];
        th.extend((1..k).map(|_| rng.gen_range(-2.0..2.0)));
        let dens = AsymptoticDensities::from_parts(labels, th.clone(), 0.0, vec![0.0; k], g.clone(), DensityOrigin::Analytic).unwrap();
        let c = fgcb_coefficients(&dens, &theta(&th)).unwrap();
        let q: Vec<f64> = (1..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Holding S fixed to second order: θ·Δη = ½ Δηᵀ g⁻¹ Δη, with Δη_k = −Q_k off the
        // distinguished slot. The linear solution fixes Δη₀; the quadratic term is the work lost.
        let mut v = nalgebra::DVector::zeros(k);
        v[0] = (1..k).map(|j| th[j] * q[j - 1]).sum::<f64>() / th[0];
        for j in 1..k {
            v[j] = -q[j - 1];
        }
        let gi = g.clone().try_inverse().unwrap();
        let oracle = (v.transpose() * gi * &v)[(0, 0)] / (2.0 * th[0]);
        let form = c.quadratic_form(&q);
        prop_assert!((form - oracle).abs() <= 1e-8 * oracle.abs().max(1e-8), "{form} vs {oracle}");
    }

    #[test]
    fn bounds_are_invariant_under_rescaling_the_charges(s in 0.01f64..100.0, q in prop::array::uniform3(-3.0f64..3.0)) {
        let spec = models()[3].clone();
        let t0 = model_theta(&spec);
        let labels = spec.labels();
        let dens = estimate_densities(&spec, &t0, DensityMode::Analytic).unwrap();
        let c = fgcb_coefficients(&dens, &t0).unwrap();
        let scale = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0, s, s]));
        let g2 = &scale * &dens.g * &scale;
        let t2 = theta(&[t0.0[0], t0.0[1], t0.0[2] / s, t0.0[3] / s]);
        let d2 = AsymptoticDensities::from_parts(labels.clone(), t2.0.clone(), dens.phi, dens.eta.clone(), g2, DensityOrigin::Analytic).unwrap();
        let c2 = fgcb_coefficients(&d2, &t2).unwrap();
        let h1 = HeatVector::new(q[0], q[1], q[2], &t0, &labels);
        let h2 = HeatVector::new(q[0], s * q[1], s * q[2], &t2, &labels);
        let (g1, g2) = (gcb_bound(&h1, &t0, &labels).unwrap(), gcb_bound(&h2, &t2, &labels).unwrap());
        prop_assert!((g1 - g2).abs() <= 1e-10 * g1.abs().max(1.0));
        let (f1, f2) = (fgcb_bound(&h1, &t0, 100.0, &c).unwrap(), fgcb_bound(&h2, &t2, 100.0, &c2).unwrap());
        prop_assert!((f1 - f2).abs() <= 1e-10 * f1.abs().max(1.0));
    }
}
