mod common;

use common::*;
use esrr::atoms::{Atom, Family, ProblemInstance, SparseSignal, Term};
use esrr::certificate::{
    check_mndsc, group_curve_second_derivative, minimal_norm_certificate_limit, minimal_norm_certificate_qp,
    position_curve_second_derivative, Certificate, MndscTolerances,
};
use esrr::kernel::{KernelBank, Order};
use esrr::solver::SolverConfig;
use esrr::torus::{torus_dist, TorusPoint};
use esrr::Sign;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn pairing_matches_the_adjoint() {
    let mut r = rng(10);
    let group_l1 = ProblemInstance::new(Family::GroupL1, KernelBank::random_fourier(N, 3, 4, 1).unwrap()).unwrap();
    for prob in [scalar_problem(), demixing_problem(), group_problem(2), group_l1] {
        let p = DVector::from_fn(N, |_, _| r.random_range(-1.0..1.0));
        let cert = Certificate::new(prob.clone(), p.clone());
        for _ in 0..200 {
            let x = TorusPoint::new(r.random_range(0.0..1.0));
            let eta = cert.eta_function(x, Order::Value);
            let s = sign(&mut r);
            let (atom, expected) = match prob.family() {
                Family::ScalarBlasso => (Atom::TorusSpike { sign: s, x }, s.value() * eta[0]),
                Family::Demixing => {
                    let k = r.random_range(1..=N);
                    (Atom::CanonicalSpike { k, sign: s }, s.value() * p[k - 1])
                }
                Family::GroupL2 => {
                    let a: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                    let atom = Atom::vector_spike(&a, x).unwrap();
                    let dot: f64 = atom.direction().unwrap().iter().zip(&eta).map(|(u, v)| u * v).sum();
                    (atom, dot)
                }
                Family::GroupL1 => {
                    let k = r.random_range(1..=3);
                    (Atom::AxisSpike { k, sign: s, x }, s.value() * eta[k - 1])
                }
            };
            let via_pairing = cert.eta_eval(&atom).unwrap();
            let via_forward = p.dot(&prob.forward_atom(&atom).unwrap());
            assert!((via_pairing - via_forward).abs() <= 1e-12);
            assert!((via_pairing - expected).abs() <= 1e-12);
        }
    }
}

/// Rows every interpolating certificate of `u0` satisfies: value 1 and zero slope at each
/// scalar spike.
fn scalar_constraints(prob: &ProblemInstance, u0: &SparseSignal) -> (DMatrix<f64>, DVector<f64>) {
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for t in u0.terms() {
        let Atom::TorusSpike { sign, x } = &t.atom else { panic!("scalar support") };
        let v = prob.bank().eval_all_vec(*x, Order::Value);
        let d = prob.bank().eval_all_vec(*x, Order::First);
        rows.push(DVector::from_vec(v).transpose() * sign.value());
        rhs.push(1.0);
        rows.push(DVector::from_vec(d).transpose());
        rhs.push(0.0);
    }
    (DMatrix::from_rows(&rows), DVector::from_vec(rhs))
}

#[test]
fn qp_certificate_has_minimal_norm() {
    let mut r = rng(11);
    for inst in certified_scalar(3) {
        let (a, b) = scalar_constraints(&inst.prob, &inst.u0);
        let p = inst.cert.p();
        assert!((&a * p - &b).amax() <= 1e-9);
        let gram = (&a * a.transpose()).try_inverse().unwrap();
        let project = DMatrix::identity(N, N) - a.transpose() * gram * &a;
        let mut tried = 0;
        let mut feasible = 0;
        while feasible < 20 {
            tried += 1;
            assert!(tried < 2000, "could not find feasible perturbations");
            let z = &project * DVector::from_fn(N, |_, _| r.sample::<f64, _>(StandardNormal)) * r.random_range(1e-3..5e-2);
            let q = p + z;
            assert!((&a * &q - &b).amax() <= 1e-9);
            let cq = Certificate::new(inst.prob.clone(), q.clone());
            if cq.dual_feasibility_margin() <= 1.0 + 1e-9 {
                feasible += 1;
                assert!(p.norm() <= q.norm() + 1e-9, "|p| = {}, |q| = {}", p.norm(), q.norm());
            }
        }
    }
}

#[test]
fn qp_and_limit_agree_on_every_family() {
    let cfg = SolverConfig::default();
    let mut all = certified_scalar(2);
    all.push(certified_demixing());
    all.push(certified_group());
    for inst in &all {
        let lim = minimal_norm_certificate_limit(&inst.prob, &inst.u0, &[1e-2, 1e-3, 1e-4], &cfg).unwrap();
        let rel = (lim.certificate.p() - inst.cert.p()).norm() / inst.cert.p().norm();
        assert!(rel <= 1e-3, "{:?} seed {}: {rel}", inst.prob.family(), inst.seed);
    }
}

#[test]
fn cauchy_residuals_shrink() {
    let inst = certified_scalar(1).pop().unwrap();
    let lim = minimal_norm_certificate_limit(&inst.prob, &inst.u0, &[1e-1, 1e-2, 1e-3, 1e-4], &SolverConfig::default())
        .unwrap();
    assert_eq!(lim.cauchy_residuals.len(), 3);
    for w in lim.cauchy_residuals.windows(2) {
        assert!(w[1] < w[0], "{:?}", lim.cauchy_residuals);
    }
}

#[test]
fn empty_support_has_zero_certificate() {
    let prob = scalar_problem();
    let u0 = SparseSignal::empty();
    let qp = minimal_norm_certificate_qp(&prob, &u0, 256).unwrap();
    assert_eq!(qp.p().norm(), 0.0);
    let lim = minimal_norm_certificate_limit(&prob, &u0, &[1e-2, 1e-3], &SolverConfig::default()).unwrap();
    assert_eq!(lim.certificate.p().norm(), 0.0);
    assert!(lim.cauchy_residuals.iter().all(|&c| c == 0.0));
}

/// Point in the `radius` ball around `(a0, x0)` on the sphere and the torus.
fn near(r: &mut rand_chacha::ChaCha8Rng, a0: &[f64], x0: TorusPoint, radius: f64) -> (Vec<f64>, TorusPoint) {
    loop {
        let a: Vec<f64> = a0.iter().map(|v| v + r.random_range(-radius..radius)).collect();
        let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a: Vec<f64> = a.iter().map(|v| v / n).collect();
        let gap = a.iter().zip(a0).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let x = x0.shifted(r.random_range(-radius..radius));
        if gap <= radius && torus_dist(x, x0) <= radius {
            return (a, x);
        }
    }
}

#[test]
fn curves_inside_the_ball_are_strictly_concave() {
    let inst = certified_group();
    let tols = MndscTolerances::default();
    let delta = tols.curv_tol / 2.0;
    let mut r = rng(12);
    for t0 in inst.u0.terms() {
        let Atom::VectorSpike { a, x } = &t0.atom else { unreachable!() };
        for _ in 0..50 {
            let (a1, x1) = near(&mut r, a, *x, tols.exclusion_radius);
            let (a2, x2) = near(&mut r, a, *x, tols.exclusion_radius);
            for j in 0..=100 {
                let t = j as f64 / 100.0;
                let v = group_curve_second_derivative(&inst.cert, &a1, &a2, x1, x2, t).unwrap();
                assert!(v < -delta, "seed {}: second derivative {v} at t = {t}", inst.seed);
            }
        }
    }
}

#[test]
fn reported_curvature_matches_differences_of_the_pairing() {
    let inst = certified_scalar(1).pop().unwrap();
    let h = 1e-4;
    for (i, t0) in inst.u0.terms().iter().enumerate() {
        let Atom::TorusSpike { sign, x } = t0.atom else { unreachable!() };
        let at = |dx: f64| inst.cert.eta_eval(&Atom::TorusSpike { sign, x: x.shifted(dx) }).unwrap();
        let fd = (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h);
        let reported = inst.report.curvature[i].value.unwrap();
        assert!((fd - reported).abs() <= 1e-5 * reported.abs(), "{fd} vs {reported}");
        assert!(reported < -MndscTolerances::default().curv_tol);
        // along any short curve through the atom the second derivative is this value times dx^2
        let v = position_curve_second_derivative(&inst.cert, 0, sign.value(), x.shifted(-0.01), x.shifted(0.01), 0.5);
        assert!((v - reported * 0.02 * 0.02).abs() <= 1e-9 * reported.abs());
    }
}

#[test]
fn planted_touching_point_is_reported() {
    let (prob, u0) = negative_control();
    let cert = minimal_norm_certificate_qp(&prob, &u0, 1024).unwrap();
    let report = check_mndsc(&prob, &u0, &cert, &MndscTolerances::default());
    assert!(report.source_condition_ok);
    assert!(!report.passed);
    let twins = [0.12, 0.31];
    for w in twins {
        assert!(
            report.spurious_maximizers.iter().any(|s| s.atom.position().is_some_and(|x| torus_dist(x, w.into()) < 1e-4)),
            "no spurious maximizer at {w}: {:?}",
            report.spurious_maximizers
        );
    }
}

#[test]
fn demixing_certificate_fixes_canonical_coordinates() {
    let inst = certified_demixing();
    let p = inst.cert.p();
    let mut on_support = [false; N];
    for t in inst.u0.terms() {
        if let Atom::CanonicalSpike { k, sign } = t.atom {
            assert!((p[k - 1] - sign.value()).abs() <= 1e-9);
            on_support[k - 1] = true;
        }
    }
    for (i, &v) in p.iter().enumerate() {
        if !on_support[i] {
            assert!(v.abs() < 1.0 - 1e-4, "p[{i}] = {v}");
        }
    }
}

#[test]
fn spike_between_two_opposite_spikes_is_rejected() {
    // a negative spike between two close positive ones cannot be interpolated at N = 20
    let prob = scalar_problem();
    let u0 = SparseSignal::new(vec![
        torus_spike(1.0, Sign::Plus, 0.5),
        torus_spike(1.0, Sign::Minus, 0.51),
        torus_spike(1.0, Sign::Plus, 0.52),
    ])
    .unwrap();
    match minimal_norm_certificate_qp(&prob, &u0, 1024) {
        Err(_) => {}
        Ok(cert) => assert!(!check_mndsc(&prob, &u0, &cert, &MndscTolerances::default()).passed),
    }
}

#[test]
fn axis_spike_certificate_interpolates() {
    let prob = ProblemInstance::new(Family::GroupL1, KernelBank::random_fourier(N, 3, 4, 2).unwrap()).unwrap();
    let u0 = SparseSignal::new(vec![
        Term { c: 1.0, atom: Atom::AxisSpike { k: 1, sign: Sign::Plus, x: TorusPoint::new(0.2) } },
        Term { c: 1.0, atom: Atom::AxisSpike { k: 3, sign: Sign::Minus, x: TorusPoint::new(0.6) } },
    ])
    .unwrap();
    let cert = minimal_norm_certificate_qp(&prob, &u0, 1024).unwrap();
    for t in u0.terms() {
        assert!((cert.eta_eval(&t.atom).unwrap() - 1.0).abs() <= 1e-9);
    }
    assert!(cert.dual_feasibility_margin() <= 1.0 + 1e-7);
}
