mod common;

use common::*;
use esrr::atoms::{Atom, Family, ProblemInstance, Sign, SparseSignal, Term};
use esrr::kernel::{validate_kernel_derivatives, KernelBank, Order};
use esrr::torus::{torus_dist, TorusPoint};
use rand::Rng;

fn banks() -> Vec<KernelBank> {
    vec![
        KernelBank::harmonic(N).unwrap(),
        KernelBank::random_fourier(N, 3, 6, 2).unwrap(),
        KernelBank::uniform_gaussian(N, 1, 0.05, 1.0).unwrap(),
        KernelBank::uniform_gaussian(N, 2, 0.1, 1.0).unwrap(),
        even_harmonic_bank(),
    ]
}

#[test]
fn torus_distance_is_a_metric() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let [a, b, c] = [0; 3].map(|_| TorusPoint::new(r.random_range(-3.0..3.0)));
        assert_eq!(torus_dist(a, b), torus_dist(b, a));
        assert!(torus_dist(a, c) <= torus_dist(a, b) + torus_dist(b, c) + 1e-15);
        assert!((0.0..=0.5).contains(&torus_dist(a, b)));
    }
}

#[test]
fn periodization_is_exact() {
    let mut r = rng(2);
    for bank in banks() {
        for _ in 0..50 {
            let x = r.random_range(0.0..1.0);
            for order in [Order::Value, Order::First, Order::Second] {
                let here = bank.eval_all_vec(TorusPoint::new(x), order);
                let there = bank.eval_all_vec(TorusPoint::new(x + 1.0), order);
                let back = bank.eval_all_vec(TorusPoint::new(x - 3.0), order);
                let canon = TorusPoint::new(x + 1.0).value();
                assert_eq!(bank.eval_all_vec(TorusPoint::new(canon), order), there);
                // x + 1 - 1 differs from x by one rounding, amplified by the next derivative
                let tol = 1e-13 * 130f64.powi(order as i32 + 1);
                for ((u, v), w) in here.iter().zip(&there).zip(&back) {
                    assert!((u - v).abs() <= tol && (u - w).abs() <= tol);
                }
            }
        }
    }
}

#[test]
fn every_kernel_kind_validates() {
    for (seed, bank) in banks().iter().enumerate() {
        let report = validate_kernel_derivatives(bank, 100, 1e-6, seed as u64).unwrap();
        assert!(report.worst().2 <= 1e-6);
    }
}

/// Both derivatives by central differences of values, independently of the validator.
#[test]
fn derivatives_agree_with_independent_differences() {
    let bank = KernelBank::random_fourier(N, 2, 5, 9).unwrap();
    let h = 1e-5;
    let mut r = rng(3);
    for _ in 0..100 {
        let x = r.random_range(0.0..1.0);
        let at = |dx: f64| bank.eval_all_vec(TorusPoint::new(x + dx), Order::Value);
        let (m, c, p) = (at(-h), at(0.0), at(h));
        let d1 = bank.eval_all_vec(TorusPoint::new(x), Order::First);
        let d2 = bank.eval_all_vec(TorusPoint::new(x), Order::Second);
        let scale = 5.0 * std::f64::consts::TAU;
        for i in 0..c.len() {
            assert!(((p[i] - m[i]) / (2.0 * h) - d1[i]).abs() <= 1e-6 * scale);
            assert!(((p[i] - 2.0 * c[i] + m[i]) / (h * h) - d2[i]).abs() <= 1e-4 * scale * scale);
        }
    }
}

fn random_term(prob: &ProblemInstance, r: &mut rand_chacha::ChaCha8Rng) -> Term {
    let x = TorusPoint::new(r.random_range(0.0..1.0));
    let c = r.random_range(0.1..2.0);
    let atom = match prob.family() {
        Family::ScalarBlasso => Atom::TorusSpike { sign: sign(r), x },
        Family::Demixing if r.random_bool(0.5) => Atom::CanonicalSpike { k: r.random_range(1..=prob.n()), sign: sign(r) },
        Family::Demixing => Atom::TorusSpike { sign: sign(r), x },
        Family::GroupL2 => {
            let a: Vec<f64> = (0..prob.d()).map(|_| r.random_range(-1.0..1.0)).collect();
            Atom::vector_spike(&a, x).unwrap()
        }
        Family::GroupL1 => Atom::AxisSpike { k: r.random_range(1..=prob.d()), sign: sign(r), x },
    };
    Term { c, atom }
}

fn problems() -> Vec<ProblemInstance> {
    vec![
        scalar_problem(),
        demixing_problem(),
        group_problem(4),
        ProblemInstance::new(Family::GroupL1, KernelBank::random_fourier(N, 3, 4, 5).unwrap()).unwrap(),
    ]
}

#[test]
fn forward_is_linear() {
    let mut r = rng(4);
    for prob in problems() {
        for _ in 0..100 {
            let (u, v) = loop {
                let u: Vec<Term> = (0..3).map(|_| random_term(&prob, &mut r)).collect();
                let v: Vec<Term> = (0..2).map(|_| random_term(&prob, &mut r)).collect();
                if SparseSignal::new(u.iter().chain(&v).cloned().collect()).is_ok() {
                    break (u, v);
                }
            };
            let ku = prob.forward_signal(&SparseSignal::new(u.clone()).unwrap()).unwrap();
            let kv = prob.forward_signal(&SparseSignal::new(v.clone()).unwrap()).unwrap();
            let ks = prob.forward_signal(&SparseSignal::new(u.into_iter().chain(v).collect()).unwrap()).unwrap();
            assert!((ks - ku - kv).amax() <= 1e-12);
        }
    }
}

#[test]
fn regularizer_is_positively_homogeneous() {
    let mut r = rng(5);
    for prob in problems() {
        for _ in 0..50 {
            let u = loop {
                if let Ok(u) = SparseSignal::new((0..3).map(|_| random_term(&prob, &mut r)).collect()) {
                    break u;
                }
            };
            let expected: f64 = u.terms().iter().map(|t| t.c).sum();
            assert!((prob.regularizer_value(&u) - expected).abs() <= 1e-12);
            for c in [0.0, 0.3, 1.0, 7.5] {
                let scaled = u.scaled(c).unwrap();
                assert!((prob.regularizer_value(&scaled) - c * prob.regularizer_value(&u)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn certificates_bound_every_atom() {
    let mut instances = certified_scalar(2);
    instances.push(certified_demixing());
    instances.push(certified_group());
    let mut r = rng(6);
    for inst in &instances {
        for _ in 0..2000 {
            let t = random_term(&inst.prob, &mut r);
            let v = inst.cert.eta_eval(&t.atom).unwrap();
            assert!(v.abs() <= 1.0 + 1e-9, "seed {}: <eta, {:?}> = {v}", inst.seed, t.atom);
        }
    }
}

#[test]
fn canonical_spikes_select_measurements() {
    let prob = demixing_problem();
    let v = prob.forward_atom(&Atom::CanonicalSpike { k: 7, sign: Sign::Minus }).unwrap();
    for i in 0..N {
        assert_eq!(v[i], if i == 6 { -1.0 } else { 0.0 });
    }
    assert!(prob.forward_atom(&Atom::CanonicalSpike { k: N + 1, sign: Sign::Plus }).is_err());
    assert!(prob.forward_atom(&Atom::CanonicalSpike { k: 0, sign: Sign::Plus }).is_err());
}
