//! Instances shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use esrr::atoms::{Atom, Family, ProblemInstance, Sign, SparseSignal, Term};
use esrr::certificate::{check_mndsc, minimal_norm_certificate_qp, Certificate, MndscReport, MndscTolerances};
use esrr::kernel::KernelBank;
use esrr::torus::{torus_dist, TorusPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sign(rng: &mut ChaCha8Rng) -> Sign {
    if rng.random_bool(0.5) { Sign::Plus } else { Sign::Minus }
}

/// `n` uniform positions, pairwise at least `sep` apart.
pub fn separated_positions(rng: &mut ChaCha8Rng, n: usize, sep: f64) -> Vec<f64> {
    loop {
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        if (0..n).all(|i| (i + 1..n).all(|j| torus_dist(xs[i].into(), xs[j].into()) >= sep)) {
            return xs;
        }
    }
}

pub fn torus_spike(c: f64, sign: Sign, x: f64) -> Term {
    Term { c, atom: Atom::TorusSpike { sign, x: TorusPoint::new(x) } }
}

pub fn scalar_problem() -> ProblemInstance {
    ProblemInstance::new(Family::ScalarBlasso, KernelBank::harmonic(N).unwrap()).unwrap()
}

pub fn demixing_problem() -> ProblemInstance {
    ProblemInstance::new(Family::Demixing, KernelBank::harmonic(N).unwrap()).unwrap()
}

/// Three signed spikes separated by at least 0.15.
pub fn scalar_signal(seed: u64) -> SparseSignal {
    let mut r = rng(seed);
    let xs = separated_positions(&mut r, 3, 0.15);
    SparseSignal::new(xs.iter().map(|&x| torus_spike(r.random_range(0.5..1.5), sign(&mut r), x)).collect()).unwrap()
}

/// Two torus spikes and two canonical spikes.
pub fn demixing_signal(seed: u64) -> SparseSignal {
    let mut r = rng(seed);
    let xs = separated_positions(&mut r, 2, 0.15);
    let mut terms: Vec<Term> = xs.iter().map(|&x| torus_spike(r.random_range(0.5..1.5), sign(&mut r), x)).collect();
    let k1 = r.random_range(1..=N);
    let k2 = loop {
        let k = r.random_range(1..=N);
        if k != k1 {
            break k;
        }
    };
    for k in [k1, k2] {
        let s = sign(&mut r);
        terms.push(Term { c: r.random_range(0.5..1.5), atom: Atom::CanonicalSpike { k, sign: s } });
    }
    SparseSignal::new(terms).unwrap()
}

pub fn group_problem(seed: u64) -> ProblemInstance {
    ProblemInstance::new(Family::GroupL2, KernelBank::random_fourier(N, 3, 4, seed).unwrap()).unwrap()
}

/// Three vector spikes in R^3 separated by at least 0.15.
pub fn group_signal(seed: u64) -> SparseSignal {
    let mut r = rng(1000 + seed);
    let xs = separated_positions(&mut r, 3, 0.15);
    SparseSignal::new(
        xs.iter()
            .map(|&x| {
                let a: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                Term { c: r.random_range(0.5..1.5), atom: Atom::vector_spike(&a, TorusPoint::new(x)).unwrap() }
            })
            .collect(),
    )
    .unwrap()
}

pub struct Certified {
    pub seed: u64,
    pub prob: ProblemInstance,
    pub u0: SparseSignal,
    pub cert: Certificate,
    pub report: MndscReport,
}

/// The first seeds (in increasing order) whose instance passes the non-degeneracy check.
pub fn certified<F>(count: usize, make: F) -> Vec<Certified>
where
    F: Fn(u64) -> (ProblemInstance, SparseSignal),
{
    let mut out = Vec::new();
    for seed in 0..10_000u64 {
        let (prob, u0) = make(seed);
        if let Ok(cert) = minimal_norm_certificate_qp(&prob, &u0, 1024) {
            let report = check_mndsc(&prob, &u0, &cert, &MndscTolerances::default());
            if report.passed {
                out.push(Certified { seed, prob, u0, cert, report });
                if out.len() == count {
                    break;
                }
            }
        }
    }
    assert_eq!(out.len(), count, "not enough certified instances");
    out
}

pub fn certified_scalar(count: usize) -> Vec<Certified> {
    certified(count, |s| (scalar_problem(), scalar_signal(s)))
}

pub fn certified_demixing() -> Certified {
    certified(1, |s| (demixing_problem(), demixing_signal(s))).pop().unwrap()
}

pub fn certified_group() -> Certified {
    certified(1, |s| (group_problem(s), group_signal(s))).pop().unwrap()
}

/// Cosine/sine pairs at even frequencies 2, 4, ..., 20: every kernel has period 1/2.
pub fn even_harmonic_bank() -> KernelBank {
    let mut frequencies = Vec::new();
    let mut phases = Vec::new();
    for f in 1..=(N / 2) as i64 {
        frequencies.push(vec![2 * f]);
        phases.push(vec![0.0]);
        frequencies.push(vec![2 * f]);
        phases.push(vec![-PI / 2.0]);
    }
    KernelBank::fourier(frequencies, phases, (2.0 / N as f64).sqrt()).unwrap()
}

/// Spikes in (1/2, 1) seen through a bank of period 1/2: each has an indistinguishable twin
/// half a period earlier, where the certificate touches 1 as well.
pub fn negative_control() -> (ProblemInstance, SparseSignal) {
    let prob = ProblemInstance::new(Family::ScalarBlasso, even_harmonic_bank()).unwrap();
    let u0 = SparseSignal::new(vec![torus_spike(1.0, Sign::Plus, 0.62), torus_spike(0.8, Sign::Minus, 0.81)]).unwrap();
    (prob, u0)
}

use esrr::config::{CertificateSpec, ExperimentConfig, KernelSpec, OutputSpec, ValidationSpec};
use esrr::harness::AdmissibleRegion;
use esrr::solver::SolverConfig;

pub fn harmonic_spec() -> KernelSpec {
    KernelSpec::FourierFeatures {
        n: N,
        d: 1,
        frequencies: None,
        phases: None,
        amplitude: None,
        seed: None,
        max_frequency: None,
        derivative_stub: false,
    }
}

pub fn even_harmonic_spec() -> KernelSpec {
    let mut frequencies = Vec::new();
    let mut phases = Vec::new();
    for f in 1..=(N / 2) as i64 {
        frequencies.push(vec![2 * f]);
        phases.push(vec![0.0]);
        frequencies.push(vec![2 * f]);
        phases.push(vec![-PI / 2.0]);
    }
    KernelSpec::FourierFeatures {
        n: N,
        d: 1,
        frequencies: Some(frequencies),
        phases: Some(phases),
        amplitude: Some((2.0 / N as f64).sqrt()),
        seed: None,
        max_frequency: None,
        derivative_stub: false,
    }
}

pub fn experiment(family: Family, kernel: KernelSpec, u0: &SparseSignal, region: AdmissibleRegion) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: "1".into(),
        family,
        kernel,
        ground_truth: u0.terms().to_vec(),
        certificate: CertificateSpec::default(),
        tolerances: MndscTolerances::default(),
        kernel_validation: ValidationSpec::default(),
        region,
        epsilon: 0.05,
        solver: SolverConfig::default(),
        output: OutputSpec::default(),
    }
}

pub fn region(alpha: f64, lambdas: &[f64], fractions: &[f64], seeds: &[u64]) -> AdmissibleRegion {
    AdmissibleRegion {
        alpha,
        lambda0: lambdas[0],
        lambda_grid: lambdas.to_vec(),
        noise_fractions: fractions.to_vec(),
        seeds: seeds.to_vec(),
    }
}

/// Runs the `esrr` binary; returns the exit code and standard output.
pub fn esrr(args: &[&str]) -> (i32, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_esrr"))
        .args(args)
        .env("ESRR_LOG", "warn")
        .output()
        .expect("esrr binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Block-sparse least squares on a finite dictionary, solved by accelerated proximal gradient.
///
/// Minimizes `1/2 |A z - y|^2 + lambda sum_b |z_b|_2` where each block is a list of column
/// indices; single-column blocks marked nonnegative are constrained to `z >= 0`.
pub struct FiniteProblem {
    pub a: nalgebra::DMatrix<f64>,
    pub blocks: Vec<(Vec<usize>, bool)>,
}

impl FiniteProblem {
    pub fn objective(&self, z: &nalgebra::DVector<f64>, y: &nalgebra::DVector<f64>, lambda: f64) -> f64 {
        let r = &self.a * z - y;
        let reg: f64 = self.blocks.iter().map(|(b, _)| b.iter().map(|&i| z[i] * z[i]).sum::<f64>().sqrt()).sum();
        0.5 * r.norm_squared() + lambda * reg
    }

    fn prox(&self, z: &mut nalgebra::DVector<f64>, t: f64) {
        for (b, nonneg) in &self.blocks {
            if *nonneg {
                for &i in b {
                    z[i] = (z[i] - t).max(0.0);
                }
            } else {
                let norm = b.iter().map(|&i| z[i] * z[i]).sum::<f64>().sqrt();
                let scale = if norm > t { 1.0 - t / norm } else { 0.0 };
                for &i in b {
                    z[i] *= scale;
                }
            }
        }
    }

    pub fn solve(&self, y: &nalgebra::DVector<f64>, lambda: f64, iters: usize) -> (nalgebra::DVector<f64>, f64) {
        let ata = self.a.transpose() * &self.a;
        let aty = self.a.transpose() * y;
        let lip = ata.clone().symmetric_eigen().eigenvalues.max() * 1.0001;
        let step = 1.0 / lip;
        let n = self.a.ncols();
        let mut z = nalgebra::DVector::zeros(n);
        let mut w = z.clone();
        let mut t = 1.0f64;
        let mut best = self.objective(&z, y, lambda);
        let mut best_z = z.clone();
        for _ in 0..iters {
            let grad = &ata * &w - &aty;
            let mut next = &w - grad * step;
            self.prox(&mut next, step * lambda);
            let obj = self.objective(&next, y, lambda);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            // adaptive restart keeps the iteration monotone near the optimum
            if obj > best {
                t = 1.0;
                w = z.clone();
                continue;
            }
            w = &next + (&next - &z) * ((t - 1.0) / t_next);
            z = next;
            t = t_next;
            best = obj;
            best_z = z.clone();
        }
        (best_z, best)
    }
}

/// Dictionary of every extreme point whose position lies on a uniform grid of `m` points.
pub fn grid_dictionary(prob: &ProblemInstance, m: usize) -> FiniteProblem {
    use esrr::kernel::Order;
    let (n, d) = (prob.n(), prob.d());
    let mut cols: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut blocks = Vec::new();
    for j in 0..m {
        let phi = prob.bank().eval_all_vec(TorusPoint::new(j as f64 / m as f64), Order::Value);
        let comp = |k: usize| nalgebra::DVector::from_fn(n, |i, _| phi[i * d + k]);
        match prob.family() {
            Family::ScalarBlasso | Family::Demixing => {
                for s in [1.0, -1.0] {
                    blocks.push((vec![cols.len()], true));
                    cols.push(comp(0) * s);
                }
            }
            Family::GroupL1 => {
                for k in 0..d {
                    for s in [1.0, -1.0] {
                        blocks.push((vec![cols.len()], true));
                        cols.push(comp(k) * s);
                    }
                }
            }
            Family::GroupL2 => {
                let start = cols.len();
                for k in 0..d {
                    cols.push(comp(k));
                }
                blocks.push(((start..start + d).collect(), false));
            }
        }
    }
    if prob.family() == Family::Demixing {
        for k in 0..n {
            for s in [1.0, -1.0] {
                blocks.push((vec![cols.len()], true));
                let mut e = nalgebra::DVector::zeros(n);
                e[k] = s;
                cols.push(e);
            }
        }
    }
    FiniteProblem { a: nalgebra::DMatrix::from_columns(&cols), blocks }
}
