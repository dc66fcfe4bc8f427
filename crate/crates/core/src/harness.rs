//! Exact sparse representation recovery, measured.
//!
//! A sweep solves the regularized problem for every `(lambda, w)` of a sampled admissible
//! region `{lambda <= lambda0, |w| <= alpha lambda}`, matches the recovered atoms to the
//! ground truth and records whether the recovery kept the atom count with every atom
//! `eps`-close to its counterpart.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atoms::{Atom, Family, ProblemInstance, Sign, SparseSignal, Term};
use crate::certificate::{check_mndsc, minimal_norm_certificate_qp, Certificate, MndscTolerances};
use crate::error::{Error, Result};
use crate::solver::{solve, solve_from, SolveResult, SolverConfig};
use crate::torus::TorusPoint;

/// Default matching radius, equal to the certificate exclusion radius.
pub const DEFAULT_EPSILON: f64 = 0.05;

/// Grid size used by the sweep gate when it certifies the ground truth.
pub const GATE_GRID: usize = 2048;

/// Sampled admissible region: every `lambda` of the grid against every noise level and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleRegion {
    pub alpha: f64,
    pub lambda0: f64,
    /// Strictly decreasing values in `(0, lambda0]`.
    pub lambda_grid: Vec<f64>,
    /// Noise norms as fractions of `alpha * lambda`, each in `[0, 1]`.
    pub noise_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// One `(lambda, w)` pair of a sweep; `w` is drawn from `seed` with norm `noise_norm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellSpec {
    pub lambda: f64,
    pub noise_fraction: f64,
    pub seed: u64,
    pub noise_norm: f64,
}

impl AdmissibleRegion {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.lambda0 > 0.0) || !self.lambda0.is_finite() {
            return bad(format!("lambda0 must be positive, got {}", self.lambda0));
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid is empty".into());
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0 && l <= self.lambda0)) {
            return bad(format!("lambda_grid values must lie in (0, {}]", self.lambda0));
        }
        if self.lambda_grid.windows(2).any(|w| !(w[1] < w[0])) {
            return bad("lambda_grid must be strictly decreasing".into());
        }
        if self.noise_fractions.is_empty() || self.noise_fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return bad("noise_fractions must be a nonempty list of values in [0, 1]".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds is empty".into());
        }
        Ok(())
    }

    /// All cells in sweep order: by `lambda`, then noise fraction, then seed.
    pub fn cells(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for &lambda in &self.lambda_grid {
            for &noise_fraction in &self.noise_fractions {
                for &seed in &self.seeds {
                    let noise_norm = if noise_fraction == 0.0 { 0.0 } else { noise_fraction * self.alpha * lambda };
                    out.push(CellSpec { lambda, noise_fraction, seed, noise_norm });
                }
            }
        }
        out
    }
}

/// Noise vector of norm `magnitude`, uniformly distributed on the sphere given `seed`.
pub fn draw_noise(n: usize, magnitude: f64, seed: u64) -> DVector<f64> {
    assert!(magnitude >= 0.0, "noise magnitude must be nonnegative");
    if magnitude == 0.0 || n == 0 {
        return DVector::zeros(n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 {
            return g * (magnitude / norm);
        }
    }
}

/// A bijection between ground-truth and recovered atoms with the per-pair errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matching {
    /// `(truth index, recovered index)`, ordered by truth index.
    pub pairs: Vec<(usize, usize)>,
    pub position_errors: Vec<f64>,
    pub coefficient_errors: Vec<f64>,
    pub direction_errors: Vec<f64>,
}

impl Matching {
    pub fn max_position_error(&self) -> f64 {
        self.position_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_coefficient_error(&self) -> f64 {
        self.coefficient_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_direction_error(&self) -> f64 {
        self.direction_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Greedy closest-first matching of atoms with equal discrete tags and smooth distances within `eps`.
///
/// `None` when the counts differ or some atom is left without an admissible partner.
pub fn match_atoms(truth: &SparseSignal, recovered: &SparseSignal, eps: f64) -> Option<Matching> {
    if truth.len() != recovered.len() {
        return None;
    }
    let t = truth.terms();
    let r = recovered.terms();
    let mut admissible = Vec::new();
    for (i, a) in t.iter().enumerate() {
        for (j, b) in r.iter().enumerate() {
            if !a.atom.same_tag(&b.atom) {
                continue;
            }
            let pos = a.atom.position_distance(&b.atom);
            let dir = a.atom.direction_distance(&b.atom);
            if pos <= eps && dir <= eps {
                admissible.push((pos + dir, i, j));
            }
        }
    }
    admissible.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut partner = vec![None; t.len()];
    let mut used = vec![false; r.len()];
    for (_, i, j) in admissible {
        if partner[i].is_none() && !used[j] {
            partner[i] = Some(j);
            used[j] = true;
        }
    }
    let pairs: Vec<(usize, usize)> =
        partner.iter().enumerate().map(|(i, j)| j.map(|j| (i, j))).collect::<Option<_>>()?;
    let has_direction = t.iter().any(|x| x.atom.direction().is_some());
    let mut m = Matching { pairs, position_errors: vec![], coefficient_errors: vec![], direction_errors: vec![] };
    for &(i, j) in &m.pairs {
        m.position_errors.push(t[i].atom.position_distance(&r[j].atom));
        m.coefficient_errors.push((t[i].c - r[j].c).abs());
        if has_direction {
            m.direction_errors.push(t[i].atom.direction_distance(&r[j].atom));
        }
    }
    Some(m)
}

/// Outcome of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EsrrCell {
    pub lambda: f64,
    pub noise_fraction: f64,
    pub seed: u64,
    pub noise_norm: f64,
    pub atom_count: usize,
    pub count_match: bool,
    pub matching: Option<Matching>,
    pub max_pos_err: f64,
    pub max_coeff_err: f64,
    pub max_dir_err: f64,
    pub verdict: bool,
    pub objective: f64,
    pub converged: bool,
    pub recovered: Option<SparseSignal>,
    /// Set when the solver failed on this cell.
    pub error: Option<String>,
    pub wall_ms: f64,
}

/// Log-log least-squares fit of the largest recovery error against `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    pub lambdas: Vec<f64>,
    pub max_position_errors: Vec<f64>,
    /// Largest of the position, coefficient and direction errors at each `lambda`.
    pub max_errors: Vec<f64>,
    pub slope: Option<f64>,
}

/// Pass counts per `lambda` and the largest grid value below which every cell passed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Frontier {
    pub per_lambda: Vec<FrontierRow>,
    pub empirical_lambda0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierRow {
    pub lambda: f64,
    pub cells: usize,
    pub passed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EsrrReport {
    pub family: Family,
    pub epsilon: f64,
    pub region: AdmissibleRegion,
    pub cells: Vec<EsrrCell>,
    /// Fit over the cells without noise; `None` when the region has no such cells.
    pub decay: Option<DecayFit>,
    pub frontier: Frontier,
}

impl EsrrReport {
    pub fn all_passed(&self) -> bool {
        self.cells.iter().all(|c| c.verdict)
    }

    pub fn solver_failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SweepOptions {
    /// Run even if the ground truth does not pass the non-degeneracy check.
    pub skip_certify: bool,
    /// Record wall-clock times; off keeps reports bit-reproducible.
    pub record_timing: bool,
}

fn run_cell(
    prob: &ProblemInstance,
    u0: &SparseSignal,
    y0: &DVector<f64>,
    cell: CellSpec,
    eps: f64,
    cfg: &SolverConfig,
    record_timing: bool,
) -> EsrrCell {
    let start = Instant::now();
    let y = y0 + draw_noise(prob.n(), cell.noise_norm, cell.seed);
    let outcome = solve(prob, &y, cell.lambda, cfg);
    let wall_ms = if record_timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let mut out = EsrrCell {
        lambda: cell.lambda,
        noise_fraction: cell.noise_fraction,
        seed: cell.seed,
        noise_norm: cell.noise_norm,
        atom_count: 0,
        count_match: false,
        matching: None,
        max_pos_err: f64::NAN,
        max_coeff_err: f64::NAN,
        max_dir_err: f64::NAN,
        verdict: false,
        objective: f64::NAN,
        converged: false,
        recovered: None,
        error: None,
        wall_ms,
    };
    match outcome {
        Ok(res) => {
            out.atom_count = res.u.len();
            out.count_match = res.u.len() == u0.len();
            out.objective = res.objective;
            out.converged = res.converged;
            out.matching = match_atoms(u0, &res.u, eps);
            if let Some(m) = &out.matching {
                out.max_pos_err = m.max_position_error();
                out.max_coeff_err = m.max_coefficient_error();
                out.max_dir_err = m.max_direction_error();
                out.verdict = out.count_match && out.max_coeff_err <= eps;
            }
            out.recovered = Some(res.u);
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

/// Solves, matches and judges every cell of `region`, in parallel on the current rayon pool.
///
/// Unless `opts.skip_certify` is set, the ground truth must first pass the non-degeneracy
/// check with the quadratic-program certificate. Solver failures are recorded per cell.
pub fn run_sweep(
    prob: &ProblemInstance,
    u0: &SparseSignal,
    region: &AdmissibleRegion,
    eps: f64,
    cfg: &SolverConfig,
    opts: SweepOptions,
) -> Result<EsrrReport> {
    region.validate()?;
    cfg.validate()?;
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    if !opts.skip_certify {
        let cert = minimal_norm_certificate_qp(prob, u0, GATE_GRID)?;
        let report = check_mndsc(prob, u0, &cert, &MndscTolerances::default());
        if !report.passed {
            return Err(Error::NotCertified(report.reasons.join("; ")));
        }
    }
    let y0 = prob.forward_signal(u0)?;
    let cells: Vec<EsrrCell> = region
        .cells()
        .into_par_iter()
        .map(|cell| run_cell(prob, u0, &y0, cell, eps, cfg, opts.record_timing))
        .collect();
    let decay = decay_fit(&cells);
    let frontier = frontier(&cells);
    Ok(EsrrReport { family: prob.family(), epsilon: eps, region: region.clone(), cells, decay, frontier })
}

/// Least-squares slope of `log y` against `log x`; `None` with fewer than two usable points.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn decay_fit(cells: &[EsrrCell]) -> Option<DecayFit> {
    let noiseless: Vec<&EsrrCell> = cells.iter().filter(|c| c.noise_norm == 0.0).collect();
    if noiseless.is_empty() {
        return None;
    }
    let mut lambdas: Vec<f64> = Vec::new();
    for c in &noiseless {
        if !lambdas.contains(&c.lambda) {
            lambdas.push(c.lambda);
        }
    }
    let mut max_position_errors = Vec::new();
    let mut max_errors = Vec::new();
    for &l in &lambdas {
        let at: Vec<&&EsrrCell> = noiseless.iter().filter(|c| c.lambda == l).collect();
        let matched = at.iter().all(|c| c.matching.is_some());
        let pos = at.iter().map(|c| c.max_pos_err).fold(0.0, f64::max);
        let all = at.iter().map(|c| c.max_pos_err.max(c.max_coeff_err).max(c.max_dir_err)).fold(0.0, f64::max);
        max_position_errors.push(if matched { pos } else { f64::NAN });
        max_errors.push(if matched { all } else { f64::NAN });
    }
    let slope = log_log_slope(&lambdas, &max_errors);
    Some(DecayFit { lambdas, max_position_errors, max_errors, slope })
}

fn frontier(cells: &[EsrrCell]) -> Frontier {
    let mut per_lambda: Vec<FrontierRow> = Vec::new();
    for c in cells {
        match per_lambda.iter_mut().find(|r| r.lambda == c.lambda) {
            Some(r) => {
                r.cells += 1;
                r.passed += c.verdict as usize;
            }
            None => per_lambda.push(FrontierRow { lambda: c.lambda, cells: 1, passed: c.verdict as usize }),
        }
    }
    // rows are in decreasing lambda: walk up from the smallest value while everything passes
    let empirical_lambda0 = per_lambda.iter().rev().take_while(|r| r.passed == r.cells).last().map(|r| r.lambda);
    Frontier { per_lambda, empirical_lambda0 }
}

/// Probes of a `lambda0` bisection and the largest value found to pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lambda0Search {
    pub probes: Vec<(f64, bool)>,
    pub lambda0: Option<f64>,
}

/// Bisects `log lambda` between the smallest grid value and `region.lambda0` for the largest
/// `lambda` at which every noise level and seed of the region passes.
///
/// Only the probed values are tested; the answer is an empirical frontier, not a bound.
pub fn bisect_lambda0(
    prob: &ProblemInstance,
    u0: &SparseSignal,
    region: &AdmissibleRegion,
    eps: f64,
    cfg: &SolverConfig,
    steps: usize,
) -> Result<Lambda0Search> {
    region.validate()?;
    let y0 = prob.forward_signal(u0)?;
    let passes = |lambda: f64| -> bool {
        let probe = AdmissibleRegion { lambda_grid: vec![lambda], lambda0: lambda, ..region.clone() };
        probe.cells().into_par_iter().all(|cell| run_cell(prob, u0, &y0, cell, eps, cfg, false).verdict)
    };
    let mut probes = Vec::new();
    let hi0 = region.lambda0;
    let top = passes(hi0);
    probes.push((hi0, top));
    if top {
        return Ok(Lambda0Search { probes, lambda0: Some(hi0) });
    }
    let lo0 = *region.lambda_grid.last().expect("validated nonempty");
    let bottom = passes(lo0);
    probes.push((lo0, bottom));
    if !bottom {
        return Ok(Lambda0Search { probes, lambda0: None });
    }
    let (mut lo, mut hi) = (lo0.ln(), hi0.ln());
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        let ok = passes(mid.exp());
        probes.push((mid.exp(), ok));
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Lambda0Search { probes, lambda0: Some(lo.exp()) })
}

/// Agreement of repeated solves from randomized starting points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub trials: usize,
    pub objective_spread: f64,
    /// Largest parameter distance between the atom sets of two runs; infinite when counts differ.
    pub max_atom_distance: f64,
    /// Spread at most 1e-8 and atom sets within 1e-6.
    pub consistent: bool,
    pub failed_runs: usize,
}

fn random_atom(prob: &ProblemInstance, rng: &mut ChaCha8Rng) -> Atom {
    let x = TorusPoint::new(rng.random_range(0.0..1.0));
    let sign = if rng.random_bool(0.5) { Sign::Plus } else { Sign::Minus };
    match prob.family() {
        Family::ScalarBlasso => Atom::TorusSpike { sign, x },
        Family::Demixing if rng.random_bool(0.5) => Atom::CanonicalSpike { k: rng.random_range(1..=prob.n()), sign },
        Family::Demixing => Atom::TorusSpike { sign, x },
        Family::GroupL1 => Atom::AxisSpike { k: rng.random_range(1..=prob.d()), sign, x },
        Family::GroupL2 => loop {
            let a: Vec<f64> = (0..prob.d()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            if let Ok(atom) = Atom::vector_spike(&a, x) {
                break atom;
            }
        },
    }
}

fn perturbed_start(prob: &ProblemInstance, u: &SparseSignal, rng: &mut ChaCha8Rng) -> SparseSignal {
    let mut terms: Vec<Term> = u
        .terms()
        .iter()
        .map(|t| {
            let c = t.c * rng.random_range(0.5..1.5);
            let atom = match &t.atom {
                Atom::TorusSpike { sign, x } => Atom::TorusSpike { sign: *sign, x: x.shifted(rng.random_range(-0.01..0.01)) },
                Atom::AxisSpike { k, sign, x } => {
                    Atom::AxisSpike { k: *k, sign: *sign, x: x.shifted(rng.random_range(-0.01..0.01)) }
                }
                Atom::VectorSpike { a, x } => {
                    let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
                    Atom::vector_spike(&b, x.shifted(rng.random_range(-0.01..0.01))).unwrap_or_else(|_| t.atom.clone())
                }
                other => other.clone(),
            };
            Term { c, atom }
        })
        .collect();
    let extra = random_atom(prob, rng);
    terms.push(Term { c: 0.05 * u.terms().iter().map(|t| t.c).fold(0.1, f64::max), atom: extra });
    // drop anything that collides after perturbation
    let mut kept: Vec<Term> = Vec::new();
    for t in terms {
        if !kept.iter().any(|k| k.atom.coincides_with(&t.atom, 1e-6)) {
            kept.push(t);
        }
    }
    SparseSignal::new(kept).unwrap_or_else(|_| u.clone())
}

/// Largest parameter gap between two signals after greedy matching; infinite on a count mismatch.
pub fn signal_distance(a: &SparseSignal, b: &SparseSignal) -> f64 {
    match match_atoms(a, b, 0.5) {
        Some(m) => m
            .max_position_error()
            .max(m.max_coefficient_error())
            .max(m.max_direction_error()),
        None => f64::INFINITY,
    }
}

/// Re-solves from `trials - 1` perturbed copies of `result.u`, each with one random atom added.
pub fn uniqueness_probe(
    prob: &ProblemInstance,
    y: &DVector<f64>,
    lambda: f64,
    result: &SolveResult,
    trials: usize,
    cfg: &SolverConfig,
    seed: u64,
) -> UniquenessReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<SparseSignal> = (1..trials.max(1)).map(|_| perturbed_start(prob, &result.u, &mut rng)).collect();
    let runs: Vec<Result<SolveResult>> = starts.par_iter().map(|s| solve_from(prob, y, lambda, cfg, s)).collect();
    let mut objective_spread: f64 = 0.0;
    let mut max_atom_distance: f64 = 0.0;
    let mut failed_runs = 0;
    for run in &runs {
        match run {
            Ok(r) => {
                objective_spread = objective_spread.max((r.objective - result.objective).abs());
                max_atom_distance = max_atom_distance.max(signal_distance(&result.u, &r.u));
            }
            Err(_) => failed_runs += 1,
        }
    }
    UniquenessReport {
        trials: trials.max(1),
        objective_spread,
        max_atom_distance,
        consistent: failed_runs == 0 && objective_spread <= 1e-8 && max_atom_distance <= 1e-6,
        failed_runs,
    }
}

/// `sup_u <K* y, u>`: every `lambda` at or above it has the empty solution.
pub fn null_threshold(prob: &ProblemInstance, y: &DVector<f64>) -> f64 {
    Certificate::new(prob.clone(), y.clone()).dual_feasibility_margin()
}

pub const CSV_HEADER: [&str; 12] = [
    "family",
    "lambda",
    "seed",
    "noise_norm",
    "atom_count",
    "count_match",
    "max_pos_err",
    "max_coeff_err",
    "max_dir_err",
    "verdict",
    "objective",
    "wall_ms",
];

/// One row per cell in sweep order.
pub fn write_csv<W: Write>(report: &EsrrReport, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for c in &report.cells {
        w.write_record([
            report.family.to_string(),
            c.lambda.to_string(),
            c.seed.to_string(),
            c.noise_norm.to_string(),
            c.atom_count.to_string(),
            c.count_match.to_string(),
            c.max_pos_err.to_string(),
            c.max_coeff_err.to_string(),
            c.max_dir_err.to_string(),
            c.verdict.to_string(),
            c.objective.to_string(),
            c.wall_ms.to_string(),
        ])?;
    }
    w.flush()
}
