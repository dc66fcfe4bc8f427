//! Sliding conditional-gradient solver for `min_u 1/2 |K u - y|^2 + lambda R(u)`.
//!
//! Each outer iteration forms the residual certificate `p = (y - K u) / lambda`, asks the
//! linear minimization oracle for the extreme point with the largest pairing, and stops once
//! that pairing is at most `1 + gap_tol`. Otherwise the atom is inserted, coefficients are
//! re-fitted on the current atom set, all smooth parameters slide jointly by damped Newton
//! steps, and vanishing or coincident atoms are removed.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::atoms::{Atom, Family, ProblemInstance, SparseSignal, Term};
use crate::certificate::Certificate;
use crate::error::{Error, Result};
use crate::kernel::Order;
use crate::scan::{best_candidate, local_maxima, ScanGrid, Selection};
use crate::torus::TorusPoint;

/// Atoms with equal tags whose smooth parameters are closer than this are merged.
pub const MERGE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_outer_iters: usize,
    pub lmo_grid: usize,
    pub polish_iters: usize,
    pub slide_iters: usize,
    pub coeff_tol: f64,
    pub gap_tol: f64,
    pub prune_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_outer_iters: 200,
            lmo_grid: 4096,
            polish_iters: 20,
            slide_iters: 50,
            coeff_tol: 1e-10,
            gap_tol: 1e-7,
            prune_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lmo_grid < 16 {
            return Err(Error::InvalidInput(format!("lmo_grid must be at least 16, got {}", self.lmo_grid)));
        }
        for (name, v) in [("coeff_tol", self.coeff_tol), ("gap_tol", self.gap_tol), ("prune_tol", self.prune_tol)] {
            if !(v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveResult {
    pub u: SparseSignal,
    pub objective: f64,
    /// Largest pairing of the final residual certificate with an extreme point.
    pub certificate_sup: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the start of every outer iteration, then the final value.
    pub objective_trace: Vec<f64>,
}

/// `p = (y - K u) / lambda`.
pub fn residual_certificate(prob: &ProblemInstance, u: &SparseSignal, y: &DVector<f64>, lambda: f64) -> Result<Certificate> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    let r = y - prob.forward_signal(u)?;
    Ok(Certificate::new(prob.clone(), r / lambda))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmoResult {
    pub atom: Atom,
    pub value: f64,
    /// The certificate vanishes; the atom is arbitrary.
    pub degenerate: bool,
}

/// Extreme point maximizing `<K* p, u>`, scanned on `grid` and refined by Newton steps.
pub fn lmo_on_grid(cert: &Certificate, grid: &ScanGrid, polish_iters: usize) -> LmoResult {
    let prob = cert.problem();
    let p = cert.p();
    if p.iter().all(|&v| v == 0.0) {
        let x = TorusPoint::new(0.0);
        let atom = match prob.family() {
            Family::GroupL2 => {
                let mut a = vec![0.0; prob.d()];
                a[0] = 1.0;
                Atom::VectorSpike { a, x }
            }
            Family::GroupL1 => Atom::AxisSpike { k: 1, sign: crate::atoms::Sign::Plus, x },
            _ => Atom::TorusSpike { sign: crate::atoms::Sign::Plus, x },
        };
        return LmoResult { atom, value: 0.0, degenerate: true };
    }
    // polish every grid peak close to the best so that near-ties between support peaks are resolved
    let best = best_candidate(local_maxima(prob, p, grid, Selection::NearBest(0.05), polish_iters))
        .expect("a nonempty grid always yields a candidate");
    LmoResult { atom: best.atom, value: best.value, degenerate: false }
}

/// [`lmo_on_grid`] on a fresh grid of `cfg.lmo_grid` points.
pub fn lmo(cert: &Certificate, cfg: &SolverConfig) -> LmoResult {
    let grid = ScanGrid::new(cert.problem(), cfg.lmo_grid);
    lmo_on_grid(cert, &grid, cfg.polish_iters)
}

/// Nonnegative lasso `min_{c >= 0} 1/2 |A c - y|^2 + lambda sum c` by the Lawson-Hanson
/// active-set method applied to the normal equations.
pub fn nonneg_lasso(a: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, tol: f64) -> Result<DVector<f64>> {
    let n = a.ncols();
    let gram = a.transpose() * a;
    let q = a.transpose() * y - DVector::from_element(n, lambda);
    let mut c = DVector::zeros(n);
    if n == 0 {
        return Ok(c);
    }
    let mut passive = vec![false; n];
    // variables whose entry failed to produce a positive value; retried only after progress
    let mut blocked = vec![false; n];
    let max_iter = 30 * n + 50;
    let mut iter = 0;

    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
        let g = DMatrix::from_fn(idx.len(), idx.len(), |r, s| gram[(idx[r], idx[s])]);
        let rhs = DVector::from_fn(idx.len(), |r, _| q[idx[r]]);
        let sol = g
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .unwrap_or_else(|| {
                let svd = g.svd(true, true);
                let eps = 1e-13 * svd.singular_values.max().max(1e-300);
                svd.solve(&rhs, eps).unwrap_or_else(|_| DVector::zeros(idx.len()))
            });
        let mut z = DVector::zeros(n);
        for (r, &i) in idx.iter().enumerate() {
            z[i] = sol[r];
        }
        z
    };

    loop {
        let w = &q - &gram * &c;
        let entering = (0..n).filter(|&j| !passive[j] && !blocked[j]).fold(None, |acc: Option<usize>, j| match acc {
            Some(b) if w[b] >= w[j] => Some(b),
            _ => Some(j),
        });
        let j = match entering {
            Some(j) if w[j] > tol => j,
            _ => break,
        };
        passive[j] = true;
        let mut first = true;
        loop {
            iter += 1;
            if iter > max_iter {
                let w = &q - &gram * &c;
                return Err(Error::NoConvergence { iterations: iter, residual: w.amax() });
            }
            let z = solve_passive(&passive);
            if first && z[j] <= 0.0 {
                passive[j] = false;
                blocked[j] = true;
                break;
            }
            first = false;
            if (0..n).filter(|&i| passive[i]).all(|i| z[i] > 0.0) {
                c = z;
                blocked.iter_mut().for_each(|b| *b = false);
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in (0..n).filter(|&i| passive[i] && z[i] <= 0.0) {
                alpha = alpha.min(c[i] / (c[i] - z[i]));
            }
            c += (&z - &c) * alpha;
            for i in 0..n {
                if passive[i] && c[i] <= 1e-300 {
                    passive[i] = false;
                    c[i] = 0.0;
                }
            }
            if !passive.iter().any(|&b| b) {
                break;
            }
        }
    }

    // KKT: gradient g = G c - q vanishes on the support and is nonnegative elsewhere
    let g = &gram * &c - &q;
    let residual = (0..n)
        .map(|i| if c[i] > 0.0 { g[i].abs() } else { (-g[i]).max(0.0) })
        .fold(0.0, f64::max);
    if residual > tol {
        return Err(Error::NoConvergence { iterations: iter, residual });
    }
    Ok(c)
}

/// Optimal nonnegative coefficients for a fixed atom set.
pub fn coefficient_subproblem(
    prob: &ProblemInstance,
    atoms: &[Atom],
    y: &DVector<f64>,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let a = prob.dictionary(atoms)?;
    Ok(nonneg_lasso(&a, y, lambda, cfg.coeff_tol)?.iter().copied().collect())
}

/// Smooth parametrization of one term during sliding.
#[derive(Debug, Clone)]
enum Slot {
    /// Signed spike on the torus (scalar or axis spike): params `[c, dx]`.
    Spike { base: Atom, c: f64, x: TorusPoint },
    /// Canonical spike: params `[c]`.
    Canonical { base: Atom, c: f64 },
    /// Vector spike with weight `b = c a`: params `[b_1 .. b_d, dx]`.
    Vector { b: Vec<f64>, x: TorusPoint },
}

impl Slot {
    fn from_term(t: &Term) -> Slot {
        match &t.atom {
            Atom::TorusSpike { x, .. } | Atom::AxisSpike { x, .. } => Slot::Spike { base: t.atom.clone(), c: t.c, x: *x },
            Atom::CanonicalSpike { .. } => Slot::Canonical { base: t.atom.clone(), c: t.c },
            Atom::VectorSpike { a, x } => Slot::Vector { b: a.iter().map(|v| v * t.c).collect(), x: *x },
        }
    }

    fn width(&self) -> usize {
        match self {
            Slot::Spike { .. } => 2,
            Slot::Canonical { .. } => 1,
            Slot::Vector { b, .. } => b.len() + 1,
        }
    }

    fn to_term(&self) -> Option<Term> {
        match self {
            Slot::Spike { base, c, x } => {
                let atom = match base {
                    Atom::TorusSpike { sign, .. } => Atom::TorusSpike { sign: *sign, x: *x },
                    Atom::AxisSpike { k, sign, .. } => Atom::AxisSpike { k: *k, sign: *sign, x: *x },
                    _ => unreachable!(),
                };
                (*c > 0.0).then_some(Term { c: *c, atom })
            }
            Slot::Canonical { base, c } => (*c > 0.0).then(|| Term { c: *c, atom: base.clone() }),
            Slot::Vector { b, x } => {
                let c = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                (c > 0.0).then(|| Term { c, atom: Atom::VectorSpike { a: b.iter().map(|v| v / c).collect(), x: *x } })
            }
        }
    }

    /// Applies a parameter step; coefficients are projected onto `c >= 0`.
    fn stepped(&self, delta: &[f64]) -> Slot {
        match self {
            Slot::Spike { base, c, x } => {
                Slot::Spike { base: base.clone(), c: (c + delta[0]).max(0.0), x: x.shifted(delta[1]) }
            }
            Slot::Canonical { base, c } => Slot::Canonical { base: base.clone(), c: (c + delta[0]).max(0.0) },
            Slot::Vector { b, x } => {
                let d = b.len();
                Slot::Vector { b: b.iter().zip(delta).map(|(u, v)| u + v).collect(), x: x.shifted(delta[d]) }
            }
        }
    }

    fn regularizer(&self) -> f64 {
        match self {
            Slot::Spike { c, .. } | Slot::Canonical { c, .. } => *c,
            Slot::Vector { b, .. } => b.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// Residual, Jacobian and the second-order residual blocks of a slot configuration.
struct Linearization {
    /// Exact Hessian of `1/2 |r|^2 + lambda R` (possibly indefinite).
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
    objective: f64,
}

fn slot_forward(prob: &ProblemInstance, slot: &Slot, out: &mut DVector<f64>) {
    let n = prob.n();
    let d = prob.d();
    match slot {
        Slot::Spike { base, c, x } => {
            let phi = prob.bank().eval_all_vec(*x, Order::Value);
            let mut col = vec![0.0; n];
            prob.forward_from_values(&with_position(base, *x), &phi, &mut col);
            for i in 0..n {
                out[i] += c * col[i];
            }
        }
        Slot::Canonical { base, c } => {
            if let Atom::CanonicalSpike { k, sign } = base {
                out[k - 1] += c * sign.value();
            }
        }
        Slot::Vector { b, x } => {
            let phi = prob.bank().eval_all_vec(*x, Order::Value);
            for i in 0..n {
                out[i] += (0..d).map(|k| phi[i * d + k] * b[k]).sum::<f64>();
            }
        }
    }
}

fn with_position(base: &Atom, x: TorusPoint) -> Atom {
    match base {
        Atom::TorusSpike { sign, .. } => Atom::TorusSpike { sign: *sign, x },
        Atom::AxisSpike { k, sign, .. } => Atom::AxisSpike { k: *k, sign: *sign, x },
        other => other.clone(),
    }
}

fn slide_objective(prob: &ProblemInstance, slots: &[Slot], y: &DVector<f64>, lambda: f64) -> f64 {
    let mut r = -y.clone();
    for s in slots {
        slot_forward(prob, s, &mut r);
    }
    0.5 * r.norm_squared() + lambda * slots.iter().map(Slot::regularizer).sum::<f64>()
}

fn linearize(prob: &ProblemInstance, slots: &[Slot], y: &DVector<f64>, lambda: f64) -> Linearization {
    let n = prob.n();
    let d = prob.d();
    let width: usize = slots.iter().map(Slot::width).sum();
    let mut residual = -y.clone();
    for s in slots {
        slot_forward(prob, s, &mut residual);
    }
    let mut jacobian = DMatrix::zeros(n, width);
    let mut hessian = DMatrix::zeros(width, width);
    let mut reg_grad = DVector::zeros(width);
    let mut col = 0;
    for s in slots {
        match s {
            Slot::Spike { base, c, x } => {
                let atom = with_position(base, *x);
                let v0 = prob.forward_derivative(&atom, Order::Value);
                let v1 = prob.forward_derivative(&atom, Order::First);
                let v2 = prob.forward_derivative(&atom, Order::Second);
                jacobian.column_mut(col).copy_from(&v0);
                jacobian.column_mut(col + 1).copy_from(&(&v1 * *c));
                // second derivatives of the residual: d2/dc dx = v1, d2/dx2 = c v2
                let rc = residual.dot(&v1);
                hessian[(col, col + 1)] += rc;
                hessian[(col + 1, col)] += rc;
                hessian[(col + 1, col + 1)] += c * residual.dot(&v2);
                reg_grad[col] = lambda;
            }
            Slot::Canonical { base, .. } => {
                if let Atom::CanonicalSpike { k, sign } = base {
                    jacobian[(k - 1, col)] = sign.value();
                }
                reg_grad[col] = lambda;
            }
            Slot::Vector { b, x } => {
                let phi0 = prob.bank().eval_all_vec(*x, Order::Value);
                let phi1 = prob.bank().eval_all_vec(*x, Order::First);
                let phi2 = prob.bank().eval_all_vec(*x, Order::Second);
                let xcol = col + d;
                for i in 0..n {
                    for k in 0..d {
                        jacobian[(i, col + k)] = phi0[i * d + k];
                    }
                    jacobian[(i, xcol)] = (0..d).map(|k| phi1[i * d + k] * b[k]).sum::<f64>();
                }
                for k in 0..d {
                    let rk: f64 = (0..n).map(|i| residual[i] * phi1[i * d + k]).sum();
                    hessian[(col + k, xcol)] += rk;
                    hessian[(xcol, col + k)] += rk;
                }
                hessian[(xcol, xcol)] +=
                    (0..n).map(|i| residual[i] * (0..d).map(|k| phi2[i * d + k] * b[k]).sum::<f64>()).sum::<f64>();
                let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for k in 0..d {
                        reg_grad[col + k] = lambda * b[k] / norm;
                        for l in 0..d {
                            let proj = if k == l { 1.0 } else { 0.0 } - b[k] * b[l] / (norm * norm);
                            hessian[(col + k, col + l)] += lambda * proj / norm;
                        }
                    }
                }
            }
        }
        col += s.width();
    }
    hessian += jacobian.transpose() * &jacobian;
    let gradient = jacobian.transpose() * &residual + reg_grad;
    let objective = 0.5 * residual.norm_squared() + lambda * slots.iter().map(Slot::regularizer).sum::<f64>();
    Linearization { hessian, gradient, objective }
}

/// Damped Newton descent on all smooth parameters; never increases the objective.
fn slide_slots(prob: &ProblemInstance, mut slots: Vec<Slot>, y: &DVector<f64>, lambda: f64, iters: usize) -> Vec<Slot> {
    if slots.is_empty() {
        return slots;
    }
    let mut mu = 1e-4;
    for _ in 0..iters {
        let lin = linearize(prob, &slots, y, lambda);
        let width = lin.gradient.len();
        let diag_max = (0..width).map(|i| lin.hessian[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut accepted = false;
        for _ in 0..40 {
            let mut h = lin.hessian.clone();
            for i in 0..width {
                h[(i, i)] += mu * (lin.hessian[(i, i)].abs() + 1e-9 * diag_max);
            }
            let step = match h.cholesky() {
                Some(ch) => ch.solve(&(-&lin.gradient)),
                None => {
                    mu *= 10.0;
                    continue;
                }
            };
            let mut trial = Vec::with_capacity(slots.len());
            let mut col = 0;
            for s in &slots {
                trial.push(s.stepped(&step.as_slice()[col..col + s.width()]));
                col += s.width();
            }
            let f = slide_objective(prob, &trial, y, lambda);
            if f < lin.objective {
                slots = trial;
                mu = (mu / 4.0).max(1e-12);
                accepted = true;
                break;
            }
            mu *= 8.0;
        }
        if !accepted {
            break;
        }
    }
    slots
}

/// Joint local descent on positions, directions and coefficients; tags never change.
pub fn slide(prob: &ProblemInstance, u: &SparseSignal, y: &DVector<f64>, lambda: f64, cfg: &SolverConfig) -> Result<SparseSignal> {
    for a in u.atoms() {
        prob.check_atom(a)?;
    }
    let slots = u.terms().iter().map(Slot::from_term).collect();
    let slots = slide_slots(prob, slots, y, lambda, cfg.slide_iters);
    let terms = merge_terms(slots.iter().filter_map(Slot::to_term).filter(|t| t.c > cfg.prune_tol).collect());
    SparseSignal::new(terms)
}

/// Merges terms with equal tags and parameters within [`MERGE_TOL`].
fn merge_terms(terms: Vec<Term>) -> Vec<Term> {
    let mut out: Vec<Term> = Vec::with_capacity(terms.len());
    for t in terms {
        if let Some(m) = out.iter_mut().find(|m| m.atom.same_tag(&t.atom) && m.atom.position_distance(&t.atom) < MERGE_TOL) {
            *m = merged(m, &t);
        } else {
            out.push(t);
        }
    }
    out
}

fn merged(a: &Term, b: &Term) -> Term {
    let w = b.c / (a.c + b.c);
    let x = match (a.atom.position(), b.atom.position()) {
        (Some(xa), Some(xb)) => Some(xa.lerp(xb, w)),
        _ => None,
    };
    match (&a.atom, &b.atom) {
        (Atom::VectorSpike { a: da, .. }, Atom::VectorSpike { a: db, .. }) => {
            let v: Vec<f64> = da.iter().zip(db).map(|(p, q)| a.c * p + b.c * q).collect();
            let c = v.iter().map(|t| t * t).sum::<f64>().sqrt();
            Term { c, atom: Atom::VectorSpike { a: v.iter().map(|t| t / c).collect(), x: x.unwrap() } }
        }
        _ => Term { c: a.c + b.c, atom: x.map_or_else(|| a.atom.clone(), |x| with_position(&a.atom, x)) },
    }
}

fn refit(prob: &ProblemInstance, terms: &[Term], y: &DVector<f64>, lambda: f64, cfg: &SolverConfig) -> Result<Vec<Term>> {
    let atoms: Vec<Atom> = terms.iter().map(|t| t.atom.clone()).collect();
    let c = coefficient_subproblem(prob, &atoms, y, lambda, cfg)?;
    Ok(atoms.into_iter().zip(c).filter(|(_, c)| *c > cfg.prune_tol).map(|(atom, c)| Term { c, atom }).collect())
}

fn objective_of(prob: &ProblemInstance, terms: &[Term], y: &DVector<f64>, lambda: f64) -> f64 {
    let slots: Vec<Slot> = terms.iter().map(Slot::from_term).collect();
    slide_objective(prob, &slots, y, lambda)
}

/// Solves the regularized problem from the empty signal.
pub fn solve(prob: &ProblemInstance, y: &DVector<f64>, lambda: f64, cfg: &SolverConfig) -> Result<SolveResult> {
    solve_from(prob, y, lambda, cfg, &SparseSignal::empty())
}

/// Solves the regularized problem starting from `init`.
pub fn solve_from(
    prob: &ProblemInstance,
    y: &DVector<f64>,
    lambda: f64,
    cfg: &SolverConfig,
    init: &SparseSignal,
) -> Result<SolveResult> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    if y.len() != prob.n() {
        return Err(Error::InvalidInput(format!("data has length {}, expected {}", y.len(), prob.n())));
    }
    cfg.validate()?;
    for a in init.atoms() {
        prob.check_atom(a)?;
    }
    let grid = ScanGrid::new(prob, cfg.lmo_grid);
    let mut terms: Vec<Term> = init.terms().to_vec();
    if !terms.is_empty() {
        terms = refit(prob, &terms, y, lambda, cfg)?;
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sup = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..cfg.max_outer_iters {
        iterations = iter + 1;
        let u = SparseSignal::new(terms.clone())?;
        let objective = objective_of(prob, &terms, y, lambda);
        trace.push(objective);
        let cert = residual_certificate(prob, &u, y, lambda)?;
        let best = lmo_on_grid(&cert, &grid, cfg.polish_iters);
        sup = best.value;
        debug!("iter {iter}: objective {objective:.12e}, {} atoms, lmo {:.12}", terms.len(), best.value);
        if best.value <= 1.0 + cfg.gap_tol {
            converged = true;
            break;
        }

        let mut candidate = terms.clone();
        if !candidate.iter().any(|t| t.atom.coincides_with(&best.atom, MERGE_TOL)) {
            candidate.push(Term { c: 0.0, atom: best.atom.clone() });
        }
        candidate = refit(prob, &candidate, y, lambda, cfg)?;
        let slots = slide_slots(prob, candidate.iter().map(Slot::from_term).collect(), y, lambda, cfg.slide_iters);
        candidate = merge_terms(slots.iter().filter_map(Slot::to_term).filter(|t| t.c > cfg.prune_tol).collect());
        candidate = refit(prob, &candidate, y, lambda, cfg)?;
        candidate = merge_terms(candidate);

        let next = objective_of(prob, &candidate, y, lambda);
        if next <= objective {
            terms = candidate;
        } else if next > objective + 1e-12 * objective.abs().max(1e-300) {
            debug!("iter {iter}: rejected non-monotone update ({next:.3e} > {objective:.3e})");
            break;
        } else {
            terms = candidate;
        }
    }

    let u = SparseSignal::new(terms)?;
    let objective = prob.objective(&u, y, lambda)?;
    if converged {
        trace.push(objective);
    } else {
        let cert = residual_certificate(prob, &u, y, lambda)?;
        sup = lmo_on_grid(&cert, &grid, cfg.polish_iters).value;
        converged = sup <= 1.0 + cfg.gap_tol;
        trace.push(objective);
    }
    Ok(SolveResult { u, objective, certificate_sup: sup, iterations, converged, objective_trace: trace })
}
