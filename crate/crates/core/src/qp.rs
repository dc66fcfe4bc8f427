//! Minimum-norm points of polyhedra: `min 1/2 |x|^2` subject to `E x = f` and `G x <= h`.
//!
//! Dual active-set method of Goldfarb and Idnani specialized to the identity Hessian. The
//! inequality rows are not enumerated up front; a caller-supplied separation oracle returns
//! the most violated one for the current iterate, so constraint families that are large or
//! generated on the fly (tangent cuts of a norm ball) are handled the same way.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A linear inequality `row . x <= rhs`.
#[derive(Debug, Clone)]
pub struct Cut {
    pub row: DVector<f64>,
    pub rhs: f64,
}

impl Cut {
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        self.row.dot(x) - self.rhs
    }
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    /// Violations at or below this are treated as satisfied.
    pub feas_tol: f64,
    pub max_iters: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions { feas_tol: 1e-11, max_iters: 5000 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Active inequality cuts with their (nonnegative) multipliers.
    pub active: Vec<(Cut, f64)>,
    pub iterations: usize,
}

/// One active constraint written as `normal . x >= bound`.
struct Active {
    normal: DVector<f64>,
    bound: f64,
    mult: f64,
    equality: bool,
}

/// Projection data of a normal onto the span of the active normals.
struct Split {
    /// Component orthogonal to all active normals.
    z: DVector<f64>,
    /// Coefficients of the in-span component.
    r: DVector<f64>,
}

fn split(active: &[Active], n: usize, v: &DVector<f64>) -> Split {
    if active.is_empty() {
        return Split { z: v.clone(), r: DVector::zeros(0) };
    }
    let a = DMatrix::from_columns(&active.iter().map(|c| c.normal.clone()).collect::<Vec<_>>());
    let q = active.len();
    // normal equations through an SVD keep near-dependent working sets stable
    let gram = a.transpose() * &a;
    let rhs = a.transpose() * v;
    let svd = gram.svd(true, true);
    let eps = 1e-14 * svd.singular_values.max().max(1e-300);
    let r = svd.solve(&rhs, eps).unwrap_or_else(|_| DVector::zeros(q));
    let z = v - &a * &r;
    debug_assert_eq!(z.len(), n);
    Split { z, r }
}

/// Solves the minimum-norm problem with equality rows `eq` and a separation oracle.
///
/// `separate(x)` returns the most violated inequality at `x`, if any is violated by more
/// than `feas_tol`. Fails with [`Error::Infeasible`] when the equalities are inconsistent or
/// when the dual becomes unbounded.
pub fn min_norm_point<F>(n: usize, eq: &[(DVector<f64>, f64)], mut separate: F, opts: &QpOptions) -> Result<QpSolution>
where
    F: FnMut(&DVector<f64>) -> Option<Cut>,
{
    let mut active: Vec<Active> = Vec::new();

    // Equalities: keep an independent subset, then take the minimum-norm interpolant.
    for (row, rhs) in eq {
        let s = split(&active, n, row);
        if s.z.norm() > 1e-10 * row.norm().max(1e-300) {
            active.push(Active { normal: row.clone(), bound: *rhs, mult: 0.0, equality: true });
        }
    }
    let mut x = DVector::zeros(n);
    if !active.is_empty() {
        let a = DMatrix::from_columns(&active.iter().map(|c| c.normal.clone()).collect::<Vec<_>>());
        let f = DVector::from_iterator(active.len(), active.iter().map(|c| c.bound));
        let gram = a.transpose() * &a;
        let mult = gram
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&f))
            .or_else(|| gram.svd(true, true).solve(&f, 1e-14).ok())
            .ok_or_else(|| Error::Infeasible("singular interpolation system".into()))?;
        x = &a * &mult;
        for (c, m) in active.iter_mut().zip(mult.iter()) {
            c.mult = *m;
        }
    }
    for (row, rhs) in eq {
        let gap = (row.dot(&x) - rhs).abs();
        if gap > 1e-8 * rhs.abs().max(1.0) {
            return Err(Error::Infeasible(format!("interpolation equalities are inconsistent (gap {gap:.3e})")));
        }
    }

    let mut iterations = 0;
    while let Some(cut) = separate(&x) {
        if cut.violation(&x) <= opts.feas_tol {
            break;
        }
        let normal = -&cut.row;
        let bound = -cut.rhs;
        let mut plus_mult = 0.0;
        loop {
            iterations += 1;
            if iterations > opts.max_iters {
                return Err(Error::NoConvergence { iterations, residual: cut.violation(&x) });
            }
            let s = split(&active, n, &normal);
            let slack = normal.dot(&x) - bound;

            // partial step: largest dual move keeping active inequality multipliers nonnegative
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (i, c) in active.iter().enumerate() {
                if !c.equality && s.r[i] > 0.0 {
                    let ratio = c.mult / s.r[i];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(i);
                    }
                }
            }
            let zz = s.z.dot(&normal);
            let t2 = if s.z.norm() > 1e-12 * normal.norm() && zz > 0.0 { -slack / zz } else { f64::INFINITY };

            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(Error::Infeasible("the sampled feasibility constraints admit no interpolant".into()));
            }
            for (i, c) in active.iter_mut().enumerate() {
                c.mult -= t * s.r[i];
            }
            plus_mult += t;
            if t2.is_finite() {
                x += &s.z * t;
            }
            if t2 <= t1 {
                active.push(Active { normal: normal.clone(), bound, mult: plus_mult, equality: false });
                break;
            }
            let k = drop.expect("finite partial step has a blocking constraint");
            active.remove(k);
        }
        // resynchronize the primal point with the multipliers
        x = active.iter().fold(DVector::zeros(n), |acc, c| acc + &c.normal * c.mult);
    }

    let active = active
        .into_iter()
        .filter(|c| !c.equality)
        .map(|c| (Cut { row: -c.normal, rhs: -c.bound }, c.mult))
        .collect();
    Ok(QpSolution { x, active, iterations })
}

/// Separation oracle over a finite list of inequalities.
pub fn finite_oracle(cuts: &[Cut]) -> impl FnMut(&DVector<f64>) -> Option<Cut> + '_ {
    move |x| {
        cuts.iter()
            .map(|c| (c.violation(x), c))
            .fold(None, |acc: Option<(f64, &Cut)>, (v, c)| match acc {
                Some((bv, _)) if bv >= v => acc,
                _ => Some((v, c)),
            })
            .filter(|(v, _)| *v > 0.0)
            .map(|(_, c)| c.clone())
    }
}
