//! Extreme points of the regularizer balls, sparse signals built from them, and the forward
//! operator `K` restricted to such signals.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelBank, Order};
use crate::torus::{torus_dist, TorusPoint};

/// Positions closer than this (with equal discrete tags) denote the same atom.
pub const ATOM_EQ_TOL: f64 = 1e-9;

/// Problem family, i.e. which regularizer and which extreme points are in play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Total variation of a real measure.
    ScalarBlasso,
    /// Total variation of a real measure plus the l1 norm of a spike vector in `R^N`.
    Demixing,
    /// Total variation of an `R^d`-valued measure with the Euclidean norm on values.
    GroupL2,
    /// Total variation of an `R^d`-valued measure with the l1 norm on values.
    GroupL1,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::ScalarBlasso => "scalar-blasso",
            Family::Demixing => "demixing",
            Family::GroupL2 => "group-l2",
            Family::GroupL1 => "group-l1",
        })
    }
}

impl Family {
    pub fn admits(self, atom: &Atom) -> bool {
        matches!(
            (self, atom),
            (Family::ScalarBlasso, Atom::TorusSpike { .. })
                | (Family::Demixing, Atom::TorusSpike { .. })
                | (Family::Demixing, Atom::CanonicalSpike { .. })
                | (Family::GroupL2, Atom::VectorSpike { .. })
                | (Family::GroupL1, Atom::AxisSpike { .. })
        )
    }
}

/// A sign in `{-1, +1}`, serialized as that integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn of(v: f64) -> Sign {
        if v < 0.0 {
            Sign::Minus
        } else {
            Sign::Plus
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

impl TryFrom<i8> for Sign {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            _ => Err(format!("sign must be 1 or -1, got {v}")),
        }
    }
}

impl From<Sign> for i8 {
    fn from(s: Sign) -> i8 {
        match s {
            Sign::Plus => 1,
            Sign::Minus => -1,
        }
    }
}

/// One extreme point. Indices `k` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Atom {
    /// `(sign * delta_x, 0)`.
    TorusSpike { sign: Sign, x: TorusPoint },
    /// `(0, sign * e_k)` with `e_k` in `R^N`.
    CanonicalSpike { k: usize, sign: Sign },
    /// `a * delta_x` with `|a|_2 = 1`.
    VectorSpike { a: Vec<f64>, x: TorusPoint },
    /// `sign * e_k * delta_x` with `e_k` in `R^d`.
    AxisSpike { k: usize, sign: Sign, x: TorusPoint },
}

impl Atom {
    pub fn variant_name(&self) -> &'static str {
        match self {
            Atom::TorusSpike { .. } => "torus-spike",
            Atom::CanonicalSpike { .. } => "canonical-spike",
            Atom::VectorSpike { .. } => "vector-spike",
            Atom::AxisSpike { .. } => "axis-spike",
        }
    }

    /// Builds a vector spike, normalizing `a`.
    pub fn vector_spike(a: &[f64], x: TorusPoint) -> Result<Atom> {
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidInput("vector spike direction must be nonzero".into()));
        }
        Ok(Atom::VectorSpike { a: a.iter().map(|v| v / norm).collect(), x })
    }

    pub fn position(&self) -> Option<TorusPoint> {
        match self {
            Atom::TorusSpike { x, .. } | Atom::VectorSpike { x, .. } | Atom::AxisSpike { x, .. } => Some(*x),
            Atom::CanonicalSpike { .. } => None,
        }
    }

    pub fn direction(&self) -> Option<&[f64]> {
        match self {
            Atom::VectorSpike { a, .. } => Some(a),
            _ => None,
        }
    }

    /// Same variant and same discrete tags (signs, indices).
    pub fn same_tag(&self, other: &Atom) -> bool {
        match (self, other) {
            (Atom::TorusSpike { sign: s1, .. }, Atom::TorusSpike { sign: s2, .. }) => s1 == s2,
            (Atom::CanonicalSpike { k: k1, sign: s1 }, Atom::CanonicalSpike { k: k2, sign: s2 }) => {
                k1 == k2 && s1 == s2
            }
            (Atom::VectorSpike { .. }, Atom::VectorSpike { .. }) => true,
            (Atom::AxisSpike { k: k1, sign: s1, .. }, Atom::AxisSpike { k: k2, sign: s2, .. }) => {
                k1 == k2 && s1 == s2
            }
            _ => false,
        }
    }

    /// Torus distance of positions (0 for canonical spikes).
    pub fn position_distance(&self, other: &Atom) -> f64 {
        match (self.position(), other.position()) {
            (Some(a), Some(b)) => torus_dist(a, b),
            _ => 0.0,
        }
    }

    /// Euclidean distance of directions (0 unless both are vector spikes).
    pub fn direction_distance(&self, other: &Atom) -> f64 {
        match (self.direction(), other.direction()) {
            (Some(a), Some(b)) => a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt(),
            _ => 0.0,
        }
    }

    /// Whether the two atoms are the same extreme point for the distinctness invariant.
    ///
    /// Vector spikes are compared by position only, since two of them at one location
    /// collapse into a single spike.
    pub fn coincides_with(&self, other: &Atom, tol: f64) -> bool {
        self.same_tag(other) && self.position_distance(other) <= tol
    }
}

/// One weighted term `c * atom` with `c > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub c: f64,
    #[serde(flatten)]
    pub atom: Atom,
}

/// A finite positive combination of pairwise distinct atoms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Term>", into = "Vec<Term>")]
pub struct SparseSignal {
    terms: Vec<Term>,
}

impl SparseSignal {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        for (i, t) in terms.iter().enumerate() {
            if !(t.c > 0.0) || !t.c.is_finite() {
                return Err(Error::InvalidInput(format!("term {i} has non-positive coefficient {}", t.c)));
            }
            if let Atom::VectorSpike { a, .. } = &t.atom {
                let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!("term {i} direction has norm {norm}")));
                }
            }
            for (j, u) in terms[..i].iter().enumerate() {
                if t.atom.coincides_with(&u.atom, ATOM_EQ_TOL) {
                    return Err(Error::InvalidInput(format!("terms {j} and {i} are the same atom")));
                }
            }
        }
        Ok(SparseSignal { terms })
    }

    pub fn empty() -> Self {
        SparseSignal::default()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn atoms(&self) -> impl Iterator<Item = &Atom> {
        self.terms.iter().map(|t| &t.atom)
    }

    /// `c * self` for `c >= 0`; zero gives the empty signal.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if c == 0.0 {
            return Ok(SparseSignal::empty());
        }
        SparseSignal::new(self.terms.iter().map(|t| Term { c: t.c * c, atom: t.atom.clone() }).collect())
    }
}

impl TryFrom<Vec<Term>> for SparseSignal {
    type Error = Error;

    fn try_from(terms: Vec<Term>) -> Result<Self> {
        SparseSignal::new(terms)
    }
}

impl From<SparseSignal> for Vec<Term> {
    fn from(s: SparseSignal) -> Vec<Term> {
        s.terms
    }
}

/// Outcome of the linear-independence test on the columns `K u_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Independence {
    Independent,
    Dependent { rank: usize },
}

/// A problem family together with its kernel bank; defines `K`, `K*` and `R`.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    family: Family,
    bank: Arc<KernelBank>,
}

impl ProblemInstance {
    pub fn new(family: Family, bank: KernelBank) -> Result<Self> {
        Self::from_shared(family, Arc::new(bank))
    }

    pub fn from_shared(family: Family, bank: Arc<KernelBank>) -> Result<Self> {
        if matches!(family, Family::ScalarBlasso | Family::Demixing) && bank.d() != 1 {
            return Err(Error::InvalidInput(format!("{family} needs scalar kernels, got d = {}", bank.d())));
        }
        Ok(ProblemInstance { family, bank })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    /// Measurement dimension.
    pub fn n(&self) -> usize {
        self.bank.n()
    }

    /// Kernel codomain dimension.
    pub fn d(&self) -> usize {
        self.bank.d()
    }

    /// Checks the atom belongs to this family and has valid indices.
    pub fn check_atom(&self, atom: &Atom) -> Result<()> {
        if !self.family.admits(atom) {
            return Err(Error::FamilyMismatch { family: self.family, variant: atom.variant_name() });
        }
        match atom {
            Atom::CanonicalSpike { k, .. } if *k == 0 || *k > self.n() => {
                Err(Error::InvalidInput(format!("canonical index {k} outside 1..={}", self.n())))
            }
            Atom::AxisSpike { k, .. } if *k == 0 || *k > self.d() => {
                Err(Error::InvalidInput(format!("axis index {k} outside 1..={}", self.d())))
            }
            Atom::VectorSpike { a, .. } if a.len() != self.d() => Err(Error::InvalidInput(format!(
                "direction has {} components, kernels have {}",
                a.len(),
                self.d()
            ))),
            _ => Ok(()),
        }
    }

    /// Writes `K atom` into `out`, given the kernel values at the atom position (if any).
    pub(crate) fn forward_from_values(&self, atom: &Atom, phi: &[f64], out: &mut [f64]) {
        let d = self.d();
        match atom {
            Atom::TorusSpike { sign, .. } => {
                let s = sign.value();
                out.iter_mut().zip(phi).for_each(|(o, v)| *o = s * v);
            }
            Atom::CanonicalSpike { k, sign } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                out[k - 1] = sign.value();
            }
            Atom::VectorSpike { a, .. } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = phi[i * d..(i + 1) * d].iter().zip(a).map(|(p, q)| p * q).sum();
                }
            }
            Atom::AxisSpike { k, sign, .. } => {
                let s = sign.value();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = s * phi[i * d + k - 1];
                }
            }
        }
    }

    /// Derivative of `K atom` with respect to the atom position, of the given order.
    pub(crate) fn forward_derivative(&self, atom: &Atom, order: Order) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        if let Some(x) = atom.position() {
            let phi = self.bank.eval_all_vec(x, order);
            self.forward_from_values(atom, &phi, out.as_mut_slice());
        } else if order == Order::Value {
            self.forward_from_values(atom, &[], out.as_mut_slice());
        }
        out
    }

    /// `K atom`.
    pub fn forward_atom(&self, atom: &Atom) -> Result<DVector<f64>> {
        self.check_atom(atom)?;
        Ok(self.forward_derivative(atom, Order::Value))
    }

    /// `K u = sum_i c_i K u_i`.
    pub fn forward_signal(&self, u: &SparseSignal) -> Result<DVector<f64>> {
        let mut y = DVector::zeros(self.n());
        for t in u.terms() {
            y.axpy(t.c, &self.forward_atom(&t.atom)?, 1.0);
        }
        Ok(y)
    }

    /// `N x n` matrix with columns `K atom_i`.
    pub fn dictionary<'a>(&self, atoms: impl IntoIterator<Item = &'a Atom>) -> Result<DMatrix<f64>> {
        let cols = atoms.into_iter().map(|a| self.forward_atom(a)).collect::<Result<Vec<_>>>()?;
        if cols.is_empty() {
            return Ok(DMatrix::zeros(self.n(), 0));
        }
        Ok(DMatrix::from_columns(&cols))
    }

    /// `R(u)`; every atom has unit regularizer, so this is the coefficient sum.
    pub fn regularizer_value(&self, u: &SparseSignal) -> f64 {
        u.terms().iter().map(|t| t.c).sum()
    }

    /// `1/2 |K u - y|^2 + lambda R(u)`.
    pub fn objective(&self, u: &SparseSignal, y: &DVector<f64>, lambda: f64) -> Result<f64> {
        let r = self.forward_signal(u)? - y;
        Ok(0.5 * r.norm_squared() + lambda * self.regularizer_value(u))
    }

    /// Tests linear independence of the columns `K u_i` via the singular value spread.
    pub fn gram_independence_check(&self, u: &SparseSignal) -> Result<Independence> {
        if u.len() > self.n() {
            return Err(Error::TooManyAtoms { atoms: u.len(), measurements: self.n() });
        }
        if u.is_empty() {
            return Ok(Independence::Independent);
        }
        let a = self.dictionary(u.atoms())?;
        let sv = a.singular_values();
        let largest = sv.max();
        let rank = sv.iter().filter(|&&s| s > 1e-10 * largest).count();
        Ok(if rank == u.len() && largest > 0.0 {
            Independence::Independent
        } else {
            Independence::Dependent { rank }
        })
    }
}
