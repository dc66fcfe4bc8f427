//! Searching the extreme points for large values of the pairing `u -> <K* p, u>`.
//!
//! Extreme points with a torus position are explored one "channel" at a time: a signed
//! component of `eta = K* p` for the scalar and l1 families, or the Euclidean norm of `eta`
//! for the l2 group family. A uniform grid locates candidates and a safeguarded Newton
//! iteration on the channel derivative refines each one inside its grid cell.

use nalgebra::DVector;

use crate::atoms::{Atom, Family, ProblemInstance, Sign};
use crate::kernel::Order;
use crate::torus::{uniform_grid, TorusPoint};

/// A smooth function of the position whose maximizers are the best atoms at that position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// `sign * eta_k`, `k` 0-based.
    Signed { k: usize, sign: Sign },
    /// `|eta|_2`.
    Norm,
}

/// Kernel values on a uniform grid, reused across many dual vectors.
#[derive(Debug, Clone)]
pub struct ScanGrid {
    points: Vec<TorusPoint>,
    /// `values[j * n * d + i * d + k] = phi_{i,k}(x_j)`.
    values: Vec<f64>,
    n: usize,
    d: usize,
}

impl ScanGrid {
    pub fn new(prob: &ProblemInstance, size: usize) -> Self {
        let (n, d) = (prob.n(), prob.d());
        let points = uniform_grid(size);
        let mut values = vec![0.0; size * n * d];
        for (j, &x) in points.iter().enumerate() {
            prob.bank().eval_all(x, Order::Value, &mut values[j * n * d..(j + 1) * n * d]);
        }
        ScanGrid { points, values, n, d }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, j: usize) -> TorusPoint {
        self.points[j]
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.points.len() as f64
    }

    /// Kernel values at grid point `j`, laid out as in [`crate::kernel::KernelBank::eval_all`].
    pub fn phi(&self, j: usize) -> &[f64] {
        let nd = self.n * self.d;
        &self.values[j * nd..(j + 1) * nd]
    }

    /// `eta(x_j)` for every grid point, `d` values per point.
    pub fn eta(&self, p: &DVector<f64>) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let mut out = vec![0.0; self.len() * d];
        for j in 0..self.len() {
            let phi = self.phi(j);
            let eta = &mut out[j * d..(j + 1) * d];
            for i in 0..n {
                let pi = p[i];
                for k in 0..d {
                    eta[k] += pi * phi[i * d + k];
                }
            }
        }
        out
    }
}

/// The channels explored for a family.
pub fn channels(family: Family, d: usize) -> Vec<Channel> {
    match family {
        Family::GroupL2 => vec![Channel::Norm],
        _ => (0..d)
            .flat_map(|k| [Sign::Plus, Sign::Minus].into_iter().map(move |sign| Channel::Signed { k, sign }))
            .collect(),
    }
}

/// Channel value from `eta(x)`.
pub fn channel_value(channel: Channel, eta: &[f64]) -> f64 {
    match channel {
        Channel::Signed { k, sign } => sign.value() * eta[k],
        Channel::Norm => eta.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// The extreme point at `x` that the channel value measures.
pub fn channel_atom(family: Family, channel: Channel, x: TorusPoint, eta: &[f64]) -> Atom {
    match channel {
        Channel::Signed { sign, .. } if family != Family::GroupL1 => Atom::TorusSpike { sign, x },
        Channel::Signed { k, sign } => Atom::AxisSpike { k: k + 1, sign, x },
        Channel::Norm => {
            let norm = channel_value(Channel::Norm, eta);
            let a = if norm > 0.0 {
                eta.iter().map(|v| v / norm).collect()
            } else {
                let mut e = vec![0.0; eta.len()];
                e[0] = 1.0;
                e
            };
            Atom::VectorSpike { a, x }
        }
    }
}

/// `eta^{(order)}(x) = sum_i p_i phi_i^{(order)}(x)`.
pub fn eta_at(prob: &ProblemInstance, p: &DVector<f64>, x: TorusPoint, order: Order) -> Vec<f64> {
    let (n, d) = (prob.n(), prob.d());
    let phi = prob.bank().eval_all_vec(x, order);
    let mut eta = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            eta[k] += p[i] * phi[i * d + k];
        }
    }
    eta
}

/// First and second derivative of the smooth surrogate of a channel at `x`.
///
/// For `Norm` the surrogate is `|eta|^2 / 2`, which has the same maximizers.
fn channel_slope(prob: &ProblemInstance, p: &DVector<f64>, channel: Channel, x: TorusPoint) -> (f64, f64) {
    let d1 = eta_at(prob, p, x, Order::First);
    let d2 = eta_at(prob, p, x, Order::Second);
    match channel {
        Channel::Signed { k, sign } => (sign.value() * d1[k], sign.value() * d2[k]),
        Channel::Norm => {
            let d0 = eta_at(prob, p, x, Order::Value);
            let g = d0.iter().zip(&d1).map(|(a, b)| a * b).sum();
            let h = d1.iter().map(|v| v * v).sum::<f64>() + d0.iter().zip(&d2).map(|(a, b)| a * b).sum::<f64>();
            (g, h)
        }
    }
}

/// A located maximizer of the pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub atom: Atom,
    pub value: f64,
    /// Grid index of the seed, `usize::MAX` for canonical spikes.
    pub seed: usize,
}

/// Refines a grid maximizer of `channel` within `[x0 - half_width, x0 + half_width]`.
///
/// Newton steps on the channel slope, falling back to bisection whenever a step leaves the
/// bracket. Without a sign change of the slope over the cell the seed is returned.
pub fn polish(
    prob: &ProblemInstance,
    p: &DVector<f64>,
    channel: Channel,
    x0: TorusPoint,
    half_width: f64,
    iters: usize,
) -> (TorusPoint, f64) {
    let seed_value = channel_value(channel, &eta_at(prob, p, x0, Order::Value));
    let slope = |t: f64| channel_slope(prob, p, channel, x0.shifted(t));
    let (g_lo, _) = slope(-half_width);
    let (g_hi, _) = slope(half_width);
    if !(g_lo > 0.0 && g_hi < 0.0) {
        return (x0, seed_value);
    }
    let (mut lo, mut hi) = (-half_width, half_width);
    let mut t = 0.0;
    for _ in 0..iters {
        let (g, h) = slope(t);
        if g == 0.0 {
            break;
        }
        if g > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let newton = if h < 0.0 { t - g / h } else { f64::NAN };
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let done = (next - t).abs() <= 1e-15;
        t = next;
        if done || hi - lo <= 1e-16 {
            break;
        }
    }
    let x = x0.shifted(t);
    let value = channel_value(channel, &eta_at(prob, p, x, Order::Value));
    if value >= seed_value {
        (x, value)
    } else {
        (x0, seed_value)
    }
}

/// Which grid maxima get polished.
#[derive(Debug, Clone, Copy)]
pub enum Selection {
    /// Every local maximum with a grid value at least this.
    AtLeast(f64),
    /// Local maxima within this fraction of the best grid value (always including the best).
    NearBest(f64),
}

/// Locates and polishes local maxima of every channel on `grid`.
///
/// Candidates are returned in (channel, grid index) order; canonical spikes of the demixing
/// family are appended afterwards, one per coordinate.
pub fn local_maxima(
    prob: &ProblemInstance,
    p: &DVector<f64>,
    grid: &ScanGrid,
    selection: Selection,
    polish_iters: usize,
) -> Vec<Candidate> {
    let family = prob.family();
    let d = prob.d();
    let m = grid.len();
    let eta = grid.eta(p);
    let chans = channels(family, d);

    let mut per_channel: Vec<Vec<f64>> = Vec::with_capacity(chans.len());
    let mut best = f64::NEG_INFINITY;
    for &ch in &chans {
        let vals: Vec<f64> = (0..m).map(|j| channel_value(ch, &eta[j * d..(j + 1) * d])).collect();
        best = vals.iter().copied().fold(best, f64::max);
        per_channel.push(vals);
    }
    let threshold = match selection {
        Selection::AtLeast(t) => t,
        Selection::NearBest(w) => best - w * best.abs(),
    };

    let mut out = Vec::new();
    let mut best_seen = false;
    for (ch, vals) in chans.iter().zip(&per_channel) {
        for j in 0..m {
            let v = vals[j];
            let prev = vals[(j + m - 1) % m];
            let next = vals[(j + 1) % m];
            let is_peak = v > prev && v >= next;
            let is_first_best = !best_seen && v == best;
            if !(is_peak || is_first_best) || v < threshold {
                continue;
            }
            best_seen |= is_first_best;
            let (x, value) = polish(prob, p, *ch, grid.point(j), grid.spacing(), polish_iters);
            let eta_x = eta_at(prob, p, x, Order::Value);
            out.push(Candidate { atom: channel_atom(family, *ch, x, &eta_x), value, seed: j });
        }
    }

    if family == Family::Demixing {
        for k in 0..prob.n() {
            let value = p[k].abs();
            if value >= threshold {
                out.push(Candidate {
                    atom: Atom::CanonicalSpike { k: k + 1, sign: Sign::of(p[k]) },
                    value,
                    seed: usize::MAX,
                });
            }
        }
    }
    out
}

/// Relative gap below which two candidate values count as tied.
const TIE_TOL: f64 = 1e-12;

/// The largest candidate; earlier candidates win ties.
pub fn best_candidate(candidates: Vec<Candidate>) -> Option<Candidate> {
    candidates.into_iter().fold(None, |acc, c| match acc {
        Some(b) if c.value <= b.value + TIE_TOL * b.value.abs().max(1.0) => Some(b),
        _ => Some(c),
    })
}
