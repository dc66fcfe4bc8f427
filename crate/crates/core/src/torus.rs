//! The one-dimensional torus `R / Z`.

use serde::{Deserialize, Serialize};

/// A point of the torus, stored as its canonical representative in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct TorusPoint(f64);

impl TorusPoint {
    /// Reduces any finite real modulo 1.
    pub fn new(x: f64) -> Self {
        let r = x.rem_euclid(1.0);
        // rem_euclid rounds tiny negative inputs up to exactly 1.0
        if r >= 1.0 {
            TorusPoint(0.0)
        } else {
            TorusPoint(r)
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// Signed displacement along the shorter arc from `self` to `other`, in `[-0.5, 0.5]`.
    pub fn offset_to(self, other: TorusPoint) -> f64 {
        let d = other.0 - self.0;
        d - d.round()
    }

    /// Moves by `delta` along the torus.
    pub fn shifted(self, delta: f64) -> Self {
        TorusPoint::new(self.0 + delta)
    }

    /// Point at fraction `t` of the shorter arc from `self` to `other`.
    pub fn lerp(self, other: TorusPoint, t: f64) -> Self {
        self.shifted(t * self.offset_to(other))
    }
}

impl From<f64> for TorusPoint {
    fn from(x: f64) -> Self {
        TorusPoint::new(x)
    }
}

impl From<TorusPoint> for f64 {
    fn from(p: TorusPoint) -> f64 {
        p.0
    }
}

/// Geodesic distance on the torus, in `[0, 0.5]`.
pub fn torus_dist(a: TorusPoint, b: TorusPoint) -> f64 {
    let d = (a.0 - b.0).abs();
    d.min(1.0 - d)
}

/// `n` equispaced points `j / n`.
pub fn uniform_grid(n: usize) -> Vec<TorusPoint> {
    (0..n).map(|j| TorusPoint(j as f64 / n as f64)).collect()
}
