//! Twice continuously differentiable kernel banks `phi_i : T -> R^d`.
//!
//! Every kernel exposes its value and its first two derivatives in closed form. The two
//! built-in kinds are integer-frequency Fourier features and periodized Gaussians; custom
//! kernels can be supplied through the [`Kernel`] trait.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::TorusPoint;

/// Derivative order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Order {
    Value = 0,
    First = 1,
    Second = 2,
}

impl Order {
    pub const ALL: [Order; 3] = [Order::Value, Order::First, Order::Second];

    pub fn from_index(order: u8) -> Option<Order> {
        match order {
            0 => Some(Order::Value),
            1 => Some(Order::First),
            2 => Some(Order::Second),
            _ => None,
        }
    }
}

/// One kernel `T -> R^d` with analytic derivatives up to order two.
pub trait Kernel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Writes the `order`-th derivative at the canonical coordinate `x` into `out[..dim]`.
    fn eval(&self, x: f64, order: Order, out: &mut [f64]);
}

/// `amplitude * cos(2 pi f_k x + phase_k)` per component.
#[derive(Debug, Clone)]
pub struct FourierFeature {
    pub frequencies: Vec<i64>,
    pub phases: Vec<f64>,
    pub amplitude: f64,
}

impl Kernel for FourierFeature {
    fn dim(&self) -> usize {
        self.frequencies.len()
    }

    fn eval(&self, x: f64, order: Order, out: &mut [f64]) {
        for (k, (&f, &phase)) in self.frequencies.iter().zip(&self.phases).enumerate() {
            let w = 2.0 * PI * f as f64;
            let arg = w * x + phase;
            out[k] = self.amplitude
                * match order {
                    Order::Value => arg.cos(),
                    Order::First => -w * arg.sin(),
                    Order::Second => -w * w * arg.cos(),
                };
        }
    }
}

/// Number of periodic images kept on each side of the principal one.
const GAUSSIAN_IMAGES: i32 = 2;

/// `amplitude * sum_m exp(-(x - c_k + m)^2 / (2 w^2))` over the five nearest images.
#[derive(Debug, Clone)]
pub struct PeriodizedGaussian {
    pub centers: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
}

impl Kernel for PeriodizedGaussian {
    fn dim(&self) -> usize {
        self.centers.len()
    }

    fn eval(&self, x: f64, order: Order, out: &mut [f64]) {
        let inv_w2 = 1.0 / (self.width * self.width);
        for (k, &c) in self.centers.iter().enumerate() {
            let mut d = x - c;
            d -= d.round();
            let mut acc = 0.0;
            for m in -GAUSSIAN_IMAGES..=GAUSSIAN_IMAGES {
                let t = d + m as f64;
                let g = (-0.5 * t * t * inv_w2).exp();
                acc += match order {
                    Order::Value => g,
                    Order::First => -t * inv_w2 * g,
                    Order::Second => (t * t * inv_w2 - 1.0) * inv_w2 * g,
                };
            }
            out[k] = self.amplitude * acc;
        }
    }
}

/// Wraps a kernel and reports a zero second derivative. Only useful as a validator fixture.
#[derive(Debug, Clone)]
pub struct ZeroSecondDerivative<K>(pub K);

impl<K: Kernel> Kernel for ZeroSecondDerivative<K> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, x: f64, order: Order, out: &mut [f64]) {
        match order {
            Order::Second => out[..self.dim()].iter_mut().for_each(|v| *v = 0.0),
            _ => self.0.eval(x, order, out),
        }
    }
}

/// Parameters of a built-in bank, kept for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelKind {
    PeriodizedGaussian { width: f64, centers: Vec<Vec<f64>>, amplitude: f64 },
    FourierFeatures { frequencies: Vec<Vec<i64>>, phases: Vec<Vec<f64>>, amplitude: f64 },
    Custom,
}

/// An immutable bank of `N` kernels with a common codomain `R^d`.
#[derive(Clone)]
pub struct KernelBank {
    n: usize,
    d: usize,
    kind: KernelKind,
    kernels: Vec<Arc<dyn Kernel>>,
}

impl fmt::Debug for KernelBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelBank")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("kind", &self.kind)
            .finish()
    }
}

impl KernelBank {
    /// Fourier features; `frequencies[i][k]` and `phases[i][k]` describe component `k` of kernel `i`.
    pub fn fourier(frequencies: Vec<Vec<i64>>, phases: Vec<Vec<f64>>, amplitude: f64) -> Result<Self> {
        if frequencies.len() != phases.len() {
            return Err(Error::InvalidKernel("frequency and phase lists differ in length".into()));
        }
        let kernels = frequencies
            .iter()
            .zip(&phases)
            .map(|(f, p)| {
                if f.len() != p.len() {
                    return Err(Error::InvalidKernel("frequency and phase rows differ in length".into()));
                }
                Ok(Arc::new(FourierFeature { frequencies: f.clone(), phases: p.clone(), amplitude })
                    as Arc<dyn Kernel>)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(kernels, KernelKind::FourierFeatures { frequencies, phases, amplitude })
    }

    /// Periodized Gaussians of a common width; `centers[i][k]` is the center of component `k`.
    pub fn periodized_gaussian(width: f64, centers: Vec<Vec<f64>>, amplitude: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidKernel(format!("gaussian width must be positive, got {width}")));
        }
        if width > MAX_GAUSSIAN_WIDTH {
            return Err(Error::InvalidKernel(format!(
                "gaussian width {width} exceeds {MAX_GAUSSIAN_WIDTH}: five periodic images no longer suffice"
            )));
        }
        let kernels = centers
            .iter()
            .map(|c| {
                Arc::new(PeriodizedGaussian { centers: c.clone(), width, amplitude }) as Arc<dyn Kernel>
            })
            .collect();
        Self::build(kernels, KernelKind::PeriodizedGaussian { width, centers, amplitude })
    }

    pub fn from_kernels(kernels: Vec<Arc<dyn Kernel>>) -> Result<Self> {
        Self::build(kernels, KernelKind::Custom)
    }

    /// Scalar cosine/sine pairs at frequencies `1..=n/2`, scaled so every column `K delta_x` has unit norm.
    pub fn harmonic(n: usize) -> Result<Self> {
        if n < 2 || !n.is_multiple_of(2) {
            return Err(Error::InvalidKernel(format!("harmonic bank needs an even n >= 2, got {n}")));
        }
        let mut frequencies = Vec::with_capacity(n);
        let mut phases = Vec::with_capacity(n);
        for f in 1..=(n / 2) as i64 {
            frequencies.push(vec![f]);
            phases.push(vec![0.0]);
            frequencies.push(vec![f]);
            phases.push(vec![-PI / 2.0]);
        }
        Self::fourier(frequencies, phases, (2.0 / n as f64).sqrt())
    }

    /// Random integer frequencies in `1..=max_frequency` and uniform phases, with unit-norm columns on average.
    pub fn random_fourier(n: usize, d: usize, max_frequency: i64, seed: u64) -> Result<Self> {
        if max_frequency < 1 {
            return Err(Error::InvalidKernel("max_frequency must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frequencies = Vec::with_capacity(n);
        let mut phases = Vec::with_capacity(n);
        for _ in 0..n {
            frequencies.push((0..d).map(|_| rng.random_range(1..=max_frequency)).collect());
            phases.push((0..d).map(|_| rng.random_range(0.0..2.0 * PI)).collect());
        }
        Self::fourier(frequencies, phases, (2.0 / n as f64).sqrt())
    }

    /// Gaussians centered at `i / n`, component `k` shifted by `k / (n d)`.
    pub fn uniform_gaussian(n: usize, d: usize, width: f64, amplitude: f64) -> Result<Self> {
        let centers = (0..n)
            .map(|i| (0..d).map(|k| (i as f64 + k as f64 / d as f64) / n as f64).collect())
            .collect();
        Self::periodized_gaussian(width, centers, amplitude)
    }

    fn build(kernels: Vec<Arc<dyn Kernel>>, kind: KernelKind) -> Result<Self> {
        let n = kernels.len();
        if n == 0 {
            return Err(Error::InvalidKernel("bank has no kernels".into()));
        }
        let d = kernels[0].dim();
        if d == 0 || kernels.iter().any(|k| k.dim() != d) {
            return Err(Error::InvalidKernel("kernels must share a positive codomain dimension".into()));
        }
        let bank = KernelBank { n, d, kind, kernels };
        bank.check_periodicity()?;
        Ok(bank)
    }

    /// Values and both derivatives must agree across the wrap point.
    fn check_periodicity(&self) -> Result<()> {
        let before_wrap = 1.0 - f64::EPSILON / 2.0;
        let mut left = vec![0.0; self.d];
        let mut right = vec![0.0; self.d];
        for (i, kernel) in self.kernels.iter().enumerate() {
            for order in Order::ALL {
                kernel.eval(0.0, order, &mut left);
                kernel.eval(before_wrap, order, &mut right);
                let tol = match order {
                    Order::Value => 1e-12,
                    _ => 1e-9,
                };
                for k in 0..self.d {
                    let gap = (left[k] - right[k]).abs();
                    let scale = if order == Order::Value { 1.0 } else { left[k].abs().max(1.0) };
                    if !(gap <= tol * scale) {
                        return Err(Error::InvalidKernel(format!(
                            "kernel {i} component {k} is not periodic at order {}: jump {gap:.3e}",
                            order as u8
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of kernels `N`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Codomain dimension `d`.
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    /// `phi_i^{(order)}(x)`.
    pub fn kernel_eval(&self, i: usize, x: TorusPoint, order: Order) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.kernels[i].eval(x.value(), order, &mut out);
        out
    }

    /// All kernels at once; `out[i * d + k]` receives component `k` of kernel `i`.
    pub fn eval_all(&self, x: TorusPoint, order: Order, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n * self.d);
        for (i, kernel) in self.kernels.iter().enumerate() {
            kernel.eval(x.value(), order, &mut out[i * self.d..(i + 1) * self.d]);
        }
    }

    /// Convenience allocation of [`KernelBank::eval_all`].
    pub fn eval_all_vec(&self, x: TorusPoint, order: Order) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.d];
        self.eval_all(x, order, &mut out);
        out
    }
}

/// Finite-difference step used by the derivative validator.
/// Largest periodized Gaussian width whose first omitted periodic image (distance 2.5) contributes below 1e-15.
pub const MAX_GAUSSIAN_WIDTH: f64 = 0.3;

pub const FD_STEP: f64 = 1e-5;

/// Per-kernel maximal relative derivative error.
#[derive(Debug, Clone, Serialize)]
pub struct KernelValidation {
    pub tol: f64,
    pub samples: usize,
    /// `(first order error, second order error)` per kernel.
    pub errors: Vec<(f64, f64)>,
}

impl KernelValidation {
    pub fn passed(&self) -> bool {
        self.errors.iter().all(|&(e1, e2)| e1 <= self.tol && e2 <= self.tol)
    }

    /// Kernel index, order and error of the largest mismatch.
    pub fn worst(&self) -> (usize, u8, f64) {
        let mut worst = (0, 1, 0.0);
        for (i, &(e1, e2)) in self.errors.iter().enumerate() {
            if e1 > worst.2 {
                worst = (i, 1, e1);
            }
            if e2 > worst.2 {
                worst = (i, 2, e2);
            }
        }
        worst
    }
}

/// Compares analytic derivatives with central differences at `samples` random points.
///
/// The order-1 output is checked against differences of the values and the order-2 output
/// against differences of the order-1 output. Errors are relative to the largest analytic
/// magnitude of that kernel and order over the samples.
pub fn kernel_derivative_errors(bank: &KernelBank, samples: usize, tol: f64, seed: u64) -> KernelValidation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<f64> = (0..samples).map(|_| rng.random_range(0.0..1.0)).collect();
    let d = bank.d();
    let (mut plus, mut minus, mut exact) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);

    let errors = bank
        .kernels
        .iter()
        .map(|kernel| {
            let mut pair = [0.0; 2];
            for (slot, (lower, upper)) in [(Order::Value, Order::First), (Order::First, Order::Second)]
                .into_iter()
                .enumerate()
            {
                let (mut max_gap, mut max_mag) = (0.0f64, 0.0f64);
                for &x in &points {
                    kernel.eval(TorusPoint::new(x + FD_STEP).value(), lower, &mut plus);
                    kernel.eval(TorusPoint::new(x - FD_STEP).value(), lower, &mut minus);
                    kernel.eval(x, upper, &mut exact);
                    for k in 0..d {
                        let fd = (plus[k] - minus[k]) / (2.0 * FD_STEP);
                        max_gap = max_gap.max((fd - exact[k]).abs());
                        max_mag = max_mag.max(exact[k].abs()).max(fd.abs());
                    }
                }
                pair[slot] = if max_mag > 0.0 { max_gap / max_mag } else { max_gap };
            }
            (pair[0], pair[1])
        })
        .collect();

    KernelValidation { tol, samples, errors }
}

/// Fails with the worst offender when any derivative error exceeds `tol`.
pub fn validate_kernel_derivatives(
    bank: &KernelBank,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<KernelValidation> {
    if samples < 2 {
        return Err(Error::InvalidInput("derivative validation needs at least 2 samples".into()));
    }
    let report = kernel_derivative_errors(bank, samples, tol, seed);
    if report.passed() {
        Ok(report)
    } else {
        let (kernel, order, error) = report.worst();
        Err(Error::FailsValidation { kernel, order, error, tol })
    }
}
