//! Experiment configuration files (JSON, `schema_version` "1").

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::atoms::{Atom, Family, ProblemInstance, SparseSignal, Term};
use crate::certificate::MndscTolerances;
use crate::error::Error;
use crate::harness::{AdmissibleRegion, DEFAULT_EPSILON};
use crate::kernel::{FourierFeature, Kernel, KernelBank, ZeroSecondDerivative};
use crate::solver::SolverConfig;
use crate::torus::torus_dist;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: String,
    pub family: Family,
    pub kernel: KernelSpec,
    /// Terms of the ground truth; vector-spike directions are normalized on load.
    pub ground_truth: Vec<Term>,
    #[serde(default)]
    pub certificate: CertificateSpec,
    #[serde(default)]
    pub tolerances: MndscTolerances,
    #[serde(default)]
    pub kernel_validation: ValidationSpec,
    pub region: AdmissibleRegion,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// Kernel bank description.
///
/// Fourier features take explicit `frequencies` and `phases` when given, random ones from
/// `seed` and `max_frequency` otherwise, and the unit-column cosine/sine layout when neither
/// is given (scalar banks only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    FourierFeatures {
        n: usize,
        d: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frequencies: Option<Vec<Vec<i64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phases: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        amplitude: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_frequency: Option<i64>,
        /// Replace the analytic second derivative by zero (validator test fixture).
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        derivative_stub: bool,
    },
    PeriodizedGaussian {
        n: usize,
        d: usize,
        width: f64,
        /// Per kernel and component; defaults to `(i + k / d) / n`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        centers: Option<Vec<Vec<f64>>>,
        #[serde(default = "one")]
        amplitude: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateMethod {
    #[default]
    Qp,
    Limit,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateSpec {
    pub method: CertificateMethod,
    pub grid: usize,
    pub limit_lambdas: Vec<f64>,
}

impl Default for CertificateSpec {
    fn default() -> Self {
        CertificateSpec { method: CertificateMethod::Qp, grid: 1024, limit_lambdas: vec![1e-2, 1e-3, 1e-4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSpec {
    pub samples: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        ValidationSpec { samples: 100, tol: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory; the `--out` flag takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Record per-cell wall-clock times in sweep reports.
    pub record_timing: bool,
}

/// A configuration problem, located in the source text when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.find(&needle).map(|pos| text[..pos].matches('\n').count() + 1)
}

/// 1-based line where element `index` of the array under `"key"` starts.
fn line_of_element(text: &str, key: &str, index: usize) -> Option<usize> {
    let start = text.find(&format!("\"{key}\""))?;
    let open = start + text[start..].find('[')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut seen = 0usize;
    let mut expecting = true;
    for (off, ch) in text[open..].char_indices() {
        let pos = open + off;
        if in_string {
            match (escaped, ch) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '[' | '{' => {
                if depth == 1 && expecting {
                    if seen == index {
                        return Some(text[..pos].matches('\n').count() + 1);
                    }
                    seen += 1;
                    expecting = false;
                }
                depth += 1;
            }
            ']' | '}' => {
                depth -= 1;
                if depth == 0 {
                    return None;
                }
            }
            ',' if depth == 1 => expecting = true,
            '"' => in_string = true,
            _ => {}
        }
    }
    None
}

impl ExperimentConfig {
    /// Parses and validates a configuration.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError {
            line: Some(e.line()),
            column: Some(e.column()),
            message: e.to_string(),
        })?;
        cfg.validate_located(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    fn validate_located(&self, text: &str) -> Result<(), ConfigError> {
        let at_key = |key: &str, message: String| ConfigError { line: line_of_key(text, key), column: None, message };
        let at_term = |i: usize, message: String| ConfigError {
            line: line_of_element(text, "ground_truth", i).or_else(|| line_of_key(text, "ground_truth")),
            column: None,
            message: format!("ground_truth[{i}]: {message}"),
        };

        if self.schema_version != SCHEMA_VERSION {
            return Err(at_key(
                "schema_version",
                format!("unsupported schema_version {:?}, expected {SCHEMA_VERSION:?}", self.schema_version),
            ));
        }
        let prob = self.problem().map_err(|e| at_key("kernel", e.to_string()))?;

        for (i, t) in self.ground_truth.iter().enumerate() {
            prob.check_atom(&t.atom).map_err(|e| at_term(i, e.to_string()))?;
            if !(t.c > 0.0) || !t.c.is_finite() {
                return Err(at_term(i, format!("coefficient must be positive, got {}", t.c)));
            }
        }
        if self.ground_truth.len() > prob.n() {
            return Err(at_key(
                "ground_truth",
                format!("{} atoms exceed the {} measurements", self.ground_truth.len(), prob.n()),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(at_key("epsilon", format!("epsilon must be positive, got {}", self.epsilon)));
        }
        let terms = self.normalized_terms().map_err(|(i, e)| at_term(i, e))?;
        for i in 0..terms.len() {
            for j in 0..i {
                if let (Some(a), Some(b)) = (terms[i].atom.position(), terms[j].atom.position()) {
                    let dist = torus_dist(a, b);
                    if dist < 2.0 * self.epsilon {
                        return Err(at_term(
                            i,
                            format!("closer than 2 epsilon = {} to ground_truth[{j}] (distance {dist})", 2.0 * self.epsilon),
                        ));
                    }
                }
            }
        }
        SparseSignal::new(terms).map_err(|e| at_key("ground_truth", e.to_string()))?;

        self.region.validate().map_err(|e| at_key("region", e.to_string()))?;
        self.solver.validate().map_err(|e| at_key("solver", e.to_string()))?;
        let t = &self.tolerances;
        if [t.interp_tol, t.exc_tol, t.exclusion_radius, t.curv_tol].iter().any(|v| !(*v > 0.0)) {
            return Err(at_key("tolerances", "all tolerances must be positive".into()));
        }
        let c = &self.certificate;
        if c.grid < 16 {
            return Err(at_key("certificate", format!("certificate grid must be at least 16, got {}", c.grid)));
        }
        if c.method != CertificateMethod::Qp
            && (c.limit_lambdas.is_empty()
                || c.limit_lambdas.iter().any(|&l| !(l > 0.0))
                || c.limit_lambdas.windows(2).any(|w| !(w[1] < w[0])))
        {
            return Err(at_key("limit_lambdas", "limit_lambdas must be positive and strictly decreasing".into()));
        }
        if self.kernel_validation.samples < 2 || !(self.kernel_validation.tol > 0.0) {
            return Err(at_key("kernel_validation", "kernel_validation needs samples >= 2 and tol > 0".into()));
        }
        Ok(())
    }

    fn normalized_terms(&self) -> Result<Vec<Term>, (usize, String)> {
        self.ground_truth
            .iter()
            .enumerate()
            .map(|(i, t)| match &t.atom {
                Atom::VectorSpike { a, x } => Atom::vector_spike(a, *x)
                    .map(|atom| Term { c: t.c, atom })
                    .map_err(|e| (i, e.to_string())),
                _ => Ok(t.clone()),
            })
            .collect()
    }

    /// The ground truth with unit directions.
    pub fn ground_truth(&self) -> Result<SparseSignal, Error> {
        let terms = self.normalized_terms().map_err(|(i, e)| Error::InvalidInput(format!("ground_truth[{i}]: {e}")))?;
        SparseSignal::new(terms)
    }

    pub fn bank(&self) -> Result<KernelBank, Error> {
        match &self.kernel {
            KernelSpec::FourierFeatures { n, d, frequencies, phases, amplitude, seed, max_frequency, derivative_stub } => {
                let bank = match (frequencies, phases) {
                    (Some(f), Some(p)) => KernelBank::fourier(f.clone(), p.clone(), amplitude.unwrap_or(1.0))?,
                    (Some(_), None) | (None, Some(_)) => {
                        return Err(Error::InvalidKernel("frequencies and phases must be given together".into()))
                    }
                    (None, None) => match seed {
                        Some(s) => KernelBank::random_fourier(*n, *d, max_frequency.unwrap_or(6), *s)?,
                        None if *d == 1 => KernelBank::harmonic(*n)?,
                        None => {
                            return Err(Error::InvalidKernel(
                                "vector-valued fourier features need explicit frequencies or a seed".into(),
                            ))
                        }
                    },
                };
                if bank.n() != *n || bank.d() != *d {
                    return Err(Error::InvalidKernel(format!(
                        "bank has n = {}, d = {} but the kernel block says n = {n}, d = {d}",
                        bank.n(),
                        bank.d()
                    )));
                }
                if *derivative_stub {
                    let (freqs, phs, amp) = match bank.kind() {
                        crate::kernel::KernelKind::FourierFeatures { frequencies, phases, amplitude } => {
                            (frequencies.clone(), phases.clone(), *amplitude)
                        }
                        _ => unreachable!("fourier bank"),
                    };
                    let kernels = freqs
                        .into_iter()
                        .zip(phs)
                        .map(|(f, p)| {
                            Arc::new(ZeroSecondDerivative(FourierFeature { frequencies: f, phases: p, amplitude: amp }))
                                as Arc<dyn Kernel>
                        })
                        .collect();
                    return KernelBank::from_kernels(kernels);
                }
                Ok(bank)
            }
            KernelSpec::PeriodizedGaussian { n, d, width, centers, amplitude } => {
                let bank = match centers {
                    Some(c) => KernelBank::periodized_gaussian(*width, c.clone(), *amplitude)?,
                    None => KernelBank::uniform_gaussian(*n, *d, *width, *amplitude)?,
                };
                if bank.n() != *n || bank.d() != *d {
                    return Err(Error::InvalidKernel(format!(
                        "bank has n = {}, d = {} but the kernel block says n = {n}, d = {d}",
                        bank.n(),
                        bank.d()
                    )));
                }
                Ok(bank)
            }
        }
    }

    pub fn problem(&self) -> Result<ProblemInstance, Error> {
        ProblemInstance::new(self.family, self.bank()?)
    }
}
