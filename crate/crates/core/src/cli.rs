//! The `esrr` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::atoms::{Atom, Independence, ProblemInstance, SparseSignal};
use crate::certificate::{
    check_mndsc, eta_trace, minimal_norm_certificate_limit, minimal_norm_certificate_qp, Certificate, MndscReport,
};
use crate::config::{CertificateMethod, ExperimentConfig};
use crate::error::Error;
use crate::harness::{draw_noise, run_sweep, write_csv, SweepOptions};
use crate::kernel::kernel_derivative_errors;
use crate::solver::solve;

/// Process exit codes. Each outcome maps to exactly one code.
pub mod exit {
    pub const OK: i32 = 0;
    /// Unreadable or invalid configuration, or bad command-line arguments.
    pub const CONFIG: i32 = 1;
    pub const KERNEL_VALIDATION: i32 = 2;
    /// No certificate interpolates the support.
    pub const INFEASIBLE: i32 = 3;
    pub const MNDSC_FAILED: i32 = 4;
    /// `solve` stopped at the iteration cap without convergence.
    pub const MAX_ITERS: i32 = 5;
    pub const SOLVER_FAILED: i32 = 6;
    /// Every sweep cell was solved but at least one failed the recovery verdict.
    pub const ESRR_FAILED: i32 = 7;
    /// The certificate stayed infeasible between grid points after all refinements.
    pub const GRID_INSUFFICIENT: i32 = 8;
    /// Reports could not be written.
    pub const IO: i32 = 9;
}

/// Number of points in the eta trace.
pub const TRACE_POINTS: usize = 2048;

#[derive(Debug, Parser)]
#[command(name = "esrr", version, about = "Sparse recovery on the torus: certificates, non-degeneracy checks and recovery sweeps")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, value_name = "K")]
    pub threads: Option<usize>,
    /// Run sweeps without the non-degeneracy gate.
    #[arg(long, global = true)]
    pub skip_certify: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic kernel derivatives with finite differences.
    ValidateKernels,
    /// Build the minimal-norm certificate and check non-degeneracy.
    Certify,
    /// Solve the regularized problem once.
    Solve {
        #[arg(long)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Noise norm as a fraction of alpha * lambda.
        #[arg(long, default_value_t = 0.0)]
        noise_frac: f64,
    },
    /// Sweep the admissible region and judge recovery in every cell.
    Sweep,
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn load(cli: &Cli) -> Result<Context, i32> {
    let path = cli.config.as_ref().ok_or_else(|| fail(exit::CONFIG, "--config is required"))?;
    let text = fs::read_to_string(path).map_err(|e| fail(exit::CONFIG, format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_json(&text).map_err(|e| fail(exit::CONFIG, format!("{}: {e}", path.display())))?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Context { cfg, out })
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<(), i32> {
    fs::create_dir_all(dir).map_err(|e| fail(exit::IO, format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| fail(exit::IO, format!("{}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), i32> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("ESRR_LOG", "warn")).try_init();

    let ctx = match load(&cli) {
        Ok(ctx) => ctx,
        Err(code) => return code,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(pool) => pool,
        Err(e) => return fail(exit::CONFIG, format!("thread pool: {e}")),
    };
    let result = pool.install(|| match &cli.command {
        Command::ValidateKernels => validate_kernels(&ctx),
        Command::Certify => certify(&ctx).map(|outcome| outcome.code),
        Command::Solve { lambda, noise_seed, noise_frac } => solve_once(&ctx, *lambda, *noise_seed, *noise_frac),
        Command::Sweep => sweep(&ctx, cli.skip_certify),
    });
    result.unwrap_or_else(|code| code)
}

fn validate_kernels(ctx: &Context) -> Result<i32, i32> {
    let bank = ctx.cfg.bank().map_err(|e| fail(exit::CONFIG, e))?;
    let v = &ctx.cfg.kernel_validation;
    let report = kernel_derivative_errors(&bank, v.samples, v.tol, v.seed);
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{:>6}  {:>14}  {:>14}  status", "kernel", "order1_rel_err", "order2_rel_err");
    for (i, (e1, e2)) in report.errors.iter().enumerate() {
        let ok = *e1 <= v.tol && *e2 <= v.tol;
        let _ = writeln!(stdout, "{i:>6}  {e1:>14.3e}  {e2:>14.3e}  {}", if ok { "ok" } else { "FAIL" });
    }
    if report.passed() {
        let _ = writeln!(stdout, "all {} kernels pass at tolerance {:e}", report.errors.len(), v.tol);
        Ok(exit::OK)
    } else {
        let (kernel, order, error) = report.worst();
        let _ = writeln!(stdout, "validation failed: kernel {kernel} order {order} has relative error {error:.3e}");
        Ok(exit::KERNEL_VALIDATION)
    }
}

#[derive(Debug, Serialize)]
struct MethodReport {
    method: &'static str,
    p: Vec<f64>,
    p_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    cauchy_residuals: Option<Vec<f64>>,
    mndsc: MndscReport,
}

struct CertifyOutcome {
    code: i32,
}

fn certificate_error_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible(_) => exit::INFEASIBLE,
        Error::GridInsufficient { .. } => exit::GRID_INSUFFICIENT,
        Error::SolverFailed(_) | Error::NoConvergence { .. } => exit::SOLVER_FAILED,
        _ => exit::CONFIG,
    }
}

fn certify(ctx: &Context) -> Result<CertifyOutcome, i32> {
    let cfg = &ctx.cfg;
    let prob = cfg.problem().map_err(|e| fail(exit::CONFIG, e))?;
    let u0 = cfg.ground_truth().map_err(|e| fail(exit::CONFIG, e))?;
    let independence = prob.gram_independence_check(&u0).map_err(|e| fail(exit::CONFIG, e))?;

    let error_report = |msg: String, code: i32| -> Result<CertifyOutcome, i32> {
        write_json(&ctx.out, "mndsc_report.json", &json!({ "config": cfg, "verdict": "fail", "error": msg }))?;
        println!("certify: {msg}");
        Ok(CertifyOutcome { code })
    };
    if let Independence::Dependent { rank } = independence {
        return error_report(
            format!("support images K u_i are linearly dependent (rank {rank} of {})", u0.len()),
            exit::MNDSC_FAILED,
        );
    }

    let method = cfg.certificate.method;
    let mut methods: Vec<MethodReport> = Vec::new();
    let mut primary: Option<Certificate> = None;
    if matches!(method, CertificateMethod::Qp | CertificateMethod::Both) {
        match minimal_norm_certificate_qp(&prob, &u0, cfg.certificate.grid) {
            Ok(cert) => {
                let mndsc = check_mndsc(&prob, &u0, &cert, &cfg.tolerances);
                methods.push(MethodReport {
                    method: "qp",
                    p: cert.p().iter().copied().collect(),
                    p_norm: cert.p().norm(),
                    cauchy_residuals: None,
                    mndsc,
                });
                primary = Some(cert);
            }
            Err(e) => return error_report(e.to_string(), certificate_error_code(&e)),
        }
    }
    if matches!(method, CertificateMethod::Limit | CertificateMethod::Both) {
        match minimal_norm_certificate_limit(&prob, &u0, &cfg.certificate.limit_lambdas, &cfg.solver) {
            Ok(lim) => {
                let mndsc = check_mndsc(&prob, &u0, &lim.certificate, &cfg.tolerances);
                methods.push(MethodReport {
                    method: "limit",
                    p: lim.certificate.p().iter().copied().collect(),
                    p_norm: lim.certificate.p().norm(),
                    cauchy_residuals: Some(lim.cauchy_residuals),
                    mndsc,
                });
                primary.get_or_insert(lim.certificate);
            }
            Err(e) => return error_report(e.to_string(), certificate_error_code(&e)),
        }
    }
    let agreement = (methods.len() == 2).then(|| {
        let diff: f64 = methods[0].p.iter().zip(&methods[1].p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        diff / methods[0].p_norm.max(f64::MIN_POSITIVE)
    });
    let passed = methods.iter().all(|m| m.mndsc.passed);

    write_json(
        &ctx.out,
        "mndsc_report.json",
        &json!({
            "config": cfg,
            "verdict": if passed { "pass" } else { "fail" },
            "methods": methods,
            "relative_disagreement": agreement,
        }),
    )?;
    let cert = primary.expect("at least one method ran");
    write_file(&ctx.out, "eta_trace.csv", trace_csv(&cert, prob.d()).as_bytes())?;

    for m in &methods {
        println!(
            "{:<6} |p| = {:.6}  sup = {:.9}  spurious = {}  verdict = {}",
            m.method,
            m.p_norm,
            m.mndsc.dual_margin,
            m.mndsc.spurious_maximizers.len(),
            if m.mndsc.passed { "pass" } else { "fail" }
        );
        for c in &m.mndsc.curvature {
            match c.value {
                Some(v) => println!("       atom {:>2}  curvature {v:.6e}", c.atom),
                None => println!("       atom {:>2}  isolated", c.atom),
            }
        }
        for r in &m.mndsc.reasons {
            println!("       {r}");
        }
    }
    if let Some(a) = agreement {
        println!("qp vs limit relative disagreement {a:.3e}");
    }
    Ok(CertifyOutcome { code: if passed { exit::OK } else { exit::MNDSC_FAILED } })
}

fn trace_csv(cert: &Certificate, d: usize) -> String {
    let mut s = String::from("x");
    for k in 1..=d {
        s.push_str(&format!(",eta_{k}"));
    }
    s.push_str(",norm\n");
    for (x, eta, norm) in eta_trace(cert, TRACE_POINTS) {
        s.push_str(&x.to_string());
        for v in eta {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push(',');
        s.push_str(&norm.to_string());
        s.push('\n');
    }
    s
}

fn atom_table(u: &SparseSignal) -> String {
    let mut s = format!("{:<16} {:>5} {:>5} {:>12} {:>14}  {}\n", "variant", "sign", "k", "x", "c", "a");
    for t in u.terms() {
        let (sign, k, x, a) = match &t.atom {
            Atom::TorusSpike { sign, x } => (sign.value().to_string(), "-".into(), x.value().to_string(), "-".into()),
            Atom::CanonicalSpike { k, sign } => (sign.value().to_string(), k.to_string(), "-".into(), "-".into()),
            Atom::VectorSpike { a, x } => ("-".into(), "-".into(), x.value().to_string(), format!("{a:?}")),
            Atom::AxisSpike { k, sign, x } => (sign.value().to_string(), k.to_string(), x.value().to_string(), "-".into()),
        };
        let x = if x.len() > 12 { x[..12].to_string() } else { x };
        s.push_str(&format!("{:<16} {:>5} {:>5} {:>12} {:>14.8}  {a}\n", t.atom.variant_name(), sign, k, x, t.c));
    }
    s
}

fn solve_once(ctx: &Context, lambda: f64, noise_seed: u64, noise_frac: f64) -> Result<i32, i32> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(fail(exit::CONFIG, format!("--lambda must be positive, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&noise_frac) {
        return Err(fail(exit::CONFIG, format!("--noise-frac must lie in [0, 1], got {noise_frac}")));
    }
    let cfg = &ctx.cfg;
    let prob: ProblemInstance = cfg.problem().map_err(|e| fail(exit::CONFIG, e))?;
    let u0 = cfg.ground_truth().map_err(|e| fail(exit::CONFIG, e))?;
    let noise_norm = noise_frac * cfg.region.alpha * lambda;
    let y0 = prob.forward_signal(&u0).map_err(|e| fail(exit::CONFIG, e))?;
    let y = y0 + draw_noise(prob.n(), noise_norm, noise_seed);
    let res = match solve(&prob, &y, lambda, &cfg.solver) {
        Ok(res) => res,
        Err(e) => return Ok(fail(exit::SOLVER_FAILED, e)),
    };
    write_json(
        &ctx.out,
        "solve_result.json",
        &json!({
            "config": cfg,
            "lambda": lambda,
            "noise_seed": noise_seed,
            "noise_frac": noise_frac,
            "noise_norm": noise_norm,
            "result": res,
        }),
    )?;
    print!("{}", atom_table(&res.u));
    println!(
        "objective {:.12e}  certificate sup {:.12}  iterations {}  converged {}",
        res.objective, res.certificate_sup, res.iterations, res.converged
    );
    if res.converged {
        Ok(exit::OK)
    } else {
        warn!("no convergence after {} iterations", res.iterations);
        Ok(exit::MAX_ITERS)
    }
}

fn sweep(ctx: &Context, skip_certify: bool) -> Result<i32, i32> {
    let cfg = &ctx.cfg;
    if skip_certify {
        info!("non-degeneracy gate skipped");
    } else {
        let outcome = certify(ctx)?;
        if outcome.code != exit::OK {
            println!("sweep not run: the ground truth did not pass certification (use --skip-certify to force)");
            return Ok(outcome.code);
        }
    }
    let prob = cfg.problem().map_err(|e| fail(exit::CONFIG, e))?;
    let u0 = cfg.ground_truth().map_err(|e| fail(exit::CONFIG, e))?;
    let opts = SweepOptions { skip_certify: true, record_timing: cfg.output.record_timing };
    let report = run_sweep(&prob, &u0, &cfg.region, cfg.epsilon, &cfg.solver, opts).map_err(|e| fail(exit::CONFIG, e))?;

    write_json(
        &ctx.out,
        "esrr_report.json",
        &json!({ "config": cfg, "certification": if skip_certify { "skipped" } else { "passed" }, "report": report }),
    )?;
    let mut csv = Vec::new();
    write_csv(&report, &mut csv).map_err(|e| fail(exit::IO, e))?;
    write_file(&ctx.out, "esrr_report.csv", &csv)?;

    println!("{:>12}  {:>6}  {:>6}", "lambda", "cells", "passed");
    for row in &report.frontier.per_lambda {
        println!("{:>12e}  {:>6}  {:>6}", row.lambda, row.cells, row.passed);
    }
    match report.frontier.empirical_lambda0 {
        Some(l) => println!("empirical lambda0 (all cells pass at and below): {l:e}"),
        None => println!("empirical lambda0: none (cells fail at the smallest lambda)"),
    }
    if let Some(d) = &report.decay {
        match d.slope {
            Some(s) => println!("noiseless log-log error slope: {s:.4}"),
            None => println!("noiseless log-log error slope: not enough matched cells"),
        }
    }
    let failures = report.solver_failures();
    Ok(if failures > 0 {
        exit::SOLVER_FAILED
    } else if report.all_passed() {
        exit::OK
    } else {
        exit::ESRR_FAILED
    })
}
