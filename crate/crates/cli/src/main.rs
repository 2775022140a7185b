//! mfcert: config-driven front door for the mean-field certification
//! pipelines. Every run writes machine-readable JSON artifacts, a human
//! summary, and a manifest with input hashes; exit codes are 0 (ok),
//! 1 (error), 2 (gate refused), 3 (acceptance failure).

mod artifacts;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use artifacts::RunContext;
use mfcert_core::accept::{self, Suite};
use mfcert_core::certify;
use mfcert_core::control::{self, ControlProblem, SdeOptions};
use mfcert_core::grid1d::ProductMeasure;
use mfcert_core::limits::{self, LimitOptions};
use mfcert_core::mfsolver::{self, Init, SolveOptions};
use mfcert_core::modelspec::{parse_model, ModelRole, ModelSpec};
use mfcert_core::models::{InteractionKernel, KernelSpec, Model, PotentialSpec, ScalarPotential};
use mfcert_core::oracle;
use mfcert_core::sampler::{self, ChainOptions};

#[derive(Parser)]
#[command(name = "mfcert", version, about = "Mean-field certification of log-concave Gibbs measures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Thread cap for all module parallelism (env fallback: MFCERT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the seed carried by option files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "info")]
    log: LogLevel,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum LogLevel {
    Error,
    Info,
    Debug,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the mean-field fixed point by coordinate ascent.
    Solve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        opts: Option<PathBuf>,
    },
    /// Certify a logZ interval from a converged product measure.
    Certify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        qstar: PathBuf,
    },
    /// Brute-force logZ (n <= 4) and Gaussian closed forms.
    Brute {
        #[arg(long)]
        model: PathBuf,
    },
    /// Solve a scalar or block (step-graphon) limit problem.
    Limit {
        #[arg(long)]
        model: PathBuf,
    },
    /// Draw samples from P (MALA/ULA) or from a solved Q*.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "p")]
        target: SampleTarget,
        #[arg(long)]
        opts: Option<PathBuf>,
        /// Optional solved product measure for --target q.
        #[arg(long)]
        qstar: Option<PathBuf>,
    },
    /// Evaluate the distributed stochastic-control pipeline.
    Control {
        #[arg(long)]
        problem: PathBuf,
    },
    /// Solve the Gaussian-tilt fixed point of a model.
    Tilt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        opts: Option<PathBuf>,
    },
    /// Run an acceptance suite with pinned seeds and tolerances.
    Accept {
        /// One of: gaussian, brute, gibbs, limits, bayes, control, sampler, all.
        suite: String,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SampleTarget {
    P,
    Q,
}

/// Command failure with its exit code and machine-readable code.
struct Failure {
    exit: u8,
    code: String,
    msg: String,
}

impl Failure {
    fn io(code: &str, msg: String) -> Self {
        Failure { exit: 1, code: code.to_string(), msg }
    }
}

impl From<mfcert_core::Error> for Failure {
    fn from(e: mfcert_core::Error) -> Self {
        Failure {
            exit: if e.is_gate() { 2 } else { 1 },
            code: e.code().to_string(),
            msg: e.to_string(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure { exit: 1, code: "E_INTERNAL".to_string(), msg: format!("{e:#}") }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("MFCERT_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(t) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let command_name = command_name(&cli.command);
    let mut ctx = match RunContext::new(&cli.out, command_name, cli.seed, threads) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli, &mut ctx) {
        Ok(exit) => {
            let status = match exit {
                0 => "ok",
                2 => "gate",
                3 => "acceptance-failed",
                _ => "error",
            };
            if let Err(e) = ctx.finish(status, None, None) {
                eprintln!("error writing manifest: {e:#}");
                return ExitCode::from(1);
            }
            ExitCode::from(exit)
        }
        Err(f) => {
            if cli.log >= LogLevel::Error {
                eprintln!("error [{}]: {}", f.code, f.msg);
            }
            let status = if f.exit == 2 { "gate" } else { "error" };
            let _ = ctx.finish(status, Some(&f.code), Some(&f.msg));
            ExitCode::from(f.exit)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Solve { .. } => "solve",
        Command::Certify { .. } => "certify",
        Command::Brute { .. } => "brute",
        Command::Limit { .. } => "limit",
        Command::Sample { .. } => "sample",
        Command::Control { .. } => "control",
        Command::Tilt { .. } => "tilt",
        Command::Accept { .. } => "accept",
    }
}

fn dispatch(cli: &Cli, ctx: &mut RunContext) -> Result<u8, Failure> {
    match &cli.command {
        Command::Solve { model, opts } => cmd_solve(cli, ctx, model, opts.as_deref()),
        Command::Certify { model, qstar } => cmd_certify(cli, ctx, model, qstar),
        Command::Brute { model } => cmd_brute(cli, ctx, model),
        Command::Limit { model } => cmd_limit(cli, ctx, model),
        Command::Sample { model, target, opts, qstar } => {
            cmd_sample(cli, ctx, model, *target, opts.as_deref(), qstar.as_deref())
        }
        Command::Control { problem } => cmd_control(cli, ctx, problem),
        Command::Tilt { model, t, opts } => cmd_tilt(cli, ctx, model, *t, opts.as_deref()),
        Command::Accept { suite } => cmd_accept(cli, ctx, suite),
    }
}

fn log_info(cli: &Cli, msg: &str) {
    if cli.log >= LogLevel::Info {
        eprintln!("{msg}");
    }
}

fn read_model(ctx: &mut RunContext, path: &Path, role: ModelRole) -> Result<Model, Failure> {
    let text = ctx
        .read_input(path)
        .map_err(|e| Failure::io("E_IO_MODEL", format!("{e:#}")))?;
    Ok(parse_model(&text, role)?)
}

fn read_solve_opts(
    ctx: &mut RunContext,
    path: Option<&Path>,
    seed: Option<u64>,
) -> Result<SolveOptions, Failure> {
    let mut opts = match path {
        Some(p) => {
            let text = ctx
                .read_input(p)
                .map_err(|e| Failure::io("E_IO_OPTS", format!("{e:#}")))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::io("E_PARSE_OPTS", format!("{}: {e}", p.display())))?
        }
        None => SolveOptions::default(),
    };
    if let Some(s) = seed {
        opts.seed = s;
    }
    Ok(opts)
}

fn read_qstar(ctx: &mut RunContext, path: &Path) -> Result<ProductMeasure, Failure> {
    let text = ctx
        .read_input(path)
        .map_err(|e| Failure::io("E_IO_QSTAR", format!("{e:#}")))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::io("E_PARSE_QSTAR", format!("{}: {e}", path.display())))?;
    let inner = value.get("qstar").cloned().unwrap_or(value);
    serde_json::from_value(inner)
        .map_err(|e| Failure::io("E_PARSE_QSTAR", format!("{}: {e}", path.display())))
}

fn cmd_solve(
    cli: &Cli,
    ctx: &mut RunContext,
    model_path: &Path,
    opts_path: Option<&Path>,
) -> Result<u8, Failure> {
    let model = read_model(ctx, model_path, ModelRole::Gibbs)?;
    let opts = read_solve_opts(ctx, opts_path, cli.seed)?;
    let result = mfsolver::cavi_solve(&model, Init::Default, &opts)?;
    ctx.write_json("qstar.json", &result).map_err(Failure::from)?;
    let trace_rows: Vec<Vec<f64>> = result
        .elbo_trace
        .iter()
        .enumerate()
        .map(|(i, v)| vec![i as f64, *v])
        .collect();
    ctx.write_csv("elbo_trace.csv", "update,elbo", &trace_rows)
        .map_err(Failure::from)?;
    let summary = format!(
        "solve: n = {}\nsweeps used: {}\nresidual: {:.3e}\nfixed-point residual: {:.3e}\nelbo: {:.7}\n",
        result.qstar.dim(),
        result.sweeps_used,
        result.residual,
        result.fixed_point_residual,
        result.elbo
    );
    ctx.write_text("summary.txt", &summary).map_err(Failure::from)?;
    log_info(cli, &format!("solved in {} sweeps, elbo {:.7}", result.sweeps_used, result.elbo));
    Ok(0)
}

fn cmd_certify(
    cli: &Cli,
    ctx: &mut RunContext,
    model_path: &Path,
    qstar_path: &Path,
) -> Result<u8, Failure> {
    let model = read_model(ctx, model_path, ModelRole::Gibbs)?;
    let qstar = read_qstar(ctx, qstar_path)?;
    let cert = certify::certify(&model, &qstar)?;
    let concentration = certify::concentration(&model, &cert, 1)?;
    ctx.write_json("cert.json", &cert).map_err(Failure::from)?;
    ctx.write_json("concentration.json", &concentration)
        .map_err(Failure::from)?;
    let gate_tripped = cert.trj2_gate_failure.is_some();
    let mut summary = format!(
        "certified: logZ ∈ [{:.6}, {:.6}]\nelbo: {:.7}\nvar bound: {:.7}\ncross bound: {:.7}\nwinner: {:?}\n",
        cert.logz_lo, cert.logz_hi, cert.elbo, cert.var_bound, cert.cross_bound, cert.winner
    );
    match (&cert.trj2_bound, &cert.trj2_gate_failure) {
        (Some(t), _) => summary.push_str(&format!("trJ2 bound: {t:.7}\n")),
        (None, Some(reason)) => summary.push_str(&format!("trJ2 bound: gated ({reason})\n")),
        (None, None) => summary.push_str("trJ2 bound: n/a (non-pairwise model)\n"),
    }
    summary.push_str(&format!(
        "lln rhs (k=1): {:.7}\nw2 budget (k=1): {:.7}\n",
        concentration.lln_rhs, concentration.w2_budget
    ));
    ctx.write_text("summary.txt", &summary).map_err(Failure::from)?;
    log_info(cli, &format!("certified: logZ ∈ [{:.6}, {:.6}]", cert.logz_lo, cert.logz_hi));
    Ok(if gate_tripped { 2 } else { 0 })
}

fn cmd_brute(cli: &Cli, ctx: &mut RunContext, model_path: &Path) -> Result<u8, Failure> {
    let model = read_model(ctx, model_path, ModelRole::Gibbs)?;
    let logz = oracle::brute_logz(&model)?;
    let gaussian = match &model {
        Model::Quadratic(q) if q.b().iter().all(|&b| b == 0.0) && q.c() == 0.0 => {
            Some(oracle::gaussian_truth(q.a())?)
        }
        _ => None,
    };
    ctx.write_json("truth.json", &json!({ "logz": logz, "gaussian": gaussian }))
        .map_err(Failure::from)?;
    ctx.write_text("summary.txt", &format!("brute logZ: {logz:.7}\n"))
        .map_err(Failure::from)?;
    log_info(cli, &format!("brute logZ = {logz:.7}"));
    Ok(0)
}

#[derive(Deserialize)]
struct LimitSpec {
    #[serde(rename = "V")]
    v: PotentialSpec,
    #[serde(rename = "K")]
    k: KernelSpec,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    weights: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    opts: Option<LimitOptions>,
}

fn cmd_limit(cli: &Cli, ctx: &mut RunContext, spec_path: &Path) -> Result<u8, Failure> {
    let text = ctx
        .read_input(spec_path)
        .map_err(|e| Failure::io("E_IO_MODEL", format!("{e:#}")))?;
    let spec: LimitSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::io("E_PARSE_MODEL", format!("{}: {e}", spec_path.display())))?;
    let v = ScalarPotential::from_spec(&spec.v)?;
    let k = InteractionKernel::from_spec(&spec.k);
    let opts = spec.opts.unwrap_or_default();

    match (&spec.mode, &spec.weights) {
        (_, Some(weights)) => {
            let base = limits::block_limit(&v, &k, weights, &opts)?;
            // Multiple-restart report: tilted initializations should land on
            // the same fixed point unless symmetry genuinely breaks.
            let mut restart_spread: f64 = 0.0;
            for tilt in [0.7, -1.1] {
                let restarted = limits::block_limit(
                    &v,
                    &k,
                    weights,
                    &LimitOptions { init_tilt: Some(tilt), ..opts.clone() },
                )?;
                for (a, b) in base.blocks.iter().zip(&restarted.blocks) {
                    restart_spread = restart_spread.max(a.w2(b));
                }
            }
            ctx.write_json(
                "limit.json",
                &json!({
                    "mode": "block",
                    "value": base.value,
                    "v_shift": base.v_shift,
                    "iterations": base.iterations,
                    "residual": base.residual,
                    "blocks": base.blocks,
                    "mixture": base.mixture,
                    "restart_spread": restart_spread,
                }),
            )
            .map_err(Failure::from)?;
            ctx.write_text(
                "summary.txt",
                &format!(
                    "block limit value: {:.7}\nV shift: {:.7}\nrestart spread (W2): {:.3e}\n",
                    base.value, base.v_shift, restart_spread
                ),
            )
            .map_err(Failure::from)?;
            log_info(cli, &format!("block limit value = {:.7}", base.value));
        }
        (Some(mode), None) if mode == "scalar" => {
            let lim = limits::scalar_limit(&v, &k, &opts)?;
            ctx.write_json(
                "limit.json",
                &json!({
                    "mode": "scalar",
                    "value": lim.value,
                    "iterations": lim.iterations,
                    "residual": lim.residual,
                    "q": lim.q,
                }),
            )
            .map_err(Failure::from)?;
            ctx.write_text("summary.txt", &format!("scalar limit value: {:.7}\n", lim.value))
                .map_err(Failure::from)?;
            log_info(cli, &format!("scalar limit value = {:.7}", lim.value));
        }
        _ => {
            return Err(Failure::io(
                "E_PARSE_MODEL",
                "limit spec needs either mode=\"scalar\" or a weights matrix".to_string(),
            ))
        }
    }
    Ok(0)
}

fn cmd_sample(
    cli: &Cli,
    ctx: &mut RunContext,
    model_path: &Path,
    target: SampleTarget,
    opts_path: Option<&Path>,
    qstar_path: Option<&Path>,
) -> Result<u8, Failure> {
    let model = read_model(ctx, model_path, ModelRole::Gibbs)?;
    let mut opts: ChainOptions = match opts_path {
        Some(p) => {
            let text = ctx
                .read_input(p)
                .map_err(|e| Failure::io("E_IO_OPTS", format!("{e:#}")))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::io("E_PARSE_OPTS", format!("{}: {e}", p.display())))?
        }
        None => ChainOptions::default(),
    };
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    let set = match target {
        SampleTarget::P => sampler::sample_p(&model, &opts)?,
        SampleTarget::Q => {
            let q = match qstar_path {
                Some(p) => read_qstar(ctx, p)?,
                None => {
                    let solve =
                        mfsolver::cavi_solve(&model, Init::Default, &SolveOptions::default())?;
                    solve.qstar
                }
            };
            let n_draws = (opts.steps - opts.burnin) * opts.n_chains;
            sampler::sample_q(&q, n_draws, opts.seed)?
        }
    };
    ctx.write_samples_bin("samples.bin", set.n_draws, set.n, &set.draws)
        .map_err(Failure::from)?;
    ctx.write_json(
        "diagnostics.json",
        &json!({
            "source": set.source,
            "n": set.n,
            "n_draws": set.n_draws,
            "acceptance_rate": set.acceptance_rate,
            "ess": set.ess,
            "step_sizes": set.step_sizes,
        }),
    )
    .map_err(Failure::from)?;
    let summary = format!(
        "samples: {} draws x {} coords ({:?})\nacceptance rate: {:.4}\nmin ess: {:.1}\n",
        set.n_draws,
        set.n,
        set.source,
        set.acceptance_rate,
        set.ess.iter().cloned().fold(f64::INFINITY, f64::min)
    );
    ctx.write_text("summary.txt", &summary).map_err(Failure::from)?;
    log_info(cli, &format!("{} draws written", set.n_draws));
    Ok(0)
}

#[derive(Deserialize)]
struct ControlSpec {
    n: usize,
    #[serde(rename = "T")]
    t: f64,
    g: ModelSpec,
    sde: SdeOptions,
    #[serde(default)]
    opts: Option<SolveOptions>,
}

fn cmd_control(cli: &Cli, ctx: &mut RunContext, problem_path: &Path) -> Result<u8, Failure> {
    let text = ctx
        .read_input(problem_path)
        .map_err(|e| Failure::io("E_IO_PROBLEM", format!("{e:#}")))?;
    let spec: ControlSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::io("E_PARSE_PROBLEM", format!("{}: {e}", problem_path.display())))?;
    let g = mfcert_core::modelspec::build_model(&spec.g, ModelRole::ControlObjective)?;
    let prob = ControlProblem::new(spec.n, spec.t, g)?;
    let mut opts = spec.opts.unwrap_or_default();
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    let mut sde = spec.sde;
    if let Some(s) = cli.seed {
        sde.seed = s;
    }
    let report = control::run_control(&prob, &opts, &sde)?;
    ctx.write_json("report.json", &report).map_err(Failure::from)?;
    let n = spec.n;
    let rows: Vec<Vec<f64>> = report.sim_terminal.chunks(n).map(|r| r.to_vec()).collect();
    let header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    ctx.write_csv("sim_terminal.csv", &header.join(","), &rows)
        .map_err(Failure::from)?;
    let summary = format!(
        "v_orig: [{:.7}, {:.7}]\nv_dstr: {:.7}\nv_det: {:.7}\ngap bound: {:.7}\ndet gap bound: {:.7}\nsim: {:.7} ± {:.7}\nclip fraction: {:.3e}\nordering ok: {}\nflags: {:?}\n",
        report.v_orig.lo(),
        report.v_orig.hi(),
        report.v_dstr,
        report.v_det,
        report.gap_bound,
        report.det_gap_bound,
        report.sim_mean,
        report.sim_stderr,
        report.clip_fraction,
        report.ordering_ok,
        report.flags
    );
    ctx.write_text("summary.txt", &summary).map_err(Failure::from)?;
    log_info(cli, &format!("v_dstr = {:.7}, ordering ok: {}", report.v_dstr, report.ordering_ok));
    Ok(0)
}

fn cmd_tilt(
    cli: &Cli,
    ctx: &mut RunContext,
    model_path: &Path,
    t: f64,
    opts_path: Option<&Path>,
) -> Result<u8, Failure> {
    let model = read_model(ctx, model_path, ModelRole::ControlObjective)?;
    let opts = read_solve_opts(ctx, opts_path, cli.seed)?;
    let tilt = mfsolver::tilt_solve(&model, t, &opts)?;
    ctx.write_json("tilt.json", &tilt).map_err(Failure::from)?;
    ctx.write_text(
        "summary.txt",
        &format!(
            "tilt value: {:.8}\ny*: {:?}\niterations: {}\n",
            tilt.value, tilt.ystar, tilt.iterations
        ),
    )
    .map_err(Failure::from)?;
    log_info(cli, &format!("tilt value = {:.8}", tilt.value));
    Ok(0)
}

fn cmd_accept(cli: &Cli, ctx: &mut RunContext, suite: &str) -> Result<u8, Failure> {
    let suite = Suite::from_str(suite)?;
    let checks = accept::run(suite)?;
    ctx.write_json("acceptance-report.json", &checks)
        .map_err(Failure::from)?;
    let mut summary = String::new();
    let mut failures = 0usize;
    for c in &checks {
        let line = format!(
            "[criterion {:>2}] {:<36} measured {:>13.6e} tol {:>10.3e} {}",
            c.criterion,
            c.id,
            c.measured,
            c.tolerance,
            if c.passed { "pass" } else { "FAIL" }
        );
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
        if !c.passed {
            failures += 1;
        }
    }
    summary.push_str(&format!("\n{} checks, {} failed\n", checks.len(), failures));
    ctx.write_text("summary.txt", &summary).map_err(Failure::from)?;
    log_info(cli, &format!("{} checks, {} failed", checks.len(), failures));
    Ok(if failures > 0 { 3 } else { 0 })
}
