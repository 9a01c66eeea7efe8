//! Command-line driver behind the `polyfeed` binary.
//!
//! Every run echoes its fully resolved configuration into a manifest next to
//! its outputs. Wall-clock data lives only in manifests, so data files from
//! identical configurations are byte-identical.
//!
//! Exit codes: 0 success, 1 I/O, 2 usage, 3 validation/provenance,
//! 4 numerical failure, 5 divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::archive::{load_expansion, save_expansion, Manifest};
use crate::error::{Error, Result};
use crate::feedback::ValueExpansion;
use crate::genlyap::synthesize;
use crate::model::{make_burgers, make_scalar, BurgersConfig, QuadraticControlSystem};
use crate::oracle::{geometric_grid, taylor_order_study, FitStatus, OracleOptions, StudyConfig};
use crate::riccati::check_stabilizable;
use crate::sim::{cost_j, cost_jd, default_horizon, dp_identity_check, integrate_closed_loop, integrate_lqr, integrate_uncontrolled, SimOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;

#[derive(Parser, Debug, Serialize)]
#[command(name = "polyfeed", version, about = "Polynomial feedback synthesis and verification for quadratic control systems")]
pub struct Cli {
    /// Seed for every random draw (probes, directions, random initial states).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "POLYFEED_THREADS")]
    pub threads: Option<usize>,
    /// TOML file with defaults; command-line flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
pub enum Command {
    /// System files.
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
    /// Solve the Riccati equation and the tensor chain up to a degree.
    Synth(SynthArgs),
    /// Evaluate the perturbed HJB identity at random probes.
    HjbCheck(HjbArgs),
    /// Integrate the closed loop and report its costs.
    Simulate(SimulateArgs),
    /// Compare value expansions with the open-loop oracle along a ray.
    TaylorStudy(StudyArgs),
}

#[derive(Subcommand, Debug, Serialize)]
pub enum ModelAction {
    /// Generate a Burgers Galerkin model or the scalar example.
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Kind {
    Burgers,
    Scalar,
}

#[derive(clap::Args, Debug, Serialize)]
#[command(allow_negative_numbers = true)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Galerkin modes (burgers).
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    /// Viscosity (burgers).
    #[arg(long, default_value_t = 0.05)]
    pub nu: f64,
    /// Reaction coefficient (burgers).
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    /// Control patches `lo:hi,lo:hi` inside (0, 1) (burgers).
    #[arg(long, default_value = "0.1:0.3,0.6:0.8")]
    pub patches: String,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Linear coefficient (scalar).
    #[arg(long, default_value_t = -1.0)]
    pub a: f64,
    /// Input coefficient (scalar).
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    /// Quadratic coefficient (scalar).
    #[arg(long, default_value_t = 1.0)]
    pub n1: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(clap::Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub degree: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Archive directory.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(clap::Args, Debug, Serialize)]
pub struct HjbArgs {
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Probes are uniform in the ball of this radius.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Largest acceptable normalized residual.
    #[arg(long, default_value_t = 1e-8)]
    pub threshold: f64,
    /// Optional report file.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Law {
    /// The degree-d polynomial feedback of the archive.
    Feedback,
    /// Its linear part.
    Lqr,
    /// No control.
    None,
}

#[derive(clap::Args, Debug, Serialize)]
#[command(allow_negative_numbers = true)]
pub struct SimulateArgs {
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long)]
    pub chain: PathBuf,
    /// Comma-separated list, a file of numbers, or `random:<radius>`.
    #[arg(long, allow_hyphen_values = true)]
    pub y0: String,
    /// `auto` (40/|abscissa of the closed loop|) or a number.
    #[arg(long, default_value = "auto")]
    pub horizon: String,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = Law::Feedback)]
    pub law: Law,
    /// Trajectory CSV.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(clap::Args, Debug, Serialize)]
pub struct StudyArgs {
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub dmax: usize,
    /// `random`, a comma-separated list, or a file of numbers; normalized.
    #[arg(long, default_value = "random", allow_hyphen_values = true)]
    pub direction: String,
    #[arg(long, default_value_t = 1e-3)]
    pub smin: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub smax: f64,
    #[arg(long, default_value_t = 8)]
    pub points: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_steps: usize,
    /// `auto` (20/|abscissa of the closed loop|) or a number.
    #[arg(long, default_value = "auto")]
    pub horizon: String,
    #[arg(long, default_value_t = 1e-9)]
    pub oracle_tol: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub synth_tol: f64,
    /// Accepted value slopes: d+1 ± band.
    #[arg(long, default_value_t = 0.3)]
    pub value_band: f64,
    /// Accepted control slopes: [d − low, d + high].
    #[arg(long, default_value_t = 0.3)]
    pub control_band_low: f64,
    #[arg(long, default_value_t = 0.4)]
    pub control_band_high: f64,
    /// Report directory.
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Io(_) => EXIT_IO,
        Error::InvalidInput(_) | Error::Dimension(_) => EXIT_USAGE,
        Error::Validation(_)
        | Error::Format(_)
        | Error::Provenance(_)
        | Error::Unstabilizable { .. }
        | Error::NotHurwitz(_)
        | Error::Json(_) => EXIT_VALIDATION,
        Error::NoConvergence { .. } | Error::Residual { .. } | Error::Study(_) => EXIT_NUMERICAL,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::AtOrder { .. } => unreachable!("root() strips order annotations"),
    }
}

const SUBCOMMANDS: [&str; 5] = ["model", "synth", "hjb-check", "simulate", "taylor-study"];
const GLOBAL_KEYS: [&str; 2] = ["seed", "threads"];

/// Inserts flags from the config file right after the subcommand so that
/// flags given on the command line (which come later) override them.
fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            config = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        }
    }
    let Some(config) = config else { return Ok(args) };
    let Some(pos) = strs.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let (section, insert_at) = if strs[pos] == "model" {
        match strs.get(pos + 1) {
            Some(a) if a == "gen" => ("model-gen".to_string(), pos + 2),
            _ => return Ok(args),
        }
    } else {
        (strs[pos].clone(), pos + 1)
    };
    let text = std::fs::read_to_string(&config)?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::InvalidInput(format!("config {config}: {e}")))?;
    let mut extra = Vec::new();
    let mut push = |key: &str, value: &toml::Value| -> Result<()> {
        let flag = format!("--{}", key.replace('_', "-"));
        let v = match value {
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => return Err(Error::InvalidInput(format!("config key `{key}` has unsupported value {other}"))),
        };
        extra.push(OsString::from(format!("{flag}={v}")));
        Ok(())
    };
    for (key, value) in &table {
        match value {
            toml::Value::Table(sub) if *key == section => {
                for (k, v) in sub {
                    push(k, v)?;
                }
            }
            toml::Value::Table(_) => {}
            v if GLOBAL_KEYS.contains(&key.as_str()) => push(key, v)?,
            _ => {
                return Err(Error::InvalidInput(format!(
                    "config key `{key}` must be `seed`, `threads` or sit in a [subcommand] table"
                )))
            }
        }
    }
    let mut merged = args;
    merged.splice(insert_at..insert_at, extra);
    Ok(merged)
}

fn command() -> clap::Command {
    fn override_all(cmd: clap::Command) -> clap::Command {
        let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
        let mut cmd = cmd.args_override_self(true);
        for name in names {
            cmd = cmd.mut_subcommand(name, override_all);
        }
        cmd
    }
    override_all(Cli::command())
}

/// Parses `args` (including the program name), runs the command, and
/// returns the exit code. Diagnostics go to stderr, results to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return if matches!(e, Error::Io(_)) { EXIT_IO } else { EXIT_USAGE };
        }
    };
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let started = Instant::now();
    let mut manifest = Manifest::new();
    let config = serde_json::to_value(cli)?;
    flatten("config", &config, &mut manifest);
    manifest.set("tool_version", env!("CARGO_PKG_VERSION"));
    let stamp = |m: &mut Manifest| {
        m.set("wall_clock_seconds", format!("{:.3}", started.elapsed().as_secs_f64()));
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        m.set("finished_unix_time", now);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    match &cli.command {
        Command::Model { action: ModelAction::Gen(a) } => cmd_model_gen(a, &mut manifest, stamp),
        Command::Synth(a) => cmd_synth(a, &mut manifest, stamp),
        Command::HjbCheck(a) => cmd_hjb_check(a, &mut rng, &mut manifest, stamp),
        Command::Simulate(a) => cmd_simulate(a, &mut rng, &mut manifest, stamp),
        Command::TaylorStudy(a) => cmd_taylor_study(a, &mut rng, &mut manifest, stamp),
    }
}

fn flatten(prefix: &str, value: &serde_json::Value, out: &mut Manifest) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        serde_json::Value::Null => {
            out.set(prefix, "none");
        }
        serde_json::Value::String(s) => {
            out.set(prefix, s);
        }
        other => {
            out.set(prefix, other);
        }
    }
}

/// `dir/stem.manifest.txt` for a file output.
fn sibling_manifest(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
    path.with_file_name(format!("{stem}.manifest.txt"))
}

fn parse_patches(text: &str) -> Result<Vec<(f64, f64)>> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::InvalidInput("--patches must list at least one lo:hi pair".into()));
    }
    text.split(',')
        .map(|p| {
            let (lo, hi) = p
                .split_once(':')
                .ok_or_else(|| Error::InvalidInput(format!("patch `{p}` is not of the form lo:hi")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("patch bound `{s}` is not a number")))
            };
            Ok((num(lo)?, num(hi)?))
        })
        .collect()
}

fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::InvalidInput(format!("`{s}` is not a number"))))
        .collect()
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Uniform sample from the ball of radius `r`.
fn random_in_ball(n: usize, r: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dir = random_unit(n, rng);
    let rho = r * rng.random::<f64>().powf(1.0 / n as f64);
    dir.iter().map(|x| rho * x).collect()
}

/// A vector given as a literal list, a file of numbers, or `random:<radius>`.
fn parse_vector(spec: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let v = if let Some(r) = spec.strip_prefix("random:") {
        let r: f64 = r
            .parse()
            .map_err(|_| Error::InvalidInput(format!("`{spec}`: radius is not a number")))?;
        random_unit(n, rng).iter().map(|x| r * x).collect()
    } else if Path::new(spec).is_file() {
        parse_numbers(&std::fs::read_to_string(spec)?)?
    } else {
        parse_numbers(spec)?
    };
    if v.len() != n {
        return Err(Error::Dimension(format!("vector `{spec}` has {} entries, system dimension is {n}", v.len())));
    }
    Ok(v)
}

fn parse_horizon(spec: &str) -> Result<Option<f64>> {
    if spec == "auto" {
        return Ok(None);
    }
    let t: f64 = spec
        .parse()
        .map_err(|_| Error::InvalidInput(format!("horizon `{spec}` is neither `auto` nor a number")))?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {t}")));
    }
    Ok(Some(t))
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(", ")
}

fn cmd_model_gen(a: &GenArgs, manifest: &mut Manifest, stamp: impl Fn(&mut Manifest)) -> Result<i32> {
    let sys = match a.kind {
        Kind::Burgers => {
            let cfg = BurgersConfig {
                n_modes: a.n,
                nu: a.nu,
                mu: a.mu,
                control_patches: parse_patches(&a.patches)?,
                alpha: a.alpha,
            };
            let sys = make_burgers(&cfg)?;
            let unstable: Vec<usize> = (1..=a.n).filter(|&j| cfg.mode_eigenvalue(j) > 0.0).collect();
            println!("unstable modes: {} {:?}", unstable.len(), unstable);
            sys
        }
        Kind::Scalar => make_scalar(a.a, a.b, a.n1, a.alpha)?,
    };
    sys.save(&a.output)?;
    println!("system: {}", sys.label());
    println!("n = {}, m = {}, alpha = {}", sys.n(), sys.m(), sys.alpha());
    println!("hash: {}", sys.content_hash());
    manifest.set("system_hash", sys.content_hash());
    stamp(manifest);
    manifest.save(sibling_manifest(&a.output))?;
    Ok(EXIT_OK)
}

fn cmd_synth(a: &SynthArgs, manifest: &mut Manifest, stamp: impl Fn(&mut Manifest)) -> Result<i32> {
    let sys = QuadraticControlSystem::load(&a.system)?;
    check_stabilizable(&sys)?;
    let syn = synthesize(&sys, a.degree, a.tol)?;
    println!("riccati residual: {:.3e} ({} Newton steps)", syn.riccati.residual_norm, syn.riccati.iterations);
    println!("closed-loop spectral abscissa: {:.6e}", syn.riccati.spectral_abscissa);
    for eq in &syn.equations {
        println!("order {}: lyapunov residual {:.3e}", eq.k, eq.residual_norm);
    }
    if let Some(h) = syn.expansion.provenance.hjb_check {
        println!("hjb probe residual: {h:.3e}");
    }
    stamp(manifest);
    save_expansion(&a.output, &syn.expansion, manifest)?;
    Ok(EXIT_OK)
}

fn cmd_hjb_check(a: &HjbArgs, rng: &mut ChaCha8Rng, manifest: &mut Manifest, stamp: impl Fn(&mut Manifest)) -> Result<i32> {
    let sys = QuadraticControlSystem::load(&a.system)?;
    let exp = load_expansion(&a.chain, &sys)?;
    if a.samples == 0 || !(a.radius > 0.0) {
        return Err(Error::InvalidInput("need at least one sample and a positive radius".into()));
    }
    let probes: Vec<Vec<f64>> = (0..a.samples).map(|_| random_in_ball(sys.n(), a.radius, rng)).collect();
    let mut worst = 0.0f64;
    for y in &probes {
        worst = worst.max(exp.hjb_normalized(&sys, y)?);
    }
    let pass = worst <= a.threshold;
    println!("max normalized hjb residual over {} probes (radius {}): {worst:.3e}", a.samples, a.radius);
    println!("threshold {:.3e}: {}", a.threshold, if pass { "pass" } else { "FAIL" });
    if let Some(out) = &a.output {
        std::fs::write(out, format!("max_normalized_residual={worst:e}\npass={pass}\n"))?;
        manifest.set("system_hash", sys.content_hash());
        stamp(manifest);
        manifest.save(sibling_manifest(out))?;
    }
    Ok(if pass { EXIT_OK } else { EXIT_NUMERICAL })
}

fn cmd_simulate(a: &SimulateArgs, rng: &mut ChaCha8Rng, manifest: &mut Manifest, stamp: impl Fn(&mut Manifest)) -> Result<i32> {
    let sys = QuadraticControlSystem::load(&a.system)?;
    let exp = load_expansion(&a.chain, &sys)?;
    let y0 = parse_vector(&a.y0, sys.n(), rng)?;
    let horizon = match parse_horizon(&a.horizon)? {
        Some(t) => t,
        None => default_horizon(&sys, &exp)?,
    };
    let opts = SimOptions::new(horizon, a.tol);
    let traj = match a.law {
        Law::Feedback => integrate_closed_loop(&sys, &exp, &y0, &opts)?,
        Law::Lqr => integrate_lqr(&sys, &exp, &y0, &opts)?,
        Law::None => integrate_uncontrolled(&sys, &y0, &opts)?,
    };
    traj.save_csv(&a.output)?;
    manifest.set("system_hash", sys.content_hash());
    manifest.set("y0", fmt_vec(&y0));
    manifest.set("horizon", horizon);
    manifest.set("accepted_steps", traj.accepted_steps);
    if traj.diverged {
        eprintln!(
            "trajectory diverged at t = {:.6e}; last state: [{}]",
            traj.final_time(),
            fmt_vec(traj.final_state())
        );
        manifest.set("diverged", true);
        stamp(manifest);
        manifest.save(sibling_manifest(&a.output))?;
        return Ok(EXIT_DIVERGED);
    }
    let j = cost_j(&traj)?;
    let jd = cost_jd(&traj)?;
    println!("horizon: {horizon:.6e} ({} steps)", traj.accepted_steps);
    println!("J   = {j:.12e} (tail {:.3e})", traj.tail_estimate);
    println!("J_d = {jd:.12e} (r_d tail bound {:.3e})", traj.tail_rd);
    println!("V_d(y0) = {:.12e}", exp.eval_vd(&y0)?);
    println!("final |y| = {:.3e}", traj.final_state().iter().map(|x| x * x).sum::<f64>().sqrt());
    manifest.set("J", format!("{j:e}")).set("J_d", format!("{jd:e}"));
    if a.law == Law::Feedback {
        let dp = dp_identity_check(&traj, &exp, &sys)?;
        println!("dp identity defect = {dp:.3e}");
        manifest.set("dp_identity", format!("{dp:e}"));
    }
    stamp(manifest);
    manifest.save(sibling_manifest(&a.output))?;
    Ok(EXIT_OK)
}

fn cmd_taylor_study(a: &StudyArgs, rng: &mut ChaCha8Rng, manifest: &mut Manifest, stamp: impl Fn(&mut Manifest)) -> Result<i32> {
    let sys = QuadraticControlSystem::load(&a.system)?;
    if a.dmax < 2 {
        return Err(Error::InvalidInput("--dmax must be at least 2".into()));
    }
    let direction = if a.direction == "random" {
        random_unit(sys.n(), rng)
    } else {
        let v = parse_vector(&a.direction, sys.n(), rng)?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput("direction must be nonzero".into()));
        }
        v.iter().map(|x| x / norm).collect()
    };
    let full = synthesize(&sys, a.dmax, a.synth_tol)?.expansion;
    let expansions: Vec<ValueExpansion> = (2..=a.dmax).map(|d| full.truncated(d)).collect::<Result<_>>()?;
    let mut cfg = StudyConfig::new(direction.clone(), geometric_grid(a.smin, a.smax, a.points)?);
    cfg.horizon = parse_horizon(&a.horizon)?;
    cfg.n_steps = a.n_steps;
    cfg.oracle = OracleOptions {
        tol: a.oracle_tol,
        ..OracleOptions::default()
    };
    let report = taylor_order_study(&sys, &expansions, &cfg)?;
    print!("{}", report.summary());

    let mut misses = Vec::new();
    for f in &report.fits {
        if let FitStatus::Fitted { slope, .. } = f.status {
            let d = f.d as f64;
            let (lo, hi) = match f.quantity {
                "value" => (d + 1.0 - a.value_band, d + 1.0 + a.value_band),
                _ => (d - a.control_band_low, d + a.control_band_high),
            };
            if !(lo..=hi).contains(&slope) {
                misses.push(format!("d={} {} slope {slope:.3} outside [{lo:.2}, {hi:.2}]", f.d, f.quantity));
            }
        }
    }
    let violations = report.ordering_violations().len();
    manifest.set("system_hash", sys.content_hash());
    manifest.set("direction", fmt_vec(&direction));
    manifest.set("horizon", report.horizon);
    manifest.set("band_misses", misses.len());
    manifest.set("ordering_violations", violations);
    stamp(manifest);
    report.save(&a.output, manifest)?;
    for m in &misses {
        eprintln!("band miss: {m}");
    }
    if violations > 0 {
        eprintln!("ordering V_hat <= J_cl + slack violated on {violations} rows");
    }
    Ok(if misses.is_empty() && violations == 0 { EXIT_OK } else { EXIT_NUMERICAL })
}
