//! Command-line front end: config ingestion, the five subcommands and
//! report emission.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Error;
use crate::gadgets::CouplingTable;
use crate::oracle;
use crate::protocols::{
    self, analytic_success_scheme1, run_mixed, CasePair, EnumerationRow, PairParams, ProtocolOutcome, Scheme,
    SchemeParams,
};
use crate::report::{write_atomic, Cell, Format, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const RNG_NAME: &str = "ChaCha8 (rand_chacha 0.9), stream = trial index";

#[derive(Debug, Parser)]
#[command(name = "hyperconc", version, about = "Hyperentanglement concentration and purification simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scheme over the configured case mixture (or one --case).
    Run(Opts),
    /// One row per case: 16 for scheme 1, 256 for scheme 2.
    Enumerate(Opts),
    /// Success probability and fidelity over a grid of one or two amplitudes.
    Sweep(Opts),
    /// Seeded sampling of cases and measurement outcomes.
    MonteCarlo(Opts),
    /// Compare the pipeline against the dense density-matrix oracle.
    Verify(Opts),
}

fn parse_complex(s: &str) -> Result<Complex64, String> {
    Complex64::from_str(s.trim()).map_err(|_| format!("`{s}` is not a real or complex number"))
}

fn parse_weights(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("`{x}` is not a number")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 comma-separated weights, got {}", v.len()))
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// Flat `key = value` file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<u8>,
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    pub alpha: Option<Complex64>,
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    pub beta: Option<Complex64>,
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    pub gamma: Option<Complex64>,
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    pub delta: Option<Complex64>,
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    pub epsilon: Option<Complex64>,
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    pub eta: Option<Complex64>,
    #[arg(long = "alpha-cd", value_parser = parse_complex, allow_hyphen_values = true)]
    pub alpha_cd: Option<Complex64>,
    #[arg(long = "beta-cd", value_parser = parse_complex, allow_hyphen_values = true)]
    pub beta_cd: Option<Complex64>,
    #[arg(long = "gamma-cd", value_parser = parse_complex, allow_hyphen_values = true)]
    pub gamma_cd: Option<Complex64>,
    #[arg(long = "delta-cd", value_parser = parse_complex, allow_hyphen_values = true)]
    pub delta_cd: Option<Complex64>,
    #[arg(long = "epsilon-cd", value_parser = parse_complex, allow_hyphen_values = true)]
    pub epsilon_cd: Option<Complex64>,
    #[arg(long = "eta-cd", value_parser = parse_complex, allow_hyphen_values = true)]
    pub eta_cd: Option<Complex64>,
    /// F1,F2,F3,F4
    #[arg(long = "pol-weights", value_parser = parse_weights)]
    pub pol_weights: Option<[f64; 4]>,
    /// G1,G2,G3,G4 (scheme 2)
    #[arg(long = "spatial-weights", value_parser = parse_weights)]
    pub spatial_weights: Option<[f64; 4]>,
    /// `pab,pcd` for scheme 1, `pab,sab,pcd,scd` for scheme 2.
    #[arg(long)]
    pub case: Option<String>,
    /// `param:lo:hi:steps`, at most twice.
    #[arg(long)]
    pub sweep: Vec<String>,
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long = "coupling-file")]
    pub coupling_file: Option<PathBuf>,
}

/// Failure of a CLI invocation, with its exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Verification(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        match e {
            Error::Constraint(_) | Error::Normalization(_) | Error::InvalidCase(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

const AMPLITUDES: [&str; 6] = ["alpha", "beta", "gamma", "delta", "epsilon", "eta"];

/// One swept amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub param: String,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl SweepSpec {
    pub fn parse(s: &str) -> Result<SweepSpec, String> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [param, lo, hi, steps] = parts[..] else {
            return Err(format!("sweep `{s}` is not `param:lo:hi:steps`"));
        };
        if amplitude_slot(param).is_none() {
            return Err(format!("cannot sweep `{param}`; expected one of the amplitudes"));
        }
        let num = |x: &str| x.parse::<f64>().map_err(|_| format!("`{x}` is not a number"));
        let spec = SweepSpec {
            param: param.to_string(),
            lo: num(lo)?,
            hi: num(hi)?,
            steps: steps.parse().map_err(|_| format!("`{steps}` is not a step count"))?,
        };
        if spec.steps == 0 {
            return Err("sweep needs at least one step".into());
        }
        for v in [spec.lo, spec.hi] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("sweep bound {v} for `{param}` is outside [0, 1]"));
            }
        }
        Ok(spec)
    }

    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.lo];
        }
        (0..self.steps)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

impl std::fmt::Display for SweepSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}:{}", self.param, self.lo, self.hi, self.steps)
    }
}

/// `alpha` → (false, 0), `eta-cd` → (true, 5).
fn amplitude_slot(name: &str) -> Option<(bool, usize)> {
    let (base, cd) = match name.strip_suffix("-cd") {
        Some(b) => (b, true),
        None => (name, false),
    };
    AMPLITUDES.iter().position(|a| *a == base).map(|i| (cd, i))
}

fn slot_name(cd: bool, i: usize) -> String {
    if cd {
        format!("{}-cd", AMPLITUDES[i])
    } else {
        AMPLITUDES[i].to_string()
    }
}

/// Everything a subcommand needs, with explicit values only. Unset
/// amplitudes are completed by [`RunConfig::params`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub scheme: Option<u8>,
    pub ab: [Option<Complex64>; 6],
    pub cd: [Option<Complex64>; 6],
    pub pol_weights: Option<[f64; 4]>,
    pub spatial_weights: Option<[f64; 4]>,
    pub case: Option<CasePair>,
    pub sweeps: Vec<SweepSpec>,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    pub tolerance: Option<f64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub coupling_file: Option<PathBuf>,
}

fn fmt_complex(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{}", z.re)
    } else if z.im < 0.0 {
        format!("{}-{}i", z.re, -z.im)
    } else {
        format!("{}+{}i", z.re, z.im)
    }
}

fn fmt_weights(w: &[f64; 4]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_case(s: &str) -> Result<CasePair, String> {
    let v: Vec<u8> = s
        .split(',')
        .map(|x| {
            x.trim()
                .trim_start_matches(['p', 's'])
                .parse::<u8>()
                .map_err(|_| format!("`{x}` is not a case index"))
        })
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, c] => Ok(CasePair::scheme1(a, c)),
        [a, sa, c, sc] => Ok(CasePair::scheme2(a, sa, c, sc)),
        _ => Err(format!("case `{s}` needs 2 (scheme 1) or 4 (scheme 2) indices")),
    }
}

fn case_text(c: &CasePair) -> String {
    match c.spatial {
        None => format!("{},{}", c.pol_ab, c.pol_cd),
        Some((sa, sc)) => format!("{},{},{},{}", c.pol_ab, sa, c.pol_cd, sc),
    }
}

impl RunConfig {
    /// Parses the flat `key = value` form. `#` starts a comment. Errors
    /// carry the line number and key.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |field: &str, msg: String| CliError::Config(format!("{origin}:{}: field `{field}`: {msg}", n + 1));
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("{origin}:{}: expected `key = value`", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|m| at(key, m))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if let Some((cd, i)) = amplitude_slot(key) {
            let z = parse_complex(value)?;
            if cd {
                self.cd[i] = Some(z);
            } else {
                self.ab[i] = Some(z);
            }
            return Ok(());
        }
        let num = |v: &str| v.parse::<u64>().map_err(|_| format!("`{v}` is not a nonnegative integer"));
        match key {
            "scheme" => self.scheme = Some(num(value)?.try_into().map_err(|_| "scheme out of range".to_string())?),
            "pol-weights" => self.pol_weights = Some(parse_weights(value)?),
            "spatial-weights" => self.spatial_weights = Some(parse_weights(value)?),
            "case" => self.case = Some(parse_case(value)?),
            "sweep" => self.sweeps.push(SweepSpec::parse(value)?),
            "trials" => self.trials = Some(num(value)?),
            "seed" => self.seed = Some(num(value)?),
            "tolerance" => {
                self.tolerance = Some(value.parse().map_err(|_| format!("`{value}` is not a number"))?)
            }
            "out" => self.out = Some(PathBuf::from(value)),
            "format" => {
                self.format = Some(Format::from_name(value).ok_or_else(|| format!("unknown format `{value}`"))?)
            }
            "coupling-file" => self.coupling_file = Some(PathBuf::from(value)),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// The keys that affect results, in canonical form. Reports carry its
    /// hash, so the output path and format do not change the header.
    pub fn identity_text(&self) -> String {
        RunConfig {
            out: None,
            format: None,
            ..self.clone()
        }
        .to_text()
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(x) = self.scheme {
            let _ = writeln!(s, "scheme = {x}");
        }
        for (cd, vals) in [(false, &self.ab), (true, &self.cd)] {
            for (i, v) in vals.iter().enumerate() {
                if let Some(z) = v {
                    let _ = writeln!(s, "{} = {}", slot_name(cd, i), fmt_complex(*z));
                }
            }
        }
        if let Some(w) = &self.pol_weights {
            let _ = writeln!(s, "pol-weights = {}", fmt_weights(w));
        }
        if let Some(w) = &self.spatial_weights {
            let _ = writeln!(s, "spatial-weights = {}", fmt_weights(w));
        }
        if let Some(c) = &self.case {
            let _ = writeln!(s, "case = {}", case_text(c));
        }
        for sw in &self.sweeps {
            let _ = writeln!(s, "sweep = {sw}");
        }
        if let Some(x) = self.trials {
            let _ = writeln!(s, "trials = {x}");
        }
        if let Some(x) = self.seed {
            let _ = writeln!(s, "seed = {x}");
        }
        if let Some(x) = self.tolerance {
            let _ = writeln!(s, "tolerance = {x}");
        }
        if let Some(x) = &self.out {
            let _ = writeln!(s, "out = {}", x.display());
        }
        if let Some(x) = self.format {
            let _ = writeln!(s, "format = {}", x.name());
        }
        if let Some(x) = &self.coupling_file {
            let _ = writeln!(s, "coupling-file = {}", x.display());
        }
        s
    }

    pub fn from_opts(o: &Opts) -> Result<RunConfig, CliError> {
        let sweeps = o
            .sweep
            .iter()
            .map(|s| SweepSpec::parse(s).map_err(|m| CliError::Config(format!("--sweep: {m}"))))
            .collect::<Result<_, _>>()?;
        let case = o
            .case
            .as_deref()
            .map(parse_case)
            .transpose()
            .map_err(|m| CliError::Config(format!("--case: {m}")))?;
        Ok(RunConfig {
            scheme: o.scheme,
            ab: [o.alpha, o.beta, o.gamma, o.delta, o.epsilon, o.eta],
            cd: [o.alpha_cd, o.beta_cd, o.gamma_cd, o.delta_cd, o.epsilon_cd, o.eta_cd],
            pol_weights: o.pol_weights,
            spatial_weights: o.spatial_weights,
            case,
            sweeps,
            trials: o.trials,
            seed: o.seed,
            tolerance: o.tolerance,
            out: o.out.clone(),
            format: o.format,
            coupling_file: o.coupling_file.clone(),
        })
    }

    /// `other` wins wherever it has a value.
    pub fn overridden_by(mut self, other: RunConfig) -> RunConfig {
        fn pick<T>(a: &mut Option<T>, b: Option<T>) {
            if b.is_some() {
                *a = b;
            }
        }
        pick(&mut self.scheme, other.scheme);
        for i in 0..6 {
            pick(&mut self.ab[i], other.ab[i]);
            pick(&mut self.cd[i], other.cd[i]);
        }
        pick(&mut self.pol_weights, other.pol_weights);
        pick(&mut self.spatial_weights, other.spatial_weights);
        pick(&mut self.case, other.case);
        if !other.sweeps.is_empty() {
            self.sweeps = other.sweeps;
        }
        pick(&mut self.trials, other.trials);
        pick(&mut self.seed, other.seed);
        pick(&mut self.tolerance, other.tolerance);
        pick(&mut self.out, other.out);
        pick(&mut self.format, other.format);
        pick(&mut self.coupling_file, other.coupling_file);
        self
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        let n = self.scheme.unwrap_or(1);
        Scheme::from_number(n).ok_or_else(|| CliError::Config(format!("scheme must be 1 or 2, got {n}")))
    }

    /// Completes dependent amplitudes and validates everything.
    pub fn params(&self) -> Result<SchemeParams, CliError> {
        let ab = complete_pair(&self.ab, false)?;
        let cd = if self.cd.iter().any(Option::is_some) {
            let merged: Vec<Option<Complex64>> = (0..6).map(|i| self.cd[i].or(self.ab[i])).collect();
            Some(complete_pair(merged.as_slice().try_into().expect("six slots"), true)?)
        } else {
            None
        };
        let p = SchemeParams {
            ab,
            cd,
            pol_weights: self.pol_weights.unwrap_or([1.0, 0.0, 0.0, 0.0]),
            spatial_weights: self.spatial_weights.unwrap_or([1.0, 0.0, 0.0, 0.0]),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn coupling(&self) -> Result<CouplingTable, CliError> {
        let Some(path) = &self.coupling_file else {
            return Ok(CouplingTable::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        CouplingTable::parse(&text)
            .map_err(|(line, m)| CliError::Config(format!("{}:{line}: {m}", path.display())))
    }
}

/// Fills in the partner of each amplitude pair from the norm relation.
fn complete_pair(raw: &[Option<Complex64>; 6], cd: bool) -> Result<PairParams, CliError> {
    let mut v = [Complex64::new(0.0, 0.0); 6];
    for pair in 0..3 {
        let (i, j) = (2 * pair, 2 * pair + 1);
        let relation = format!("|{}|^2+|{}|^2=1", slot_name(cd, i), slot_name(cd, j));
        let partner = |x: Complex64| -> Result<Complex64, CliError> {
            let r = 1.0 - x.norm_sqr();
            if r < -1e-12 {
                return Err(CliError::Config(format!(
                    "{relation} cannot hold: |{}| > 1",
                    fmt_complex(x)
                )));
            }
            Ok(Complex64::new(r.max(0.0).sqrt(), 0.0))
        };
        let (x, y) = match (raw[i], raw[j]) {
            (None, None) => {
                let r = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                (r, r)
            }
            (Some(x), None) => (x, partner(x)?),
            (None, Some(y)) => (partner(y)?, y),
            (Some(x), Some(y)) => {
                let s = x.norm_sqr() + y.norm_sqr();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(CliError::Config(format!("{relation} is violated (sum {s})")));
                }
                (x, y)
            }
        };
        v[i] = x;
        v[j] = y;
    }
    Ok(PairParams {
        alpha: v[0],
        beta: v[1],
        gamma: v[2],
        delta: v[3],
        epsilon: v[4],
        eta: v[5],
    })
}

/// Entry point used by the binary. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(out) => {
            emit(&out);
            EXIT_OK
        }
        Err((e, out)) => {
            if let Some(out) = out {
                emit(&out);
            }
            eprintln!("hyperconc: {e}");
            e.exit_code()
        }
    }
}

/// Stdout write that tolerates a closed pipe.
fn emit(text: &str) {
    use std::io::Write as _;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

type Outcome = Result<String, (CliError, Option<String>)>;

/// Runs a subcommand; returns what should go to stdout.
pub fn execute(cmd: &Command) -> Outcome {
    let (name, opts) = match cmd {
        Command::Run(o) => ("run", o),
        Command::Enumerate(o) => ("enumerate", o),
        Command::Sweep(o) => ("sweep", o),
        Command::MonteCarlo(o) => ("monte-carlo", o),
        Command::Verify(o) => ("verify", o),
    };
    let cfg = load_config(opts).map_err(|e| (e, None))?;
    let (report, verdict) = build_report(name, &cfg).map_err(|e| (e, None))?;
    let format = cfg.format.unwrap_or_else(|| match &cfg.out {
        Some(p) if p.extension().is_some_and(|e| e == "json") => Format::Json,
        _ => Format::Csv,
    });
    let text = report.render(format);
    let stdout = match &cfg.out {
        Some(path) => {
            write_atomic(path, &text)
                .map_err(|e| (CliError::Runtime(format!("{}: {e}", path.display())), None))?;
            summary_text(&report)
        }
        None => text,
    };
    match verdict {
        Some(msg) => Err((CliError::Verification(msg), Some(stdout))),
        None => Ok(stdout),
    }
}

fn summary_text(r: &Report) -> String {
    let mut s = String::new();
    for (k, v) in &r.summary {
        let v = match v {
            Cell::Float(x) => crate::numfmt::sig15(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(t) => t.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        };
        let _ = writeln!(s, "{k} {v}");
    }
    s
}

pub fn load_config(opts: &Opts) -> Result<RunConfig, CliError> {
    let flags = RunConfig::from_opts(opts)?;
    let base = match &opts.config {
        Some(path) => read_config(path)?,
        None => RunConfig::default(),
    };
    Ok(base.overridden_by(flags))
}

pub fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text, &path.display().to_string())
}

/// Builds the report for `command`. The second value is set when a
/// verification failed.
pub fn build_report(command: &str, cfg: &RunConfig) -> Result<(Report, Option<String>), CliError> {
    match command {
        "run" => cmd_run(cfg).map(|r| (r, None)),
        "enumerate" => cmd_enumerate(cfg).map(|r| (r, None)),
        "sweep" => cmd_sweep(cfg).map(|r| (r, None)),
        "monte-carlo" => cmd_monte_carlo(cfg).map(|r| (r, None)),
        "verify" => cmd_verify(cfg),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

fn analytic(scheme: Scheme, p: &SchemeParams) -> f64 {
    match scheme {
        Scheme::One => analytic_success_scheme1(p),
        Scheme::Two => 1.0,
    }
}

fn corrections_text(b: &protocols::OutcomeBranch) -> String {
    b.corrections.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

fn cmd_run(cfg: &RunConfig) -> Result<Report, CliError> {
    let scheme = cfg.scheme()?;
    let params = cfg.params()?;
    let coupling = cfg.coupling()?;
    let cases: Vec<(f64, ProtocolOutcome)> = match cfg.case {
        Some(c) => vec![(1.0, protocols::run(scheme, &params, c, &coupling)?)],
        None => run_mixed(&params, scheme, &coupling)?.cases,
    };
    let mut r = Report::new(
        "run",
        cfg.identity_text(),
        &["case", "case_weight", "outcome", "success", "probability", "fidelity", "corrections"],
    );
    let p: f64 = cases.iter().map(|(w, o)| w * o.success_probability).sum();
    let fid_sum: f64 = cases
        .iter()
        .flat_map(|(w, o)| o.successes().map(move |b| w * b.probability * b.fidelity.unwrap_or(0.0)))
        .sum();
    r.push_summary("scheme", scheme.number());
    r.push_summary("success_probability", p);
    r.push_summary("analytic_success_probability", analytic(scheme, &params));
    r.push_summary("mean_fidelity", if p > 0.0 { Some(fid_sum / p) } else { None });
    for (w, o) in &cases {
        for b in &o.branches {
            r.push_row(vec![
                o.case.to_string().into(),
                (*w).into(),
                b.label().into(),
                b.success.into(),
                b.probability.into(),
                b.fidelity.into(),
                corrections_text(b).into(),
            ]);
        }
    }
    Ok(r)
}

fn cmd_enumerate(cfg: &RunConfig) -> Result<Report, CliError> {
    let scheme = cfg.scheme()?;
    let params = cfg.params()?;
    let coupling = cfg.coupling()?;
    let rows: Vec<EnumerationRow> = match scheme {
        Scheme::One => protocols::scheme1_enumerate(&params, &coupling)?,
        Scheme::Two => protocols::scheme2_enumerate(&params, &coupling)?,
    };
    let outcome_cols: Vec<String> = match scheme {
        Scheme::One => vec!["p_success".into(), "p_failure".into()],
        Scheme::Two => ["(0,0)", "(0,2)", "(2,0)", "(2,2)"]
            .iter()
            .map(|c| format!("p_qnd2={c}"))
            .collect(),
    };
    let mut cols: Vec<String> = ["pol_ab", "spatial_ab", "pol_cd", "spatial_cd", "success_probability"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(outcome_cols.iter().cloned());
    cols.extend(["fidelity".to_string(), "corrections".to_string()]);
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut r = Report::new("enumerate", cfg.identity_text(), &col_refs);
    r.push_summary("scheme", scheme.number());
    r.push_summary("rows", rows.len());
    r.push_summary("analytic_success_probability", analytic(scheme, &params));
    let min_fid = rows.iter().filter_map(|x| x.min_fidelity).min_by(f64::total_cmp);
    r.push_summary("min_fidelity", min_fid);
    for row in &rows {
        let (sa, sc) = match row.case.spatial {
            Some((a, c)) => (Cell::from(a), Cell::from(c)),
            None => (Cell::Empty, Cell::Empty),
        };
        let mut cells = vec![
            row.case.pol_ab.into(),
            sa,
            row.case.pol_cd.into(),
            sc,
            row.success_probability.into(),
        ];
        for (i, _) in outcome_cols.iter().enumerate() {
            let p = match scheme {
                Scheme::One => row.outcome_probabilities.get(i).map(|x| x.1),
                Scheme::Two => {
                    let want = format!("qnd2={}", &outcome_cols[i]["p_qnd2=".len()..]);
                    Some(
                        row.outcome_probabilities
                            .iter()
                            .find(|(l, _)| *l == want)
                            .map_or(0.0, |x| x.1),
                    )
                }
            };
            cells.push(p.into());
        }
        cells.push(row.min_fidelity.into());
        cells.push(row.corrections.into());
        r.push_row(cells);
    }
    Ok(r)
}

/// Sets a swept amplitude and clears its partner so it is re-completed.
fn with_swept(cfg: &RunConfig, sweeps: &[SweepSpec], values: &[f64]) -> RunConfig {
    let mut c = cfg.clone();
    for (s, v) in sweeps.iter().zip(values) {
        let (cd, i) = amplitude_slot(&s.param).expect("validated");
        let slots = if cd { &mut c.cd } else { &mut c.ab };
        slots[i] = Some(Complex64::new(*v, 0.0));
    }
    c
}

fn check_sweeps(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.sweeps.is_empty() || cfg.sweeps.len() > 2 {
        return Err(CliError::Config(format!(
            "sweep needs one or two --sweep specs, got {}",
            cfg.sweeps.len()
        )));
    }
    let slots: Vec<(bool, usize)> = cfg
        .sweeps
        .iter()
        .map(|s| amplitude_slot(&s.param).expect("validated"))
        .collect();
    if slots.len() == 2 && slots[0] == slots[1] {
        return Err(CliError::Config(format!("`{}` is swept twice", cfg.sweeps[0].param)));
    }
    for &(cd, i) in &slots {
        let partner = i ^ 1;
        let name = slot_name(cd, i);
        let pname = slot_name(cd, partner);
        let relation = format!("|{name}|^2+|{pname}|^2=1");
        if slots.contains(&(cd, partner)) {
            return Err(CliError::Config(format!(
                "sweeping both `{name}` and `{pname}` conflicts with {relation}"
            )));
        }
        let explicit = if cd { cfg.cd[partner] } else { cfg.ab[partner] };
        if explicit.is_some() {
            return Err(CliError::Config(format!(
                "`{pname}` is given explicitly while `{name}` is swept; {relation} fixes it"
            )));
        }
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<Report, CliError> {
    check_sweeps(cfg)?;
    let scheme = cfg.scheme()?;
    let coupling = cfg.coupling()?;
    cfg.params()?;
    let grids: Vec<Vec<f64>> = cfg.sweeps.iter().map(SweepSpec::values).collect();
    let points: Vec<Vec<f64>> = match &grids[..] {
        [a] => a.iter().map(|x| vec![*x]).collect(),
        [a, b] => a.iter().flat_map(|x| b.iter().map(move |y| vec![*x, *y])).collect(),
        _ => unreachable!("checked"),
    };
    let rows: Vec<(Vec<f64>, f64, Option<f64>, f64)> = points
        .into_par_iter()
        .map(|pt| {
            let c = with_swept(cfg, &cfg.sweeps, &pt);
            let params = c.params()?;
            let (p, fid) = match c.case {
                Some(case) => {
                    let o = protocols::run(scheme, &params, case, &coupling)?;
                    (o.success_probability, o.mean_fidelity())
                }
                None => {
                    let m = run_mixed(&params, scheme, &coupling)?;
                    (m.success_probability, m.mean_fidelity)
                }
            };
            Ok((pt, p, fid, analytic(scheme, &params)))
        })
        .collect::<Result<_, CliError>>()?;
    let mut cols: Vec<String> = cfg.sweeps.iter().map(|s| s.param.clone()).collect();
    cols.extend(["success_probability", "analytic", "mean_fidelity"].map(String::from));
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut r = Report::new("sweep", cfg.identity_text(), &col_refs);
    r.push_summary("scheme", scheme.number());
    r.push_summary("points", rows.len());
    let peak = rows.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    r.push_summary("max_success_probability", peak);
    let worst = rows.iter().map(|x| (x.1 - x.3).abs()).fold(0.0, f64::max);
    r.push_summary("max_analytic_delta", worst);
    for (pt, p, fid, a) in rows {
        let mut cells: Vec<Cell> = pt.into_iter().map(Cell::from).collect();
        cells.extend([p.into(), a.into(), fid.into()]);
        r.push_row(cells);
    }
    Ok(r)
}

/// Per-trial result of [`monte_carlo`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub case: CasePair,
    pub outcome: String,
    pub success: bool,
    pub fidelity: Option<f64>,
}

/// Samples `trials` runs. Trial `i` uses a ChaCha8 generator seeded with
/// `seed` on stream `i`, so results do not depend on scheduling.
pub fn monte_carlo(
    scheme: Scheme,
    params: &SchemeParams,
    coupling: &CouplingTable,
    trials: u64,
    seed: u64,
) -> Result<Vec<Trial>, CliError> {
    let mixed = run_mixed(params, scheme, coupling)?;
    let case_dist = WeightedIndex::new(mixed.cases.iter().map(|(w, _)| *w))
        .map_err(|e| CliError::Config(format!("case weights: {e}")))?;
    let branch_dists: Vec<WeightedIndex<f64>> = mixed
        .cases
        .iter()
        .map(|(_, o)| WeightedIndex::new(o.branches.iter().map(|b| b.probability)))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Runtime(format!("outcome distribution: {e}")))?;
    Ok((0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t);
            let ci = case_dist.sample(&mut rng);
            let o = &mixed.cases[ci].1;
            let b = &o.branches[branch_dists[ci].sample(&mut rng)];
            Trial {
                case: o.case,
                outcome: b.label(),
                success: b.success,
                fidelity: b.fidelity,
            }
        })
        .collect())
}

fn cmd_monte_carlo(cfg: &RunConfig) -> Result<Report, CliError> {
    let scheme = cfg.scheme()?;
    let params = cfg.params()?;
    let coupling = cfg.coupling()?;
    let trials = cfg.trials.unwrap_or(10_000);
    if trials == 0 {
        return Err(CliError::Config("trials must be at least 1".into()));
    }
    let seed = cfg.seed.unwrap_or(0);
    let samples = monte_carlo(scheme, &params, &coupling, trials, seed)?;
    let successes = samples.iter().filter(|t| t.success).count();
    let n = trials as f64;
    let rate = successes as f64 / n;
    let expected = analytic(scheme, &params);
    let sigma = (expected * (1.0 - expected) / n).sqrt();
    let mut r = Report::new(
        "monte-carlo",
        cfg.identity_text(),
        &["trial", "case", "outcome", "success", "fidelity"],
    );
    r.rng = Some(format!("{RNG_NAME}, seed {seed}"));
    r.push_summary("scheme", scheme.number());
    r.push_summary("trials", trials);
    r.push_summary("successes", successes);
    r.push_summary("empirical_success", rate);
    r.push_summary("standard_error", (rate * (1.0 - rate) / n).sqrt());
    r.push_summary("analytic_success_probability", expected);
    r.push_summary("analytic_sigma", sigma);
    r.push_summary("delta", rate - expected);
    let fids: Vec<f64> = samples.iter().filter_map(|t| t.fidelity).collect();
    r.push_summary(
        "mean_fidelity",
        if fids.is_empty() { None } else { Some(fids.iter().sum::<f64>() / fids.len() as f64) },
    );
    for (i, t) in samples.iter().enumerate() {
        r.push_row(vec![
            i.into(),
            t.case.to_string().into(),
            t.outcome.clone().into(),
            t.success.into(),
            t.fidelity.into(),
        ]);
    }
    Ok(r)
}

fn cmd_verify(cfg: &RunConfig) -> Result<(Report, Option<String>), CliError> {
    let params = cfg.params()?;
    let coupling = cfg.coupling()?;
    let tol = cfg.tolerance.unwrap_or(1e-9);
    let schemes = match cfg.scheme {
        Some(_) => vec![cfg.scheme()?],
        None => vec![Scheme::One, Scheme::Two],
    };
    let mut r = Report::new(
        "verify",
        cfg.identity_text(),
        &[
            "scheme",
            "case",
            "outcome",
            "pipeline_probability",
            "oracle_probability",
            "probability_delta",
            "trace_distance",
            "oracle_fidelity",
            "case_pass",
        ],
    );
    let mut failed = 0;
    let mut cases = 0;
    let mut max_dp: f64 = 0.0;
    let mut max_td: f64 = 0.0;
    let mut problems = Vec::new();
    for scheme in schemes {
        let v = oracle::verify(scheme, &params, &coupling, tol)?;
        failed += v.failed_cases;
        cases += v.cases;
        max_dp = max_dp.max(v.max_probability_delta);
        max_td = max_td.max(v.max_trace_distance);
        for c in &v.reports {
            problems.extend(c.structural.iter().map(|s| format!("scheme {} {}: {s}", c.scheme, c.case)));
            r.push_row(vec![
                c.scheme.into(),
                c.case.clone().into(),
                "failure(total)".into(),
                Cell::Empty,
                Cell::Empty,
                c.failure_probability_delta.into(),
                Cell::Empty,
                Cell::Empty,
                c.pass.into(),
            ]);
            for b in &c.branches {
                r.push_row(vec![
                    c.scheme.into(),
                    c.case.clone().into(),
                    b.label.clone().into(),
                    b.pipeline_probability.into(),
                    b.oracle_probability.into(),
                    b.probability_delta.into(),
                    b.trace_distance.into(),
                    b.oracle_fidelity.into(),
                    c.pass.into(),
                ]);
            }
        }
    }
    r.push_summary("tolerance", tol);
    r.push_summary("cases", cases);
    r.push_summary("failed_cases", failed);
    r.push_summary("max_probability_delta", max_dp);
    r.push_summary("max_trace_distance", max_td);
    r.push_summary("pass", failed == 0);
    let verdict = (failed > 0).then(|| {
        let mut m = format!("{failed} of {cases} cases disagree with the oracle");
        if let Some(p) = problems.first() {
            m.push_str(&format!(" (first: {p})"));
        }
        m
    });
    Ok((r, verdict))
}
