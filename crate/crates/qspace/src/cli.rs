//! Command-line front end. Exit codes: 0 success, 2 certificate failure,
//! 3 verification failure, 4 input error.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruments::compare_instruments;
use crate::simulator::{run, SimError};
use crate::solver::{build_chain, max_delay, suffix_span_dims, verify_chain_report, Ordering, SolverError};
use crate::stabilizer::{builtin, distillation_instrument, parse_code, StabilizerCode, StabilizerError, BUILTIN_NAMES};
use crate::synthesis::{synth_staircase, Circuit, SynthesisError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CERTIFICATE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_INPUT: i32 = 4;

/// Default equality tolerance, overridable by `QSPACE_TOL`.
pub const DEFAULT_TOL: f64 = 1e-8;

/// Known widths for the registry codes.
pub const KNOWN_WIDTHS: [(&str, usize); 3] = [("five_one_three", 4), ("steane", 4), ("shor", 3)];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("certificate check failed: {0}")]
    Certificate(String),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Certificate(_) => EXIT_CERTIFICATE,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

impl From<StabilizerError> for CliError {
    fn from(e: StabilizerError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        CliError::Certificate(e.to_string())
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        CliError::Certificate(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Verify(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "qspace", version, about = "Minimal-width synthesis of stabilizer distillation instruments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute T*, the optimal width and the chain certificate summary.
    Analyze {
        #[command(flatten)]
        code: CodeArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Synthesize a circuit at the optimal width.
    Synthesize {
        #[command(flatten)]
        code: CodeArg,
        #[arg(long)]
        out_circuit: PathBuf,
    },
    /// Simulate a circuit and compare it with the distillation instrument.
    Verify {
        #[command(flatten)]
        code: CodeArg,
        #[arg(long)]
        circuit: PathBuf,
        /// Defaults to QSPACE_TOL, then 1e-8.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Optimal widths of the registry codes.
    Table1 {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct CodeArg {
    /// Code description as JSON: {"name", "n", "k", "generators"}.
    #[arg(long)]
    pub code: Option<PathBuf>,
    /// One of five_one_three, steane, shor.
    #[arg(long)]
    pub builtin: Option<String>,
}

impl CodeArg {
    pub fn load(&self) -> Result<StabilizerCode, CliError> {
        match (&self.code, &self.builtin) {
            (Some(path), _) => Ok(parse_code(&std::fs::read_to_string(path)?)?),
            (None, Some(name)) => builtin(name).map_err(|_| {
                CliError::Input(format!("unknown builtin {name}; expected one of {}", BUILTIN_NAMES.join(", ")))
            }),
            (None, None) => Err(CliError::Input("pass --code or --builtin".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    /// `dim span{x_τ, z_τ : τ ≥ t}` for t = 1..T.
    pub span_dims: Vec<usize>,
    /// Rank of every `P^(t)` element, t = 1..T.
    pub ranks: Vec<usize>,
    /// Qubits factorized out, in order `A_1..A_T` (1-based).
    pub factorized_qubits: Vec<usize>,
    pub checks_passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub optimal_qubits: usize,
    pub t_star: usize,
    pub ordering: Ordering,
    pub chain: ChainSummary,
    pub elapsed_ms: f64,
}

pub fn tolerance(flag: Option<f64>) -> Result<f64, CliError> {
    if let Some(t) = flag {
        return Ok(t);
    }
    match std::env::var("QSPACE_TOL") {
        Ok(s) => s.parse().map_err(|_| CliError::Input(format!("QSPACE_TOL={s} is not a number"))),
        Err(_) => Ok(DEFAULT_TOL),
    }
}

pub fn analyze(code: &StabilizerCode) -> Result<AnalysisReport, CliError> {
    let start = Instant::now();
    let md = max_delay(code);
    let cert = build_chain(code, &md.ordering)?;
    let report = verify_chain_report(code, &cert);
    if !report.passed() {
        return Err(CliError::Certificate(format!("{report:?}")));
    }
    let chain = ChainSummary {
        span_dims: suffix_span_dims(code, &md.ordering),
        ranks: (1..=md.t_star).map(|t| 1usize << (code.n - t)).collect(),
        factorized_qubits: md.ordering.qubits.clone(),
        checks_passed: true,
    };
    Ok(AnalysisReport {
        name: code.name.clone(),
        n: code.n,
        k: code.k,
        optimal_qubits: md.optimal_qubits(code),
        t_star: md.t_star,
        ordering: md.ordering,
        chain,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn synthesize(code: &StabilizerCode) -> Result<Circuit, CliError> {
    let md = max_delay(code);
    let cert = build_chain(code, &md.ordering)?;
    let report = verify_chain_report(code, &cert);
    if !report.passed() {
        return Err(CliError::Certificate(format!("{report:?}")));
    }
    let target = distillation_instrument(code)?;
    Ok(synth_staircase(&target, &cert)?)
}

/// Per-outcome deviations and the overall verdict.
pub fn verify(code: &StabilizerCode, circuit: &Circuit, tol: f64, out: &mut dyn Write) -> Result<(), CliError> {
    let result = run(circuit)?;
    let target = distillation_instrument(code)?;
    let cmp = compare_instruments(&result.instrument, &target, tol);
    for (label, dev) in &cmp.per_outcome {
        writeln!(out, "{label}\t{dev:.3e}")?;
    }
    writeln!(out, "peak width {}", result.peak_width)?;
    if cmp.within(tol) {
        writeln!(out, "PASS max deviation {:.3e} (tol {tol:e})", cmp.max_deviation())?;
        Ok(())
    } else {
        writeln!(out, "FAIL max deviation {:.3e} (tol {tol:e})", cmp.max_deviation())?;
        Err(CliError::Verify(format!("max deviation {:e}", cmp.max_deviation())))
    }
}

pub fn table1(json: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut ok = true;
    for (name, want) in KNOWN_WIDTHS {
        let report = analyze(&builtin(name)?)?;
        ok &= report.optimal_qubits == want;
        rows.push((report, want));
    }
    if json {
        let reports: Vec<&AnalysisReport> = rows.iter().map(|(r, _)| r).collect();
        writeln!(out, "{}", serde_json::to_string_pretty(&reports).expect("reports serialize"))?;
    } else {
        writeln!(out, "{:<20} {:>3} {:>3} {:>3} {:>8}", "code", "n", "k", "T*", "qubits")?;
        for (r, want) in &rows {
            let mark = if r.optimal_qubits == *want { "" } else { "  (mismatch)" };
            writeln!(out, "{:<20} {:>3} {:>3} {:>3} {:>8}{mark}", r.name, r.n, r.k, r.t_star, r.optimal_qubits)?;
        }
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Verify("optimal widths differ from the expected table".into()))
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze { code, output } => {
            let report = analyze(&code.load()?)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match output {
                Some(path) => std::fs::write(path, text)?,
                None => writeln!(out, "{text}")?,
            }
        }
        Command::Synthesize { code, out_circuit } => {
            let circuit = synthesize(&code.load()?)?;
            std::fs::write(&out_circuit, circuit.to_json())?;
            writeln!(out, "wrote {} (width {}, {} loads)", out_circuit.display(), circuit.m, circuit.n_loads())?;
        }
        Command::Verify { code, circuit, tol } => {
            let tol = tolerance(tol)?;
            let code = code.load()?;
            let text = std::fs::read_to_string(circuit)?;
            let circuit = Circuit::from_json(&text).map_err(|e| CliError::Input(e.to_string()))?;
            verify(&code, &circuit, tol, out)?;
        }
        Command::Table1 { json } => table1(json, out)?,
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Errors go to `err`.
pub fn main_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}
