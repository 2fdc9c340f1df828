//! Command-line front end: run the frequency-preserving iteration on a
//! configured problem, build and probe nowhere-Hölder function families,
//! certify Diophantine vectors, and compare moduli of continuity.
//!
//! Exit codes: 0 success (converged or step budget exhausted), 2 configuration
//! error, 3 certification failure, 4 non-contraction, 5 translation failure.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kamtori::driver::{run, verify_torus, Termination};
use kamtori::regularity::{build_weierstrass, omega_star, probe_quotient_growth, BSequence};
use kamtori::{check_diophantine, compare_moduli, DiophCheck, Error as EngineError};

use config::{parse_modulus, FileConfig, Overrides};
use output::{write_atomic, write_json_atomic};

#[derive(Parser)]
#[command(
    name = "kamtori",
    about = "Frequency-preserving KAM iteration engine and weak-regularity toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Path to a TOML config, or a builtin name ("smooth-benchmark", "example-7.2").
    #[arg(long)]
    config: String,
    /// Output directory for trace.jsonl, summary.json, steps.csv, resolved_config.toml.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on the per-step Fourier cutoff and the certification scan depth.
    #[arg(long)]
    kmax: Option<u64>,
}

#[derive(Args, Clone)]
struct PathologicalArgs {
    /// Target modulus the family must escape everywhere, e.g. "holder:0.5".
    #[arg(long, default_value = "holder:0.5")]
    modulus: String,
    /// Amplitude decay rate: b_n = e^{-c n^2}.
    #[arg(long, default_value_t = 5.0)]
    c: f64,
    /// Number of explicitly constructed frequencies (M).
    #[arg(long, default_value_t = 4)]
    terms: usize,
    /// Probe location for the quotient-growth scan.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    probe_x: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CheckDiophArgs {
    /// Comma-separated frequency components, e.g. "1,1.6180339887".
    omega: String,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 1.2)]
    tau: f64,
    #[arg(long, default_value_t = 100)]
    kmax: u64,
    /// Optional path for the certificate JSON (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CompareModuliArgs {
    /// Candidate lower modulus, e.g. "holder:0.5".
    first: String,
    /// Candidate upper modulus, e.g. "log-lipschitz".
    second: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the iteration on a configured problem and write trace artifacts.
    Run(RunArgs),
    /// Build a nowhere-Hölder Weierstrass-type family and probe it.
    Pathological(PathologicalArgs),
    /// Certify a frequency vector against the Diophantine condition.
    CheckDioph(CheckDiophArgs),
    /// Compare two moduli of continuity on a dyadic grid.
    CompareModuli(CompareModuliArgs),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_CERT: u8 = 3;
const EXIT_NON_CONTRACTION: u8 = 4;
const EXIT_TRANSLATION: u8 = 5;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(a) => cmd_run(a),
        Command::Pathological(a) => cmd_pathological(a),
        Command::CheckDioph(a) => cmd_check_dioph(a),
        Command::CompareModuli(a) => cmd_compare_moduli(a),
    }
}

#[derive(Serialize)]
struct TraceHeader<'a> {
    schedule: &'a kamtori::schedule::Schedule,
    gamma: f64,
    problem: &'a str,
    eps: f64,
    cert: &'a kamtori::DiophantineCert,
    convexity: &'a kamtori::frequency::ConvexityReport,
}

#[derive(Serialize)]
struct Summary<'a> {
    termination: &'a Termination,
    final_xi: &'a [f64],
    final_freq_residual: f64,
    contraction_exponent: Option<f64>,
    p_norms: &'a [f64],
    torus: Option<kamtori::driver::TorusDefect>,
}

fn cmd_run(a: RunArgs) -> ExitCode {
    let file: FileConfig = if std::path::Path::new(&a.config).is_file() {
        let text = match std::fs::read_to_string(&a.config) {
            Ok(t) => t,
            Err(e) => return fail(EXIT_CONFIG, format!("reading {}: {e}", a.config)),
        };
        match toml::from_str(&text) {
            Ok(f) => f,
            Err(e) => return fail(EXIT_CONFIG, format!("parsing {}: {e}", a.config)),
        }
    } else if a.config.contains('.') && !matches!(a.config.as_str(), "example-7.2") {
        return fail(EXIT_CONFIG, format!("config file not found: {}", a.config));
    } else {
        FileConfig {
            builtin: Some(a.config.clone()),
            problem: None,
            run: None,
        }
    };
    let over = Overrides {
        eps: a.eps,
        tau: a.tau,
        gamma: a.gamma,
        steps: a.steps,
        seed: a.seed,
        kmax: a.kmax,
    };
    let resolved = match config::resolve(file, &over) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = std::fs::create_dir_all(&a.out) {
        return fail(EXIT_CONFIG, format!("creating {}: {e}", a.out.display()));
    }

    let echo = toml::to_string_pretty(&resolved.echo).expect("config re-serializes");
    if let Err(e) = write_atomic(&a.out.join("resolved_config.toml"), echo.as_bytes()) {
        return fail(EXIT_CONFIG, e);
    }

    let descriptor = resolved.problem.map.descriptor.clone();
    let eps = resolved.problem.eps;
    let omega0 = resolved.problem.map.omega0();
    let outcome = match run(resolved.problem, &resolved.run) {
        Ok(o) => o,
        Err(
            e @ (EngineError::DiophantineViolation { .. } | EngineError::ConvexityFailed { .. }),
        ) => return fail(EXIT_CERT, e),
        Err(e) => return fail(EXIT_CONFIG, e),
    };

    let mut trace = String::new();
    let header = TraceHeader {
        schedule: &outcome.trace.schedule,
        gamma: outcome.trace.gamma,
        problem: &descriptor,
        eps,
        cert: &outcome.cert,
        convexity: &outcome.convexity,
    };
    trace.push_str(&serde_json::to_string(&header).expect("header serializes"));
    trace.push('\n');
    for report in &outcome.trace.reports {
        trace.push_str(&serde_json::to_string(report).expect("report serializes"));
        trace.push('\n');
    }
    if let Err(e) = write_atomic(&a.out.join("trace.jsonl"), trace.as_bytes()) {
        return fail(EXIT_CONFIG, e);
    }

    let mut csv = String::from("nu,p_norm,xi_increment,freq_residual\n");
    for (nu, p) in outcome.trace.p_norms.iter().enumerate() {
        let (inc, res) = if nu < outcome.trace.reports.len() {
            (
                format!("{:e}", outcome.trace.xi_increments[nu]),
                format!("{:e}", outcome.trace.freq_residuals[nu]),
            )
        } else {
            (String::new(), String::new())
        };
        csv.push_str(&format!("{nu},{p:e},{inc},{res}\n"));
    }
    if let Err(e) = write_atomic(&a.out.join("steps.csv"), csv.as_bytes()) {
        return fail(EXIT_CONFIG, e);
    }

    let torus = if outcome.trace.termination.is_success() {
        let h = outcome.final_hamiltonian();
        match verify_torus(&h, &omega0, resolved.t_verify, 8, resolved.run.seed) {
            Ok(d) => Some(d),
            Err(e) => return fail(EXIT_CONFIG, format!("torus verification: {e}")),
        }
    } else {
        None
    };
    let summary = Summary {
        termination: &outcome.trace.termination,
        final_xi: &outcome.trace.final_xi,
        final_freq_residual: outcome.trace.final_freq_residual,
        contraction_exponent: outcome.trace.contraction_exponent,
        p_norms: &outcome.trace.p_norms,
        torus,
    };
    if let Err(e) = write_json_atomic(&a.out.join("summary.json"), &summary) {
        return fail(EXIT_CONFIG, e);
    }
    println!(
        "{}",
        serde_json::to_string(&outcome.trace.termination).expect("termination serializes")
    );

    match outcome.trace.termination {
        Termination::Converged { .. } | Termination::BudgetExhausted { .. } => ExitCode::SUCCESS,
        Termination::NonContraction { .. } | Termination::StepError { .. } => {
            ExitCode::from(EXIT_NON_CONTRACTION)
        }
        Termination::TranslationFailure { .. } | Termination::BallGuard { .. } => {
            ExitCode::from(EXIT_TRANSLATION)
        }
    }
}

fn cmd_pathological(a: PathologicalArgs) -> ExitCode {
    let modulus = match parse_modulus(&a.modulus) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if !(a.c > 0.0) {
        return fail(EXIT_CONFIG, "decay rate c must be positive");
    }
    let fam = match build_weierstrass(&modulus, &BSequence::GaussianExp { c: a.c }, a.terms) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = std::fs::create_dir_all(&a.out) {
        return fail(EXIT_CONFIG, format!("creating {}: {e}", a.out.display()));
    }
    if let Err(e) = write_json_atomic(&a.out.join("family.json"), &fam) {
        return fail(EXIT_CONFIG, e);
    }

    let probes = probe_quotient_growth(&fam, a.probe_x, 1..=a.terms);
    let mut csv = String::from("m,r_m,dx,quotient,degenerate\n");
    for p in &probes {
        csv.push_str(&format!(
            "{},{:e},{:e},{:e},{}\n",
            p.m, p.r_m, p.dx, p.quotient, p.degenerate
        ));
    }
    if let Err(e) = write_atomic(&a.out.join("probe.csv"), csv.as_bytes()) {
        return fail(EXIT_CONFIG, e);
    }

    let mut csv = String::from("h,omega_star\n");
    for j in 0..=40 {
        let h = 2f64.powi(-j);
        csv.push_str(&format!("{h:e},{:e}\n", omega_star(&fam, h)));
    }
    if let Err(e) = write_atomic(&a.out.join("omega_star.csv"), csv.as_bytes()) {
        return fail(EXIT_CONFIG, e);
    }
    println!(
        "{}",
        serde_json::to_string(&fam).expect("family serializes")
    );
    ExitCode::SUCCESS
}

fn cmd_check_dioph(a: CheckDiophArgs) -> ExitCode {
    let omega: Result<Vec<f64>, _> = a
        .omega
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect();
    let omega = match omega {
        Ok(v) if !v.is_empty() => v,
        _ => return fail(EXIT_CONFIG, format!("bad frequency vector {:?}", a.omega)),
    };
    let check = match check_diophantine(&omega, a.gamma, a.tau, a.kmax) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let text = serde_json::to_string_pretty(&check).expect("check serializes");
    println!("{text}");
    if let Some(path) = &a.out {
        if let Err(e) = write_atomic(path, format!("{text}\n").as_bytes()) {
            return fail(EXIT_CONFIG, e);
        }
    }
    match check {
        DiophCheck::Certified(_) => ExitCode::SUCCESS,
        DiophCheck::Violation { .. } => ExitCode::from(EXIT_CERT),
    }
}

fn cmd_compare_moduli(a: CompareModuliArgs) -> ExitCode {
    let first = match parse_modulus(&a.first) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let second = match parse_modulus(&a.second) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let report = compare_moduli(&first, &second);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(path) = &a.out {
        if let Err(e) = write_atomic(path, format!("{text}\n").as_bytes()) {
            return fail(EXIT_CONFIG, e);
        }
    }
    ExitCode::SUCCESS
}
