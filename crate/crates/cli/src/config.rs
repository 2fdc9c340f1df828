//! TOML problem configuration: parsing, builtin expansion, and conversion
//! into an engine problem.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use kamtori::driver::{builtins, RunConfig};
use kamtori::series::{FourierTaylorSeries, MultiIndexPair};
use kamtori::step::{Problem, SeriesFamily};
use kamtori::{FrequencyMap, ModulusOfContinuity};

#[derive(Debug)]
pub enum ConfigError {
    Message(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Message(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(m: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Message(m.into()))
}

/// γ selection: the literal string "auto" (γ = ε^{1/20}) or an explicit value.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaMode {
    Value(f64),
    Named(String),
}

impl GammaMode {
    pub fn resolve(&self) -> Result<Option<f64>, ConfigError> {
        match self {
            GammaMode::Value(v) if *v > 0.0 => Ok(Some(*v)),
            GammaMode::Value(v) => err(format!("gamma must be positive, got {v}")),
            GammaMode::Named(s) if s == "auto" => Ok(None),
            GammaMode::Named(s) => err(format!("unknown gamma mode {s:?} (use \"auto\" or a number)")),
        }
    }
}

/// One perturbation term: coeff · ξ-factor · y^l · cos⟨k, x⟩
/// (for k = 0 the cosine factor is 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TermSpec {
    pub k: Vec<i64>,
    #[serde(default)]
    pub l: Vec<u32>,
    pub coeff: f64,
    /// "constant" or "linear" (multiplies by ξ_{xi_index}).
    #[serde(default = "default_xi_dep")]
    pub xi_dep: String,
    #[serde(default)]
    pub xi_index: usize,
}

fn default_xi_dep() -> String {
    "constant".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub n: usize,
    /// "identity" or "quadratic" (ω(ξ) = ξ + ξ²/10 componentwise).
    pub map: String,
    pub xi0: Vec<f64>,
    pub delta: f64,
    pub eps: f64,
    #[serde(default, rename = "term")]
    pub terms: Vec<TermSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSpec {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub tol: f64,
    #[serde(default = "default_trans_tol")]
    pub trans_tol: f64,
    #[serde(default = "default_gamma")]
    pub gamma: GammaMode,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_r0")]
    pub r0: f64,
    #[serde(default = "default_kmax")]
    pub kmax: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Verification horizon for the final torus integration.
    #[serde(default = "default_t_verify")]
    pub t_verify: f64,
}

fn default_steps() -> usize {
    5
}
fn default_trans_tol() -> f64 {
    1e-12
}
fn default_gamma() -> GammaMode {
    GammaMode::Named("auto".into())
}
fn default_tau() -> f64 {
    1.2
}
fn default_r0() -> f64 {
    0.5
}
fn default_kmax() -> u64 {
    32
}
fn default_seed() -> u64 {
    1
}
fn default_t_verify() -> f64 {
    100.0
}

impl Default for RunSpec {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

/// Top-level config file: either a builtin name or an explicit problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileConfig {
    /// "smooth-benchmark" or "example-7.2"; expanded before use. When set,
    /// [problem] must be absent. Floating-point parameters stand in for any
    /// exact-arithmetic domain restrictions of the source construction.
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub problem: Option<ProblemSpec>,
    #[serde(default)]
    pub run: Option<RunSpec>,
}

/// A fully resolved configuration: engine problem + run knobs + the expanded
/// config echoed back for inspection.
pub struct Resolved {
    pub problem: Problem,
    pub run: RunConfig,
    pub t_verify: f64,
    pub echo: FileConfig,
}

fn build_series_family(n: usize, terms: Vec<TermSpec>) -> Result<SeriesFamily, ConfigError> {
    for t in &terms {
        if t.k.len() != n || (!t.l.is_empty() && t.l.len() != n) {
            return err(format!(
                "term {:?}: index length must equal n = {n}",
                t.k
            ));
        }
        if t.xi_dep != "constant" && t.xi_dep != "linear" {
            return err(format!("term {:?}: unknown xi_dep {:?}", t.k, t.xi_dep));
        }
        if t.xi_dep == "linear" && t.xi_index >= n {
            return err(format!("term {:?}: xi_index out of range", t.k));
        }
        if t.l.iter().sum::<u32>() > 4 {
            return err(format!("term {:?}: |l| must be <= 4", t.k));
        }
    }
    Ok(Arc::new(move |xi: &[f64]| {
        let mut p = FourierTaylorSeries::zero(n, 0, 4);
        for t in &terms {
            let amp = match t.xi_dep.as_str() {
                "linear" => t.coeff * xi[t.xi_index],
                _ => t.coeff,
            };
            let l = if t.l.is_empty() { vec![0u32; n] } else { t.l.clone() };
            if t.k.iter().all(|&ki| ki == 0) {
                p.add_term(MultiIndexPair::new(t.k.clone(), l), Complex64::new(amp, 0.0));
            } else {
                let half = Complex64::new(amp / 2.0, 0.0);
                let neg: Vec<i64> = t.k.iter().map(|ki| -ki).collect();
                p.add_term(MultiIndexPair::new(t.k.clone(), l.clone()), half);
                p.add_term(MultiIndexPair::new(neg, l), half);
            }
        }
        p
    }))
}

fn build_map(spec: &ProblemSpec) -> Result<FrequencyMap, ConfigError> {
    if spec.xi0.len() != spec.n {
        return err("xi0 length must equal n");
    }
    match spec.map.as_str() {
        "identity" => FrequencyMap::identity(spec.xi0.clone(), spec.delta)
            .map_err(|e| ConfigError::Message(e.to_string())),
        "quadratic" => FrequencyMap::new(
            |xi: &[f64]| xi.iter().map(|v| v + 0.1 * v * v).collect(),
            spec.xi0.clone(),
            spec.delta,
            ModulusOfContinuity::lipschitz(),
            "quadratic",
        )
        .map_err(|e| ConfigError::Message(e.to_string())),
        other => err(format!("unknown frequency map {other:?}")),
    }
}

fn apply_run_spec(run: &RunSpec) -> Result<RunConfig, ConfigError> {
    Ok(RunConfig {
        steps: run.steps,
        tol: run.tol,
        trans_tol: run.trans_tol,
        gamma: run.gamma.resolve()?,
        tau: run.tau,
        r0: run.r0,
        k_cap: run.kmax,
        seed: run.seed,
        ..RunConfig::default()
    })
}

/// CLI flag overrides applied on top of the file config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub eps: Option<f64>,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub kmax: Option<u64>,
}

pub fn resolve(mut file: FileConfig, over: &Overrides) -> Result<Resolved, ConfigError> {
    if let Some(run) = file.run.as_mut() {
        apply_overrides_to_spec(run, over);
    } else if over.tau.is_some()
        || over.gamma.is_some()
        || over.steps.is_some()
        || over.seed.is_some()
        || over.kmax.is_some()
    {
        let mut run = RunSpec::default();
        apply_overrides_to_spec(&mut run, over);
        file.run = Some(run);
    }

    match (&file.builtin, &file.problem) {
        (Some(_), Some(_)) => err("builtin and [problem] are mutually exclusive"),
        (Some(name), None) => {
            let eps = over.eps;
            let (problem, mut cfg) = match name.as_str() {
                "smooth-benchmark" => builtins::smooth_benchmark(eps.unwrap_or(1e-6)),
                "example-7.2" => builtins::weak_regularity_instance(eps.unwrap_or(1e-8))
                    .map_err(|e| ConfigError::Message(e.to_string()))?,
                other => return err(format!("unknown builtin {other:?}")),
            };
            let mut t_verify = default_t_verify();
            if let Some(run) = &file.run {
                let explicit = apply_run_spec(run)?;
                // Builtin gamma/tau stand unless the user set them explicitly.
                cfg = RunConfig {
                    gamma: if matches!(run.gamma, GammaMode::Named(_)) && over.gamma.is_none() {
                        cfg.gamma
                    } else {
                        explicit.gamma
                    },
                    ..explicit
                };
                t_verify = run.t_verify;
            }
            Ok(Resolved {
                problem,
                run: cfg,
                t_verify,
                echo: file,
            })
        }
        (None, Some(spec)) => {
            let mut spec = spec.clone();
            if let Some(eps) = over.eps {
                spec.eps = eps;
            }
            if spec.eps <= 0.0 {
                return err(format!("eps must be positive, got {}", spec.eps));
            }
            let map = build_map(&spec)?;
            let perturbation = build_series_family(spec.n, spec.terms.clone())?;
            let run_spec = file.run.clone().unwrap_or_default();
            let run = apply_run_spec(&run_spec)?;
            let problem = Problem {
                map,
                perturbation,
                eps: spec.eps,
            };
            Ok(Resolved {
                problem,
                run,
                t_verify: run_spec.t_verify,
                echo: FileConfig {
                    builtin: None,
                    problem: Some(spec),
                    run: Some(run_spec),
                },
            })
        }
        (None, None) => err("config must contain either `builtin` or a [problem] section"),
    }
}

fn apply_overrides_to_spec(run: &mut RunSpec, over: &Overrides) {
    if let Some(v) = over.tau {
        run.tau = v;
    }
    if let Some(v) = over.gamma {
        run.gamma = GammaMode::Value(v);
    }
    if let Some(v) = over.steps {
        run.steps = v;
    }
    if let Some(v) = over.seed {
        run.seed = v;
    }
    if let Some(v) = over.kmax {
        run.kmax = v;
    }
}

/// Parse "holder:0.5" | "lipschitz" | "log-lipschitz".
pub fn parse_modulus(spec: &str) -> Result<ModulusOfContinuity, ConfigError> {
    if let Some(rest) = spec
        .strip_prefix("holder:")
        .or_else(|| spec.strip_prefix("hoelder:"))
    {
        let beta: f64 = rest
            .parse()
            .map_err(|_| ConfigError::Message(format!("bad Hölder exponent {rest:?}")))?;
        return ModulusOfContinuity::hoelder(beta).map_err(|e| ConfigError::Message(e.to_string()));
    }
    match spec {
        "lipschitz" => Ok(ModulusOfContinuity::lipschitz()),
        "log-lipschitz" => Ok(ModulusOfContinuity::log_lipschitz()),
        other => err(format!(
            "unknown modulus {other:?} (use holder:<beta>, lipschitz, log-lipschitz)"
        )),
    }
}
