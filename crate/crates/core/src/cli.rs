//! Batch front end: configuration parsing, the five commands, and
//! deterministic output writing.
//!
//! Configuration is `key=value` entries separated by newlines or commas; a
//! comma-separated piece without `=` continues the previous value, so
//! `outcome=1, x1, x2` works. Lists of specs are separated by `;`. Lines
//! starting with `#` are comments. A JSON object with the same keys is also
//! accepted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::basis::{BasisSpec, Source};
use crate::data::Dataset;
use crate::error::{DrError, Result};
use crate::estimators::{EstimateOptions, Method};
use crate::glm::{IwlsConfig, Link};
use crate::model_select::{self, SelectionGrid, SelectionOutcome};
use crate::report::{OverlapSummary, DEFAULT_OVERLAP_EPS};
use crate::semipar::{self, CTag, TauWeight};
use crate::simulate::{self, DgpConfig, GammaFn};
use crate::suite::{evaluate_suite, EstimatorTag, SuiteSpecs};
use crate::variance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Estimate,
    Replicate,
    GridSelect,
    Report,
}

impl std::str::FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "simulate" => Ok(Command::Simulate),
            "estimate" => Ok(Command::Estimate),
            "replicate" => Ok(Command::Replicate),
            "grid-select" => Ok(Command::GridSelect),
            "report" => Ok(Command::Report),
            _ => Err(format!("unknown command `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Sd,
    Range,
    Joint,
    Wald,
    Cv,
    Oracle,
}

impl std::str::FromStr for Rule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sd" => Ok(Rule::Sd),
            "range" => Ok(Rule::Range),
            "joint" => Ok(Rule::Joint),
            "wald" => Ok(Rule::Wald),
            "cv" => Ok(Rule::Cv),
            "oracle" => Ok(Rule::Oracle),
            _ => Err(format!("unknown rule `{s}`")),
        }
    }
}

/// A validated run description.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Secondary CSV output; defaults to `out` with extension `csv`.
    pub csv_out: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub noise_sd: f64,
    pub gamma: GammaFn,
    /// `None` means linear in every `x` column of the data.
    pub propensity: Option<BasisSpec>,
    pub outcome: Option<BasisSpec>,
    pub gamma_basis: BasisSpec,
    pub link: Link,
    pub method: Method,
    pub prop_specs: Vec<BasisSpec>,
    pub out_specs: Vec<BasisSpec>,
    pub estimators: Vec<EstimatorTag>,
    pub rules: Vec<Rule>,
    pub c_list: Vec<f64>,
    pub eps: f64,
    pub truncate: Option<f64>,
    pub folds: usize,
    pub bootstrap: usize,
    pub replications: usize,
    pub tau_true: Option<f64>,
    pub threads: Option<usize>,
    pub iwls: IwlsConfig,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            input: None,
            out: None,
            csv_out: None,
            n: 1000,
            seed: 1,
            noise_sd: 1.0,
            gamma: GammaFn::Null,
            propensity: None,
            outcome: None,
            gamma_basis: BasisSpec::intercept(),
            link: Link::Identity,
            method: Method::Wls,
            prop_specs: model_select::default_propensity_specs(),
            out_specs: model_select::default_outcome_specs(),
            estimators: EstimatorTag::ALL.to_vec(),
            rules: vec![Rule::Sd, Rule::Range, Rule::Joint, Rule::Wald, Rule::Cv, Rule::Oracle],
            c_list: vec![1.0, 2.0, 3.0, 4.0],
            eps: DEFAULT_OVERLAP_EPS,
            truncate: None,
            folds: 5,
            bootstrap: 200,
            replications: 100,
            tau_true: None,
            threads: None,
            iwls: IwlsConfig::default(),
        }
    }

    pub fn estimate_options(&self) -> EstimateOptions {
        EstimateOptions { iwls: self.iwls.clone(), overlap_eps: self.eps, truncate: self.truncate, sigma2: None }
    }

    fn dgp(&self) -> DgpConfig {
        DgpConfig { n: self.n, seed: self.seed, gamma: self.gamma.clone(), noise_sd: self.noise_sd }
    }

    fn csv_path(&self) -> Option<PathBuf> {
        self.csv_out.clone().or_else(|| self.out.as_ref().map(|o| o.with_extension("csv")))
    }

    /// Specs resolved against the data width.
    fn suite_specs(&self, ds: &Dataset) -> SuiteSpecs {
        let p = ds.x().ncols();
        SuiteSpecs {
            propensity: self.propensity.clone().unwrap_or_else(|| BasisSpec::linear(Source::X, p)),
            outcome: self.outcome.clone().unwrap_or_else(|| BasisSpec::linear(Source::X, p)),
            gamma: self.gamma_basis.clone(),
            link: self.link,
        }
    }
}

const KEYS: &[&str] = &[
    "command",
    "input",
    "out",
    "csv_out",
    "n",
    "seed",
    "noise_sd",
    "gamma",
    "propensity",
    "outcome",
    "gamma_basis",
    "link",
    "method",
    "prop_specs",
    "out_specs",
    "estimators",
    "rules",
    "c_list",
    "eps",
    "truncate",
    "folds",
    "bootstrap",
    "replications",
    "tau_true",
    "threads",
    "iwls_max_iter",
    "iwls_tol",
];

/// Split the key-value text into `(key, value)` pairs in order.
fn entries(text: &str) -> std::result::Result<Vec<(String, String)>, Vec<String>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let v: Value = serde_json::from_str(trimmed).map_err(|e| vec![format!("invalid JSON config: {e}")])?;
        let obj = v.as_object().ok_or_else(|| vec!["JSON config must be an object".to_string()])?;
        return Ok(obj
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    Value::String(s) => s.clone(),
                    Value::Array(a) => a
                        .iter()
                        .map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string()))
                        .collect::<Vec<_>>()
                        .join(";"),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect());
    }
    let mut out: Vec<(String, String)> = Vec::new();
    let mut errs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut started = false;
        for piece in line.split(',') {
            match piece.split_once('=') {
                Some((k, v)) => {
                    out.push((k.trim().to_string(), v.trim().to_string()));
                    started = true;
                }
                None if started => {
                    let last = out.last_mut().expect("started");
                    last.1.push(',');
                    last.1.push_str(piece.trim());
                }
                None => errs.push(format!("line {}: expected key=value, got `{}`", ln + 1, piece.trim())),
            }
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(errs)
    }
}

fn split_list(v: &str) -> Vec<&str> {
    v.split([',', ';', ' ', '\t']).filter(|s| !s.is_empty()).collect()
}

/// Parse and validate. All problems are reported together.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let pairs = entries(text).map_err(DrError::Config)?;
    parse_pairs(&pairs, None)
}

/// Parse `pairs`, with `command` supplied externally when the text has none.
pub fn parse_pairs(pairs: &[(String, String)], command: Option<Command>) -> Result<RunConfig> {
    let mut errs = Vec::new();
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in pairs {
        if !KEYS.contains(&k.as_str()) {
            errs.push(format!("unknown key `{k}`"));
            continue;
        }
        map.insert(k.as_str(), v.as_str());
    }
    let cmd = match (map.get("command"), command) {
        (Some(c), Some(given)) => match c.parse::<Command>() {
            Ok(c) if c == given => Some(c),
            Ok(_) => {
                errs.push(format!("config command `{c}` conflicts with the requested subcommand"));
                None
            }
            Err(e) => {
                errs.push(e);
                None
            }
        },
        (Some(c), None) => c.parse::<Command>().map_err(|e| errs.push(e)).ok(),
        (None, Some(given)) => Some(given),
        (None, None) => {
            errs.push("missing `command`".into());
            None
        }
    };
    let mut cfg = RunConfig::new(cmd.unwrap_or(Command::Simulate));

    macro_rules! num {
        ($key:literal, $field:expr, $ty:ty) => {
            if let Some(v) = map.get($key) {
                match v.parse::<$ty>() {
                    Ok(x) => $field = x,
                    Err(_) => errs.push(format!("`{}`: cannot parse `{}`", $key, v)),
                }
            }
        };
    }
    macro_rules! spec {
        ($key:literal) => {
            map.get($key).and_then(|v| match BasisSpec::parse(v) {
                Ok(s) => Some(s),
                Err(e) => {
                    errs.push(format!("`{}`: {e}", $key));
                    None
                }
            })
        };
    }
    cfg.input = map.get("input").map(PathBuf::from);
    cfg.out = map.get("out").map(PathBuf::from);
    cfg.csv_out = map.get("csv_out").map(PathBuf::from);
    num!("n", cfg.n, usize);
    num!("seed", cfg.seed, u64);
    num!("noise_sd", cfg.noise_sd, f64);
    num!("eps", cfg.eps, f64);
    num!("folds", cfg.folds, usize);
    num!("bootstrap", cfg.bootstrap, usize);
    num!("replications", cfg.replications, usize);
    num!("iwls_max_iter", cfg.iwls.max_iter, usize);
    num!("iwls_tol", cfg.iwls.tol, f64);
    if let Some(v) = map.get("truncate") {
        match v.parse::<f64>() {
            Ok(x) => cfg.truncate = Some(x),
            Err(_) => errs.push(format!("`truncate`: cannot parse `{v}`")),
        }
    }
    if let Some(v) = map.get("tau_true") {
        match v.parse::<f64>() {
            Ok(x) => cfg.tau_true = Some(x),
            Err(_) => errs.push(format!("`tau_true`: cannot parse `{v}`")),
        }
    }
    if let Some(v) = map.get("threads") {
        match v.parse::<usize>() {
            Ok(x) if x > 0 => cfg.threads = Some(x),
            _ => errs.push(format!("`threads`: expected a positive integer, got `{v}`")),
        }
    }
    if let Some(v) = map.get("gamma") {
        match parse_gamma(v) {
            Ok(g) => cfg.gamma = g,
            Err(e) => errs.push(e),
        }
    }
    cfg.propensity = spec!("propensity");
    cfg.outcome = spec!("outcome");
    if let Some(s) = spec!("gamma_basis") {
        cfg.gamma_basis = s;
    }
    if let Some(v) = map.get("link") {
        match v.parse::<Link>() {
            Ok(l) => cfg.link = l,
            Err(e) => errs.push(format!("`link`: {e}")),
        }
    }
    if let Some(v) = map.get("method") {
        match v.parse::<Method>() {
            Ok(m) => cfg.method = m,
            Err(e) => errs.push(format!("`method`: {e}")),
        }
    }
    for (key, field) in [("prop_specs", &mut cfg.prop_specs), ("out_specs", &mut cfg.out_specs)] {
        if let Some(v) = map.get(key) {
            if v.trim() == "default" {
                continue;
            }
            let mut specs = Vec::new();
            for part in v.split(';').filter(|p| !p.trim().is_empty()) {
                match BasisSpec::parse(part) {
                    Ok(s) => specs.push(s),
                    Err(e) => errs.push(format!("`{key}`: {e}")),
                }
            }
            *field = specs;
        }
    }
    if let Some(v) = map.get("estimators") {
        cfg.estimators.clear();
        for s in split_list(v) {
            match s.parse::<EstimatorTag>() {
                Ok(t) => cfg.estimators.push(t),
                Err(_) => errs.push(format!("`estimators`: unknown estimator `{s}`")),
            }
        }
    }
    if let Some(v) = map.get("rules") {
        cfg.rules.clear();
        for s in split_list(v) {
            match s.parse::<Rule>() {
                Ok(r) => cfg.rules.push(r),
                Err(e) => errs.push(format!("`rules`: {e}")),
            }
        }
    }
    if let Some(v) = map.get("c_list") {
        cfg.c_list.clear();
        for s in split_list(v) {
            match s.parse::<f64>() {
                Ok(c) if c >= 0.0 && c.is_finite() => cfg.c_list.push(c),
                _ => errs.push(format!("`c_list`: `{s}` is not a nonnegative number")),
            }
        }
    }

    if cmd.is_some() {
        validate(&cfg, &mut errs);
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(DrError::Config(errs))
    }
}

fn parse_gamma(v: &str) -> std::result::Result<GammaFn, String> {
    let v = v.trim();
    if v == "null" {
        return Ok(GammaFn::Null);
    }
    let body = v.strip_prefix("linear:").ok_or_else(|| format!("`gamma`: expected `null` or `linear:c0 c1 c2 c3 c4`, got `{v}`"))?;
    let c: Vec<f64> = split_list(body)
        .iter()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("`gamma`: cannot parse coefficients `{body}`"))?;
    let arr: [f64; 5] = c.try_into().map_err(|_| "`gamma`: linear needs 5 coefficients".to_string())?;
    Ok(GammaFn::Linear(arr))
}

fn validate(cfg: &RunConfig, errs: &mut Vec<String>) {
    let needs_input = matches!(cfg.command, Command::Estimate | Command::Report);
    if needs_input && cfg.input.is_none() {
        errs.push(format!("`input` is required for {:?}", cfg.command).to_lowercase());
    }
    if cfg.out.is_none() {
        errs.push("`out` is required".into());
    }
    if cfg.n < 2 {
        errs.push(format!("`n` must be at least 2, got {}", cfg.n));
    }
    if !(cfg.noise_sd > 0.0) || !cfg.noise_sd.is_finite() {
        errs.push(format!("`noise_sd` must be positive, got {}", cfg.noise_sd));
    }
    if !(0.0..0.5).contains(&cfg.eps) {
        errs.push(format!("`eps` must lie in [0, 0.5), got {}", cfg.eps));
    }
    if let Some(l) = cfg.truncate {
        if !(l > 0.0 && l < 0.5) {
            errs.push(format!("`truncate` must lie in (0, 0.5), got {l}"));
        }
    }
    if let Err(DrError::Config(e)) = cfg.iwls.validate() {
        errs.extend(e);
    }
    match cfg.command {
        Command::Replicate if cfg.replications < 2 => {
            errs.push(format!("`replications` must be at least 2, got {}", cfg.replications))
        }
        Command::Estimate | Command::Replicate if cfg.estimators.is_empty() => {
            errs.push("`estimators` is empty".into())
        }
        Command::GridSelect => {
            if cfg.prop_specs.len() < 2 || cfg.out_specs.len() < 2 {
                errs.push("grid needs at least 2 propensity and 2 outcome specs".into());
            }
            if cfg.folds < 2 {
                errs.push(format!("`folds` must be at least 2, got {}", cfg.folds));
            }
            if cfg.rules.contains(&Rule::Wald) && cfg.bootstrap < 2 {
                errs.push(format!("`bootstrap` must be at least 2 for the wald rule, got {}", cfg.bootstrap));
            }
        }
        _ => {}
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &DrError) -> i32 {
    match e {
        DrError::Config(_) => 2,
        DrError::InvalidData(_) | DrError::Basis(_) | DrError::EmptyArm(_) | DrError::Io { .. } | DrError::Serde(_) => 3,
        DrError::ZeroDenominator(_)
        | DrError::Singular { .. }
        | DrError::NonConvergence { .. }
        | DrError::Infeasible(_)
        | DrError::NoValidCell(_) => 4,
    }
}

/// Pretty JSON with sorted keys and every float printed with 17
/// significant digits, so equal values give equal bytes.
pub fn to_json_string(v: &Value) -> String {
    let mut s = String::new();
    write_json(v, 0, &mut s);
    s.push('\n');
    s
}

fn write_json(v: &Value, depth: usize, s: &mut String) {
    let pad = |d: usize| "  ".repeat(d);
    match v {
        Value::Null => s.push_str("null"),
        Value::Bool(b) => s.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let f = n.as_f64().expect("f64");
                let _ = write!(s, "{f:.16e}");
            } else {
                let _ = write!(s, "{n}");
            }
        }
        Value::String(x) => s.push_str(&serde_json::to_string(x).expect("string")),
        Value::Array(a) => {
            if a.is_empty() {
                s.push_str("[]");
                return;
            }
            let flat = a.iter().all(|x| !x.is_array() && !x.is_object());
            s.push('[');
            for (k, x) in a.iter().enumerate() {
                if k > 0 {
                    s.push(',');
                }
                if flat {
                    if k > 0 {
                        s.push(' ');
                    }
                } else {
                    s.push('\n');
                    s.push_str(&pad(depth + 1));
                }
                write_json(x, depth + 1, s);
            }
            if !flat {
                s.push('\n');
                s.push_str(&pad(depth));
            }
            s.push(']');
        }
        Value::Object(o) => {
            if o.is_empty() {
                s.push_str("{}");
                return;
            }
            s.push('{');
            let mut keys: Vec<&String> = o.keys().collect();
            keys.sort();
            for (k, key) in keys.iter().enumerate() {
                if k > 0 {
                    s.push(',');
                }
                s.push('\n');
                s.push_str(&pad(depth + 1));
                s.push_str(&serde_json::to_string(key).expect("key"));
                s.push_str(": ");
                write_json(&o[*key], depth + 1, s);
            }
            s.push('\n');
            s.push_str(&pad(depth));
            s.push('}');
        }
    }
}

/// Write via a temporary file in the same directory and rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| DrError::Config(vec![format!("`{}` is not a file path", path.display())]))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| DrError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        DrError::io(path, e)
    })
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| DrError::Serde(e.to_string()))
}

fn matrix_value(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|r| json!(m.row(r).iter().copied().collect::<Vec<f64>>())).collect())
}

/// Files written and a short human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub written: Vec<PathBuf>,
    pub summary: String,
}

/// Execute a validated configuration, honouring `threads`.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| DrError::Config(vec![format!("cannot build thread pool: {e}")]))?
            .install(|| dispatch(cfg)),
        None => dispatch(cfg),
    }
}

fn dispatch(cfg: &RunConfig) -> Result<RunOutput> {
    match cfg.command {
        Command::Simulate => cmd_simulate(cfg),
        Command::Estimate => cmd_estimate(cfg),
        Command::Replicate => cmd_replicate(cfg),
        Command::GridSelect => cmd_grid_select(cfg),
        Command::Report => cmd_report(cfg),
    }
}

fn out_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.out.as_deref().ok_or_else(|| DrError::Config(vec!["`out` is required".into()]))
}

fn cmd_simulate(cfg: &RunConfig) -> Result<RunOutput> {
    let (ds, flagged) = simulate::gen_dataset_flagged(&cfg.dgp())?;
    let out = out_path(cfg)?;
    write_atomic(out, &ds.to_csv_string())?;
    let treated = ds.arm_count(1);
    Ok(RunOutput {
        written: vec![out.to_path_buf()],
        summary: format!(
            "simulated n = {} (treated {treated}, control {}), seed {}, {} rows flagged for the inverse map\nwrote {}",
            ds.n(),
            ds.n() - treated,
            cfg.seed,
            flagged.len(),
            out.display()
        ),
    })
}

fn load_input(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.input.as_ref().ok_or_else(|| DrError::Config(vec!["`input` is required".into()]))?;
    let ds = Dataset::read_csv(path)?;
    let report = ds.validate();
    if !report.is_ok() {
        return Err(DrError::InvalidData(format!("{}: {}", path.display(), report.fatal.join("; "))));
    }
    Ok(ds)
}

fn cmd_estimate(cfg: &RunConfig) -> Result<RunOutput> {
    let ds = load_input(cfg)?;
    let specs = cfg.suite_specs(&ds);
    let opts = cfg.estimate_options();
    let results = evaluate_suite(&ds, &cfg.estimators, &specs, &opts);
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut summary = format!("n = {}; propensity {}; outcome {}\n", ds.n(), specs.propensity, specs.outcome);
    for (tag, r) in cfg.estimators.iter().zip(&results) {
        match r {
            Ok(rep) => {
                let _ = writeln!(
                    summary,
                    "{:<16} {:>12.5} [{:.5}, {:.5}]",
                    rep.tag, rep.estimate, rep.ci_lower, rep.ci_upper
                );
                estimates.push(to_value(rep)?);
            }
            Err(e) => {
                let _ = writeln!(summary, "{:<16} failed: {e}", tag.to_string());
                failures.push(json!({"estimator": tag.to_string(), "error": e.to_string()}));
            }
        }
    }
    if estimates.is_empty() {
        let first = results.into_iter().find_map(|r| r.err()).expect("at least one estimator");
        return Err(first);
    }
    let doc = json!({
        "n": ds.n(),
        "propensity": specs.propensity.to_string(),
        "outcome": specs.outcome.to_string(),
        "gamma_basis": specs.gamma.to_string(),
        "link": specs.link.name(),
        "estimates": estimates,
        "failures": failures,
    });
    let out = out_path(cfg)?;
    write_atomic(out, &to_json_string(&doc))?;
    summary.push_str(&format!("wrote {}", out.display()));
    Ok(RunOutput { written: vec![out.to_path_buf()], summary })
}

fn cmd_replicate(cfg: &RunConfig) -> Result<RunOutput> {
    let specs = SuiteSpecs {
        propensity: cfg.propensity.clone().unwrap_or_else(|| BasisSpec::linear(Source::Z, 4)),
        outcome: cfg.outcome.clone().unwrap_or_else(|| BasisSpec::linear(Source::Z, 4)),
        gamma: cfg.gamma_basis.clone(),
        link: cfg.link,
    };
    let summary = simulate::run_replications(&cfg.dgp(), cfg.replications, &cfg.estimators, &specs, &cfg.estimate_options())?;
    let out = out_path(cfg)?;
    let csv = cfg.csv_path().expect("out is set");
    let doc = json!({
        "propensity": specs.propensity.to_string(),
        "outcome": specs.outcome.to_string(),
        "gamma_basis": specs.gamma.to_string(),
        "summary": to_value(&summary)?,
    });
    write_atomic(out, &to_json_string(&doc))?;
    write_atomic(&csv, &summary.to_csv_string())?;
    let mut text = format!("R = {}, n = {}, seed = {}\n", summary.replications, summary.n, summary.seed);
    for r in &summary.rows {
        let _ = writeln!(
            text,
            "{:<16} bias {:>10.5}  var {:>10.5}  mse {:>10.5}  cover {:>5.3}  failed {}",
            r.estimator, r.bias, r.variance, r.mse, r.coverage, r.failures
        );
    }
    text.push_str(&format!("wrote {} and {}", out.display(), csv.display()));
    Ok(RunOutput { written: vec![out.to_path_buf(), csv], summary: text })
}

/// Every requested rule on a built grid. Rule failures are reported
/// alongside the successes rather than aborting.
#[allow(clippy::too_many_arguments)]
pub fn apply_rules(
    ds: &Dataset,
    grid: &mut SelectionGrid,
    rules: &[Rule],
    c_list: &[f64],
    folds: usize,
    bootstrap: usize,
    seed: u64,
    tau_true: Option<f64>,
    opts: &EstimateOptions,
) -> (Vec<SelectionOutcome>, Vec<(String, String)>) {
    let mut results: Vec<(String, Result<SelectionOutcome>)> = Vec::new();
    let mut errors = Vec::new();
    if rules.contains(&Rule::Wald) && grid.bootstrap.is_none() {
        match model_select::bootstrap_covariance(ds, grid, bootstrap, seed, opts) {
            Ok(b) => grid.bootstrap = Some(b),
            Err(e) => errors.push(("bootstrap".to_string(), e.to_string())),
        }
    }
    for rule in rules {
        match rule {
            Rule::Sd => results.push(("sd".into(), model_select::select_sd(grid))),
            Rule::Range => results.push(("range".into(), model_select::select_range(grid))),
            Rule::Joint => {
                for &c in c_list {
                    results.push((format!("joint(c={c})"), model_select::select_joint(grid, c)));
                }
            }
            Rule::Wald => {
                if grid.bootstrap.is_some() {
                    results.push(("wald".into(), model_select::select_wald(grid)));
                }
            }
            Rule::Cv => results.push(("cv".into(), model_select::select_cv(ds, grid, folds, seed, opts))),
            Rule::Oracle => match tau_true {
                Some(t) => results.push(("oracle".into(), model_select::oracle(grid, t))),
                None => errors.push(("oracle".into(), "needs tau_true".into())),
            },
        }
    }
    let mut picks = Vec::new();
    for (name, r) in results {
        match r {
            Ok(o) => picks.push(o),
            Err(e) => errors.push((name, e.to_string())),
        }
    }
    (picks, errors)
}

fn cmd_grid_select(cfg: &RunConfig) -> Result<RunOutput> {
    let (ds, tau_true) = match &cfg.input {
        Some(_) => (load_input(cfg)?, cfg.tau_true),
        None => (simulate::gen_dataset(&cfg.dgp())?, Some(cfg.tau_true.unwrap_or(cfg.gamma.tau_pop()))),
    };
    let opts = cfg.estimate_options();
    let mut grid = model_select::build_grid(&ds, &cfg.prop_specs, &cfg.out_specs, cfg.method, cfg.link, &opts)?;
    let (picks, errors) =
        apply_rules(&ds, &mut grid, &cfg.rules, &cfg.c_list, cfg.folds, cfg.bootstrap, cfg.seed, tau_true, &opts);
    let doc = json!({
        "n": ds.n(),
        "seed": cfg.seed,
        "tau_true": tau_true,
        "grid": to_value(&grid)?,
        "selections": to_value(&picks)?,
        "rule_errors": errors.iter().map(|(r, e)| json!({"rule": r, "error": e})).collect::<Vec<_>>(),
    });
    let out = out_path(cfg)?;
    let csv = cfg.csv_path().expect("out is set");
    write_atomic(out, &to_json_string(&doc))?;
    write_atomic(&csv, &model_select::sensitivity_csv(&grid))?;
    let mut text = model_select::sensitivity_text(&grid);
    for p in &picks {
        let _ = writeln!(text, "{:<12} -> (ps{}, out{})  tau = {:.5}", p.rule, p.row + 1, p.col + 1, p.estimate);
    }
    for (r, e) in &errors {
        let _ = writeln!(text, "{r:<12} failed: {e}");
    }
    text.push_str(&format!("wrote {} and {}", out.display(), csv.display()));
    Ok(RunOutput { written: vec![out.to_path_buf(), csv], summary: text })
}

/// Diagnostic report for one dataset: overlap, the semiparametric fit with
/// its sandwich, the plug-in closed forms, and per-unit plot data.
fn cmd_report(cfg: &RunConfig) -> Result<RunOutput> {
    let ds = load_input(cfg)?;
    let specs = cfg.suite_specs(&ds);
    let opts = cfg.estimate_options();
    let h = specs.h_basis();
    let fit = semipar::fit_semipar(&ds, &specs.gamma, &h, &specs.propensity, CTag::Identity, &opts.iwls)?;
    let pieces = variance::sandwich(&ds, &fit)?;
    let closed = variance::theorem1_plug_in(&ds, &fit)?;
    let tau = semipar::tau_from_semipar(&ds, &fit, &TauWeight::Unit)?;
    let tau_w = semipar::tau_from_semipar(&ds, &fit, &TauWeight::OmegaHat)?;
    let pi = &fit.propensity.fitted;
    let overlap = OverlapSummary::compute(&ds, pi, cfg.eps);
    let bdr: Vec<Value> = evaluate_suite(&ds, &[EstimatorTag::Bdr(Method::Wls)], &specs, &opts)
        .into_iter()
        .filter_map(|r| r.ok())
        .map(|r| to_value(&r))
        .collect::<Result<_>>()?;
    let (s1, s2) = fit.equation_residuals(&ds);
    let doc = json!({
        "n": ds.n(),
        "propensity": specs.propensity.to_string(),
        "v_basis": specs.gamma.to_string(),
        "h_basis": h.to_string(),
        "overlap": to_value(&overlap)?,
        "beta": fit.beta.iter().copied().collect::<Vec<f64>>(),
        "theta": fit.theta.iter().copied().collect::<Vec<f64>>(),
        "equation_residuals": [s1, s2],
        "beta_cov": matrix_value(&(&pieces.psi_cov / ds.n() as f64)),
        "block_inverse": pieces.block_inverse,
        "lambda_omega_hat": pieces.lambda_omega,
        "lambda_hat": pieces.lambda,
        "tau": to_value(&tau)?,
        "tau_omega": to_value(&tau_w)?,
        "bdr_wls": bdr,
        "plug_in": {
            "Omega": closed.omega,
            "Psi": matrix_value(&closed.psi),
            "Lambda_omega": closed.lambda_omega,
            "Lambda_omega_terms": closed.lambda_omega_terms.to_vec(),
            "Lambda": closed.lambda,
            "Lambda_terms": closed.lambda_terms.to_vec(),
            "bdr_pop": closed.bdr_pop,
            "efficiency_gap": closed.efficiency_gap,
        },
        "warnings": fit.warnings.clone(),
    });
    let out = out_path(cfg)?;
    let csv = cfg.csv_path().expect("out is set");
    let mut plot = String::from("unit,t,pi_hat,weight,gamma_hat,residual\n");
    let g = fit.gamma_values();
    let r = fit.residuals(&ds);
    for i in 0..ds.n() {
        let t = ds.t()[i];
        let w = if t == 1 { 1.0 / pi[i] } else { 1.0 / (1.0 - pi[i]) };
        let _ = writeln!(
            plot,
            "{},{t},{},{},{},{}",
            i + 1,
            simulate::fmt_num(pi[i]),
            simulate::fmt_num(w),
            simulate::fmt_num(g[i]),
            simulate::fmt_num(r[i])
        );
    }
    write_atomic(out, &to_json_string(&doc))?;
    write_atomic(&csv, &plot)?;
    let text = format!(
        "n = {}; beta = {:?}\nP_n(beta'V) = {:.5} (se {:.5}); omega-weighted = {:.5}\nplug-in Lambda = {:.4}, sandwich Lambda = {:.4}; propensities outside [{}, {}]: {}\nwrote {} and {}",
        ds.n(),
        fit.beta.iter().map(|b| (b * 1e5).round() / 1e5).collect::<Vec<_>>(),
        tau.estimate,
        tau.variance.sqrt(),
        tau_w.estimate,
        closed.lambda,
        pieces.lambda,
        cfg.eps,
        1.0 - cfg.eps,
        overlap.outside_count,
        out.display(),
        csv.display()
    );
    Ok(RunOutput { written: vec![out.to_path_buf(), csv], summary: text })
}

#[derive(Debug, Parser)]
#[command(name = "drkit", version, about = "Double-robust treatment-effect estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
    /// Configuration file (key=value lines or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to DRKIT_THREADS.
    #[arg(long, global = true, env = "DRKIT_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum CliCommand {
    /// Draw a Kang-Schafer dataset and write it as CSV.
    Simulate,
    /// Run estimators on a dataset CSV and write an estimate report.
    Estimate,
    /// Monte Carlo study of the estimator suite.
    Replicate,
    /// Build the DR grid and apply the selection rules.
    GridSelect,
    /// Diagnostic report with plot-ready CSV.
    Report,
}

impl From<CliCommand> for Command {
    fn from(c: CliCommand) -> Self {
        match c {
            CliCommand::Simulate => Command::Simulate,
            CliCommand::Estimate => Command::Estimate,
            CliCommand::Replicate => Command::Replicate,
            CliCommand::GridSelect => Command::GridSelect,
            CliCommand::Report => Command::Report,
        }
    }
}

/// Build the configuration from parsed arguments: config file, then
/// `--set` entries, then the dedicated flags.
pub fn config_from_cli(cli: &Cli) -> Result<RunConfig> {
    let mut pairs = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| DrError::io(p, e))?;
            entries(&text).map_err(DrError::Config)?
        }
        None => Vec::new(),
    };
    for s in &cli.set {
        match s.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => return Err(DrError::Config(vec![format!("--set expects KEY=VALUE, got `{s}`")])),
        }
    }
    if let Some(seed) = cli.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(t) = cli.threads {
        pairs.push(("threads".into(), t.to_string()));
    }
    if let Some(o) = &cli.out {
        pairs.push(("out".into(), o.display().to_string()));
    }
    parse_pairs(&pairs, Some(cli.command.into()))
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = config_from_cli(&cli).and_then(|cfg| run(&cfg));
    match result {
        Ok(out) => {
            println!("{}", out.summary);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
