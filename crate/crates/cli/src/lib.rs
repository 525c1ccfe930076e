//! `dtr` command-line interface.
//!
//! Every subcommand is a pure function of its input files, flags and seed.
//! Numeric outputs start with a provenance record (a `#` comment line for
//! CSV and text, a `provenance` object for JSON) carrying the tool version
//! and a hash of the configuration. The hash covers the subcommand, every
//! flag except `--out` and `--threads`, and the contents of input files.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use dtr_core::formula::{parse_formula, ModelFile, StageModelSpec};
use dtr_core::inference::{bootstrap, fit_regime, screen_covariates, EstimateReport, Method, ScreeningReport};
use dtr_core::scenario::{builtin_model, dp_evaluate, dp_oracle, mc_value, simulate, true_regime, EvalPolicy, McValue, Scenario, DP_CELL_CAP};
use dtr_core::trajectories::{infer_stage_count, load_csv_with_spaces, load_probes, save_csv_with_comment, schema_fingerprint, TreatmentSpace};
use dtr_core::{Error, FittedRegime, Regime};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "dtr", version, about = "Estimate, evaluate and query multi-stage decision rules")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a dataset from a scenario under its behaviour policy.
    Simulate(SimulateArgs),
    /// Fit a regime by Q-learning or A-learning.
    Fit(FitArgs),
    /// Recommend actions at probe histories.
    Recommend(RecommendArgs),
    /// Monte Carlo value of a regime on a scenario.
    Evaluate(EvaluateArgs),
    /// Bootstrap intervals and recommendation stability.
    Bootstrap(BootstrapArgs),
    /// Rank candidate terms by marginal t-statistic.
    Screen(ScreenArgs),
    /// Human-readable summary of a regime, bootstrap or screening file.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Qlearn,
    Alearn,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Qlearn => Method::QLearn,
            MethodArg::Alearn => Method::ALearn,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON file or the name of a shipped scenario.
    #[arg(long)]
    scenario: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    data: PathBuf,
    /// Model JSON file or the name of a shipped scenario's model.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RecommendArgs {
    #[arg(long)]
    regime: PathBuf,
    /// Probe histories (CSV, dataset columns up to the decision stage).
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    scenario: String,
    /// Fitted regime; without it only reference policies are evaluated.
    #[arg(long)]
    regime: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(2..))]
    replicates: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BootstrapArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long = "B", default_value_t = 200)]
    b: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Probe histories for recommendation stability.
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScreenArgs {
    #[arg(long)]
    data: PathBuf,
    /// Candidate terms as a formula over the complete history, e.g. `s1.x + s2.w`.
    #[arg(long)]
    terms: String,
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
    /// Model file supplying non-binary treatment levels.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Regime, bootstrap report, or screening report JSON.
    #[arg(long, alias = "regime")]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure carrying the module it came from and the exit code.
#[derive(Debug)]
struct CliError {
    code: i32,
    module: &'static str,
    message: String,
}

type CliResult<T> = Result<T, CliError>;

fn tag(module: &'static str) -> impl Fn(Error) -> CliError {
    move |e| CliError {
        code: 1,
        module,
        message: e.to_string(),
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        module: "cli",
        message: message.into(),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: 1,
        module: "cli",
        message: format!("{}: {e}", path.display()),
    }
}

/// Accumulates the configuration fingerprint.
struct Config {
    hasher: Sha256,
}

impl Config {
    fn new(command: &str) -> Self {
        let mut c = Self { hasher: Sha256::new() };
        c.flag("command", command);
        c
    }

    fn flag(&mut self, key: &str, value: impl std::fmt::Display) {
        self.hasher.update(format!("{key}={value}\n").as_bytes());
    }

    fn input(&mut self, key: &str, bytes: &[u8]) {
        let digest = hex::encode(Sha256::digest(bytes));
        self.flag(key, digest);
    }

    fn finish(self) -> String {
        hex::encode(&self.hasher.finalize()[..8])
    }
}

fn provenance_line(hash: &str) -> String {
    format!("dtr {VERSION} config={hash}")
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json(path: &Path, value: serde_json::Value, hash: &str) -> CliResult<()> {
    let mut value = value;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert(
            "provenance".into(),
            serde_json::json!({ "tool": format!("dtr {VERSION}"), "config": hash }),
        );
    }
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| tag("cli")(e.into()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Scenario from a path, falling back to a shipped name.
fn load_scenario(arg: &str, cfg: &mut Config) -> CliResult<Scenario> {
    let path = Path::new(arg);
    if path.exists() {
        cfg.input("scenario", &read_bytes(path)?);
        Scenario::from_path(path).map_err(tag("scenario"))
    } else {
        let scn = Scenario::builtin(arg).map_err(tag("scenario"))?;
        cfg.flag("scenario", arg);
        Ok(scn)
    }
}

fn load_model(arg: &str, cfg: &mut Config) -> CliResult<ModelFile> {
    let path = Path::new(arg);
    let text = if path.exists() {
        let bytes = read_bytes(path)?;
        cfg.input("model", &bytes);
        String::from_utf8(bytes).map_err(|_| usage(format!("{arg}: model file is not UTF-8")))?
    } else {
        let text = builtin_model(arg).ok_or_else(|| usage(format!("model `{arg}` is neither a file nor a shipped model")))?;
        cfg.flag("model", arg);
        text.to_string()
    };
    ModelFile::from_json(&text).map_err(tag("formula"))
}

fn specs_of(model: &ModelFile) -> CliResult<(Vec<StageModelSpec>, Vec<TreatmentSpace>)> {
    Ok((
        model.specs().map_err(tag("formula"))?,
        model.spaces().map_err(tag("trajectories"))?,
    ))
}

fn load_data(path: &Path, spaces: &[TreatmentSpace], cfg: &mut Config) -> CliResult<dtr_core::Dataset> {
    cfg.input("data", &read_bytes(path)?);
    load_csv_with_spaces(path, spaces).map_err(tag("trajectories"))
}

fn load_regime(path: &Path, cfg: &mut Config) -> CliResult<FittedRegime<f64>> {
    let bytes = read_bytes(path)?;
    cfg.input("regime", &bytes);
    let text = String::from_utf8(bytes).map_err(|_| usage(format!("{}: regime file is not UTF-8", path.display())))?;
    FittedRegime::from_json(&text).map_err(tag("regime"))
}

fn method_module(m: Method) -> &'static str {
    match m {
        Method::QLearn => "qlearn",
        Method::ALearn => "alearn",
    }
}

fn log(command: &str, seed: u64, hash: &str) {
    eprintln!("dtr {command}: seed={seed} config={hash}");
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut cfg = Config::new("simulate");
    let scn = load_scenario(&a.scenario, &mut cfg)?;
    cfg.flag("n", a.n);
    cfg.flag("seed", a.seed);
    let hash = cfg.finish();
    log("simulate", a.seed, &hash);
    let ds = simulate::<f64>(&scn, a.n as usize, a.seed).map_err(tag("scenario"))?;
    save_csv_with_comment(&ds, &a.out, Some(&provenance_line(&hash))).map_err(tag("trajectories"))
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let mut cfg = Config::new("fit");
    let method = Method::from(a.method);
    cfg.flag("method", method);
    let model = load_model(&a.model, &mut cfg)?;
    let (specs, spaces) = specs_of(&model)?;
    check_stage_count(&a.data, specs.len())?;
    let ds = load_data(&a.data, &spaces, &mut cfg)?;
    cfg.flag("seed", a.seed);
    let hash = cfg.finish();
    log("fit", a.seed, &hash);
    let regime = fit_regime(&ds, method, &specs).map_err(tag(method_module(method)))?;
    let value = serde_json::to_value(&regime).map_err(|e| tag("regime")(e.into()))?;
    write_json(&a.out, value, &hash)
}

fn check_stage_count(data: &Path, expected: usize) -> CliResult<()> {
    let k = infer_stage_count(data).map_err(tag("trajectories"))?;
    if k != expected {
        return Err(CliError {
            code: 1,
            module: "formula",
            message: format!("model describes {expected} stages but {} has {k}", data.display()),
        });
    }
    Ok(())
}

fn cmd_recommend(a: &RecommendArgs) -> CliResult<()> {
    let mut cfg = Config::new("recommend");
    let regime = load_regime(&a.regime, &mut cfg)?;
    cfg.input("covariates", &read_bytes(&a.covariates)?);
    cfg.flag("seed", a.seed);
    let hash = cfg.finish();
    log("recommend", a.seed, &hash);
    let probes = load_probes::<f64>(&a.covariates).map_err(tag("trajectories"))?;
    let module = regime.method_name();
    let mut out = format!("# {}\nid,stage,recommended_action,contrast_or_qgap,propensity_at_history\n", provenance_line(&hash));
    for p in &probes {
        let r = regime.recommend(p).map_err(|e| CliError {
            code: 1,
            module,
            message: format!("probe {}: {e}", p.id),
        })?;
        let prop = r.propensity.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", p.id, r.stage, r.action, r.contrast_or_qgap, prop);
    }
    write_text(&a.out, &out)
}

fn value_json(policy: &str, v: &McValue) -> serde_json::Value {
    serde_json::json!({ "policy": policy, "value": v.value, "std_error": v.std_error, "replicates": v.replicates })
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let mut cfg = Config::new("evaluate");
    let scn = load_scenario(&a.scenario, &mut cfg)?;
    let regime = match &a.regime {
        Some(p) => Some(load_regime(p, &mut cfg)?),
        None => None,
    };
    cfg.flag("replicates", a.replicates);
    cfg.flag("seed", a.seed);
    let hash = cfg.finish();
    log("evaluate", a.seed, &hash);
    let m = a.replicates as usize;
    let tag_s = tag("scenario");

    if let Some(r) = &regime {
        let expected = schema_fingerprint(scn.schema(), &scn.spaces());
        if r.schema_fingerprint() != expected {
            return Err(CliError {
                code: 1,
                module: "scenario",
                message: format!(
                    "regime was fitted on schema {} but scenario `{}` has schema {expected}",
                    r.schema_fingerprint(),
                    scn.name()
                ),
            });
        }
    }

    let behavior = mc_value::<f64>(&scn, EvalPolicy::Behavior, m, a.seed).map_err(&tag_s)?;
    let mut policies = vec![value_json("behavior", &behavior)];
    let mut fitted = None;
    if let Some(r) = &regime {
        let v = mc_value::<f64>(&scn, EvalPolicy::Regime(r as &dyn Regime<f64>), m, a.seed).map_err(&tag_s)?;
        policies.push(value_json("regime", &v));
        fitted = Some(v);
    }
    let mut optimal = None;
    if scn.spec().contrast_args_exogenous {
        let t = true_regime(&scn).map_err(&tag_s)?;
        let v = mc_value::<f64>(&scn, EvalPolicy::Regime(&t as &dyn Regime<f64>), m, a.seed).map_err(&tag_s)?;
        policies.push(value_json("true_regime", &v));
        optimal = Some(v.value);
    }
    let mut exact = serde_json::Map::new();
    if let Ok(dp) = dp_oracle(&scn, DP_CELL_CAP) {
        exact.insert("optimal".into(), dp.value.into());
        if let Some(r) = &regime {
            let v = dp_evaluate::<f64>(&scn, r as &dyn Regime<f64>, DP_CELL_CAP).map_err(&tag_s)?;
            exact.insert("regime".into(), v.into());
        }
        optimal.get_or_insert(dp.value);
    }
    let mut doc = serde_json::json!({
        "scenario": scn.name(),
        "seed": a.seed,
        "policies": policies,
    });
    if !exact.is_empty() {
        doc["exact_values"] = exact.into();
    }
    if let (Some(f), Some(opt)) = (fitted, optimal) {
        let denom = opt - behavior.value;
        if denom != 0.0 {
            doc["improvement_ratio"] = ((f.value - behavior.value) / denom).into();
        }
    }
    write_json(&a.out, doc, &hash)
}

fn cmd_bootstrap(a: &BootstrapArgs) -> CliResult<()> {
    let mut cfg = Config::new("bootstrap");
    let method = Method::from(a.method);
    cfg.flag("method", method);
    let model = load_model(&a.model, &mut cfg)?;
    let (specs, spaces) = specs_of(&model)?;
    check_stage_count(&a.data, specs.len())?;
    let ds = load_data(&a.data, &spaces, &mut cfg)?;
    let probes = match &a.covariates {
        Some(p) => {
            cfg.input("covariates", &read_bytes(p)?);
            load_probes::<f64>(p).map_err(tag("trajectories"))?
        }
        None => Vec::new(),
    };
    cfg.flag("B", a.b);
    cfg.flag("alpha", a.alpha);
    cfg.flag("seed", a.seed);
    let hash = cfg.finish();
    log("bootstrap", a.seed, &hash);
    if a.b < dtr_core::inference::MIN_REPLICATES || !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(usage(format!(
            "--B must be at least {} and --alpha must lie in (0, 1)",
            dtr_core::inference::MIN_REPLICATES
        )));
    }
    let report = bootstrap(&ds, method, &specs, a.b, a.alpha, &probes, a.seed).map_err(tag("inference"))?;
    let value = serde_json::to_value(&report).map_err(|e| tag("inference")(e.into()))?;
    write_json(&a.out, value, &hash)
}

fn cmd_screen(a: &ScreenArgs) -> CliResult<()> {
    let mut cfg = Config::new("screen");
    let spaces = match &a.model {
        Some(m) => specs_of(&load_model(m, &mut cfg)?)?.1,
        None => {
            let k = infer_stage_count(&a.data).map_err(tag("trajectories"))?;
            vec![TreatmentSpace::binary(); k]
        }
    };
    let ds = load_data(&a.data, &spaces, &mut cfg)?;
    cfg.flag("terms", &a.terms);
    cfg.flag("threshold", a.threshold);
    cfg.flag("seed", a.seed);
    let hash = cfg.finish();
    log("screen", a.seed, &hash);
    let terms = parse_formula(&a.terms, ds.stage_count() + 1).map_err(tag("formula"))?;
    let report = screen_covariates(&ds, &terms, a.threshold).map_err(tag("inference"))?;
    let value = serde_json::to_value(&report).map_err(|e| tag("inference")(e.into()))?;
    write_json(&a.out, value, &hash)
}

fn render_regime(r: &FittedRegime<f64>) -> String {
    let mut s = format!(
        "method {}  stages {}  schema {}\n",
        r.method_name(),
        r.stages(),
        r.schema_fingerprint()
    );
    let width = r.coefficients().iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(11);
    let _ = writeln!(s, "{:<width$}  {:>12}", "coefficient", "value");
    for (name, v) in r.coefficients() {
        let _ = writeln!(s, "{name:<width$}  {v:>12.6}");
    }
    s.push_str("recommendations are advisory; they are never applied automatically\n");
    s
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let mut cfg = Config::new("report");
    let bytes = read_bytes(&a.input)?;
    cfg.input("input", &bytes);
    cfg.flag("seed", a.seed);
    let hash = cfg.finish();
    log("report", a.seed, &hash);
    let text = String::from_utf8(bytes).map_err(|_| usage("report input is not UTF-8"))?;
    let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| tag("cli")(e.into()))?;
    let body = if json.get("entries").is_some() {
        serde_json::from_value::<ScreeningReport>(json)
            .map_err(|e| tag("inference")(e.into()))?
            .render_table()
    } else if json.get("recommendation_stability").is_some() {
        serde_json::from_value::<EstimateReport<f64>>(json)
            .map_err(|e| tag("inference")(e.into()))?
            .render_table()
    } else {
        render_regime(&FittedRegime::from_json(&text).map_err(tag("regime"))?)
    };
    let out = format!("# {}\n{body}", provenance_line(&hash));
    match &a.out {
        Some(p) => write_text(p, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Recommend(a) => cmd_recommend(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Screen(a) => cmd_screen(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code: 0 success, 1 data or model error, 2 usage error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(usage(format!("cannot start {t} worker threads: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dtr: error [{}]: {}", e.module, e.message);
            e.code
        }
    }
}
