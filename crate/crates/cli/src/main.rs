//! `zeroid` command-line front end.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use zeroid::datagen::{run_campaign, write_summary_csv, Campaign};
use zeroid::estimator::{align_to_reference, estimate, SigmaMethod};
use zeroid::inference::{c_test_detail, j_test, CTestDetail};
use zeroid::linalg::{self, SignedPermutation};
use zeroid::restrictions::{explore_gt, identify, Exploration, IdentReport, DEFAULT_TOL};
use zeroid::statistics::{kstatistic, sample_moments};
use zeroid::{
    make_pattern, DataMatrix, EstimationOptions, EstimationResult, Matrix, PatternKind, RestrictionSpec,
    ScenarioConfig, ScenarioSummary, StatKind, SymmetricTensor, TestResult, Weighting, ZeroPattern,
};

#[derive(Parser)]
#[command(name = "zeroid", version, about = "Identification and estimation of AY = e from zero restrictions on higher-order tensors")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Genericity, local identification and (d = 2) the identified set of a tensor.
    Identify(IdentifyArgs),
    /// Minimum-distance estimate of A from observations.
    Estimate(EstimateArgs),
    /// J-test of the restrictions, and the C-test of a subset when given.
    Test(TestArgs),
    /// Monte Carlo scenario or campaign; CSV summary plus JSON.
    Simulate(SimulateArgs),
    /// Sample moment or k-statistic tensor of the data.
    Cumulants(CumulantsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StatArg {
    Moment,
    Cumulant,
}

impl From<StatArg> for StatKind {
    fn from(s: StatArg) -> Self {
        match s {
            StatArg::Moment => StatKind::Moment,
            StatArg::Cumulant => StatKind::Cumulant,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Identity,
    Efficient,
    Iterated,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Identity => Weighting::Identity,
            WeightingArg::Efficient => Weighting::Efficient,
            WeightingArg::Iterated => Weighting::Iterated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaArg {
    Auto,
    PlugIn,
    Bootstrap,
}

impl From<SigmaArg> for SigmaMethod {
    fn from(s: SigmaArg) -> Self {
        match s {
            SigmaArg::Auto => SigmaMethod::Auto,
            SigmaArg::PlugIn => SigmaMethod::PlugIn,
            SigmaArg::Bootstrap => SigmaMethod::Bootstrap,
        }
    }
}

#[derive(Args)]
struct SpecArgs {
    /// JSON config: {"spec": ..., "options": ..., "subset": ...}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pattern kind, a pattern JSON file, or one-based indices like "1,2,2;1,1,2".
    #[arg(long)]
    pattern: Option<String>,
    /// Order r of the restricted tensor.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long, value_enum)]
    stat: Option<StatArg>,
    /// Add the mean restrictions E[Ae] = 0.
    #[arg(long)]
    include_mean: bool,
}

#[derive(Args)]
struct OptionArgs {
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    /// Variance estimator for the efficient step.
    #[arg(long, value_enum)]
    sigma: Option<SigmaArg>,
    #[arg(long = "bootstrap-B", value_name = "B")]
    bootstrap_b: Option<usize>,
    /// Number of random orthogonal starts.
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl OptionArgs {
    fn apply(&self, o: &mut EstimationOptions) {
        if let Some(w) = self.weighting {
            o.weighting = w.into();
        }
        if let Some(s) = self.sigma {
            o.sigma_method = s.into();
        }
        if let Some(b) = self.bootstrap_b {
            o.bootstrap_b = b;
        }
        if let Some(k) = self.starts {
            o.starts = k;
        }
        if let Some(s) = self.seed {
            o.seed = s;
        }
    }
}

#[derive(Args)]
struct IdentifyArgs {
    /// Tensor JSON: {"d": 2, "r": 3, "entries": [{"index": [1,1,1], "value": 1.0}, ...]}.
    #[arg(long)]
    tensor: PathBuf,
    #[arg(long)]
    pattern: String,
    /// Checked against the tensor order when given.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Random starts for the search over O(d) when d > 2.
    #[arg(long, default_value_t = 200)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Observations, one row per line, optional header.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    options: OptionArgs,
    /// JSON matrix (list of rows) to align the estimate to.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    options: OptionArgs,
    /// Subset for the C-test, in the same forms as --pattern.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON, or {"cells": [scenario, ...]}.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Replaces the seed of every cell.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    #[arg(long = "bootstrap-B", value_name = "B")]
    bootstrap_b: Option<usize>,
    #[arg(long)]
    starts: Option<usize>,
    /// CSV summary path; the JSON summary goes next to it with a .json extension.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Explicit JSON summary path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CumulantsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    order: usize,
    /// `moment` for raw sample moments, `cumulant` for k-statistics.
    #[arg(long, value_enum, default_value = "cumulant")]
    stat: StatArg,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<zeroid::Error> for Failure {
    fn from(e: zeroid::Error) -> Self {
        Failure::input(e.to_string())
    }
}

const EXIT_NONCONVERGED: u8 = 3;

type CliResult<T> = Result<T, Failure>;

/// Pretty JSON with every float written to 17 significant digits.
struct FullPrecision<'a>(PrettyFormatter<'a>);

impl Formatter for FullPrecision<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

fn to_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| Failure::input(format!("serializing output: {e}")))?;
    buf.push(b'\n');
    Ok(buf)
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::input(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(bytes).map_err(|e| Failure::input(format!("stdout: {e}"))),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn read_data(path: &Path) -> CliResult<DataMatrix> {
    DataMatrix::read_csv_path(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

/// Kind name, JSON file, or `;`-separated one-based index lists.
fn parse_pattern(arg: &str, d: usize, r: Option<usize>) -> CliResult<ZeroPattern> {
    let path = Path::new(arg);
    if path.is_file() {
        let p: ZeroPattern = read_json(path)?;
        if p.dim() != d {
            return Err(Failure::input(format!("pattern is for d = {}, the data have d = {d}", p.dim())));
        }
        return Ok(p);
    }
    if arg.contains(',') || arg.chars().all(|c| c.is_ascii_digit() || c == ';') {
        let lists: Vec<Vec<usize>> = arg
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(|e| Failure::input(format!("index '{v}': {e}"))))
                    .collect()
            })
            .collect::<CliResult<_>>()?;
        let order = lists.first().map(Vec::len).ok_or_else(|| Failure::input("empty index list"))?;
        if r.is_some_and(|r| r != order) {
            return Err(Failure::input(format!("indices have order {order}, --order says {}", r.unwrap())));
        }
        return Ok(ZeroPattern::custom_one_based(d, order, &lists)?);
    }
    let kind: PatternKind = arg.parse()?;
    let r = r.ok_or_else(|| Failure::input(format!("pattern kind '{arg}' needs --order")))?;
    Ok(make_pattern(kind, d, r)?)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    spec: Option<RestrictionSpec>,
    #[serde(default)]
    options: EstimationOptions,
    #[serde(default)]
    subset: Option<RestrictionSpec>,
}

/// Config file first, then flags on top.
fn resolve(args: &SpecArgs, opts: &OptionArgs, d: usize) -> CliResult<(RestrictionSpec, EstimationOptions, RunConfig)> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let base = cfg.spec.take();
    let order = args.order.or(base.as_ref().map(RestrictionSpec::r));
    let pattern = match (&args.pattern, &base) {
        (Some(p), _) => parse_pattern(p, d, order)?,
        (None, Some(s)) => s.pattern.clone(),
        (None, None) => return Err(Failure::input("no restrictions: give --pattern or a config with \"spec\"")),
    };
    if let Some(r) = args.order {
        if pattern.order() != r {
            return Err(Failure::input(format!("pattern has order {}, --order says {r}", pattern.order())));
        }
    }
    if pattern.dim() != d {
        return Err(Failure::input(format!("pattern is for d = {}, the data have d = {d}", pattern.dim())));
    }
    let stat = args.stat.map(StatKind::from).or(base.as_ref().map(|s| s.stat_kind)).unwrap_or(StatKind::Moment);
    let mean = args.include_mean || base.as_ref().is_some_and(|s| s.include_mean);
    let spec = RestrictionSpec::new(pattern, stat).with_mean(mean);
    let mut options = cfg.options.clone();
    opts.apply(&mut options);
    Ok((spec, options, cfg))
}

#[derive(Serialize)]
struct IdentifyOutput {
    tensor: SymmetricTensor,
    report: IdentReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    exploration: Option<Exploration>,
}

fn cmd_identify(a: &IdentifyArgs) -> CliResult<()> {
    let t: SymmetricTensor = read_json(&a.tensor)?;
    if a.order.is_some_and(|r| r != t.order()) {
        return Err(Failure::input(format!("tensor has order {}, --order says {}", t.order(), a.order.unwrap())));
    }
    let pattern = parse_pattern(&a.pattern, t.dim(), Some(t.order()))?;
    let report = identify(&t, &pattern, a.tol)?;
    let exploration = if t.dim() > 2 && report.tensor_in_pattern {
        Some(explore_gt(&t, &pattern, a.starts, a.seed, a.tol)?)
    } else {
        None
    };
    log::info!(
        "in pattern: {}, locally identified: {}, kernel dimension {}",
        report.tensor_in_pattern,
        report.locally_identified,
        report.kernel_dimension
    );
    if let Some(set) = &report.enumerated_set {
        log::info!("identified set has {} elements", set.len());
    }
    write_output(a.output.as_deref(), &to_json(&IdentifyOutput { tensor: t, report, exploration })?)
}

#[derive(Serialize)]
struct Alignment {
    permutation: SignedPermutation,
    a_hat: Vec<Vec<f64>>,
    std_errors: Option<Vec<Vec<f64>>>,
    distance: f64,
}

#[derive(Serialize)]
struct EstimateOutput {
    spec: RestrictionSpec,
    identity: EstimationResult,
    efficient: Option<EstimationResult>,
    reference: Option<Alignment>,
}

fn align(est: &EstimationResult, reference: &Matrix) -> CliResult<Alignment> {
    if reference.shape() != est.a_hat.shape() {
        return Err(Failure::input(format!("reference is {:?}, the estimate {:?}", reference.shape(), est.a_hat.shape())));
    }
    let (a, p) = align_to_reference(&est.a_hat, reference)?;
    let se = est.std_errors.as_ref().map(|s| linalg::to_rows(&p.apply(s).abs()));
    Ok(Alignment { permutation: p, distance: (&a - reference).norm(), a_hat: linalg::to_rows(&a), std_errors: se })
}

fn cmd_estimate(a: &EstimateArgs) -> CliResult<()> {
    let y = read_data(&a.data)?;
    let (spec, opts, _) = resolve(&a.spec, &a.options, y.d())?;
    let reference = match &a.reference {
        Some(p) => Some(linalg::from_rows(&read_json::<Vec<Vec<f64>>>(p)?)?),
        None => None,
    };
    let mut est = estimate(&y, &spec, &opts)?;
    let (identity, efficient) = match est.first_stage.take() {
        Some(first) => (*first, Some(est)),
        None => (est, None),
    };
    let last = efficient.as_ref().unwrap_or(&identity);
    let converged = identity.converged && last.converged;
    log::info!("objective {:.6e} after {} rounds, converged: {converged}", last.objective, last.rounds);
    let reference = match &reference {
        Some(r) => Some(align(last, r)?),
        None => None,
    };
    let out = EstimateOutput { spec, identity, efficient, reference };
    write_output(a.output.as_deref(), &to_json(&out)?)?;
    if !converged {
        return Err(Failure { code: EXIT_NONCONVERGED, message: "optimizer did not converge; best candidate written".into() });
    }
    Ok(())
}

#[derive(Serialize)]
struct TestOutput {
    spec: RestrictionSpec,
    j_test: Option<TestResult>,
    subset: Option<RestrictionSpec>,
    c_test: Option<CTestDetail>,
}

fn cmd_test(a: &TestArgs) -> CliResult<()> {
    let y = read_data(&a.data)?;
    let (spec, opts, cfg) = resolve(&a.spec, &a.options, y.d())?;
    let subset = match (&a.subset, cfg.subset) {
        (Some(s), _) => {
            let p = parse_pattern(s, y.d(), Some(spec.r()))?;
            Some(RestrictionSpec::new(p, spec.stat_kind).with_mean(spec.include_mean))
        }
        (None, s) => s,
    };
    let j = if spec.overidentification() > 0 {
        let est = estimate(&y, &spec, &opts)?;
        let r = j_test(&y, &spec, Some(&est), &opts)?;
        log::info!("J = {:.6}, dof {}, p = {:.6}", r.statistic, r.dof, r.p_value);
        Some(r)
    } else if subset.is_none() {
        return Err(Failure::input(format!(
            "exactly identified (d_g = {} = d^2): the J-test is undefined",
            spec.dg()
        )));
    } else {
        None
    };
    let c = match &subset {
        Some(sub) => {
            let c = c_test_detail(&y, &spec, sub, &opts)?;
            log::info!("C = {:.6}, dof {}, p = {:.6}", c.result.statistic, c.result.dof, c.result.p_value);
            Some(c)
        }
        None => None,
    };
    write_output(a.output.as_deref(), &to_json(&TestOutput { spec, j_test: j, subset, c_test: c })?)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SimulationInput {
    Campaign(Campaign),
    Single(Box<ScenarioConfig>),
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| Failure::input(format!("{}: {e}", a.config.display())))?;
    // parse as a single cell first so its error messages carry the field name
    let input = match serde_json::from_str::<ScenarioConfig>(&text) {
        Ok(c) => SimulationInput::Single(Box::new(c)),
        Err(single) => match serde_json::from_str::<SimulationInput>(&text) {
            Ok(i) => i,
            Err(_) => return Err(Failure::input(format!("{}: {single}", a.config.display()))),
        },
    };
    let mut campaign = match input {
        SimulationInput::Campaign(c) => c,
        SimulationInput::Single(c) => Campaign { cells: vec![*c] },
    };
    for cell in &mut campaign.cells {
        if let Some(s) = a.seed {
            cell.seed = s;
        }
        if let Some(w) = a.weighting {
            cell.options.weighting = w.into();
        }
        if let Some(b) = a.bootstrap_b {
            cell.options.bootstrap_b = b;
        }
        if let Some(k) = a.starts {
            cell.options.starts = k;
        }
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = a.threads {
        if t == 0 {
            return Err(Failure::input("--threads must be positive"));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| Failure::input(format!("thread pool: {e}")))?;
    log::info!("{} cell(s) on {} thread(s)", campaign.cells.len(), pool.current_num_threads());
    let summaries: Vec<ScenarioSummary> = pool.install(|| run_campaign(&campaign))?;
    for s in &summaries {
        if s.failures > 0 || s.non_converged > 0 {
            log::warn!("cell '{}': {} failed, {} not converged", s.label, s.failures, s.non_converged);
        }
    }
    let mut csv = Vec::new();
    write_summary_csv(&summaries, &mut csv)?;
    write_output(a.output.as_deref(), &csv)?;
    let json_path = a.json.clone().or_else(|| a.output.as_ref().map(|p| p.with_extension("json")));
    if let Some(p) = json_path {
        write_output(Some(&p), &to_json(&summaries)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CumulantsOutput {
    stat: StatKind,
    n: usize,
    tensor: SymmetricTensor,
}

fn cmd_cumulants(a: &CumulantsArgs) -> CliResult<()> {
    let y = read_data(&a.data)?;
    if a.order == 0 {
        return Err(Failure::input("--order must be positive"));
    }
    let stat = StatKind::from(a.stat);
    let tensor = match stat {
        StatKind::Moment => sample_moments(&y, a.order)?.order(a.order).clone(),
        StatKind::Cumulant => kstatistic(&y, a.order)?,
    };
    write_output(a.output.as_deref(), &to_json(&CumulantsOutput { stat, n: y.n(), tensor })?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .target(env_logger::Target::Stderr)
        .init();
    let result = match &cli.command {
        Command::Identify(a) => cmd_identify(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Test(a) => cmd_test(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Cumulants(a) => cmd_cumulants(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
