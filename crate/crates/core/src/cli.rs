//! Command-line harness.
//!
//! Exit codes: 0 success, 1 a checked property failed, 2 usage or
//! configuration error. Flags override config-file fields, which override
//! built-in defaults.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::categorical::derive_seed;
use crate::construct::{build_tree_fixed, CostParams};
use crate::engine::{
    acceptance_vs_draft_bins, bin_trend, generate, sample_prompt, BinStat, BranchEvent, GenConfig,
    GenerationRun, RunMetrics, Structure,
};
use crate::error::Error;
use crate::lm::{ModelPairSpec, Tempered};
use crate::mask_opt::{
    block_count_stats, mask_from_tree, random_tree, BlockCountStat, OrderKind, TreeShape,
};
use crate::oracle::{run_suite, Suite, SuiteParams, SuiteReport};
use crate::par;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const PROMPT_SALT: u64 = 0x7072_6f6d_7074;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<Format>,
}

/// Top-level JSON config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub models: Option<ModelPairSpec>,
    #[serde(default)]
    pub generation: Option<GenConfig>,
    #[serde(default)]
    pub costs: Option<CostParams>,
    #[serde(default)]
    pub output: Option<OutputSection>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dyspec",
    version,
    about = "Dynamic token-tree speculative decoding simulator",
    after_help = "Precedence: command-line flags > config file > defaults.\n\
                  DYSPEC_THREADS caps the number of worker threads."
)]
pub struct Cli {
    /// JSON config with `models`, `generation`, `costs` and `output` sections.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory for output files; without it the main output goes to stdout.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run speculative generation and report per-step metrics.
    Generate(GenerateArgs),
    /// Sweep structures, budgets and temperatures.
    Bench(BenchArgs),
    /// Run an oracle suite.
    Oracle(OracleArgs),
    /// Block counts of tree-attention masks under different node orders.
    Mask(MaskArgs),
    /// Acceptance rate against draft probability.
    Hypothesis(HypothesisArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StructureArg {
    Dynamic,
    Chain,
    KChains,
    StaticTree,
}

#[derive(Debug, Args, Default)]
pub struct GenerationOverrides {
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub size_cap: Option<usize>,
    #[arg(long)]
    pub target_temp: Option<f64>,
    #[arg(long)]
    pub draft_temp: Option<f64>,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    #[arg(long)]
    pub gen_len: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub overrides: GenerationOverrides,
    #[arg(long, value_enum)]
    pub structure: Option<StructureArg>,
    /// Chain count for k-chains.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Per-level branching for static-tree, e.g. `4,2,2`; defaults to a shape that fits the budget.
    #[arg(long, value_delimiter = ',')]
    pub branching: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub overrides: GenerationOverrides,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [StructureArg::Dynamic, StructureArg::Chain, StructureArg::KChains, StructureArg::StaticTree])]
    pub structures: Vec<StructureArg>,
    /// Budgets to sweep in fixed-budget mode.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<usize>,
    /// Thresholds to sweep (each with `--size-cap`).
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    /// Target temperatures.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.6])]
    pub temps: Vec<f64>,
    /// Runs per cell, averaged.
    #[arg(long, default_value_t = 4)]
    pub seeds: usize,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Unbiasedness,
    Optimality,
    Expectation,
    ThresholdEquivalence,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Suite {
        match s {
            SuiteArg::Unbiasedness => Suite::Unbiasedness,
            SuiteArg::Optimality => Suite::Optimality,
            SuiteArg::Expectation => Suite::Expectation,
            SuiteArg::ThresholdEquivalence => Suite::ThresholdEquivalence,
        }
    }
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(value_enum)]
    pub suite: SuiteArg,
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    /// Monte Carlo trials (unbiasedness: first-token runs; expectation: verifications per case).
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TreeSource {
    /// Uniform random attachment.
    Random,
    Chain,
    Star,
    /// Greedy fixed-budget trees from the configured model pair.
    Dyspec,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256usize])]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0usize])]
    pub prefix: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub block: usize,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, value_enum, default_value_t = TreeSource::Random)]
    pub tree: TreeSource,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [OrderArg::Original, OrderArg::Dfs, OrderArg::Hpd])]
    pub orders: Vec<OrderArg>,
    /// Also write a PBM image of the first tree's mask per order (needs --out).
    #[arg(long)]
    pub dump_pbm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Original,
    Dfs,
    Hpd,
}

impl From<OrderArg> for OrderKind {
    fn from(o: OrderArg) -> OrderKind {
        match o {
            OrderArg::Original => OrderKind::Original,
            OrderArg::Dfs => OrderKind::Dfs,
            OrderArg::Hpd => OrderKind::Hpd,
        }
    }
}

#[derive(Debug, Args)]
pub struct HypothesisArgs {
    #[command(flatten)]
    pub overrides: GenerationOverrides,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Independent generation runs whose branch tests are pooled.
    #[arg(long, default_value_t = 64)]
    pub runs: usize,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    CheckFailed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn io_err(path: &Path, e: impl Display) -> CliError {
    CliError::Usage(format!("cannot write {}: {e}", path.display()))
}

/// Parses `args` and runs the command, writing to the given streams.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::CheckFailed(msg)) => {
            let _ = writeln!(stderr, "check failed: {msg}");
            EXIT_CHECK_FAILED
        }
    }
}

/// Reads `DYSPEC_THREADS` and caps the worker pool accordingly.
pub fn configure_threads_from_env() -> Result<(), CliError> {
    match std::env::var("DYSPEC_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
                CliError::Usage(format!(
                    "DYSPEC_THREADS must be a positive integer, got {v:?}"
                ))
            })?;
            par::set_worker_threads(n);
            Ok(())
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(CliError::Usage(format!("DYSPEC_THREADS: {e}"))),
    }
}

struct Context {
    file: RunConfigFile,
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: Option<Format>,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let file = match &cli.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        let output = file.output.clone().unwrap_or_default();
        Ok(Self {
            seed: cli.seed,
            out: cli.out.clone().or(output.dir),
            format: cli.format.or(output.format),
            file,
        })
    }

    fn format_or(&self, default: Format) -> Format {
        self.format.unwrap_or(default)
    }

    fn models(&self, overrides: &GenerationOverrides) -> Result<ModelPairSpec, CliError> {
        let mut spec = self
            .file
            .models
            .clone()
            .ok_or_else(|| CliError::Usage("config needs a `models` section".into()))?;
        if let Some(s) = overrides.noise_sigma {
            spec.noise_sigma = s;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn costs(&self) -> Result<CostParams, CliError> {
        let c = self.file.costs.unwrap_or_default();
        c.validate()?;
        Ok(c)
    }

    fn generation(&self, o: &GenerationOverrides) -> GenConfig {
        let mut g = self.file.generation.clone().unwrap_or_default();
        if let Some(s) = self.seed {
            g.seed = s;
        }
        if o.budget.is_some() {
            g.budget = o.budget;
            g.threshold = None;
        }
        if o.threshold.is_some() {
            g.threshold = o.threshold;
            g.budget = None;
        }
        if o.size_cap.is_some() {
            g.size_cap = o.size_cap;
        }
        if let Some(t) = o.target_temp {
            g.target_temp = t;
        }
        if let Some(t) = o.draft_temp {
            g.draft_temp = t;
        }
        if let Some(n) = o.prefix_len {
            g.prefix_len = n;
        }
        if let Some(n) = o.gen_len {
            g.gen_len = n;
        }
        g
    }

    /// Writes `content` to `name` under the output directory, or to stdout
    /// when no directory is configured.
    fn emit(&self, name: &str, content: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
        match &self.out {
            Some(dir) => write_file(dir, name, content),
            None => stdout
                .write_all(content.as_bytes())
                .map_err(|e| CliError::Usage(format!("stdout: {e}"))),
        }
    }
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| io_err(&path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable output");
    s.push('\n');
    s
}

fn csv_string(
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<String, CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Usage(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Usage(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    configure_threads_from_env()?;
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a, stdout, stderr),
        Command::Bench(a) => cmd_bench(&ctx, a, stdout),
        Command::Oracle(a) => cmd_oracle(&ctx, a, stdout, stderr),
        Command::Mask(a) => cmd_mask(&ctx, a, stdout),
        Command::Hypothesis(a) => cmd_hypothesis(&ctx, a, stdout, stderr),
    }
}

fn structure_for(arg: StructureArg, k: usize, branching: &[usize], max_nodes: usize) -> Structure {
    match arg {
        StructureArg::Dynamic => Structure::Dynamic,
        StructureArg::Chain => Structure::Chain,
        StructureArg::KChains => Structure::KChains { k },
        StructureArg::StaticTree if branching.is_empty() => Structure::static_for_budget(max_nodes),
        StructureArg::StaticTree => Structure::StaticTree {
            branching: branching.to_vec(),
        },
    }
}

/// Samples the prompt from the target at temperature 1 and runs generation.
fn run_generation(
    spec: &ModelPairSpec,
    config: &GenConfig,
    costs: &CostParams,
) -> Result<GenerationRun, Error> {
    let (target, draft) = spec.build()?;
    let prompt = sample_prompt(
        Tempered::new(&*target, 1.0),
        config.prefix_len,
        derive_seed(config.seed, &[PROMPT_SALT]),
    )?;
    generate(
        Tempered::new(&*target, config.target_temp),
        Tempered::new(&draft, config.draft_temp),
        &prompt,
        config,
        costs,
    )
}

#[derive(Serialize)]
struct GenerateOutput<'a> {
    config: &'a GenConfig,
    models: &'a ModelPairSpec,
    tokens: Vec<u32>,
    metrics: &'a RunMetrics,
}

fn cmd_generate(
    ctx: &Context,
    a: &GenerateArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let spec = ctx.models(&a.overrides)?;
    let costs = ctx.costs()?;
    let mut config = ctx.generation(&a.overrides);
    if let Some(s) = a.structure {
        let max_nodes = config.speculation()?.max_nodes();
        config.structure = structure_for(s, a.k, &a.branching, max_nodes);
    }
    config.validate()?;
    let run = run_generation(&spec, &config, &costs)?;
    let json = to_json(&GenerateOutput {
        config: &config,
        models: &spec,
        tokens: run.tokens.iter().map(|t| t.0).collect(),
        metrics: &run.metrics,
    });
    let csv = run.metrics.steps_csv()?;
    match &ctx.out {
        Some(dir) => {
            write_file(dir, "metrics.json", &json)?;
            write_file(dir, "steps.csv", &csv)?;
        }
        None => match ctx.format_or(Format::Json) {
            Format::Json => ctx.emit("metrics.json", &json, stdout)?,
            Format::Csv => ctx.emit("steps.csv", &csv, stdout)?,
        },
    }
    let _ = writeln!(
        stderr,
        "{} steps, mean accepted {:.4}, mean tree size {:.2}",
        run.metrics.steps.len(),
        run.metrics.mean_accepted,
        run.metrics.mean_tree_size
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub structure: String,
    pub budget: Option<usize>,
    pub threshold: Option<f64>,
    pub size_cap: Option<usize>,
    pub target_temp: f64,
    pub seeds: usize,
    pub mean_accepted: f64,
    pub mean_tree_size: f64,
    /// Modeled time per generated token, pooled over seeds.
    pub modeled_latency: f64,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_bench(ctx: &Context, a: &BenchArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let spec = ctx.models(&a.overrides)?;
    let costs = ctx.costs()?;
    let base = ctx.generation(&a.overrides);
    let mut budgets = a.budgets.clone();
    let mut thresholds = a.thresholds.clone();
    if budgets.is_empty() && thresholds.is_empty() {
        match (a.overrides.budget, a.overrides.threshold) {
            (Some(b), _) => budgets.push(b),
            (None, Some(t)) => thresholds.push(t),
            _ => {}
        }
    }
    if a.structures.is_empty()
        || a.temps.is_empty()
        || (budgets.is_empty() && thresholds.is_empty())
        || a.seeds == 0
    {
        return Err(CliError::Usage(
            "empty sweep: need structures, temps, seeds and at least one budget or threshold"
                .into(),
        ));
    }
    let size_cap = base.size_cap.or(a.overrides.size_cap);
    if !thresholds.is_empty() && size_cap.is_none() {
        return Err(CliError::Usage("threshold sweeps need --size-cap".into()));
    }

    let mut cells = Vec::new();
    for &s in &a.structures {
        for &t in &a.temps {
            for &b in &budgets {
                let mut c = base.clone();
                (c.budget, c.threshold, c.target_temp) = (Some(b), None, t);
                c.structure = structure_for(s, a.k, &[], b);
                cells.push(c);
            }
            for &th in &thresholds {
                let mut c = base.clone();
                (c.budget, c.threshold, c.size_cap, c.target_temp) = (None, Some(th), size_cap, t);
                c.structure = structure_for(s, a.k, &[], size_cap.unwrap_or(1));
                cells.push(c);
            }
        }
    }
    for c in &cells {
        c.validate()?;
    }
    let seeds = a.seeds;
    let runs = par::try_map_indexed(cells.len() * seeds, |i| {
        let mut c = cells[i / seeds].clone();
        c.seed = derive_seed(base.seed, &[(i % seeds) as u64]);
        run_generation(&spec, &c, &costs).map(|r| r.metrics)
    })?;

    let mut rows: Vec<BenchRow> = cells
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let ms = &runs[ci * seeds..(ci + 1) * seeds];
            let steps: Vec<_> = ms.iter().flat_map(|m| m.steps.iter().cloned()).collect();
            let pooled = RunMetrics::from_steps(steps);
            BenchRow {
                structure: c.structure.name().to_string(),
                budget: c.budget,
                threshold: c.threshold,
                size_cap: c.threshold.and(c.size_cap),
                target_temp: c.target_temp,
                seeds,
                mean_accepted: pooled.mean_accepted,
                mean_tree_size: pooled.mean_tree_size,
                modeled_latency: if pooled.tokens_per_modeled_second > 0.0 {
                    1.0 / pooled.tokens_per_modeled_second
                } else {
                    0.0
                },
            }
        })
        .collect();
    rows.sort_by(|x, y| {
        (x.structure.as_str(), x.budget, x.size_cap)
            .cmp(&(y.structure.as_str(), y.budget, y.size_cap))
            .then(
                x.threshold
                    .unwrap_or(0.0)
                    .total_cmp(&y.threshold.unwrap_or(0.0)),
            )
            .then(x.target_temp.total_cmp(&y.target_temp))
    });

    match ctx.format_or(Format::Csv) {
        Format::Json => ctx.emit("bench.json", &to_json(&rows), stdout),
        Format::Csv => {
            let body = csv_string(
                &[
                    "structure",
                    "budget",
                    "threshold",
                    "size_cap",
                    "target_temp",
                    "seeds",
                    "mean_accepted",
                    "mean_tree_size",
                    "modeled_latency",
                ],
                rows.iter().map(|r| {
                    vec![
                        r.structure.clone(),
                        opt(r.budget),
                        opt(r.threshold),
                        opt(r.size_cap),
                        r.target_temp.to_string(),
                        r.seeds.to_string(),
                        r.mean_accepted.to_string(),
                        r.mean_tree_size.to_string(),
                        r.modeled_latency.to_string(),
                    ]
                }),
            )?;
            ctx.emit("bench.csv", &body, stdout)
        }
    }
}

fn cmd_oracle(
    ctx: &Context,
    a: &OracleArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let suite: Suite = a.suite.into();
    let report: SuiteReport = run_suite(
        suite,
        SuiteParams {
            instances: a.instances,
            trials: a.trials,
            seed: ctx.seed.unwrap_or(0),
        },
    )?;
    match ctx.format_or(Format::Json) {
        Format::Json => ctx.emit("oracle.json", &to_json(&report), stdout)?,
        Format::Csv => {
            let body = csv_string(
                &["case", "expected", "observed", "tolerance", "pass"],
                report.cases.iter().enumerate().map(|(i, c)| {
                    vec![
                        i.to_string(),
                        c.expected.to_string(),
                        c.observed.to_string(),
                        c.tolerance.to_string(),
                        c.pass.to_string(),
                    ]
                }),
            )?;
            ctx.emit("oracle.csv", &body, stdout)?;
        }
    }
    let _ = writeln!(stderr, "{}", report.summary());
    if report.pass {
        Ok(())
    } else {
        Err(CliError::CheckFailed(report.summary()))
    }
}

fn mask_shapes(ctx: &Context, a: &MaskArgs, n: usize) -> Result<Vec<TreeShape>, CliError> {
    let base = ctx.seed.unwrap_or(0);
    match a.tree {
        TreeSource::Random => Ok(par::try_map_indexed(a.seeds, |s| {
            random_tree(n, derive_seed(base, &[n as u64, s as u64]))
        })?),
        TreeSource::Chain => Ok(vec![TreeShape::chain(n)]),
        TreeSource::Star => Ok(vec![TreeShape::star(n)]),
        TreeSource::Dyspec => {
            let spec = ctx.models(&GenerationOverrides::default())?;
            let g = ctx.generation(&GenerationOverrides::default());
            let (target, draft) = spec.build()?;
            Ok(par::try_map_indexed(a.seeds, |s| {
                let seed = derive_seed(base, &[n as u64, s as u64]);
                let prompt = sample_prompt(
                    Tempered::new(&*target, 1.0),
                    g.prefix_len,
                    derive_seed(seed, &[PROMPT_SALT]),
                )?;
                let tree = build_tree_fixed(Tempered::new(&draft, g.draft_temp), &prompt, n, seed)?;
                Ok(TreeShape::from_tree(&tree))
            })?)
        }
    }
}

#[derive(Serialize)]
struct MaskOutput<'a> {
    tree: &'a str,
    seeds: usize,
    stats: &'a [BlockCountStat],
}

fn cmd_mask(ctx: &Context, a: &MaskArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.n.is_empty() || a.n.contains(&0) {
        return Err(CliError::Usage("--n needs positive tree sizes".into()));
    }
    if a.block == 0 || a.seeds == 0 || a.orders.is_empty() || a.prefix.is_empty() {
        return Err(CliError::Usage(
            "--block, --seeds, --orders and --prefix must be non-empty".into(),
        ));
    }
    if a.dump_pbm && ctx.out.is_none() {
        return Err(CliError::Usage("--dump-pbm needs --out".into()));
    }
    let orders: Vec<OrderKind> = a.orders.iter().map(|&o| o.into()).collect();
    let mut stats = Vec::new();
    for &n in &a.n {
        let shapes = mask_shapes(ctx, a, n)?;
        for &p in &a.prefix {
            stats.extend(block_count_stats(&shapes, p, a.block, &orders)?);
            if a.dump_pbm {
                let dir = ctx.out.as_ref().expect("checked");
                for &o in &orders {
                    let relabeled =
                        crate::mask_opt::apply_permutation(&shapes[0], &o.permutation(&shapes[0]))?;
                    let pbm = mask_from_tree(&relabeled, p)?.to_pbm();
                    write_file(dir, &format!("mask_n{n}_p{p}_{}.pbm", o.name()), &pbm)?;
                }
            }
        }
    }
    stats.sort_by_key(|x| (x.n, x.prefix, x.block, x.order));
    let tree = match a.tree {
        TreeSource::Random => "random",
        TreeSource::Chain => "chain",
        TreeSource::Star => "star",
        TreeSource::Dyspec => "dyspec",
    };
    match ctx.format_or(Format::Csv) {
        Format::Json => ctx.emit(
            "mask.json",
            &to_json(&MaskOutput {
                tree,
                seeds: a.seeds,
                stats: &stats,
            }),
            stdout,
        ),
        Format::Csv => {
            let body = csv_string(
                &["n", "prefix", "block", "order", "count"],
                stats.iter().map(|s| {
                    vec![
                        s.n.to_string(),
                        s.prefix.to_string(),
                        s.block.to_string(),
                        s.order.name().to_string(),
                        s.mean.to_string(),
                    ]
                }),
            )?;
            ctx.emit("mask.csv", &body, stdout)
        }
    }
}

#[derive(Serialize)]
struct HypothesisOutput<'a> {
    runs: usize,
    events: usize,
    spearman: Option<f64>,
    bins: &'a [BinStat],
}

/// Pools branch tests from `runs` independent generations.
pub fn collect_branch_events(
    spec: &ModelPairSpec,
    config: &GenConfig,
    costs: &CostParams,
    runs: usize,
) -> Result<Vec<BranchEvent>, Error> {
    let per_run = par::try_map_indexed(runs, |r| {
        let mut c = config.clone();
        c.seed = derive_seed(config.seed, &[r as u64]);
        run_generation(spec, &c, costs).map(|g| g.branch_events)
    })?;
    Ok(per_run.into_iter().flatten().collect())
}

fn cmd_hypothesis(
    ctx: &Context,
    a: &HypothesisArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let spec = ctx.models(&a.overrides)?;
    let costs = ctx.costs()?;
    let config = ctx.generation(&a.overrides);
    config.validate()?;
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be >= 1".into()));
    }
    let events = collect_branch_events(&spec, &config, &costs, a.runs)?;
    let bins = acceptance_vs_draft_bins(&events, a.bins)?;
    let rho = bin_trend(&bins);
    match ctx.format_or(Format::Csv) {
        Format::Json => ctx.emit(
            "hypothesis.json",
            &to_json(&HypothesisOutput {
                runs: a.runs,
                events: events.len(),
                spearman: rho,
                bins: &bins,
            }),
            stdout,
        )?,
        Format::Csv => {
            let body = csv_string(
                &["bin_lo", "bin_hi", "acc_rate", "count"],
                bins.iter().map(|b| {
                    vec![
                        b.lo.to_string(),
                        b.hi.to_string(),
                        b.acc_rate.to_string(),
                        b.count.to_string(),
                    ]
                }),
            )?;
            ctx.emit("hypothesis.csv", &body, stdout)?;
        }
    }
    let _ = writeln!(
        stderr,
        "{} branch events, spearman {}",
        events.len(),
        rho.map_or("n/a".to_string(), |r| format!("{r:.4}"))
    );
    Ok(())
}
