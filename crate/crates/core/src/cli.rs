//! Command-line front end: `region`, `identify`, `simulate` and `verify`.
//!
//! Every subcommand resolves its configuration (file plus inline flags),
//! validates it before computing, and writes its result atomically together
//! with a `<out>.manifest.json` run manifest. Exit codes: 0 success, 1 I/O
//! failure, 2 invalid configuration, 3 size guard.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use itertools::Itertools;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{cycle_count_sweep, cycle_gain_sweep};
use crate::identification::{
    identifiability_sum, pe_lower_bound_from_sum, pe_upper_bound_from_sum, run_identification,
    IdentificationInstance,
};
use crate::prob::{Channel, Distribution};
use crate::regions::{
    class_frontier, converse_rate, frontier_grid, occupancy_feasible, ChannelAssignment, InputSearch, Scheme,
    DEFAULT_RESOLUTION,
};
use crate::sim::{occupancy_sweep, run_experiment, Experiment, Pipeline, ThresholdPolicy, UserSetup};

#[derive(Debug, Parser)]
#[command(name = "sasmac", version, about = "Rate regions, identification and Monte Carlo for slotted asynchronous massive access")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON configuration file; inline flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed (overrides the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// Worker threads. Affects speed only, never results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Achievable-rate frontiers and converse thresholds over an (alpha, nu) grid.
    Region(RegionArgs),
    /// Massive identification: bounds and Monte Carlo error of ML decoding.
    Identify(IdentifyArgs),
    /// Monte Carlo of a receiver pipeline.
    Simulate(SimulateArgs),
    /// Exhaustive combinatorial checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RegionArgs {
    /// 2 two-stage, 3 channel classes, 4 block ML, 5 converse, 6 occupancy cutoff.
    #[arg(long)]
    pub theorem: Option<u8>,
    /// `bsc:<delta>`, `bec:<eps>` or `dmc:<file>`.
    #[arg(long)]
    pub channel: Option<String>,
    /// Input distribution, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub input: Option<Vec<f64>>,
    /// Search the input simplex instead of using a fixed input.
    #[arg(long)]
    pub optimize_input: bool,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub nus: Option<Vec<f64>>,
    /// Lattice steps per coordinate of the input simplex.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Fano residuals for the converse, comma separated.
    #[arg(long = "r-bar", value_delimiter = ',')]
    pub r_bar: Option<Vec<f64>>,
    /// Block length for the class identification sum.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub trials: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub trials: Option<u64>,
    /// Also write one CSV row per trial.
    #[arg(long)]
    pub trials_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Mean cycle gain against the edge-weight power mean, random weights.
    #[arg(long, group = "check")]
    pub lemma1: bool,
    /// Cycle enumeration counts and their growth bound.
    #[arg(long, group = "check")]
    pub cycles: bool,
    /// Balanced occupancy maximizes the multinomial probability.
    #[arg(long, group = "check")]
    pub lemma5: bool,
    #[arg(long)]
    pub kmin: Option<usize>,
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long)]
    pub amax: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
}

/// A channel given by shorthand (`bsc:0.11`, `bec:0.2`, `dmc:<file>`) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelSpec {
    Short(String),
    Inline(Channel),
}

impl ChannelSpec {
    pub fn resolve(&self) -> Result<Channel> {
        match self {
            ChannelSpec::Inline(q) => Ok(q.clone()),
            ChannelSpec::Short(s) => parse_channel(s),
        }
    }
}

pub fn parse_channel(spec: &str) -> Result<Channel> {
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| Error::config(format!("channel `{spec}`: expected bsc:<p>, bec:<p> or dmc:<file>")))?;
    let number = || {
        arg.trim()
            .parse::<f64>()
            .map_err(|_| Error::config(format!("channel `{spec}`: `{arg}` is not a number")))
    };
    match kind.trim() {
        "bsc" => Channel::bsc(number()?),
        "bec" => Channel::bec(number()?),
        "dmc" => {
            let text = std::fs::read_to_string(arg).map_err(|e| Error::config(format!("channel file {arg}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("channel file {arg}: {e}")))
        }
        other => Err(Error::config(format!("unknown channel kind `{other}`"))),
    }
}

fn default_alphas() -> Vec<f64> {
    (0..=6).map(|i| i as f64 * 0.05).collect()
}

fn default_nus() -> Vec<f64> {
    (0..=4).map(|i| i as f64 * 0.025).collect()
}

fn default_r_bar() -> Vec<f64> {
    vec![0.0]
}

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub channel: ChannelSpec,
    pub input: Vec<f64>,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub theorem: u8,
    #[serde(default)]
    pub channel: Option<ChannelSpec>,
    #[serde(default)]
    pub input: Option<Vec<f64>>,
    #[serde(default)]
    pub optimize_input: Option<bool>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_nus")]
    pub nus: Vec<f64>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_r_bar")]
    pub r_bar: Vec<f64>,
    #[serde(default)]
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub n: Option<usize>,
}

fn default_trials() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    pub dists: Vec<Vec<f64>>,
    pub n: usize,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub pipeline: Pipeline,
    pub n: usize,
    #[serde(rename = "A", alias = "blocks")]
    pub blocks: usize,
    #[serde(rename = "K", alias = "users")]
    pub users: usize,
    #[serde(rename = "M", alias = "messages")]
    pub messages: usize,
    /// Common channel of all users.
    #[serde(default)]
    pub channel: Option<ChannelSpec>,
    /// One channel per user.
    #[serde(default)]
    pub channels: Option<Vec<ChannelSpec>>,
    /// Common input distribution; uniform when omitted.
    #[serde(default)]
    pub input: Option<Vec<f64>>,
    #[serde(default)]
    pub inputs: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub threshold: ThresholdPolicy,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub distinct_codewords: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyCheck {
    Lemma1,
    Cycles,
    Lemma5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub check: VerifyCheck,
    #[serde(default)]
    pub kmin: Option<usize>,
    #[serde(default)]
    pub kmax: Option<usize>,
    #[serde(default)]
    pub amax: Option<usize>,
    #[serde(default)]
    pub draws: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

/// Written next to every result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_sha256: String,
    /// Fully resolved configuration; feeding it back through `--config`
    /// reproduces the result.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub format: String,
    pub output: String,
    pub wall_time_secs: f64,
    pub counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Bool(bool),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

/// Decimal text with 9 significant digits; scientific notation outside
/// `[1e-5, 1e15)`. Parses back with `str::parse::<f64>`.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let e = x.abs().log10().floor() as i32;
    if (-5..15).contains(&e) {
        let s = format!("{:.*}", (8 - e).max(0) as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(io_err)?;
        for row in &self.rows {
            let fields: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Num(v) => format_float(*v),
                    Cell::Int(v) => v.to_string(),
                    Cell::Text(s) => s.clone(),
                    Cell::Bool(b) => b.to_string(),
                    Cell::Empty => String::new(),
                })
                .collect();
            w.write_record(&fields).map_err(io_err)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.to_string()))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let rows: Vec<serde_json::Map<String, serde_json::Value>> = self
            .rows
            .iter()
            .map(|row| {
                self.header
                    .iter()
                    .zip(row)
                    .map(|(h, c)| {
                        let v = match c {
                            Cell::Num(v) => serde_json::Number::from_f64(*v).map_or(serde_json::Value::Null, Into::into),
                            Cell::Int(v) => (*v).into(),
                            Cell::Text(s) => s.clone().into(),
                            Cell::Bool(b) => (*b).into(),
                            Cell::Empty => serde_json::Value::Null,
                        };
                        (h.clone(), v)
                    })
                    .collect()
            })
            .collect();
        to_json_bytes(&rows)
    }

    fn render(&self, format: Format) -> Result<Vec<u8>> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

fn to_json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(io_err)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn distribution(probs: &[f64]) -> Result<Distribution> {
    Distribution::new(probs.to_vec())
}

/// Result of one subcommand, before it is written.
struct Outcome {
    subcommand: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    format: Format,
    body: Vec<u8>,
    counts: BTreeMap<String, u64>,
    extra: Vec<(PathBuf, Vec<u8>)>,
}

fn resolved<T: Serialize>(cfg: &T) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::config(e.to_string()))
}

fn region_config(cli: &Cli, args: &RegionArgs) -> Result<RegionConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config::<RegionConfig>(path)?,
        None => RegionConfig {
            theorem: args
                .theorem
                .ok_or_else(|| Error::config("region needs --theorem or --config"))?,
            channel: None,
            input: None,
            optimize_input: None,
            alphas: default_alphas(),
            nus: default_nus(),
            resolution: DEFAULT_RESOLUTION,
            r_bar: default_r_bar(),
            classes: Vec::new(),
            n: None,
        },
    };
    if let Some(t) = args.theorem {
        cfg.theorem = t;
    }
    if let Some(c) = &args.channel {
        cfg.channel = Some(ChannelSpec::Short(c.clone()));
    }
    if let Some(p) = &args.input {
        cfg.input = Some(p.clone());
    }
    if args.optimize_input {
        cfg.optimize_input = Some(true);
    }
    if let Some(a) = &args.alphas {
        cfg.alphas = a.clone();
    }
    if let Some(v) = &args.nus {
        cfg.nus = v.clone();
    }
    if let Some(r) = args.resolution {
        cfg.resolution = r;
    }
    if let Some(r) = &args.r_bar {
        cfg.r_bar = r.clone();
    }
    if args.n.is_some() {
        cfg.n = args.n;
    }
    Ok(cfg)
}

fn input_search(cfg: &RegionConfig, q: &Channel, optimize_by_default: bool) -> Result<InputSearch> {
    if let Some(p) = &cfg.input {
        if cfg.optimize_input == Some(true) {
            return Err(Error::config("give either an input or optimize_input, not both"));
        }
        return Ok(InputSearch::Fixed(distribution(p)?));
    }
    if cfg.optimize_input.unwrap_or(optimize_by_default) {
        Ok(InputSearch::Optimize {
            resolution: cfg.resolution,
        })
    } else {
        Ok(InputSearch::Fixed(Distribution::uniform(q.inputs())?))
    }
}

fn require_channel(cfg: &RegionConfig) -> Result<Channel> {
    cfg.channel
        .as_ref()
        .ok_or_else(|| Error::config(format!("theorem {} needs a channel", cfg.theorem)))?
        .resolve()
}

fn check_grid(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config(format!("{name} grid is empty")));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::config(format!("{name} grid must be finite and non-negative")));
    }
    Ok(())
}

pub fn region_table(cfg: &RegionConfig) -> Result<Table> {
    check_grid("alpha", &cfg.alphas)?;
    check_grid("nu", &cfg.nus)?;
    match cfg.theorem {
        2 | 4 => {
            let q = require_channel(cfg)?;
            let (scheme, search) = if cfg.theorem == 2 {
                (Scheme::TwoStage, input_search(cfg, &q, true)?)
            } else {
                (Scheme::BlockMl, input_search(cfg, &q, false)?)
            };
            let points = frontier_grid(scheme, &q, &cfg.alphas, &cfg.nus, &search)?;
            let mut header = vec!["alpha".to_string(), "nu".into(), "R_star".into()];
            header.extend((0..q.inputs()).map(|x| format!("P_{x}")));
            header.extend(["lambda".into(), "binding_constraint".into(), "feasible".into()]);
            let mut t = Table {
                header,
                rows: Vec::new(),
            };
            for f in points {
                let mut row: Vec<Cell> = vec![f.alpha.into(), f.nu.into(), f.r_star.into()];
                match &f.input {
                    Some(p) => row.extend(p.probs().iter().map(|&v| Cell::Num(v))),
                    None => row.extend((0..q.inputs()).map(|_| Cell::Empty)),
                }
                row.extend([f.lambda.into(), f.binding.into(), f.feasible.into()]);
                t.rows.push(row);
            }
            Ok(t)
        }
        3 => {
            if cfg.classes.is_empty() {
                return Err(Error::config("theorem 3 needs at least one entry in classes"));
            }
            let mut channels = Vec::new();
            let mut inputs = Vec::new();
            let mut nus = Vec::new();
            for c in &cfg.classes {
                channels.push(c.channel.resolve()?);
                inputs.push(distribution(&c.input)?);
                nus.push(c.nu);
            }
            let asg = ChannelAssignment::new(channels, inputs, nus)?;
            let mut header = vec!["alpha".to_string(), "nu".into(), "R_star".into()];
            header.extend((0..asg.classes()).map(|j| format!("lambda_{j}")));
            header.extend(["binding_constraint".into(), "feasible".into(), "identification_sum".into()]);
            let mut t = Table {
                header,
                rows: Vec::new(),
            };
            for &alpha in &cfg.alphas {
                let f = class_frontier(&asg, alpha, cfg.n)?;
                let mut row: Vec<Cell> = vec![f.alpha.into(), f.nu.into(), f.r_star.into()];
                row.extend(f.lambdas.iter().map(|&l| Cell::from(l)));
                row.extend([f.binding.into(), f.feasible.into(), f.identification_sum.into()]);
                t.rows.push(row);
            }
            Ok(t)
        }
        5 => {
            let q = require_channel(cfg)?;
            let p = match input_search(cfg, &q, false)? {
                InputSearch::Fixed(p) => p,
                InputSearch::Optimize { .. } => {
                    return Err(Error::config("the converse is evaluated at a fixed input"));
                }
            };
            let mut t = Table::new(&["alpha", "nu", "r_bar", "R_converse", "lambda", "witness"]);
            for &alpha in &cfg.alphas {
                for &nu in &cfg.nus {
                    for &r in &cfg.r_bar {
                        let c = converse_rate(&q, &p, alpha, nu, r)?;
                        t.rows.push(vec![
                            c.alpha.into(),
                            c.nu.into(),
                            c.r_bar.into(),
                            c.r_converse.into(),
                            c.lambda.into(),
                            c.witness.into(),
                        ]);
                    }
                }
            }
            Ok(t)
        }
        6 => {
            let mut t = Table::new(&["alpha", "nu", "feasible"]);
            for &alpha in &cfg.alphas {
                for &nu in &cfg.nus {
                    t.rows.push(vec![alpha.into(), nu.into(), occupancy_feasible(alpha, nu).into()]);
                }
            }
            Ok(t)
        }
        other => Err(Error::config(format!("theorem must be one of 2, 3, 4, 5, 6; got {other}"))),
    }
}

fn run_region(cli: &Cli, args: &RegionArgs) -> Result<Outcome> {
    let cfg = region_config(cli, args)?;
    let format = cli.format.unwrap_or(Format::Csv);
    let table = region_table(&cfg)?;
    let feasible = table
        .rows
        .iter()
        .filter(|r| r.contains(&Cell::Bool(true)))
        .count() as u64;
    Ok(Outcome {
        subcommand: "region",
        config: resolved(&cfg)?,
        seed: None,
        format,
        body: table.render(format)?,
        counts: BTreeMap::from([("rows".into(), table.rows.len() as u64), ("feasible_rows".into(), feasible)]),
        extra: Vec::new(),
    })
}

/// JSON report of the `identify` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyReport {
    #[serde(rename = "S")]
    pub s: f64,
    /// `None` when the bound is vacuous.
    pub pe_upper: Option<f64>,
    pub pe_lower: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub trials: u64,
    pub errors: u64,
    pub r_histogram: BTreeMap<usize, u64>,
}

pub fn identify_report(cfg: &IdentifyConfig) -> Result<IdentifyReport> {
    let dists = cfg.dists.iter().map(|d| distribution(d)).collect::<Result<Vec<_>>>()?;
    let inst = IdentificationInstance::new(dists, cfg.n)?;
    let s = identifiability_sum(&inst);
    let run = run_identification(&inst, cfg.trials, cfg.seed)?;
    let upper = pe_upper_bound_from_sum(s);
    Ok(IdentifyReport {
        s,
        pe_upper: upper.is_finite().then_some(upper),
        pe_lower: pe_lower_bound_from_sum(s),
        p_hat: run.estimate.p_hat,
        stderr: run.estimate.stderr,
        trials: run.estimate.trials,
        errors: run.estimate.errors,
        r_histogram: run.r_histogram,
    })
}

fn run_identify(cli: &Cli, args: &IdentifyArgs) -> Result<Outcome> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("identify needs --config <instance.json>"))?;
    let mut cfg: IdentifyConfig = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    let report = identify_report(&cfg)?;
    let format = cli.format.unwrap_or(Format::Json);
    let body = match format {
        Format::Json => to_json_bytes(&report)?,
        Format::Csv => {
            let mut t = Table::new(&["S", "pe_upper", "pe_lower", "p_hat", "stderr", "trials", "errors"]);
            t.rows.push(vec![
                report.s.into(),
                report.pe_upper.into(),
                report.pe_lower.into(),
                report.p_hat.into(),
                report.stderr.into(),
                report.trials.into(),
                report.errors.into(),
            ]);
            t.to_csv()?
        }
    };
    Ok(Outcome {
        subcommand: "identify",
        config: resolved(&cfg)?,
        seed: Some(cfg.seed),
        format,
        body,
        counts: BTreeMap::from([("trials".into(), report.trials), ("errors".into(), report.errors)]),
        extra: Vec::new(),
    })
}

pub fn experiment_from_config(cfg: &SimulateConfig) -> Result<Experiment> {
    if cfg.users == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    let channels: Vec<Channel> = match (&cfg.channel, &cfg.channels) {
        (Some(c), None) => vec![c.resolve()?; cfg.users],
        (None, Some(list)) => {
            if list.len() != cfg.users {
                return Err(Error::config(format!("{} channels for K = {}", list.len(), cfg.users)));
            }
            list.iter().map(ChannelSpec::resolve).collect::<Result<_>>()?
        }
        _ => return Err(Error::config("give exactly one of channel or channels")),
    };
    let inputs: Vec<Distribution> = match (&cfg.input, &cfg.inputs) {
        (Some(p), None) => vec![distribution(p)?; cfg.users],
        (None, Some(list)) => {
            if list.len() != cfg.users {
                return Err(Error::config(format!("{} inputs for K = {}", list.len(), cfg.users)));
            }
            list.iter().map(|p| distribution(p)).collect::<Result<_>>()?
        }
        (None, None) => channels
            .iter()
            .map(|q| Distribution::uniform(q.inputs()))
            .collect::<Result<_>>()?,
        _ => return Err(Error::config("give at most one of input or inputs")),
    };
    let exp = Experiment {
        pipeline: cfg.pipeline,
        n: cfg.n,
        blocks: cfg.blocks,
        messages: cfg.messages,
        users: channels
            .into_iter()
            .zip(inputs)
            .map(|(channel, input)| UserSetup { channel, input })
            .collect(),
        threshold: cfg.threshold,
        trials: cfg.trials,
        seed: cfg.seed,
        distinct_codewords: cfg.distinct_codewords,
    };
    exp.validate()?;
    Ok(exp)
}

fn run_simulate(cli: &Cli, args: &SimulateArgs) -> Result<Outcome> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("simulate needs --config <experiment.json>"))?;
    let mut cfg: SimulateConfig = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    let exp = experiment_from_config(&cfg)?;
    let run = run_experiment(&exp)?;
    let r = &run.report;
    let format = cli.format.unwrap_or(Format::Json);
    let body = match format {
        Format::Json => to_json_bytes(r)?,
        Format::Csv => {
            let mut t = Table::new(&[
                "trials",
                "global_errors",
                "global_error_rate",
                "stderr",
                "collisions",
                "non_collision_errors",
                "sync_miss_trials",
                "sync_false_alarm_trials",
                "ident_failures",
                "message_failures",
            ]);
            t.rows.push(vec![
                r.trials.into(),
                r.global_error.count.into(),
                r.global_error.rate.into(),
                r.global_error.stderr.into(),
                r.collisions.into(),
                r.non_collision_errors.into(),
                r.sync_miss_trials.into(),
                r.sync_false_alarm_trials.into(),
                r.ident_failures.into(),
                r.message_failures.into(),
            ]);
            t.to_csv()?
        }
    };
    let mut extra = Vec::new();
    if let Some(p) = &args.trials_csv {
        let mut t = Table::new(&["trial", "collision", "sync_miss", "sync_fa", "ident_ok", "msgs_ok", "global_error"]);
        for tr in &run.trials {
            t.rows.push(vec![
                tr.trial.into(),
                tr.collision.into(),
                tr.sync_missed.into(),
                tr.sync_false_alarm.into(),
                tr.ident_correct.into(),
                tr.messages_correct.into(),
                tr.global_error.into(),
            ]);
        }
        extra.push((p.clone(), t.to_csv()?));
    }
    Ok(Outcome {
        subcommand: "simulate",
        config: resolved(&cfg)?,
        seed: Some(cfg.seed),
        format,
        body,
        counts: BTreeMap::from([
            ("trials".into(), r.trials),
            ("global_errors".into(), r.global_error.count),
            ("collisions".into(), r.collisions),
            ("sync_miss_trials".into(), r.sync_miss_trials),
            ("sync_false_alarm_trials".into(), r.sync_false_alarm_trials),
            ("ident_failures".into(), r.ident_failures),
            ("message_failures".into(), r.message_failures),
        ]),
        extra,
    })
}

pub fn verify_table(cfg: &VerifyConfig) -> Result<(Table, u64)> {
    match cfg.check {
        VerifyCheck::Lemma1 => {
            let rows = cycle_gain_sweep(cfg.kmin.unwrap_or(3), cfg.kmax.unwrap_or(7), cfg.draws.unwrap_or(200), cfg.seed)?;
            let mut t = Table::new(&["k", "r", "n_k", "N_rk", "lhs_mean", "rhs", "holds", "worst_ratio", "draws"]);
            let mut failures = 0;
            for r in rows {
                failures += u64::from(!r.holds);
                t.rows.push(vec![
                    r.k.into(),
                    r.r.into(),
                    r.n_k.into(),
                    (r.n_rk as u64).into(),
                    r.lhs_mean.into(),
                    r.rhs.into(),
                    r.holds.into(),
                    r.worst_ratio.into(),
                    r.draws.into(),
                ]);
            }
            Ok((t, failures))
        }
        VerifyCheck::Cycles => {
            let rows = cycle_count_sweep(cfg.kmax.unwrap_or(8))?;
            let mut t = Table::new(&["k", "r", "N_rk", "enumerated", "counts_match", "ratio", "growth_bound_holds"]);
            let mut failures = 0;
            for r in rows {
                failures += u64::from(!(r.counts_match && r.growth_bound_holds));
                t.rows.push(vec![
                    r.k.into(),
                    r.r.into(),
                    (r.n_rk as u64).into(),
                    r.enumerated.into(),
                    r.counts_match.into(),
                    r.ratio.into(),
                    r.growth_bound_holds.into(),
                ]);
            }
            Ok((t, failures))
        }
        VerifyCheck::Lemma5 => {
            let rows = occupancy_sweep(cfg.kmax.unwrap_or(6), cfg.amax.unwrap_or(6))?;
            let mut t = Table::new(&[
                "K",
                "A",
                "argmax",
                "max_multinomial",
                "argmax_max_gap",
                "unbalanced",
                "swap_verified",
            ]);
            let mut failures = 0;
            for r in rows {
                failures += u64::from(!(r.swap_verified && r.argmax_max_gap <= 1));
                let argmax = r.argmax.iter().map(|v| v.iter().join(" ")).join("|");
                t.rows.push(vec![
                    r.users.into(),
                    r.blocks.into(),
                    Cell::Text(argmax),
                    (r.max_multinomial as u64).into(),
                    r.argmax_max_gap.into(),
                    r.unbalanced.into(),
                    r.swap_verified.into(),
                ]);
            }
            Ok((t, failures))
        }
    }
}

fn run_verify(cli: &Cli, args: &VerifyArgs) -> Result<Outcome> {
    let flag = if args.lemma1 {
        Some(VerifyCheck::Lemma1)
    } else if args.cycles {
        Some(VerifyCheck::Cycles)
    } else if args.lemma5 {
        Some(VerifyCheck::Lemma5)
    } else {
        None
    };
    let mut cfg = match (&cli.config, flag) {
        (Some(path), _) => load_config::<VerifyConfig>(path)?,
        (None, Some(check)) => VerifyConfig {
            check,
            kmin: None,
            kmax: None,
            amax: None,
            draws: None,
            seed: 0,
        },
        (None, None) => return Err(Error::config("verify needs --lemma1, --cycles, --lemma5 or --config")),
    };
    if let Some(c) = flag {
        cfg.check = c;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.kmin = args.kmin.or(cfg.kmin);
    cfg.kmax = args.kmax.or(cfg.kmax);
    cfg.amax = args.amax.or(cfg.amax);
    cfg.draws = args.draws.or(cfg.draws);
    let (table, failures) = verify_table(&cfg)?;
    if failures > 0 {
        eprintln!("verify: {failures} row(s) failed");
    } else {
        eprintln!("verify: all {} rows hold", table.rows.len());
    }
    let format = cli.format.unwrap_or(Format::Csv);
    Ok(Outcome {
        subcommand: "verify",
        config: resolved(&cfg)?,
        seed: Some(cfg.seed),
        format,
        body: table.render(format)?,
        counts: BTreeMap::from([("rows".into(), table.rows.len() as u64), ("failures".into(), failures)]),
        extra: Vec::new(),
    })
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Stages every file in a temporary sibling, then renames them all into
/// place, so a failure never leaves partial output behind.
fn write_all_atomic(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    let mut staged = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        tmp.write_all(bytes).map_err(io_err)?;
        tmp.flush().map_err(io_err)?;
        staged.push((tmp, path));
    }
    for (tmp, path) in staged {
        tmp.persist(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Io(e.to_string()))?;
    let outcome = pool.install(|| match &cli.command {
        Command::Region(a) => run_region(cli, a),
        Command::Identify(a) => run_identify(cli, a),
        Command::Simulate(a) => run_simulate(cli, a),
        Command::Verify(a) => run_verify(cli, a),
    })?;
    let config_bytes = serde_json::to_vec(&outcome.config).map_err(io_err)?;
    let manifest = |output: &Path| -> Result<Vec<u8>> {
        to_json_bytes(&RunManifest {
            tool: "sasmac".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: outcome.subcommand.into(),
            config_sha256: sha256_hex(&config_bytes),
            config: outcome.config.clone(),
            seed: outcome.seed,
            threads: cli.threads,
            format: match outcome.format {
                Format::Csv => "csv".into(),
                Format::Json => "json".into(),
            },
            output: output.display().to_string(),
            wall_time_secs: start.elapsed().as_secs_f64(),
            counts: outcome.counts.clone(),
        })
    };
    let mut files = Vec::new();
    for (path, bytes) in &outcome.extra {
        files.push((path.clone(), bytes.clone()));
        files.push((manifest_path(path), manifest(path)?));
    }
    match &cli.out {
        Some(out) => {
            files.push((out.clone(), outcome.body.clone()));
            files.push((manifest_path(out), manifest(out)?));
            write_all_atomic(&files)
        }
        None => {
            write_all_atomic(&files)?;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&outcome.body).map_err(io_err)?;
            stdout.flush().map_err(io_err)
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.0, 1.0, -2.5, 0.20715, 1.0 / 3.0, 1e-7, 123456.789, 1e20, f64::INFINITY] {
            let s = format_float(x);
            let back: f64 = s.parse().unwrap();
            if x.is_finite() && x != 0.0 {
                assert!(((back - x) / x).abs() < 1e-8, "{x} -> {s}");
            } else {
                assert_eq!(back, x);
            }
        }
        assert_eq!(format_float(0.5), "0.5");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333");
    }

    #[test]
    fn channel_shorthands() {
        assert_eq!(parse_channel("bsc:0.11").unwrap(), Channel::bsc(0.11).unwrap());
        assert_eq!(parse_channel("bec:0.2").unwrap().outputs(), 3);
        assert!(parse_channel("bsc:x").is_err());
        assert!(parse_channel("awgn:1").is_err());
        assert!(parse_channel("bsc").is_err());
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(&["a", "b"]);
        assert_eq!(t.to_csv().unwrap(), b"a,b\n");
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let bad = r#"{"theorem": 2, "channel": "bsc:0.11", "colour": 1}"#;
        assert!(serde_json::from_str::<RegionConfig>(bad).is_err());
        let ok = r#"{"theorem": 2, "channel": "bsc:0.11"}"#;
        let cfg: RegionConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.alphas.len(), 7);
        assert_eq!(cfg.nus.len(), 5);
    }
}
