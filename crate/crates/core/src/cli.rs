//! The `srnas` command line.
//!
//! Exit status: 0 on success, 2 for usage, configuration or input-file
//! errors, 3 when an evaluator fails, 1 for anything else.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::costmodel::{arch_flops, format_gmacs, CostConfig, TensorShape};
use crate::evaluators::protocol::{serve, SurrogateEndpoint};
use crate::evaluators::{
    EvalError, Evaluator, EvaluatorSpec, ExternalConfig, ExternalEvaluator, ExternalPool, SurrogateConfig,
    SurrogateEvaluator,
};
use crate::searchspace::{arch_to_dot, ArchSpec, SpaceConfig};
use crate::trainer::{derive, run_epoch, Candidate, RewardConfig, SearchState, TrainConfig, TrainError};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 1;
pub const OUT_DIR_ENV: &str = "SRNAS_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "srnas-out";

/// Search configuration file (TOML). Every section and key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub schema_version: u32,
    pub space: SpaceConfig,
    pub controller: ControllerConfig,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub evaluator: EvaluatorSection,
    pub surrogate: SurrogateConfig,
    /// Candidates sampled by `derive`.
    pub derive_k: usize,
    /// Epochs between checkpoints.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSection {
    /// `surrogate` or `external:<command line>`.
    pub kind: String,
    pub timeout_secs: f64,
    pub parallel: usize,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        EvaluatorSection { kind: "surrogate".into(), timeout_secs: 600.0, parallel: 1 }
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            space: SpaceConfig::default(),
            controller: ControllerConfig::default(),
            // 100 G-MACs at 3x480x480 is 1 G-MAC at the 3x48x48 evaluation shape.
            reward: RewardConfig { cost_budget_gmacs: 1.0, ..RewardConfig::default() },
            train: TrainConfig { seed: DEFAULT_SEED, ..TrainConfig::default() },
            evaluator: EvaluatorSection::default(),
            surrogate: SurrogateConfig::default(),
            derive_k: 16,
            checkpoint_every: 10,
        }
    }
}

impl SearchConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: SearchConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn check(&self) -> Result<(), CliError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Usage(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.space.check().map_err(|e| CliError::Usage(e.to_string()))?;
        self.reward.check().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.check().map_err(|e| CliError::Usage(e.to_string()))?;
        self.surrogate.cost.check().map_err(|e| CliError::Usage(e.to_string()))?;
        self.evaluator_spec()?;
        if self.derive_k == 0 {
            return Err(CliError::Usage("derive_k must be at least 1".into()));
        }
        if !(self.evaluator.timeout_secs > 0.0 && self.evaluator.timeout_secs.is_finite()) {
            return Err(CliError::Usage("evaluator timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn evaluator_spec(&self) -> Result<EvaluatorSpec, CliError> {
        self.evaluator.kind.parse().map_err(CliError::Usage)
    }

    /// Builds the configured evaluator.
    pub fn build_evaluator(&self) -> Result<Box<dyn Evaluator>, CliError> {
        Ok(match self.evaluator_spec()? {
            EvaluatorSpec::Surrogate => Box::new(SurrogateEvaluator::new(self.space, self.surrogate.clone())),
            EvaluatorSpec::External(argv) => {
                let cfg = ExternalConfig {
                    timeout: Duration::from_secs_f64(self.evaluator.timeout_secs),
                    seed: self.train.seed,
                    cost_shape: self.surrogate.cost_shape,
                    cost: self.surrogate.cost,
                    ..ExternalConfig::new(argv)
                };
                if self.evaluator.parallel > 1 {
                    Box::new(ExternalPool::spawn(cfg, self.evaluator.parallel)?)
                } else {
                    Box::new(ExternalEvaluator::spawn(cfg)?)
                }
            }
        })
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or input files.
    Usage(String),
    Evaluator(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Evaluator(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Evaluator(m) | CliError::Other(m) => f.write_str(m),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Evaluator(format!("evaluator error ({}): {e}", e.kind()))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Evaluator { .. } => CliError::Evaluator(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

fn write_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("cannot write {}: {e}", path.display()))
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn read_arch(path: &Path) -> Result<(ArchSpec, SpaceConfig), CliError> {
    ArchSpec::from_json(&read_input(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Parser, Debug)]
#[command(name = "srnas", version, about = "Hierarchical architecture search for super-resolution networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train the controller and write reward.csv, best_arch.json and checkpoint.bin.
    Search(SearchArgs),
    /// Sample candidates from a trained controller and keep the best one.
    Derive(DeriveArgs),
    /// Print the multiply-add cost of an architecture.
    Flops(FlopsArgs),
    /// Re-emit an architecture as DOT graphs or canonical JSON.
    Export(ExportArgs),
    /// Serve the surrogate over the evaluator protocol on stdin/stdout.
    #[command(hide = true)]
    ServeSurrogate(ConfigArg),
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// Search configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Search configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `surrogate` or `external:<command line>`; overrides the config file.
    #[arg(long)]
    pub evaluator: Option<String>,
    /// Overrides the config file seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
    pub out: PathBuf,
    /// Number of concurrent external endpoints.
    #[arg(long)]
    pub parallel: Option<usize>,
}

impl CommonArgs {
    fn load(&self) -> Result<SearchConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => SearchConfig::from_toml(&read_input(path)?)?,
            None => SearchConfig::default(),
        };
        if let Some(kind) = &self.evaluator {
            cfg.evaluator.kind = kind.clone();
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(n) = self.parallel {
            cfg.evaluator.parallel = n;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(self.out.clone())
    }
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// PSNR/cost trade-off in [0, 1]; overrides the config file.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from checkpoint.bin in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct DeriveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint written by `search`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Candidates to sample [default: derive_k from the config, 16].
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Architecture JSON file.
    pub arch: PathBuf,
    /// Input shape as CxHxW.
    #[arg(long, default_value = "3x480x480")]
    pub shape: TensorShape,
    /// Channels per operation.
    #[arg(long, default_value_t = CostConfig::DERIVE_CHANNELS)]
    pub channels: u64,
    /// Also report the total for every upsampling position.
    #[arg(long)]
    pub position_sweep: bool,
    /// Print machine-readable JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Dot,
    Json,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Architecture JSON file.
    pub arch: PathBuf,
    #[arg(long, value_enum)]
    pub format: ExportFormat,
    /// Write files into this directory instead of printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("srnas: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Search(a) => cmd_search(&a),
        Cmd::Derive(a) => cmd_derive(&a),
        Cmd::Flops(a) => cmd_flops(&a, &mut io::stdout().lock()),
        Cmd::Export(a) => cmd_export(&a, &mut io::stdout().lock()),
        Cmd::ServeSurrogate(a) => {
            let cfg = match &a.config {
                Some(p) => SearchConfig::from_toml(&read_input(p)?)?,
                None => SearchConfig::default(),
            };
            let mut endpoint = SurrogateEndpoint(SurrogateEvaluator::new(cfg.space, cfg.surrogate));
            serve(io::stdin().lock(), io::stdout().lock(), &mut endpoint)
                .map_err(|e| CliError::Other(format!("serve: {e}")))
        }
    }
}

pub fn cmd_search(a: &SearchArgs) -> Result<(), CliError> {
    let mut cfg = a.common.load()?;
    if let Some(l) = a.lambda {
        cfg.reward.lambda = l;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.check()?;
    let out = a.common.out_dir()?;
    let ckpt = out.join("checkpoint.bin");

    let mut state = if a.resume && ckpt.exists() {
        let (state, _, _) =
            SearchState::load(&ckpt).map_err(|e| CliError::Usage(format!("{}: {e}", ckpt.display())))?;
        if *state.params.space() != cfg.space || *state.params.config() != cfg.controller {
            return Err(CliError::Usage("checkpoint was written with a different space or controller".into()));
        }
        state
    } else {
        SearchState::new(cfg.space, cfg.controller, &cfg.train)
    };
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(write_err(&out))?;

    let mut evaluator = cfg.build_evaluator()?;
    let mut outcome = Ok(());
    while !state.finished(&cfg.train) {
        if let Err(e) = run_epoch(&mut state, evaluator.as_mut(), &cfg.reward, &cfg.train) {
            outcome = Err(e);
            break;
        }
        if !a.quiet {
            let recent = &state.log.records[state.log.len().saturating_sub(cfg.train.samples_per_epoch())..];
            let mean = recent.iter().map(|r| r.reward).sum::<f64>() / recent.len().max(1) as f64;
            eprintln!("epoch {:>4}/{}  mean reward {mean:.4}", state.epoch, cfg.train.epochs);
        }
        if state.epoch % cfg.checkpoint_every.max(1) == 0 || state.finished(&cfg.train) {
            state.save(&ckpt, &cfg.reward, &cfg.train).map_err(|e| CliError::Other(e.to_string()))?;
        }
    }

    let csv_path = out.join("reward.csv");
    let file = fs::File::create(&csv_path).map_err(write_err(&csv_path))?;
    state.log.write_csv(io::BufWriter::new(file)).map_err(|e| CliError::Other(e.to_string()))?;
    if let Some(best) = state.log.best() {
        let arch = best.arch.to_arch().map_err(|e| CliError::Other(e.to_string()))?;
        let path = out.join("best_arch.json");
        fs::write(&path, arch.to_json() + "\n").map_err(write_err(&path))?;
    }
    outcome?;
    println!("wrote {} records to {}", state.log.len(), out.display());
    Ok(())
}

fn candidates_table(candidates: &[Candidate]) -> String {
    let mut s = String::from("rank,reward,psnr,cost_gmacs,log_prob,tokens\n");
    for (i, c) in candidates.iter().enumerate() {
        let tokens: Vec<String> = c.tokens.iter().map(|t| t.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            c.reward,
            c.measurement.psnr,
            c.measurement.cost_gmacs(),
            c.log_prob,
            tokens.join(" ")
        ));
    }
    s
}

pub fn cmd_derive(a: &DeriveArgs) -> Result<(), CliError> {
    let (state, reward, train) =
        SearchState::load(&a.checkpoint).map_err(|e| CliError::Usage(format!("{}: {e}", a.checkpoint.display())))?;
    let mut cfg = a.common.load()?;
    if a.common.config.is_none() {
        cfg.reward = reward;
        cfg.train.attempts = train.attempts;
    }
    cfg.space = *state.params.space();
    let k = a.k.unwrap_or(cfg.derive_k);
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let out = a.common.out_dir()?;
    let mut evaluator = cfg.build_evaluator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let d = derive(&state.params, evaluator.as_mut(), &cfg.reward, k, cfg.train.attempts, &mut rng)?;

    let best = d.best();
    let dots = arch_to_dot(&best.arch);
    let files = [
        ("best_arch.json", best.arch.to_json() + "\n"),
        ("normal_cell.dot", dots.normal_cell),
        ("upsample_cell.dot", dots.upsample_cell),
        ("network.dot", dots.network),
        ("candidates.csv", candidates_table(&d.candidates)),
    ];
    for (name, text) in files {
        let path = out.join(name);
        fs::write(&path, text).map_err(write_err(&path))?;
    }
    let mut stdout = io::stdout().lock();
    let w = |e: io::Error| CliError::Other(e.to_string());
    writeln!(stdout, "{:>4}  {:>9}  {:>8}  {:>10}", "rank", "reward", "psnr", "G-MACs").map_err(w)?;
    for (i, c) in d.candidates.iter().enumerate() {
        writeln!(
            stdout,
            "{:>4}  {:>9.5}  {:>8.3}  {:>10}",
            i + 1,
            c.reward,
            c.measurement.psnr,
            format_gmacs(c.measurement.cost.round() as u64)
        )
        .map_err(w)?;
    }
    writeln!(stdout, "best architecture written to {}", out.join("best_arch.json").display()).map_err(w)?;
    Ok(())
}

#[derive(Serialize)]
struct FlopsJson {
    shape: String,
    channels: u64,
    total_macs: u64,
    total_gmacs: String,
    per_layer: Vec<crate::costmodel::LayerCost>,
    #[serde(skip_serializing_if = "Option::is_none")]
    position_sweep: Option<Vec<(usize, u64)>>,
}

pub fn cmd_flops<W: Write>(a: &FlopsArgs, out: &mut W) -> Result<(), CliError> {
    let (arch, _) = read_arch(&a.arch)?;
    let cfg = CostConfig::with_channels(a.channels);
    let cost_err = |e: crate::costmodel::CostError| CliError::Usage(e.to_string());
    let report = arch_flops(&arch, a.shape, &cfg).map_err(cost_err)?;
    let sweep = if a.position_sweep {
        let mut totals = Vec::with_capacity(arch.depth);
        for p in 1..=arch.depth {
            let moved = ArchSpec { position: p, ..arch.clone() };
            totals.push((p, arch_flops(&moved, a.shape, &cfg).map_err(cost_err)?.total_macs));
        }
        Some(totals)
    } else {
        None
    };
    let w = |e: io::Error| CliError::Other(e.to_string());
    if a.json {
        let doc = FlopsJson {
            shape: a.shape.to_string(),
            channels: a.channels,
            total_macs: report.total_macs,
            total_gmacs: format_gmacs(report.total_macs),
            per_layer: report.per_layer,
            position_sweep: sweep,
        };
        writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("report serializes")).map_err(w)?;
        return Ok(());
    }
    writeln!(out, "input {}  channels per op {}", a.shape, a.channels).map_err(w)?;
    writeln!(out, "{:>5}  {:<8}  {:>14}  {:>9}  {:>12}", "layer", "kind", "MACs", "G-MACs", "output").map_err(w)?;
    for l in &report.per_layer {
        let kind = serde_json::to_value(l.kind).expect("kind serializes");
        writeln!(
            out,
            "{:>5}  {:<8}  {:>14}  {:>9}  {:>12}",
            l.index,
            kind.as_str().unwrap_or("?"),
            l.macs,
            format_gmacs(l.macs),
            l.output.to_string()
        )
        .map_err(w)?;
    }
    writeln!(out, "total {} G-MACs ({} MACs)", format_gmacs(report.total_macs), report.total_macs).map_err(w)?;
    if let Some(sweep) = sweep {
        writeln!(out, "\nposition  G-MACs").map_err(w)?;
        for (p, macs) in sweep {
            writeln!(out, "{p:>8}  {}", format_gmacs(macs)).map_err(w)?;
        }
    }
    Ok(())
}

pub fn cmd_export<W: Write>(a: &ExportArgs, out: &mut W) -> Result<(), CliError> {
    let (arch, _) = read_arch(&a.arch)?;
    let files: Vec<(&str, String)> = match a.format {
        ExportFormat::Json => vec![("arch.json", arch.to_json() + "\n")],
        ExportFormat::Dot => {
            let d = arch_to_dot(&arch);
            vec![("normal_cell.dot", d.normal_cell), ("upsample_cell.dot", d.upsample_cell), ("network.dot", d.network)]
        }
    };
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(write_err(dir))?;
            for (name, text) in files {
                let path = dir.join(name);
                fs::write(&path, text).map_err(write_err(&path))?;
            }
        }
        None => {
            for (_, text) in files {
                out.write_all(text.as_bytes()).map_err(|e| CliError::Other(e.to_string()))?;
            }
        }
    }
    Ok(())
}
