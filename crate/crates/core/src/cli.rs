//! Command-line driver: `gen-data`, `search`, `extract`, `retrain`, `oracle`
//! and `report`.
//!
//! Every command reads a config file, applies flag overrides, and writes its
//! artifacts under the output directory. Outputs contain no timestamps, so a
//! rerun with the same config and seed reproduces them byte for byte.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, RunConfig};
use crate::data::{load_dataset, save_dataset, split_heldout, Dataset};
use crate::error::{NasError, Result};
use crate::lattice::{build_lattice, format_candidate, format_top_n, k_best, parse_top_n, path_probability};
use crate::numeric::{streams, Rng};
use crate::oracle::{brute_force_rank, compare_nas_to_oracle, report_csv, OracleReport};
use crate::search::{current_choice, run_search, Method, SearchData, SearchState, Snapshot};
use crate::supernet::{network_param_count, SearchSpaceSpec, SuperNetwork};
use crate::train::{candidate_checkpoint, candidate_from_checkpoint, retrain_candidate, Checkpoint, RetrainResult};

pub const TRAJECTORY_FILE: &str = "lambda_trajectory.csv";
pub const TOP_N_FILE: &str = "topN.txt";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Name of the checkpoint for the `k`-th (1-based) extracted candidate.
pub fn retrain_file(k: usize) -> String {
    format!("retrain_{k}.tdnf")
}

#[derive(Debug, Parser)]
#[command(name = "tdnnf-nas", version, about = "Architecture search for factored TDNN layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData(CommonArgs),
    /// Train the super-network and architecture weights.
    Search(CommonArgs),
    /// Write the N most probable architectures.
    Extract(CommonArgs),
    /// Retrain each extracted architecture from scratch.
    Retrain(CommonArgs),
    /// Exhaustively retrain the whole space and compare with the search.
    Oracle(CommonArgs),
    /// Summarise a completed run.
    Report(CommonArgs),
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::GenData(a)
            | Command::Search(a)
            | Command::Extract(a)
            | Command::Retrain(a)
            | Command::Oracle(a)
            | Command::Report(a) => a,
        }
    }
}

/// Flags shared by every command; all but `--config` override the file.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Training seed (`train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of architectures to extract and retrain.
    #[arg(long)]
    pub top: Option<usize>,
    /// softmax, gumbel, pipe-softmax or pipe-gumbel.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Weight of the parameter-count penalty.
    #[arg(long)]
    pub eta: Option<f64>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: NasError| e.to_string())
}

impl CommonArgs {
    /// Parses the config file and applies the overrides.
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = parse_config(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.paths.out_dir = out.clone();
        }
        if let Some(top) = self.top {
            cfg.nas.top_n = top;
        }
        if let Some(method) = self.method {
            cfg.nas.method = method;
        }
        if let Some(eta) = self.eta {
            cfg.nas.eta = eta;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (program name first), runs the command, and returns the exit
/// status: 0 on success, 1 on a failed command, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs a parsed command and returns the text it prints.
pub fn execute(command: &Command) -> Result<String> {
    let cfg = command.args().load()?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    match command {
        Command::GenData(_) => cmd_gen_data(&cfg).map(|p| format!("wrote {}\n", p.display())),
        Command::Search(_) => cmd_search(&cfg).map(|s| {
            format!(
                "searched {} steps, top-1:\n{}",
                s.step,
                format_candidate(&current_choice(&s.net.space, &s.weights), &s.net.space)
            )
        }),
        Command::Extract(_) => cmd_extract(&cfg),
        Command::Retrain(_) => cmd_retrain(&cfg).map(|results| {
            results.iter().enumerate().fold(String::new(), |mut s, (i, r)| {
                let _ = writeln!(s, "candidate {}: val_loss={} val_accuracy={}", i + 1, r.val_loss, r.val_accuracy);
                s
            })
        }),
        Command::Oracle(_) => cmd_oracle(&cfg).map(|r| {
            let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            format!(
                "{} candidates, spearman={} kendall={}\n",
                r.entries.len(),
                opt(r.spearman),
                opt(r.kendall)
            )
        }),
        Command::Report(_) => cmd_report(&cfg),
    }
}

/// Generates the dataset described by `[data]` and saves it.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let d = cfg.data.generate()?;
    let path = cfg.paths.dataset();
    save_dataset(&d, &path)?;
    Ok(path)
}

/// Loads the dataset and checks it against the configured network shape.
pub fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.paths.dataset();
    if !path.exists() {
        return Err(NasError::State(format!(
            "dataset {} not found, run gen-data first",
            path.display()
        )));
    }
    let d = load_dataset(&path)?;
    let shape = cfg.shape();
    if d.feature_dim() != shape.input_dim || d.num_classes != shape.num_classes {
        return Err(NasError::shape(
            format!("dataset with {} features and {} classes", d.feature_dim(), d.num_classes),
            format!("config with {} features and {} classes", shape.input_dim, shape.num_classes),
        ));
    }
    Ok(d)
}

/// Training and held-out parts of the dataset for the run's seed.
pub fn run_split(cfg: &RunConfig, d: &Dataset) -> Result<(Dataset, Dataset)> {
    split_heldout(d, cfg.nas.heldout_fraction, &mut Rng::new(cfg.train.seed, streams::SPLIT))
}

/// Runs the search, saving the final state and the λ trajectory.
///
/// Joint methods train on the full dataset; pipelined methods train layers on
/// the training part and architecture weights on the held-out part.
pub fn cmd_search(cfg: &RunConfig) -> Result<SearchState> {
    let d = load_run_dataset(cfg)?;
    let (train, held) = run_split(cfg, &d)?;
    let net = SuperNetwork::new(
        cfg.space.clone(),
        cfg.shape(),
        &mut Rng::new(cfg.train.seed, streams::INIT),
    )?;
    let data = if cfg.nas.method.is_pipelined() {
        SearchData {
            train: &train,
            heldout: Some(&held),
        }
    } else {
        SearchData { train: &d, heldout: None }
    };
    let outcome = run_search(net, data, &cfg.nas, &cfg.train)?;
    outcome.state.to_checkpoint().save(&cfg.paths.checkpoint())?;
    emit_lambda_trajectory(&outcome.trajectory, &cfg.space, &cfg.paths.out_dir.join(TRAJECTORY_FILE))?;
    Ok(outcome.state)
}

fn load_search_state(cfg: &RunConfig) -> Result<SearchState> {
    let path = cfg.paths.checkpoint();
    if !path.exists() {
        return Err(NasError::State(format!(
            "checkpoint {} not found, run search first",
            path.display()
        )));
    }
    SearchState::from_checkpoint(&Checkpoint::load(&path)?)
}

/// Writes the `top_n` most probable candidates and returns the file text.
pub fn cmd_extract(cfg: &RunConfig) -> Result<String> {
    let state = load_search_state(cfg)?;
    let lattice = build_lattice(&state.weights, &state.net.space)?;
    let text = format_top_n(&k_best(&lattice, cfg.nas.top_n)?, &state.net.space);
    std::fs::write(cfg.paths.out_dir.join(TOP_N_FILE), &text)?;
    Ok(text)
}

/// Retrains every extracted candidate on the training part and scores it on
/// the held-out part.
pub fn cmd_retrain(cfg: &RunConfig) -> Result<Vec<RetrainResult>> {
    let state = load_search_state(cfg)?;
    let space = &state.net.space;
    let shape = state.net.shape;
    let top = read_top_n(cfg, space)?;
    let d = load_run_dataset(cfg)?;
    let (train, held) = run_split(cfg, &d)?;
    let mut results = Vec::with_capacity(top.len());
    for (k, (cand, _)) in top.iter().enumerate() {
        let r = retrain_candidate(cand, space, shape, &train, &held, &cfg.train)?;
        candidate_checkpoint(&r, space, shape).save(&cfg.paths.out_dir.join(retrain_file(k + 1)))?;
        results.push(r);
    }
    Ok(results)
}

fn read_top_n(cfg: &RunConfig, space: &SearchSpaceSpec) -> Result<Vec<(crate::supernet::CandidateArchitecture, f64)>> {
    let path = cfg.paths.out_dir.join(TOP_N_FILE);
    if !path.exists() {
        return Err(NasError::State(format!("{} not found, run extract first", path.display())));
    }
    parse_top_n(&std::fs::read_to_string(path)?, space)
}

/// Retrains the whole configured space; compares with the search when a
/// checkpoint exists.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<OracleReport> {
    let d = load_run_dataset(cfg)?;
    let (train, held) = run_split(cfg, &d)?;
    let mut report = brute_force_rank(&cfg.space, cfg.shape(), &train, &held, &cfg.train, cfg.oracle_cap)?;
    if cfg.paths.checkpoint().exists() {
        let state = load_search_state(cfg)?;
        report = compare_nas_to_oracle(&state.weights, &cfg.space, &report)?;
    }
    std::fs::write(cfg.paths.out_dir.join(ORACLE_FILE), report_csv(&report, &cfg.space))?;
    Ok(report)
}

/// Summarises the selected architecture, retrained candidates and oracle
/// agreement; writes the same text to `report.txt`.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let state = load_search_state(cfg)?;
    let space = &state.net.space;
    let shape = state.net.shape;
    let top1 = current_choice(space, &state.weights);
    let lattice = build_lattice(&state.weights, space)?;
    let mut s = String::new();
    let _ = writeln!(s, "search steps: {}", state.step);
    let _ = writeln!(s, "selected architecture:");
    s.push_str(&format_candidate(&top1, space));
    let _ = writeln!(s, "parameters: {}", network_param_count(&top1, space, shape));
    let _ = writeln!(s, "path probability: {:e}", path_probability(&lattice, &top1)?);
    let out = &cfg.paths.out_dir;
    if out.join(TOP_N_FILE).exists() {
        let top = read_top_n(cfg, space)?;
        let _ = writeln!(s, "retrained candidates:");
        for (k, (cand, prob)) in top.iter().enumerate() {
            let path = out.join(retrain_file(k + 1));
            let params = network_param_count(cand, space, shape);
            if path.exists() {
                let (r, _, _) = candidate_from_checkpoint(&Checkpoint::load(&path)?)?;
                let _ = writeln!(
                    s,
                    "  {}: prob={prob:e} params={params} val_loss={} val_accuracy={}",
                    k + 1,
                    r.val_loss,
                    r.val_accuracy
                );
            } else {
                let _ = writeln!(s, "  {}: prob={prob:e} params={params} (not retrained)", k + 1);
            }
        }
    }
    if let Some(summary) = oracle_summary(&out.join(ORACLE_FILE))? {
        let _ = writeln!(s, "oracle: {summary}");
    }
    std::fs::write(out.join(REPORT_FILE), &s)?;
    Ok(s)
}

/// Correlation line of an oracle CSV, without the leading `# `.
fn oracle_summary(path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .find_map(|l| l.strip_prefix("# "))
        .map(str::to_string))
}

/// CSV of λ snapshots: header `step,layer,group,choice,lambda`, layers 1-based,
/// `choice` holding the offset or the bottleneck width.
pub fn trajectory_csv(log: &[Snapshot], space: &SearchSpaceSpec) -> Result<String> {
    if log.is_empty() {
        return Err(NasError::value("empty λ trajectory"));
    }
    let mut s = String::from("step,layer,group,choice,lambda\n");
    for snap in log {
        for (l, lam) in snap.lambdas.iter().enumerate() {
            for attr in space.searched_attributes() {
                let values = lam
                    .get(attr)
                    .ok_or_else(|| NasError::State(format!("snapshot lacks {attr} weights")))?;
                for (i, v) in values.iter().enumerate() {
                    let choice = match attr {
                        crate::supernet::Attribute::Dim => space.dim_choices[i],
                        _ => i,
                    };
                    let _ = writeln!(s, "{},{},{attr},{choice},{v}", snap.step, l + 1);
                }
            }
        }
    }
    Ok(s)
}

/// Writes [`trajectory_csv`] to `path`.
pub fn emit_lambda_trajectory(log: &[Snapshot], space: &SearchSpaceSpec, path: &Path) -> Result<()> {
    std::fs::write(path, trajectory_csv(log, space)?)?;
    Ok(())
}
