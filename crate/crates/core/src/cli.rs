//! Command-line front end: flag parsing, config overrides, and result files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::cost::{profile, pruned_profile, CostProfile, DatasetPreset};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{run_simulation, AggregationMode, Algorithm, SimulationReport};
use crate::partition::PartitionPlan;
use crate::pruning::remaining_for;
use crate::rho::{optimize_rho, score_curve, HillClimbOptions, PerClient, ScoreConfig, SearchMode};

// stdout writes ignore errors so that piping into `head` does not panic
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "prunefl",
    version,
    about = "Pruning-aware federated intrusion-detection simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split and partition the data; write the client x class heatmap.
    Partition,
    /// Run one federated simulation.
    Train,
    /// Run one simulation per pruning ratio in the sweep list.
    PruneSweep,
    /// Maximize the accuracy/energy score over pruning ratios.
    OptimizeRho {
        /// ScoreConfig JSON; defaults to the [score] table of --config.
        #[arg(long)]
        score: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::UniformGrid)]
        mode: ModeArg,
    },
    /// Print parameter count, FLOPs, size and energy as JSON.
    Cost {
        /// Use a built-in architecture (ton_iot, x_iiotid, idsiot2024) instead of the config.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Check a config and list every violated invariant.
    Validate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    UniformGrid,
    Coordinate,
    HillClimb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgorithmArg {
    Fedavg,
    Fedprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggArg {
    Normalized,
    Literal,
}

/// Flags that take precedence over config fields.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Label column of the CSV source.
    #[arg(long = "label-col", global = true)]
    pub label_col: Option<String>,
    /// One ratio, or a comma-separated list (per client for train, sweep list for prune-sweep).
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    pub rho: Option<Vec<f64>>,
    /// Number of clients K.
    #[arg(long, global = true)]
    pub clients: Option<usize>,
    /// Gamma shape for the non-IID partition.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Local objective.
    #[arg(long, global = true, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    /// Mask-aware aggregation rule.
    #[arg(long, global = true, value_enum)]
    pub agg: Option<AggArg>,
}

/// Exit status for a finished command.
pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 1;

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => EXIT_INVALID,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// Runs a parsed command. `Ok` carries the exit code (validate reports
/// violations through it rather than through `Err`).
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Validate => validate(&cli.overrides),
        Command::Partition => {
            let ctx = Context::load(&cli.overrides, false)?;
            cmd_partition(&ctx)
        }
        Command::Train => {
            let ctx = Context::load(&cli.overrides, false)?;
            cmd_train(&ctx)
        }
        Command::PruneSweep => {
            let ctx = Context::load(&cli.overrides, true)?;
            cmd_sweep(&ctx)
        }
        Command::OptimizeRho { score, mode } => {
            cmd_optimize(&cli.overrides, score.as_deref(), *mode)
        }
        Command::Cost { preset } => cmd_cost(&cli.overrides, preset.as_deref()),
    }
}

struct Context {
    cfg: ExperimentConfig,
    base: PathBuf,
    out: PathBuf,
}

fn read_config(ov: &Overrides) -> Result<(ExperimentConfig, PathBuf)> {
    let path = ov
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config is required for this command"))?;
    let cfg = ExperimentConfig::load(path)?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, base))
}

/// Applies command-line overrides (flags > config > defaults).
fn apply_overrides(cfg: &mut ExperimentConfig, ov: &Overrides, rho_is_sweep: bool) -> Result<()> {
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.out = out.clone();
    }
    if let Some(label) = &ov.label_col {
        match cfg.data.csv.as_mut() {
            Some(csv) => csv.label_column = label.clone(),
            None => return Err(Error::config("--label-col needs a [data.csv] source")),
        }
    }
    if let Some(k) = ov.clients {
        cfg.partition.clients = k;
    }
    if let Some(a) = ov.alpha {
        cfg.partition.alpha = a;
    }
    if let Some(alg) = ov.algorithm {
        cfg.federation.algorithm = match alg {
            AlgorithmArg::Fedavg => Algorithm::FedAvg,
            AlgorithmArg::Fedprox => Algorithm::FedProx,
        };
    }
    if let Some(agg) = ov.agg {
        cfg.federation.aggregation = match agg {
            AggArg::Normalized => AggregationMode::Normalized,
            AggArg::Literal => AggregationMode::Literal,
        };
    }
    if let Some(rho) = &ov.rho {
        if rho_is_sweep {
            cfg.sweep.rho = rho.clone();
        } else {
            cfg.federation.rho = match rho.as_slice() {
                [r] => PerClient::Uniform(*r),
                rs => PerClient::Each(rs.to_vec()),
            };
        }
    }
    Ok(())
}

impl Context {
    /// `rho_is_sweep`: `--rho` replaces the sweep list instead of the training ratio.
    fn load(ov: &Overrides, rho_is_sweep: bool) -> Result<Self> {
        let (mut cfg, base) = read_config(ov)?;
        apply_overrides(&mut cfg, ov, rho_is_sweep)?;
        cfg.validate()?;
        let out = if cfg.out.is_absolute() || ov.out.is_some() {
            cfg.out.clone()
        } else {
            base.join(&cfg.out)
        };
        Ok(Context { cfg, base, out })
    }

    fn data(&self) -> Result<(Dataset, Dataset)> {
        let ds = self.cfg.load_dataset(&self.base)?;
        self.cfg.split_data(&ds)
    }
}

fn validate(ov: &Overrides) -> Result<i32> {
    let (mut cfg, _) = read_config(ov)?;
    apply_overrides(&mut cfg, ov, false)?;
    let v = cfg.violations();
    if v.is_empty() {
        say!("ok");
        Ok(EXIT_OK)
    } else {
        for msg in &v {
            say!("violation: {msg}");
        }
        Ok(EXIT_INVALID)
    }
}

/// Collects result files and writes them plus `manifest.json`.
struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
    excludes: BTreeMap<String, Vec<String>>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
            excludes: BTreeMap::new(),
        })
    }

    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files
            .insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// Writes a CSV; the hash skips the columns named in `volatile`.
    fn put_csv(
        &mut self,
        rel: &str,
        header: &[&str],
        rows: &[Vec<String>],
        volatile: &[&str],
    ) -> Result<()> {
        let full = csv_bytes(header, rows, &[])?;
        self.put(rel, &full)?;
        if !volatile.is_empty() {
            let stable = csv_bytes(header, rows, volatile)?;
            self.files
                .insert(rel.to_string(), hex::encode(Sha256::digest(&stable)));
            self.excludes.insert(
                rel.to_string(),
                volatile.iter().map(|s| s.to_string()).collect(),
            );
        }
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.put(rel, text.as_bytes())
    }

    fn finish(
        self,
        command: &str,
        cfg: Option<&ExperimentConfig>,
        seed: Option<u64>,
    ) -> Result<()> {
        #[derive(Serialize)]
        struct FileEntry {
            path: String,
            sha256: String,
        }
        #[derive(Serialize)]
        struct Manifest {
            tool: &'static str,
            version: &'static str,
            command: String,
            seed: Option<u64>,
            config_sha256: Option<String>,
            config: Option<String>,
            files: Vec<FileEntry>,
            hash_excludes: BTreeMap<String, Vec<String>>,
        }
        // the output location is not part of the computation
        let config = cfg
            .map(|c| {
                let mut c = c.clone();
                c.out = PathBuf::from(".");
                c.to_toml()
            })
            .transpose()?;
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config_sha256: config
                .as_ref()
                .map(|c| hex::encode(Sha256::digest(c.as_bytes()))),
            config,
            files: self
                .files
                .iter()
                .map(|(path, sha256)| FileEntry {
                    path: path.clone(),
                    sha256: sha256.clone(),
                })
                .collect(),
            hash_excludes: self.excludes,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>], skip: &[&str]) -> Result<Vec<u8>> {
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !skip.contains(&header[i]))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(keep.iter().map(|&i| header[i]))?;
    for row in rows {
        w.write_record(keep.iter().map(|&i| row[i].as_str()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn heatmap_bytes(plan: &PartitionPlan, classes: &[String]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    plan.write_heatmap(&mut buf, classes)?;
    Ok(buf)
}

fn cmd_partition(ctx: &Context) -> Result<i32> {
    let (train, _) = ctx.data()?;
    let plan = ctx.cfg.partition(&train)?;
    for w in &plan.warnings {
        log::warn!("{w}");
    }
    let mut out = Outputs::new(&ctx.out)?;
    out.put(
        "partition_heatmap.csv",
        &heatmap_bytes(&plan, train.class_names())?,
    )?;
    let rows: Vec<Vec<String>> = plan
        .client_sizes()
        .iter()
        .enumerate()
        .map(|(k, n)| vec![k.to_string(), n.to_string()])
        .collect();
    out.put_csv("client_sizes.csv", &["client", "samples"], &rows, &[])?;
    out.finish("partition", Some(&ctx.cfg), Some(ctx.cfg.seed))?;
    say!(
        "{} clients, {} samples assigned",
        plan.num_clients(),
        plan.total_assigned()
    );
    Ok(EXIT_OK)
}

const METRICS_HEADER: [&str; 5] = ["round", "accuracy", "loss", "mean_client_loss", "seconds"];

fn metrics_rows(report: &SimulationReport) -> Vec<Vec<String>> {
    report
        .rounds
        .iter()
        .map(|m| {
            vec![
                (m.round + 1).to_string(),
                m.accuracy.to_string(),
                m.loss.to_string(),
                m.mean_client_loss().to_string(),
                format!("{:.6}", m.seconds),
            ]
        })
        .collect()
}

fn confusion_rows(
    report: &SimulationReport,
    classes: &[String],
) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(classes.iter().cloned());
    let rows = report
        .final_metrics()
        .confusion
        .iter()
        .zip(classes)
        .map(|(row, c)| {
            let mut r = vec![c.clone()];
            r.extend(row.iter().map(u64::to_string));
            r
        })
        .collect();
    (header, rows)
}

fn write_run(
    out: &mut Outputs,
    prefix: &str,
    report: &SimulationReport,
    classes: &[String],
    masks: bool,
) -> Result<()> {
    out.put_csv(
        &format!("{prefix}metrics.csv"),
        &METRICS_HEADER,
        &metrics_rows(report),
        &["seconds"],
    )?;
    let (header, rows) = confusion_rows(report, classes);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.put_csv(&format!("{prefix}confusion.csv"), &header, &rows, &[])?;
    if masks {
        for (id, mask) in report.participants.iter().zip(&report.masks) {
            out.put(
                &format!("{prefix}masks/client_{id:03}.mask"),
                &mask.to_bytes(),
            )?;
        }
    }
    Ok(())
}

fn cmd_train(ctx: &Context) -> Result<i32> {
    let (train, test) = ctx.data()?;
    let plan = ctx.cfg.partition(&train)?;
    let arch = ctx.cfg.architecture(&ctx.base)?;
    let report = run_simulation(&train, &plan, &arch, &ctx.cfg.round_config(), &test)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let mut out = Outputs::new(&ctx.out)?;
    out.put(
        "partition_heatmap.csv",
        &heatmap_bytes(&plan, train.class_names())?,
    )?;
    write_run(&mut out, "", &report, train.class_names(), true)?;
    out.finish("train", Some(&ctx.cfg), Some(ctx.cfg.seed))?;
    let last = report.final_metrics();
    say!("final accuracy {:.4}, loss {:.4}", last.accuracy, last.loss);
    Ok(EXIT_OK)
}

fn cmd_sweep(ctx: &Context) -> Result<i32> {
    let (train, test) = ctx.data()?;
    let plan = ctx.cfg.partition(&train)?;
    let arch = ctx.cfg.architecture(&ctx.base)?;
    let base_cost = profile(&arch, ctx.cfg.cost.constants, ctx.cfg.cost.options())?;
    let mut out = Outputs::new(&ctx.out)?;
    out.put(
        "partition_heatmap.csv",
        &heatmap_bytes(&plan, train.class_names())?,
    )?;
    let mut summary = Vec::new();
    for &rho in &ctx.cfg.sweep.rho {
        let mut round = ctx.cfg.round_config();
        round.rho = PerClient::Uniform(rho);
        let report = run_simulation(&train, &plan, &arch, &round, &test)?;
        let prefix = format!("rho_{rho:.4}/");
        write_run(&mut out, &prefix, &report, train.class_names(), false)?;
        let cost = pruned_profile(&base_cost, rho)?;
        let last = report.final_metrics();
        summary.push(vec![
            rho.to_string(),
            last.accuracy.to_string(),
            last.loss.to_string(),
            remaining_for(arch_weights(&report), rho).to_string(),
            cost.energy_pj.to_string(),
        ]);
        say!("rho {rho}: final accuracy {:.4}", last.accuracy);
    }
    out.put_csv(
        "sweep_summary.csv",
        &[
            "rho",
            "final_accuracy",
            "final_loss",
            "remaining_weights",
            "energy_pj",
        ],
        &summary,
        &[],
    )?;
    out.finish("prune-sweep", Some(&ctx.cfg), Some(ctx.cfg.seed))?;
    Ok(EXIT_OK)
}

fn arch_weights(report: &SimulationReport) -> usize {
    report.global.num_weights()
}

fn cmd_optimize(ov: &Overrides, score_path: Option<&Path>, mode: ModeArg) -> Result<i32> {
    let loaded = match &ov.config {
        Some(_) => {
            let (mut cfg, base) = read_config(ov)?;
            apply_overrides(&mut cfg, ov, false)?;
            cfg.validate()?;
            Some((cfg, base))
        }
        None => None,
    };
    let score: ScoreConfig = match (score_path, &loaded) {
        (Some(p), _) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        (None, Some((cfg, _))) => cfg
            .score_config()?
            .ok_or_else(|| Error::config("config has no [score] table; pass --score"))?,
        (None, None) => return Err(Error::config("optimize-rho needs --score or --config")),
    };
    let seed = ov
        .seed
        .or(loaded.as_ref().map(|(c, _)| c.seed))
        .unwrap_or(0);
    let search = match mode {
        ModeArg::UniformGrid => SearchMode::UniformGrid,
        ModeArg::Coordinate => SearchMode::Coordinate,
        ModeArg::HillClimb => match loaded.as_ref().map(|(c, _)| c.optimizer.mode) {
            Some(SearchMode::HillClimb(h)) => SearchMode::HillClimb(HillClimbOptions { seed, ..h }),
            _ => SearchMode::HillClimb(HillClimbOptions {
                seed,
                ..HillClimbOptions::default()
            }),
        },
    };
    let exec = loaded
        .as_ref()
        .map(|(c, _)| c.federation.execution)
        .unwrap_or_default();
    let solution = optimize_rho(&score, search, exec)?;
    let curve = score_curve(&score, exec)?;
    let out_dir = match (&ov.out, &loaded) {
        (Some(o), _) => o.clone(),
        (None, Some((cfg, base))) if !cfg.out.is_absolute() => base.join(&cfg.out),
        (None, Some((cfg, _))) => cfg.out.clone(),
        (None, None) => PathBuf::from("out"),
    };
    let mut out = Outputs::new(&out_dir)?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|p| {
            vec![
                p.rho.to_string(),
                p.score.to_string(),
                p.acc_term.to_string(),
                p.energy_term.to_string(),
                p.feasible.to_string(),
            ]
        })
        .collect();
    out.put_csv(
        "score_curve.csv",
        &["rho", "score", "acc_term", "energy_term", "feasible"],
        &rows,
        &[],
    )?;
    out.put_json("rho_solution.json", &solution)?;
    out.finish("optimize-rho", loaded.as_ref().map(|(c, _)| c), Some(seed))?;
    say!("{}", serde_json::to_string(&solution)?);
    Ok(if solution.feasible {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    })
}

fn cmd_cost(ov: &Overrides, preset: Option<&str>) -> Result<i32> {
    let loaded = match &ov.config {
        Some(_) => {
            let (mut cfg, base) = read_config(ov)?;
            apply_overrides(&mut cfg, ov, false)?;
            cfg.validate()?;
            Some((cfg, base))
        }
        None => None,
    };
    let base: CostProfile = match (preset, &loaded) {
        (Some(name), _) => {
            let p = DatasetPreset::parse(name)
                .ok_or_else(|| Error::config(format!("unknown preset '{name}'")))?;
            let consts = loaded
                .as_ref()
                .map(|(c, _)| c.cost.constants)
                .unwrap_or_default();
            profile(&p.arch(), consts, p.options())?
        }
        (None, Some((cfg, dir))) => profile(
            &cfg.architecture(dir)?,
            cfg.cost.constants,
            cfg.cost.options(),
        )?,
        (None, None) => return Err(Error::config("cost needs --preset or --config")),
    };
    let rho = match ov.rho.as_deref() {
        None => None,
        Some([r]) => Some(*r),
        Some(_) => return Err(Error::config("cost takes a single --rho")),
    };
    let prof = match rho {
        Some(r) => pruned_profile(&base, r)?,
        None => base,
    };
    say!("{}", serde_json::to_string_pretty(&prof)?);
    let out_dir = match (&ov.out, &loaded) {
        (Some(o), _) => Some(o.clone()),
        (None, Some((cfg, dir))) if !cfg.out.is_absolute() => Some(dir.join(&cfg.out)),
        (None, Some((cfg, _))) => Some(cfg.out.clone()),
        (None, None) => None,
    };
    if let Some(dir) = out_dir {
        let mut out = Outputs::new(&dir)?;
        out.put_json("cost.json", &prof)?;
        out.finish(
            "cost",
            loaded.as_ref().map(|(c, _)| c),
            loaded.as_ref().map(|(c, _)| c.seed),
        )?;
    }
    Ok(EXIT_OK)
}
