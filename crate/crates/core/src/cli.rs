//! The `dada` command line: data generation, training with replayable
//! manifests, evaluation, the verification suite and seed sweeps.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation, 3 internal.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datagen::{domain_csv_string, load_csv, DataSpec, DatasetPair, Domain, Scenario};
use crate::diagnostics::{run_all, DiagnosticsConfig};
use crate::error::DadaError;
use crate::eval::{
    evaluate, history_plot_data, metrics_log, parse_metrics_log, sweep, sweep_jsonl, sweep_plot_data, sweep_table,
    MetricsRecord, SweepSpec, TargetMonitor,
};
use crate::model::DadaNetwork;
use crate::trainer::{phase_end_values, source_condition_failure_rate, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(DadaError),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Internal(m) => write!(f, "internal: {m}"),
        }
    }
}

impl From<DadaError> for CliError {
    fn from(e: DadaError) -> Self {
        if e.is_validation() {
            CliError::Data(e)
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(DadaError::Io { path: path.to_path_buf(), source: e })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "dada", version, about = "Discriminative adversarial domain adaptation on small networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target pair.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Train from a config, or replay a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the gradient, sign and step-direction checks.
    Diagnose(DiagnoseArgs),
    /// Train every sweep entry over every seed and tabulate the means.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenCommon {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for source.csv, target.csv and params.json.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum GenKind {
    /// Two interleaved half-circles; the target is rotated.
    TwoMoons {
        /// Instances per domain.
        #[arg(long)]
        n: usize,
        /// Target rotation in degrees.
        #[arg(long, default_value_t = 30.0)]
        rot: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[command(flatten)]
        common: GenCommon,
    },
    /// Gaussian clusters on a grid; the target is translated.
    Grid {
        #[arg(long)]
        k: usize,
        /// Instances per class and domain.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_parser = parse_pair, default_value = "0,0")]
        shift: [f64; 2],
        #[arg(long, default_value_t = 0.3)]
        spread: f64,
        /// 1-based categories kept in the target (partial pair).
        #[arg(long, value_delimiter = ',')]
        restrict_target: Option<Vec<usize>>,
        /// 1-based categories kept in the source (open pair).
        #[arg(long, value_delimiter = ',', conflicts_with = "restrict_target")]
        restrict_source: Option<Vec<usize>>,
        #[command(flatten)]
        common: GenCommon,
    },
    /// Grid with one cluster that only the target contains.
    OpenGrid {
        #[arg(long)]
        known: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Unknown target instances per known target instance.
        #[arg(long, default_value_t = 1.0)]
        unknown_ratio: f64,
        #[arg(long, value_parser = parse_pair, default_value = "0,0")]
        shift: [f64; 2],
        #[arg(long, default_value_t = 0.3)]
        spread: f64,
        #[command(flatten)]
        common: GenCommon,
    },
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?,
            b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?,
        ]),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config.
    #[arg(long, required_unless_present = "replay", conflicts_with = "replay")]
    pub config: Option<PathBuf>,
    /// Dataset directory or combined CSV.
    #[arg(long, required_unless_present = "replay", conflicts_with = "replay")]
    pub data: Option<PathBuf>,
    /// Manifest of an earlier run to re-execute.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, conflicts_with = "replay")]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Domain to score.
    #[arg(long, default_value = "target", value_parser = ["source", "target"])]
    pub domain: String,
    /// Directory for report.jsonl and report.txt.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random draws per audited loss.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    /// Simplex points for the sign check.
    #[arg(long, default_value_t = 10_000)]
    pub points: usize,
    /// Trials for the step-direction checks.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Metrics log of a run; adds its condition-failure curve to the output.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep spec, TOML or JSON by extension.
    #[arg(long)]
    pub spec: PathBuf,
    /// Columns of the printed table.
    #[arg(long, value_delimiter = ',', default_value = "acc_target,cond_fail_rate")]
    pub metrics: Vec<String>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to re-execute a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub data_path: PathBuf,
    /// SHA-256 of the canonical CSV rendering of the dataset.
    pub data_fingerprint: String,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub report: PathBuf,
    pub final_metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        serde_json::from_str(&read_file(path)?).map_err(|e| CliError::Data(e.into()))
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Gen { kind } => cmd_gen(kind),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn cmd_gen(kind: GenKind) -> CliResult<()> {
    let (spec, common) = match kind {
        GenKind::TwoMoons { n, rot, noise, common } => {
            (DataSpec::TwoMoons { n_per_domain: n, rotation_deg: rot, noise_sd: noise }, common)
        }
        GenKind::Grid { k, n, shift, spread, restrict_target, restrict_source, common } => (
            DataSpec::Grid { k, n_per_class: n, shift, spread, restrict_target, restrict_source },
            common,
        ),
        GenKind::OpenGrid { known, n, unknown_ratio, shift, spread, common } => {
            (DataSpec::OpenGrid { known, n_per_class: n, unknown_ratio, shift, spread }, common)
        }
    };
    // Generator parameters come straight from the command line.
    let pair = spec.generate(common.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    write_dataset(&pair, &spec, common.seed, &common.out)?;
    println!(
        "{}: {} source, {} target, scenario {}, fingerprint {}",
        common.out.display(),
        pair.source.len(),
        pair.target.len(),
        pair.scenario,
        pair.fingerprint()
    );
    Ok(())
}

/// Writes `source.csv`, `target.csv` and a `params.json` sidecar.
pub fn write_dataset(pair: &DatasetPair, spec: &DataSpec, seed: u64, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    write_file(&dir.join("source.csv"), &domain_csv_string(pair, Domain::Source))?;
    write_file(&dir.join("target.csv"), &domain_csv_string(pair, Domain::Target))?;
    let params = serde_json::json!({
        "spec": spec,
        "seed": seed,
        "scenario": pair.scenario,
        "fingerprint": pair.fingerprint(),
    });
    let text = serde_json::to_string_pretty(&params).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&dir.join("params.json"), &(text + "\n"))
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let manifest = match (&a.replay, &a.config, &a.data) {
        (Some(m), _, _) => replay(m, &a.out)?,
        (None, Some(c), Some(d)) => {
            let mut config = TrainConfig::from_toml(&read_file(c)?)?;
            if let Some(s) = a.seed {
                config.seed = s;
            }
            train_run(&config, d, &a.out)?
        }
        _ => return Err(CliError::Usage("train needs --config and --data, or --replay".into())),
    };
    for (k, v) in &manifest.final_metrics {
        println!("{k:<24} {v:.6}");
    }
    println!("manifest: {}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

/// Trains on the dataset at `data` and writes checkpoint, metrics log,
/// final target report and manifest into `out`.
pub fn train_run(config: &TrainConfig, data: &Path, out: &Path) -> CliResult<RunManifest> {
    let pair = load_csv(data)?;
    let data_path = fs::canonicalize(data).map_err(|e| io_err(data, e))?;
    run_with_pair(config, &pair, data_path, out)
}

/// Re-executes the run described by a manifest into `out`. The dataset must
/// still hash to the recorded fingerprint.
pub fn replay(manifest: &Path, out: &Path) -> CliResult<RunManifest> {
    let m = RunManifest::load(manifest)?;
    let pair = load_csv(&m.data_path)?;
    let fp = pair.fingerprint();
    if fp != m.data_fingerprint {
        return Err(CliError::Data(DadaError::InvalidArgument(format!(
            "{} hashes to {fp}, manifest records {}",
            m.data_path.display(),
            m.data_fingerprint
        ))));
    }
    run_with_pair(&m.config, &pair, m.data_path, out)
}

fn run_with_pair(config: &TrainConfig, pair: &DatasetPair, data_path: PathBuf, out: &Path) -> CliResult<RunManifest> {
    config.check_scenario(pair.scenario)?;
    let (td, _) = pair.split();
    let monitor = TargetMonitor::new(pair);
    log::info!("training {} on {} ({} source, {} target)", config.objective, data_path.display(), td.source_x.len(), td.target_x.len());
    let outcome = train(config, &td, Some(&monitor))?;
    let net = &outcome.state.net;
    let report = monitor.report(net)?;
    let mut final_metrics: BTreeMap<String, f64> = report.metrics().into_iter().collect();
    final_metrics.insert(
        "cond_fail_rate".into(),
        source_condition_failure_rate(net, &td, config.condition_threshold)?,
    );
    if let Some(w) = &outcome.state.category_weights {
        for (k, v) in w.c.iter().enumerate() {
            final_metrics.insert(format!("cat_weight_{}", k + 1), *v);
        }
    }

    create_dir(out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let metrics = out.join(METRICS_FILE);
    let report_path = out.join(REPORT_FILE);
    net.save(&checkpoint)?;
    write_file(&metrics, &metrics_log(outcome.history()))?;
    write_file(&report_path, &report.to_jsonl()?)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        seed: config.seed,
        data_path,
        data_fingerprint: pair.fingerprint(),
        checkpoint,
        metrics_log: metrics,
        report: report_path,
        final_metrics,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&out.join(MANIFEST_FILE), &(text + "\n"))?;
    Ok(manifest)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let net = DadaNetwork::load(&a.checkpoint)?;
    let pair = load_csv(&a.data)?;
    let rows = if a.domain == "source" { &pair.source } else { &pair.target };
    let x: Vec<Vec<f64>> = rows.iter().map(|i| i.x.clone()).collect();
    let labels: Vec<Option<usize>> = rows.iter().map(|i| i.y).collect();
    let scenario = if a.domain == "source" { Scenario::Closed } else { pair.scenario };
    if net.input_dim() != pair.feature_dim() {
        return Err(CliError::Data(DadaError::invalid(format!(
            "checkpoint expects {} features, data has {}",
            net.input_dim(),
            pair.feature_dim()
        ))));
    }
    let report = evaluate(&net, &x, &labels, scenario)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = a.out {
        create_dir(&dir)?;
        write_file(&dir.join("report.jsonl"), &report.to_jsonl()?)?;
        write_file(&dir.join("report.txt"), &table)?;
    }
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> CliResult<()> {
    let cfg = DiagnosticsConfig {
        seed: a.seed,
        fd_draws: a.draws,
        sign_points: a.points,
        step_trials: a.trials,
        ..Default::default()
    };
    let report = run_all(&cfg)?;
    let table = report.to_table();
    print!("{table}");
    let curve = match &a.metrics {
        Some(p) => {
            let records = parse_metrics_log(&read_file(p)?)?;
            let ends = phase_end_table(&records, "cond_fail_rate");
            print!("{ends}");
            Some((history_plot_data(&records, "cond_fail_rate"), ends))
        }
        None => None,
    };
    if let Some(dir) = a.out {
        create_dir(&dir)?;
        write_file(&dir.join("diagnostics.txt"), &table)?;
        write_file(&dir.join("diagnostics.jsonl"), &report.to_jsonl()?)?;
        if let Some((curve, ends)) = curve {
            write_file(&dir.join("cond_fail_rate.dat"), &curve)?;
            write_file(&dir.join("cond_fail_rate_phases.txt"), &ends)?;
        }
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Internal("one or more checks failed".into()))
    }
}

/// One line per phase run: phase, last epoch of the run and the metric there.
pub fn phase_end_table(records: &[MetricsRecord], metric: &str) -> String {
    let mut out = format!("{:<10} {:>6} {metric}\n", "phase", "epoch");
    for (phase, epoch, v) in phase_end_values(records, metric) {
        out.push_str(&format!("{:<10} {epoch:>6} {v:.6}\n", phase.to_string()));
    }
    out
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let text = read_file(&a.spec)?;
    let is_json = a.spec.extension().is_some_and(|e| e == "json");
    let spec: SweepSpec = if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Data(e.into()))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Data(DadaError::Config(e.to_string())))?
    };
    if spec.seeds.is_empty() {
        return Err(CliError::Usage("sweep spec lists no seeds".into()));
    }
    if spec.entries.is_empty() {
        return Err(CliError::Usage("sweep spec lists no entries".into()));
    }
    let rows = sweep(&spec)?;
    let metrics: Vec<&str> = a.metrics.iter().map(String::as_str).collect();
    let table = sweep_table(&rows, &metrics);
    print!("{table}");
    if let Some(dir) = a.out {
        create_dir(&dir)?;
        write_file(&dir.join("sweep.txt"), &table)?;
        write_file(&dir.join("sweep.jsonl"), &sweep_jsonl(&rows)?)?;
        for m in &metrics {
            write_file(&dir.join(format!("{m}.dat")), &sweep_plot_data(&rows, m))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_parser() {
        assert_eq!(parse_pair("1.5, -2").unwrap(), [1.5, -2.0]);
        assert!(parse_pair("1").is_err());
        assert!(parse_pair("a,b").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["dada", "gen", "two-moons", "-o", "x"]), EXIT_USAGE);
        assert_eq!(run(["dada", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["dada", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(CliError::from(DadaError::Config("x".into())).exit_code(), EXIT_DATA);
        assert_eq!(CliError::from(DadaError::Backward("x".into())).exit_code(), EXIT_INTERNAL);
    }

    #[test]
    fn manifest_round_trips() {
        let m = RunManifest {
            tool_version: "0".into(),
            config: TrainConfig::default(),
            seed: 4,
            data_path: "/d".into(),
            data_fingerprint: "ab".into(),
            checkpoint: "c".into(),
            metrics_log: "m".into(),
            report: "r".into(),
            final_metrics: BTreeMap::from([("acc_target".into(), 0.5)]),
        };
        let back: RunManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
