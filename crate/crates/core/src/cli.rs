//! Command-line driver. Every command reads one TOML config, writes its
//! outputs atomically under `<out>/<method>/` and records a run manifest.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checksum::{file_sha256, sha256_hex};
use crate::config::{validate_config, AppConfig, ConfigError, Severity};
use crate::dataset::{generate_dataset, label_pair, load_dataset, save_dataset, Dataset, Method, Split};
use crate::eval::{endpoint_errors, export_plot_data, EvalReport};
use crate::nn::{
    load_weights, pretrain_autoencoder, rows_to_matrix, save_weights, train_decoder,
    InputNormalization, ReachDecoder, AUTOENCODER_DIMS,
};
use crate::TRAJ_DIM;

pub const DATASET_DIR: &str = "dataset";
pub const AUTOENCODER_FILE: &str = "autoencoder.rgnn";
pub const DECODER_FILE: &str = "decoder.rgnn";
pub const REPORT_FILE: &str = "report.json";
pub const PLOTS_DIR: &str = "plots";
pub const MANIFESTS_DIR: &str = "manifests";
pub const SUMMARY_FILE: &str = "summary.json";
/// Test samples exported as activation CSVs.
const PLOT_SAMPLES: usize = 3;

#[derive(Debug, Parser)]
#[command(name = "reachgen", version, about = "Reach activation datasets, decoder training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample reaches and label them with muscle activations.
    GenData(RunArgs),
    /// Pretrain the 300-150-50-4 autoencoder on the training activations.
    Pretrain(RunArgs),
    /// Retrain the decoder half on reach endpoints.
    TrainDecoder(RunArgs),
    /// Score the decoder on the test split.
    Eval(RunArgs),
    /// Write activation and hand-path CSVs for plotting.
    ExportPlots(RunArgs),
    /// Run every stage, for both labeling methods unless --method is given.
    Pipeline(RunArgs),
    /// Check a config file and list problems.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides both the generation and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Output root directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for sample labeling and evaluation.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

/// Failure classes with distinct exit statuses.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation, unreadable or invalid config, missing prerequisites.
    Usage(anyhow::Error),
    /// The computation itself failed.
    Domain(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            CliError::Usage(e) | CliError::Domain(e) => e,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn domain(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Domain(e.into())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {:#}", e.error());
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    let args = match command {
        Command::Validate(v) => return validate(&v.config),
        Command::GenData(a)
        | Command::Pretrain(a)
        | Command::TrainDecoder(a)
        | Command::Eval(a)
        | Command::ExportPlots(a)
        | Command::Pipeline(a) => a,
    };
    let ctx = RunContext::new(args, command_name(command))?;
    let body = || match command {
        Command::GenData(_) => ctx.gen_data(),
        Command::Pretrain(_) => ctx.pretrain(),
        Command::TrainDecoder(_) => ctx.train_decoder(),
        Command::Eval(_) => ctx.eval().map(|_| ()),
        Command::ExportPlots(_) => ctx.export_plots(),
        Command::Pipeline(_) => ctx.pipeline(),
        Command::Validate(_) => unreachable!("handled above"),
    };
    match args.threads {
        Some(0) => Err(usage(anyhow::anyhow!("--threads must be at least 1"))),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(domain)?
            .install(body),
        None => body(),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Pretrain(_) => "pretrain",
        Command::TrainDecoder(_) => "train-decoder",
        Command::Eval(_) => "eval",
        Command::ExportPlots(_) => "export-plots",
        Command::Pipeline(_) => "pipeline",
        Command::Validate(_) => "validate",
    }
}

fn validate(path: &Path) -> Result<(), CliError> {
    let diags = validate_config(path).map_err(usage)?;
    let mut stdout = std::io::stdout().lock();
    for d in &diags {
        let _ = writeln!(stdout, "{d}");
    }
    if diags.iter().any(|d| d.severity == Severity::Error) {
        return Err(usage(anyhow::anyhow!("{} has configuration errors", path.display())));
    }
    if diags.is_empty() {
        let _ = writeln!(stdout, "{}: ok", path.display());
    }
    Ok(())
}

/// Written next to each command's outputs; enough to repeat the run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub method: Method,
    pub threads: Option<usize>,
    pub config_sha256: String,
    /// Resolved configuration after command-line overrides.
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix_s: u64,
    pub elapsed_s: f64,
}

struct RunContext {
    cfg: AppConfig,
    command: &'static str,
    /// Methods this invocation covers.
    methods: Vec<Method>,
    threads: Option<usize>,
}

fn load_config(args: &RunArgs) -> Result<AppConfig, CliError> {
    let (mut cfg, _) = AppConfig::load(&args.config).map_err(|e| match e {
        ConfigError::Io { .. } | ConfigError::Parse { .. } => usage(e),
    })?;
    if let Some(seed) = args.seed {
        cfg.gen.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(m) = args.method {
        cfg.gen.method = m;
    }
    if let Some(out) = &args.out {
        cfg.paths.out = out.clone();
    }
    for d in cfg.diagnostics() {
        eprintln!("{d}");
    }
    let errors = cfg.errors();
    if !errors.is_empty() {
        return Err(usage(anyhow::anyhow!(
            "{} has {} configuration error(s)",
            args.config.display(),
            errors.len()
        )));
    }
    Ok(cfg)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().expect("file path").to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Builds a directory in a temp location and swaps it in on success; the
/// temp tree is removed on failure.
fn build_dir_atomic<T>(
    target: &Path,
    build: impl FnOnce(&Path) -> Result<T, CliError>,
) -> Result<T, CliError> {
    let name = target.file_name().expect("dir path").to_string_lossy();
    let tmp = target.with_file_name(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(domain)?;
    }
    fs::create_dir_all(&tmp).map_err(domain)?;
    match build(&tmp) {
        Ok(v) => {
            if target.exists() {
                fs::remove_dir_all(target).map_err(domain)?;
            }
            fs::rename(&tmp, target).map_err(domain)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn checksum_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            checksum_tree(root, &p, out)?;
        } else {
            let key = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned();
            out.insert(key, file_sha256(&p)?);
        }
    }
    Ok(())
}

impl RunContext {
    fn new(args: &RunArgs, command: &'static str) -> Result<Self, CliError> {
        let cfg = load_config(args)?;
        let methods = match (command, args.method) {
            ("pipeline", None) => Method::ALL.to_vec(),
            _ => vec![cfg.gen.method],
        };
        Ok(Self {
            cfg,
            command,
            methods,
            threads: args.threads,
        })
    }

    fn root(&self) -> &Path {
        &self.cfg.paths.out
    }

    fn method_cfg(&self, method: Method) -> AppConfig {
        let mut cfg = self.cfg.clone();
        cfg.gen.method = method;
        cfg
    }

    fn method_dir(&self, method: Method) -> PathBuf {
        self.root().join(method.as_str())
    }

    fn checksums(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
        let mut out = BTreeMap::new();
        for p in paths {
            if p.is_dir() {
                checksum_tree(self.root(), p, &mut out).map_err(domain)?;
            } else {
                let key = p.strip_prefix(self.root()).unwrap_or(p).to_string_lossy().into_owned();
                out.insert(key, file_sha256(p).map_err(domain)?);
            }
        }
        Ok(out)
    }

    fn write_manifest(
        &self,
        command: &str,
        method: Method,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        started: (SystemTime, Instant),
    ) -> Result<(), CliError> {
        let config = self.method_cfg(method).to_toml();
        let manifest = RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            method,
            threads: self.threads,
            config_sha256: sha256_hex(config.as_bytes()),
            config,
            inputs: self.checksums(inputs)?,
            outputs: self.checksums(outputs)?,
            started_unix_s: started.0.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            elapsed_s: started.1.elapsed().as_secs_f64(),
        };
        let dir = self.method_dir(method).join(MANIFESTS_DIR);
        fs::create_dir_all(&dir).map_err(domain)?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_atomic(&dir.join(format!("{command}.json")), json.as_bytes()).map_err(domain)
    }

    fn require(&self, path: &Path, producer: &str) -> Result<(), CliError> {
        if path.exists() {
            Ok(())
        } else {
            Err(usage(anyhow::anyhow!(
                "{} not found; run `reachgen {producer}` first",
                path.display()
            )))
        }
    }

    fn load_dataset(&self, method: Method) -> Result<Dataset, CliError> {
        let dir = self.method_dir(method).join(DATASET_DIR);
        self.require(&dir, "gen-data")?;
        load_dataset(&dir)
            .with_context(|| format!("loading {}", dir.display()))
            .map_err(domain)
    }

    fn load_decoder(&self, method: Method) -> Result<ReachDecoder, CliError> {
        let path = self.method_dir(method).join(DECODER_FILE);
        self.require(&path, "train-decoder")?;
        ReachDecoder::load(&path)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(domain)
    }

    fn now() -> (SystemTime, Instant) {
        (SystemTime::now(), Instant::now())
    }

    fn gen_data(&self) -> Result<(), CliError> {
        self.methods.iter().try_for_each(|&m| self.gen_data_for(m))
    }

    fn gen_data_for(&self, method: Method) -> Result<(), CliError> {
        let started = Self::now();
        let cfg = self.method_cfg(method);
        let dir = self.method_dir(method);
        fs::create_dir_all(&dir).map_err(domain)?;
        let target = dir.join(DATASET_DIR);
        let summary = build_dir_atomic(&target, |tmp| {
            let ds = generate_dataset(&cfg.gen, &cfg.arm, &cfg.ilqg).map_err(domain)?;
            save_dataset(&ds, tmp).map_err(domain)?;
            Ok(ds.stats)
        })?;
        eprintln!(
            "[{method}] dataset: {} train + {} test, {} pair / {} label rejections",
            cfg.gen.n_train, cfg.gen.n_test, summary.pair_rejections, summary.label_rejections
        );
        self.write_manifest("gen-data", method, &[], &[target], started)
    }

    fn pretrain(&self) -> Result<(), CliError> {
        self.methods.iter().try_for_each(|&m| self.pretrain_for(m))
    }

    fn pretrain_for(&self, method: Method) -> Result<(), CliError> {
        let started = Self::now();
        let ds = self.load_dataset(method)?;
        let data = rows_to_matrix(ds.split(Split::Train).map(|s| s.activations.flatten()), TRAJ_DIM);
        let (net, report) =
            pretrain_autoencoder(data.view(), &AUTOENCODER_DIMS[..4], &self.cfg.train).map_err(domain)?;
        let path = self.method_dir(method).join(AUTOENCODER_FILE);
        let tmp = path.with_file_name(format!(".{AUTOENCODER_FILE}.tmp"));
        save_weights(&net, None, &tmp).map_err(domain)?;
        fs::rename(&tmp, &path).map_err(domain)?;
        eprintln!(
            "[{method}] autoencoder reconstruction loss {:.4} -> {:.4}",
            report.finetune.initial,
            report.finetune.last()
        );
        let input = self.method_dir(method).join(DATASET_DIR);
        self.write_manifest("pretrain", method, &[input], &[path], started)
    }

    fn train_decoder(&self) -> Result<(), CliError> {
        self.methods.iter().try_for_each(|&m| self.train_decoder_for(m))
    }

    fn train_decoder_for(&self, method: Method) -> Result<(), CliError> {
        let started = Self::now();
        let ds = self.load_dataset(method)?;
        let ae_path = self.method_dir(method).join(AUTOENCODER_FILE);
        self.require(&ae_path, "pretrain")?;
        let (ae, _) = load_weights(&ae_path)
            .with_context(|| format!("loading {}", ae_path.display()))
            .map_err(domain)?;
        let norm = InputNormalization::from_region(&ds.config.region, self.cfg.train.input_margin);
        let train: Vec<_> = ds.split(Split::Train).collect();
        let x = norm.matrix(train.iter().map(|s| &s.pair));
        let t = rows_to_matrix(train.iter().map(|s| s.activations.flatten()), TRAJ_DIM);
        let (net, curve) = train_decoder(&ae, x.view(), t.view(), &self.cfg.train).map_err(domain)?;
        let decoder = ReachDecoder::new(net, norm).map_err(domain)?;
        let path = self.method_dir(method).join(DECODER_FILE);
        let tmp = path.with_file_name(format!(".{DECODER_FILE}.tmp"));
        decoder.save(&tmp).map_err(domain)?;
        fs::rename(&tmp, &path).map_err(domain)?;
        eprintln!("[{method}] decoder loss {:.4} -> {:.4}", curve.initial, curve.last());
        let inputs = [self.method_dir(method).join(DATASET_DIR), ae_path];
        self.write_manifest("train-decoder", method, &inputs, &[path], started)
    }

    fn eval(&self) -> Result<Vec<EvalReport>, CliError> {
        self.methods.iter().map(|&m| self.eval_for(m)).collect()
    }

    fn eval_for(&self, method: Method) -> Result<EvalReport, CliError> {
        let started = Self::now();
        let ds = self.load_dataset(method)?;
        let decoder = self.load_decoder(method)?;
        let mut report = endpoint_errors(&decoder, &ds, &self.cfg.arm).map_err(domain)?;
        let inputs = [
            self.method_dir(method).join(DATASET_DIR),
            self.method_dir(method).join(DECODER_FILE),
        ];
        // The output location is not part of the result.
        let mut echo = self.method_cfg(method);
        echo.paths = Default::default();
        report.config_echo = serde_json::to_value(echo).expect("config serializes");
        report.checksums = self.checksums(&inputs)?;
        let path = self.method_dir(method).join(REPORT_FILE);
        write_atomic(&path, report.to_json().as_bytes()).map_err(domain)?;
        eprintln!(
            "[{method}] test rms {:.5}, mean endpoint error {:.4} cm ({} excluded)",
            report.rms,
            report.endpoint_mean_cm,
            report.excluded.len()
        );
        self.write_manifest("eval", method, &inputs, &[path], started)?;
        Ok(report)
    }

    fn export_plots(&self) -> Result<(), CliError> {
        self.methods.iter().try_for_each(|&m| self.export_plots_for(m))
    }

    fn export_plots_for(&self, method: Method) -> Result<(), CliError> {
        let started = Self::now();
        let ds = self.load_dataset(method)?;
        let decoder = self.load_decoder(method)?;
        let cfg = self.method_cfg(method);
        let target = self.method_dir(method).join(PLOTS_DIR);
        build_dir_atomic(&target, |tmp| {
            export_plot_data(&decoder, &ds, &cfg.arm, tmp, PLOT_SAMPLES, |pair| {
                label_pair(method, &cfg.arm, &cfg.ilqg, pair).ok()
            })
            .map_err(domain)
        })?;
        let inputs = [
            self.method_dir(method).join(DATASET_DIR),
            self.method_dir(method).join(DECODER_FILE),
        ];
        self.write_manifest("export-plots", method, &inputs, &[target], started)
    }

    fn pipeline(&self) -> Result<(), CliError> {
        let mut reports = Vec::new();
        for &m in &self.methods {
            self.gen_data_for(m)?;
            self.pretrain_for(m)?;
            self.train_decoder_for(m)?;
            reports.push(self.eval_for(m)?);
            self.export_plots_for(m)?;
        }
        let table = summary_table(&reports);
        print!("{table}");
        let rows: Vec<_> = reports
            .iter()
            .map(|r| {
                serde_json::json!({
                    "method": r.method,
                    "n_test": r.n_test,
                    "rms": r.rms,
                    "endpoint_mean_cm": r.endpoint_mean_cm,
                    "reference_rms": r.reference.rms,
                    "reference_endpoint_mean_cm": r.reference.endpoint_mean_cm,
                    "baseline_endpoint_cm": r.reference.baseline_endpoint_cm,
                })
            })
            .collect();
        let json = serde_json::to_string_pretty(&rows).expect("summary serializes") + "\n";
        write_atomic(&self.root().join(SUMMARY_FILE), json.as_bytes()).map_err(domain)?;
        debug_assert_eq!(self.command, "pipeline");
        Ok(())
    }
}

/// Results table, one row per labeling method.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut s = format!(
        "{:<7}{:>8}{:>11}{:>14}{:>12}{:>17}\n",
        "method", "n_test", "rms", "endpoint_cm", "ref_rms", "ref_endpoint_cm"
    );
    for r in reports {
        s += &format!(
            "{:<7}{:>8}{:>11.5}{:>14.4}{:>12.4}{:>17.3}\n",
            r.method.as_str(),
            r.n_test,
            r.rms,
            r.endpoint_mean_cm,
            r.reference.rms,
            r.reference.endpoint_mean_cm
        );
    }
    s
}
