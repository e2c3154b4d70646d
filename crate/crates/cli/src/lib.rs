//! `cdformer` command line: ingest, synthesize, augment, train, eval, predict, report.
//!
//! Exit codes:
//! 0 success, 2 usage or configuration error, 3 data ingestion error,
//! 4 numeric or shape error, 5 training diverged on every split, 6 filesystem error,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cdformer_core::augment::{apply_composite_scaled, AugmentConfig};
use cdformer_core::dataset::{
    ingest_csv, ingest_dir, make_windows, synthesize_fleet, write_csv, write_csv_file, BatterySeries, Profile,
    SynthParams,
};
use cdformer_core::eval::{
    config_hash, emit_report, evaluate, rollout, summarize, RolloutMode, ReportSummary,
};
use cdformer_core::model::{CdformerModel, Checkpoint, ModelConfig};
use cdformer_core::training::{history_csv, run_loocv, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error at {pointer}: {message}")]
    ConfigAt { pointer: String, message: String },
    #[error(transparent)]
    Core(#[from] cdformer_core::Error),
    #[error("every split failed: {0}")]
    AllSplitsFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use cdformer_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::ConfigAt { .. } => 2,
            CliError::AllSplitsFailed(_) => 5,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Ingest { .. } | E::Csv(_) => 3,
                E::Dimension { .. }
                | E::Contract(_)
                | E::EmptySequence(_)
                | E::SequenceTooShort { .. }
                | E::NonFinite(_)
                | E::NonFiniteGradient(_) => 4,
                E::Diverged { .. } => 5,
                E::Io { .. } => 6,
                E::Serde(_) => 2,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "ingest",
            4 => "numeric",
            5 => "diverged",
            6 => "io",
            _ => "other",
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "cdformer", version, about = "Battery capacity forecasting with CDFormer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate canonical CSV data and write one normalized CSV per battery.
    Ingest(IngestArgs),
    /// Generate synthetic knee-shaped fade batteries.
    Synthesize(SynthArgs),
    /// Apply composite temporal augmentation to a series CSV.
    Augment(AugmentArgs),
    /// Leave-one-battery-out training and evaluation.
    #[command(after_long_help = config_keys_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more batteries.
    Eval(EvalArgs),
    /// Write per-cycle capacity predictions from a checkpoint.
    Predict(PredictArgs),
    /// Collect metrics from several run directories into one table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Nasa,
    Calce,
    Synthetic,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Nasa => Profile::Nasa,
            ProfileArg::Calce => Profile::Calce,
            ProfileArg::Synthetic => Profile::Synthetic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    OneStep,
    Recursive,
}

impl From<ModeArg> for RolloutMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::OneStep => RolloutMode::OneStep,
            ModeArg::Recursive => RolloutMode::Recursive,
        }
    }
}

#[derive(Args, Debug)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, env = "CDFORMER_OUT", default_value = "cdformer-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// CSV file or directory of CSV files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "nasa")]
    pub profile: ProfileArg,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub batteries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with generator parameters (c0, fade_rate, knee_cycle, post_knee_factor, noise_std, n_cycles).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Series CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "nasa")]
    pub profile: ProfileArg,
    /// Augmentation JSON (alpha, rho, sigma, per_technique_prob, seed); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Noise std in units of each feature's range.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config JSON with optional `model` and `train` sections; keys override the profile preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV file or directory of canonical CSVs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "nasa")]
    pub profile: ProfileArg,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "one_step")]
    pub mode: ModeArg,
    /// Number of LOOCV splits trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV holding the battery (or batteries) to evaluate.
    #[arg(long)]
    pub battery: PathBuf,
    #[arg(long, value_enum, default_value = "nasa")]
    pub profile: ProfileArg,
    #[arg(long, value_enum, default_value = "one_step")]
    pub mode: ModeArg,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "nasa")]
    pub profile: ProfileArg,
    #[arg(long, value_enum, default_value = "one_step")]
    pub mode: ModeArg,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories containing metrics.json.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

/// Full training configuration as stored in `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Architecture defaults plus the profile's feature count, output clamp and optimizer settings.
    pub fn preset(profile: Profile) -> Self {
        let model = ModelConfig {
            input_channels: profile.features().len(),
            output_relu: profile == Profile::Nasa,
            ..ModelConfig::default()
        };
        let train = match profile {
            Profile::Nasa => TrainConfig::nasa(),
            Profile::Calce => TrainConfig::calce(),
            Profile::Synthetic => TrainConfig::default(),
        };
        Self { model, train }
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| cdformer_core::Error::Io { path: path.to_path_buf(), source: e }.into())
}

/// Deserializes JSON text, reporting the JSON pointer of the offending key.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let pointer = if path == "." {
            "/".to_string()
        } else {
            format!("/{}", path.replace('.', "/"))
        };
        CliError::ConfigAt {
            pointer,
            message: e.into_inner().to_string(),
        }
    })
}

/// Profile preset, overlaid with the optional config file, then `--seed`.
pub fn resolve_run_config(profile: Profile, config: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::preset(profile)).map_err(cdformer_core::Error::from)?;
    if let Some(path) = config {
        let text = read_text(path)?;
        let overlay: serde_json::Value = parse_json(&text)?;
        if !overlay.is_object() {
            return Err(CliError::ConfigAt {
                pointer: "/".into(),
                message: "run config must be a JSON object".into(),
            });
        }
        merge(&mut value, overlay);
    }
    let mut cfg: RunConfig = parse_json(&value.to_string())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn flatten_keys(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_keys(&key, x, out);
            }
        }
        _ => out.push(format!("  {prefix} = {v}")),
    }
}

/// Every run-config key with its default, per profile.
pub fn config_keys_help() -> String {
    let mut s = String::from("Config keys (JSON, dotted path = default):\n");
    for p in [Profile::Nasa, Profile::Calce] {
        s.push_str(&format!("\n--profile {}\n", p.as_str()));
        let v = serde_json::to_value(RunConfig::preset(p)).expect("serializable");
        let mut lines = Vec::new();
        flatten_keys("", &v, &mut lines);
        s.push_str(&lines.join("\n"));
        s.push('\n');
    }
    s.push_str(&format!(
        "\ntrain.augment may be null or an object; object defaults:\n  {}\n",
        serde_json::to_string(&AugmentConfig::default()).expect("serializable")
    ));
    s
}

fn load_data(path: &Path, profile: Profile) -> CliResult<Vec<BatterySeries>> {
    if path.is_dir() {
        Ok(ingest_dir(path, profile)?)
    } else if path.is_file() {
        Ok(ingest_csv(path, profile)?)
    } else {
        Err(cdformer_core::Error::Ingest {
            path: path.to_path_buf(),
            row: None,
            message: "data path does not exist".into(),
        }
        .into())
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| cdformer_core::Error::Io { path: dir.to_path_buf(), source: e }.into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| cdformer_core::Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| cdformer_core::Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn data_files(path: &Path) -> Vec<PathBuf> {
    if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .into_iter()
            .flatten()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    }
}

#[derive(Serialize)]
struct DataFile {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    profile: &'a str,
    seed: u64,
    config_hash: &'a str,
    data: Vec<DataFile>,
    failed_splits: Vec<(String, String)>,
    started_unix: u64,
    finished_unix: u64,
}

fn pretty(v: &impl Serialize) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v).map_err(cdformer_core::Error::from)? + "\n")
}

pub fn cmd_ingest(a: &IngestArgs) -> CliResult<()> {
    let profile = a.profile.into();
    let series = load_data(&a.data, profile)?;
    create_dir(&a.out.out)?;
    #[derive(Serialize)]
    struct Entry<'a> {
        id: &'a str,
        cycles: usize,
        first_cycle: u32,
        last_cycle: u32,
        rated_capacity: f64,
        eol_cycle: Option<u32>,
    }
    let mut summary = Vec::new();
    for s in &series {
        let file = a.out.out.join(format!("{}.csv", sanitize(&s.battery_id)));
        write_csv_file(std::slice::from_ref(s), &file)?;
        let caps = s.capacities();
        summary.push(Entry {
            id: &s.battery_id,
            cycles: s.len(),
            first_cycle: s.records[0].cycle_index,
            last_cycle: s.records[s.len() - 1].cycle_index,
            rated_capacity: s.rated_capacity,
            eol_cycle: cdformer_core::eval::find_eol(&caps, s.rated_capacity).map(|i| s.records[i - 1].cycle_index),
        });
    }
    write_file(&a.out.out.join("ingest.json"), pretty(&summary)?)?;
    log::info!("ingested {} batteries into {}", series.len(), a.out.out.display());
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn cmd_synthesize(a: &SynthArgs) -> CliResult<()> {
    let base: SynthParams = match &a.config {
        Some(p) => parse_json(&read_text(p)?)?,
        None => SynthParams::default(),
    };
    if a.batteries == 0 {
        return Err(CliError::Usage("--batteries must be ≥ 1".into()));
    }
    let fleet = synthesize_fleet(&base, a.batteries, a.seed)?;
    create_dir(&a.out.out)?;
    for s in &fleet {
        write_csv_file(std::slice::from_ref(s), &a.out.out.join(format!("{}.csv", s.battery_id)))?;
    }
    log::info!("wrote {} synthetic batteries to {}", fleet.len(), a.out.out.display());
    Ok(())
}

pub fn cmd_augment(a: &AugmentArgs) -> CliResult<()> {
    let profile: Profile = a.profile.into();
    let mut cfg: AugmentConfig = match &a.config {
        Some(p) => parse_json(&read_text(p)?)?,
        None => AugmentConfig::default(),
    };
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.rho {
        cfg.rho = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.prob {
        cfg.per_technique_prob = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let series = ingest_csv(&a.data, profile)?;
    // SOH is derived, so only the measured columns are augmented
    let features: Vec<_> = profile
        .features()
        .iter()
        .copied()
        .filter(|f| *f != cdformer_core::dataset::Feature::Soh)
        .collect();
    #[derive(Serialize)]
    struct Provenance {
        battery_id: String,
        applied: Vec<cdformer_core::augment::Applied>,
    }
    let mut out = Vec::new();
    let mut provenance = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let m = s.feature_matrix(&features)?;
        let scale: Vec<f64> = (0..m.ncols())
            .map(|c| {
                let col = m.column(c);
                let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                if hi > lo { hi - lo } else { 1.0 }
            })
            .collect();
        let aug = apply_composite_scaled(&m, &cfg, i as u64, Some(&scale))?;
        out.push(s.with_feature_matrix(&features, &aug.values)?);
        provenance.push(Provenance {
            battery_id: s.battery_id.clone(),
            applied: aug.provenance,
        });
    }
    create_dir(&a.out.out)?;
    let mut buf = Vec::new();
    write_csv(&out, &mut buf)?;
    write_file(&a.out.out.join("augmented.csv"), buf)?;
    #[derive(Serialize)]
    struct Sidecar<'a> {
        config: &'a AugmentConfig,
        batteries: Vec<Provenance>,
    }
    write_file(
        &a.out.out.join("provenance.json"),
        pretty(&Sidecar {
            config: &cfg,
            batteries: provenance,
        })?,
    )?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let started = unix_now();
    let profile: Profile = a.profile.into();
    if a.parallel == 0 {
        return Err(CliError::Usage("--parallel must be ≥ 1".into()));
    }
    // validate everything before touching the output directory
    let cfg = resolve_run_config(profile, a.config.as_deref(), a.seed)?;
    let batteries = load_data(&a.data, profile)?;
    if cfg.model.input_channels != profile.features().len() {
        return Err(CliError::ConfigAt {
            pointer: "/model/input_channels".into(),
            message: format!(
                "profile {} provides {} features, config says {}",
                profile.as_str(),
                profile.features().len(),
                cfg.model.input_channels
            ),
        });
    }
    for b in &batteries {
        if b.len() < cfg.model.window_len + 1 {
            return Err(cdformer_core::Error::SequenceTooShort {
                needed: cfg.model.window_len + 1,
                got: b.len(),
            }
            .into());
        }
    }
    let hash = config_hash(&cfg)?;
    let mode: RolloutMode = a.mode.into();
    let result = run_loocv(&batteries, &cfg.model, &cfg.train, mode, a.parallel)?;

    let failed: Vec<(String, String)> = result
        .splits
        .iter()
        .filter_map(|s| s.outcome.as_ref().err().map(|e| (s.battery_id.clone(), e.clone())))
        .collect();
    let reports = result.reports();
    if reports.is_empty() {
        return Err(CliError::AllSplitsFailed(
            failed.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; "),
        ));
    }
    let out = &a.out.out;
    create_dir(&out.join("checkpoints"))?;
    create_dir(&out.join("history"))?;
    for s in &result.splits {
        if let Ok((ckpt, _, hist)) = &s.outcome {
            ckpt.save(&out.join("checkpoints").join(format!("{}.json", sanitize(&s.battery_id))))?;
            write_file(&out.join("history").join(format!("{}.csv", sanitize(&s.battery_id))), history_csv(hist))?;
        }
    }
    let summary = summarize(profile.as_str(), cfg.model.variant.as_str(), &hash, &reports)?;
    emit_report(&summary, &reports, out)?;
    write_file(&out.join("config.json"), pretty(&cfg)?)?;
    for (id, e) in &failed {
        log::error!("split {id} failed: {e}");
    }
    let manifest = Manifest {
        tool: "cdformer",
        version: env!("CARGO_PKG_VERSION"),
        command: "train",
        profile: profile.as_str(),
        seed: cfg.train.seed,
        config_hash: &hash,
        data: data_files(&a.data)
            .iter()
            .map(|p| {
                Ok(DataFile {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<CliResult<_>>()?,
        failed_splits: failed,
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_file(&out.join("manifest.json"), pretty(&manifest)?)?;
    log::info!(
        "LOOCV over {} batteries: mean RMSE {:.5} Ah, MAE {:.5} Ah",
        batteries.len(),
        summary.aggregate.rmse,
        summary.aggregate.mae
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, CdformerModel)> {
    let ckpt: Checkpoint = parse_json(&read_text(path)?)?;
    let model = CdformerModel::from_checkpoint(&ckpt)?;
    if ckpt.normalizer.is_none() {
        return Err(CliError::Usage(format!("checkpoint {} carries no normalizer", path.display())));
    }
    Ok((ckpt, model))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (ckpt, model) = load_checkpoint(&a.checkpoint)?;
    let norm = ckpt.normalizer.as_ref().expect("checked");
    let profile: Profile = a.profile.into();
    let batteries = load_data(&a.battery, profile)?;
    let mode: RolloutMode = a.mode.into();
    let reports = batteries
        .iter()
        .map(|b| {
            let r = rollout(&model, b, norm, ckpt.config.window_len, mode)?;
            evaluate(b, &r, mode)
        })
        .collect::<cdformer_core::Result<Vec<_>>>()?;
    let summary = summarize(profile.as_str(), ckpt.config.variant.as_str(), &config_hash(&ckpt.config)?, &reports)?;
    emit_report(&summary, &reports, &a.out.out)?;
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    let (ckpt, model) = load_checkpoint(&a.checkpoint)?;
    let norm = ckpt.normalizer.as_ref().expect("checked");
    let batteries = load_data(&a.data, a.profile.into())?;
    let mut text = String::from("battery_id,cycle,pred_ah\n");
    for b in &batteries {
        // fail early with a clear message when a battery is too short
        make_windows(b, ckpt.config.window_len, Some(norm))?;
        let r = rollout(&model, b, norm, ckpt.config.window_len, a.mode.into())?;
        for (c, p) in r.cycles.iter().zip(&r.pred_ah) {
            text.push_str(&format!("{},{c},{p}\n", b.battery_id));
        }
    }
    match &a.out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    for dir in &a.runs {
        let s: ReportSummary = parse_json(&read_text(&dir.join("metrics.json"))?)?;
        rows.push((dir.display().to_string(), s));
    }
    let mut csv = String::from("run,dataset,model,config_hash,rmse,mae,re\n");
    for (run, s) in &rows {
        let re = s.aggregate.re.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{run},{},{},{},{},{},{re}\n",
            s.dataset, s.model, s.config_hash, s.aggregate.rmse, s.aggregate.mae
        ));
    }
    create_dir(&a.out.out)?;
    write_file(&a.out.out.join("comparison.csv"), csv)?;
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
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
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            if cli.json_errors {
                eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()}));
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}
