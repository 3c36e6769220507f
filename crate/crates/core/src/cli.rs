//! Command-line front end. Each subcommand is a plain function returning
//! the run manifest it wrote, so runs can be driven from tests.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapters::{attach, param_report, ParamReportRow, Preset, REFERENCE_PARAM_ROWS};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{export_folder, gen_synthetic, load_folder, Domain, SyntheticSpec};
use crate::diagnostics::gradient_suite;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::prompting::Protocol;
use crate::serve::{spawn, ServerState};
use crate::train::{evaluate, format_table, train, EvalRow, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// 64 px images, width 64, depth 8.
    Default,
    /// 32 px images, width 32, depth 4.
    Compact,
}

impl Arch {
    pub fn config(self) -> ModelConfig {
        match self {
            Arch::Default => ModelConfig::default(),
            Arch::Compact => ModelConfig::compact(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    None,
    MedSa,
    GmedSa,
    GlmedSa,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::None => Preset::None,
            PresetArg::MedSa => Preset::MedSa,
            PresetArg::GmedSa => Preset::GmedSa,
            PresetArg::GlmedSa => Preset::GlmedSa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum ProtocolArg {
    #[value(name = "1point")]
    #[serde(rename = "1point")]
    OnePoint,
    #[value(name = "3points")]
    #[serde(rename = "3points")]
    ThreePoints,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::OnePoint => Protocol::OnePoint,
            ProtocolArg::ThreePoints => Protocol::ThreePoints,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "adaptseg",
    version,
    about = "Adapter fine-tuning for a small promptable segmentation transformer"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file (or a run manifest) supplying flag defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset folder.
    Gen(GenArgs),
    /// Train the base model on a dataset (all parameters).
    Pretrain(PretrainArgs),
    /// Attach adapters to a base checkpoint and train them with the base frozen.
    Finetune(FinetuneArgs),
    /// Evaluate checkpoints with a click protocol.
    Eval(EvalArgs),
    /// Report total and trainable parameter counts.
    Params(ParamsArgs),
    /// Check analytic gradients of every op against central differences.
    Gradcheck(GradcheckArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenArgs {
    /// Output folder.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "source")]
    pub domain: DomainArg,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Image side; defaults to the architecture's input size.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, value_enum, default_value = "default")]
    pub arch: Arch,
    #[arg(long)]
    pub blob_min: Option<usize>,
    #[arg(long)]
    pub blob_max: Option<usize>,
    #[arg(long)]
    pub radius_min: Option<f64>,
    #[arg(long)]
    pub radius_max: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    pub arch: Arch,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FinetuneArgs {
    /// Base checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub preset: PresetArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Adapted checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long, value_delimiter = ',')]
    pub ckpt: Vec<PathBuf>,
    /// Also evaluate none/med-sa/gmed-sa/glmed-sa .ckpt files from --ckpt-dir.
    #[arg(long, requires = "ckpt_dir")]
    pub all_variants: bool,
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "1point")]
    pub protocol: Vec<ProtocolArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Line-delimited JSON rows.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ParamsArgs {
    #[arg(long, conflicts_with = "preset")]
    pub ckpt: Option<PathBuf>,
    /// Without --ckpt or --preset, every preset is reported.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, value_enum, default_value = "default")]
    pub arch: Arch,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcheckArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ServeArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub ckpt: Vec<PathBuf>,
    /// Folder of samples exposed through /samples.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 4)]
    pub threads: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// One per command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Resolved flags, keyed by flag name; usable as a `--config` file.
    pub config: Value,
    pub seed: Option<u64>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Value,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    fn new(command: &str, args: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(args).expect("flag structs serialize"),
            seed,
            checkpoints: Vec::new(),
            metrics: Value::Null,
            wall_clock_secs: 0.0,
        }
    }

    fn finish(mut self, path: &Path, started: Instant) -> Result<Self> {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(self)
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn manifest_path(explicit: &Option<PathBuf>, fallback: PathBuf) -> PathBuf {
    explicit.clone().unwrap_or(fallback)
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    Ok(())
}

fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn history_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".history.jsonl")
}

pub fn cmd_gen(args: &GenArgs) -> Result<RunManifest> {
    let started = Instant::now();
    let non_empty = args.out.is_dir() && fs::read_dir(&args.out)?.next().is_some();
    if non_empty && !args.force {
        return Err(Error::WouldOverwrite(args.out.clone()));
    }
    let size = args.image_size.unwrap_or(args.arch.config().image_size);
    let mut spec = SyntheticSpec::new(args.domain.into(), args.count, size, args.seed);
    let (blo, bhi) = spec.blob_count_range;
    spec.blob_count_range = (args.blob_min.unwrap_or(blo), args.blob_max.unwrap_or(bhi));
    let (rlo, rhi) = spec.blob_radius_range;
    spec.blob_radius_range = (
        args.radius_min.unwrap_or(rlo),
        args.radius_max.unwrap_or(rhi),
    );
    spec.texture_noise_sigma = args.noise.unwrap_or(spec.texture_noise_sigma);
    spec.validate()?;
    let samples = gen_synthetic(&spec)?;
    export_folder(&args.out, &samples, Some(&spec))?;
    let fg = samples
        .iter()
        .map(|s| s.mask.count() as f64 / (size * size) as f64)
        .sum::<f64>()
        / samples.len().max(1) as f64;
    let mut m = RunManifest::new("gen", args, Some(args.seed));
    m.metrics = json!({"samples": samples.len(), "mean_foreground_fraction": fg});
    log::info!("wrote {} samples to {}", samples.len(), args.out.display());
    m.finish(
        &manifest_path(&args.manifest, args.out.join("run_manifest.json")),
        started,
    )
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<RunManifest> {
    let started = Instant::now();
    refuse_overwrite(&args.out, args.force)?;
    let cfg = args.arch.config();
    let data = load_folder(&args.data, cfg.image_size)?;
    let mut model = SegModel::new(cfg, args.seed)?;
    let tc = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::pretrain()
    };
    let history = train(&mut model, &data, &tc)?;
    save_checkpoint(&model, &args.out, args.force)?;
    write_history(&history_path(&args.out), &history)?;
    let mut m = RunManifest::new("pretrain", args, Some(args.seed));
    m.checkpoints.push(args.out.clone());
    m.metrics = json!({"final": history.last(), "history": history_path(&args.out)});
    m.finish(
        &manifest_path(&args.manifest, with_suffix(&args.out, ".manifest.json")),
        started,
    )
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<RunManifest> {
    let started = Instant::now();
    refuse_overwrite(&args.out, args.force)?;
    let preset: Preset = args.preset.into();
    let mut model = load_checkpoint(&args.ckpt)?;
    if preset != Preset::None {
        attach(&mut model, preset.spec(), args.seed)?;
    }
    let data = load_folder(&args.data, model.config().image_size)?;
    let tc = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::finetune(preset)
    };
    let history = train(&mut model, &data, &tc)?;
    save_checkpoint(&model, &args.out, args.force)?;
    write_history(&history_path(&args.out), &history)?;
    let mut m = RunManifest::new("finetune", args, Some(args.seed));
    m.checkpoints = vec![args.ckpt.clone(), args.out.clone()];
    m.metrics = json!({
        "final": history.last(),
        "history": history_path(&args.out),
        "params": param_report(model.registry(), &model.placement()),
    });
    m.finish(
        &manifest_path(&args.manifest, with_suffix(&args.out, ".manifest.json")),
        started,
    )
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(RunManifest, Vec<EvalRow>)> {
    let started = Instant::now();
    let mut ckpts = args.ckpt.clone();
    if args.all_variants {
        let dir = args
            .ckpt_dir
            .as_ref()
            .ok_or_else(|| Error::Config("--all-variants needs --ckpt-dir".into()))?;
        ckpts.extend(
            Preset::ALL
                .iter()
                .map(|p| dir.join(format!("{}.ckpt", p.flag()))),
        );
    }
    if ckpts.is_empty() {
        return Err(Error::Config(
            "nothing to evaluate: pass --ckpt or --all-variants".into(),
        ));
    }
    let models = ckpts
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &protocol in &args.protocol {
        for model in &models {
            let data = load_folder(&args.data, model.config().image_size)?;
            rows.push(evaluate(model, &data, protocol.into(), args.seed)?.row);
        }
    }
    print!("{}", format_table(&rows));
    if let Some(path) = &args.records {
        let mut f = fs::File::create(path)?;
        for r in &rows {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    let mut m = RunManifest::new("eval", args, Some(args.seed));
    m.checkpoints = ckpts;
    m.metrics = json!({ "rows": rows });
    let m = m.finish(
        &manifest_path(&args.manifest, PathBuf::from("adaptseg-eval.manifest.json")),
        started,
    )?;
    Ok((m, rows))
}

pub fn cmd_params(args: &ParamsArgs) -> Result<(RunManifest, Vec<ParamReportRow>)> {
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut ckpts = Vec::new();
    if let Some(path) = &args.ckpt {
        let model = load_checkpoint(path)?;
        rows.push(param_report(model.registry(), &model.placement()));
        ckpts.push(path.clone());
    } else {
        let presets: Vec<Preset> = match args.preset {
            Some(p) => vec![p.into()],
            None => Preset::ALL.to_vec(),
        };
        for p in presets {
            let mut model = SegModel::new(args.arch.config(), args.seed)?;
            if p != Preset::None {
                attach(&mut model, p.spec(), args.seed)?;
            }
            model.registry_mut().apply_freeze_policy();
            rows.push(param_report(model.registry(), &model.placement()));
        }
    }
    println!(
        "{:<12} {:>10} {:>10} {:>10} {:>9}",
        "variant", "total", "trainable", "adapter", "fraction"
    );
    for r in &rows {
        println!(
            "{:<12} {:>10} {:>10} {:>10} {:>8.3}%",
            r.variant,
            r.total_params,
            r.trainable_params,
            r.adapter_params,
            100.0 * r.trainable_fraction
        );
    }
    println!("reference (large backbone, millions):");
    for (name, total, tunable) in REFERENCE_PARAM_ROWS {
        println!(
            "{name:<12} {total:>9}M {tunable:>9}M {:>10} {:>8.3}%",
            "-",
            100.0 * tunable / total
        );
    }
    let mut m = RunManifest::new("params", args, Some(args.seed));
    m.checkpoints = ckpts;
    m.metrics = json!({ "rows": rows });
    let m = m.finish(
        &manifest_path(
            &args.manifest,
            PathBuf::from("adaptseg-params.manifest.json"),
        ),
        started,
    )?;
    Ok((m, rows))
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<RunManifest> {
    let started = Instant::now();
    let results = gradient_suite()?;
    for r in &results {
        println!(
            "{:<18} {:>10.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let mut m = RunManifest::new("gradcheck", args, None);
    m.metrics = json!({ "results": results });
    let m = m.finish(
        &manifest_path(
            &args.manifest,
            PathBuf::from("adaptseg-gradcheck.manifest.json"),
        ),
        started,
    )?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    if !failed.is_empty() {
        return Err(Error::Invalid(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(m)
}

pub fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let started = Instant::now();
    let models = args
        .ckpt
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let samples = match &args.data {
        Some(dir) => load_folder(dir, models[0].config().image_size)?,
        None => Vec::new(),
    };
    let state = Arc::new(ServerState::new(models, samples)?);
    let handle = spawn(
        Arc::clone(&state),
        &format!("{}:{}", args.host, args.port),
        args.threads,
    )?;
    let mut m = RunManifest::new("serve", args, None);
    m.checkpoints = args.ckpt.clone();
    m.metrics = json!({
        "address": handle.addr().to_string(),
        "variants": state.variants().iter().map(|v| v.name.clone()).collect::<Vec<_>>(),
        "samples": state.samples().len(),
    });
    m.finish(
        &manifest_path(
            &args.manifest,
            PathBuf::from("adaptseg-serve.manifest.json"),
        ),
        started,
    )?;
    println!("listening on http://{}", handle.addr());
    handle.join();
    Ok(())
}

/// Parses a config file into `--flag value` tokens. Accepts `key = value`
/// lines (`#` comments) or a run manifest, whose `config` object is used.
pub fn config_tokens(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(text).map_err(|e| format!("bad manifest: {e}"))?;
        let Some(cfg) = v.get("config").and_then(Value::as_object) else {
            return Err("manifest has no `config` object".into());
        };
        for (k, v) in cfg {
            let value = match v {
                Value::Null => continue,
                Value::String(s) => s.clone(),
                Value::Array(items) if items.is_empty() => continue,
                Value::Array(items) => items
                    .iter()
                    .map(|i| {
                        i.as_str()
                            .map(str::to_string)
                            .unwrap_or_else(|| i.to_string())
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            pairs.push((k.clone(), value));
        }
    } else {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let mut tokens = Vec::new();
    for (k, v) in pairs {
        let flag = format!("--{}", k.replace('_', "-"));
        match v.as_str() {
            "true" => tokens.push(flag),
            "false" => {}
            _ => {
                tokens.push(flag);
                tokens.push(v);
            }
        }
    }
    Ok(tokens)
}

/// Pulls `--config FILE` out of `args` and splices the file's flags in
/// right after the subcommand, so flags given on the command line win.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => {
                config = Some(PathBuf::from(it.next().ok_or("--config needs a file")?));
            }
            Some(s) if s.starts_with("--config=") => {
                config = Some(PathBuf::from(&s["--config=".len()..]))
            }
            _ => rest.push(a),
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text =
        fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let tokens = config_tokens(&text)?;
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|i| i + 2)
        .ok_or("--config given without a subcommand")?;
    rest.splice(sub..sub, tokens.into_iter().map(OsString::from));
    Ok(rest)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a).map(drop),
        Command::Pretrain(a) => cmd_pretrain(&a).map(drop),
        Command::Finetune(a) => cmd_finetune(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Params(a) => cmd_params(&a).map(drop),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(drop),
        Command::Serve(a) => cmd_serve(&a),
    }
}

/// Exit codes: 0 success, 1 usage error, 2 runtime failure.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let args = match expand_config(args.into_iter().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn key_value_config_becomes_flags() {
        let t = config_tokens(
            "# comment\nepochs = 3\nbatch_size = 2\nforce = true\nall-variants = false\n",
        )
        .unwrap();
        assert_eq!(t, ["--epochs", "3", "--batch-size", "2", "--force"]);
        assert!(config_tokens("epochs 3").is_err());
    }

    #[test]
    fn manifest_config_round_trips() {
        let args = FinetuneArgs {
            ckpt: "base.ckpt".into(),
            preset: PresetArg::GlmedSa,
            data: "d".into(),
            out: "o.ckpt".into(),
            epochs: 4,
            lr: 0.002,
            batch_size: 3,
            seed: 9,
            force: false,
            manifest: None,
        };
        let m = RunManifest::new("finetune", &args, Some(9));
        let text = serde_json::to_string(&m).unwrap();
        let mut argv = os(&["adaptseg", "finetune"]);
        argv.extend(
            config_tokens(&text)
                .unwrap()
                .into_iter()
                .map(OsString::from),
        );
        let Command::Finetune(back) = Cli::try_parse_from(argv).unwrap().command else {
            panic!("wrong subcommand");
        };
        assert_eq!(
            serde_json::to_value(&back).unwrap(),
            serde_json::to_value(&args).unwrap()
        );
    }

    #[test]
    fn command_line_overrides_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "epochs = 3\nlr = 0.01\n").unwrap();
        let argv = expand_config(os(&[
            "adaptseg",
            "--config",
            cfg.to_str().unwrap(),
            "pretrain",
            "--data",
            "d",
            "--out",
            "o",
            "--epochs",
            "5",
        ]))
        .unwrap();
        let Command::Pretrain(a) = Cli::try_parse_from(argv).unwrap().command else {
            panic!("wrong subcommand");
        };
        assert_eq!(a.epochs, 5);
        assert_eq!(a.lr, 0.01);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(os(&["adaptseg", "--help"])), 0);
        assert_eq!(run(os(&["adaptseg", "frobnicate"])), 1);
        assert_eq!(
            run(os(&[
                "adaptseg",
                "eval",
                "--protocol",
                "7points",
                "--data",
                "x"
            ])),
            1
        );
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.ckpt");
        let code = run(os(&[
            "adaptseg",
            "params",
            "--ckpt",
            missing.to_str().unwrap(),
            "--manifest",
            dir.path().join("m.json").to_str().unwrap(),
        ]));
        assert_eq!(code, 2);
    }
}
