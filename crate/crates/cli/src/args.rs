use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Parser, Serialize)]
#[command(name = "skinpatch", version, about = "Skin-patch face anti-spoofing toolkit")]
pub struct Cli {
    /// JSON object of flag values for the subcommand; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic bona-fide / attack patch corpus.
    Synth(SynthArgs),
    /// Extract skin patches from a directory of PPM faces with keypoint sidecars.
    Extract(ExtractArgs),
    /// Train a multi-branch classifier on a corpus.
    Train(TrainArgs),
    /// Score a corpus and report APCER, BPCER and ACER.
    Eval(EvalArgs),
    /// Sweep the decision threshold over a corpus.
    Sweep(SweepArgs),
    /// Serve a checkpoint over the patch protocol.
    Serve(ServeArgs),
    /// Extract patches from a face locally and ask a server for a decision.
    Predict(PredictArgs),
    /// Compare whole-image encryption against patch-only transfer.
    Bench(BenchArgs),
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Bona-fide samples; each attack type gets the same count.
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ExtractArgs {
    /// Directory of `<name>.ppm` images, each with a `<name>.json` keypoint file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Corpus directory holding `manifest.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    /// Separate validation corpus; without it a stratified slice of `--data` is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub branches: usize,
    /// Output channels of each 3x3 conv block.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    pub backbone: Vec<usize>,
    #[arg(long)]
    pub share_weights: bool,
    /// Uniform weight bound: sqrt(1/fan_in) or sqrt(6/fan_in).
    #[arg(long, value_enum, default_value_t = InitArg::He)]
    pub init: InitArg,
    /// Feed raw pixels instead of per-patch, per-channel standardized ones.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_augment: bool,
    /// Feed the first k stored patches instead of a random draw per sample.
    #[arg(long)]
    pub first_k: bool,
    #[arg(long, default_value_t = 99)]
    pub sweep_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    FanIn,
    He,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the threshold stored next to the checkpoint, else 0.5.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 99)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ServeArgs {
    #[arg(long, env = "SPF_MODEL")]
    pub model: PathBuf,
    #[arg(long, env = "SPF_BIND", default_value = "127.0.0.1:7878")]
    pub bind: String,
    /// Defaults to the threshold stored next to the checkpoint, else 0.5.
    #[arg(long, env = "SPF_THRESHOLD")]
    pub threshold: Option<f64>,
    #[arg(long, env = "SPF_MAX_CONNECTIONS", default_value_t = 64)]
    pub max_connections: usize,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct PredictArgs {
    #[arg(long)]
    pub server: String,
    /// Face image (binary PPM). Not needed with `--health`.
    #[arg(long, required_unless_present = "health")]
    pub image: Option<PathBuf>,
    /// Keypoint JSON; defaults to the image path with a `.json` extension.
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub timeout_ms: u64,
    /// Query server health instead of predicting.
    #[arg(long)]
    pub health: bool,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    /// Replay stage times from a JSON table instead of measuring.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Checkpoint to time; a freshly initialized default model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    pub rtt_ms: f64,
    #[arg(long, default_value_t = 1000.0)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Turns each `"key": value` of the `--config` object into `--key value`
/// placed right after the subcommand, so explicit flags later on override them.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    let mut sub = None;
    let mut i = 1;
    while i < strs.len() {
        let a = &strs[i];
        if a == "--config" {
            path = strs.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if sub.is_none() && !a.starts_with('-') {
            sub = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(sub)) = (path, sub) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let json: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {path}"))?;
    let Value::Object(map) = json else {
        bail!("config {path} must be a JSON object");
    };
    let mut extra = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            Value::Bool(true) => extra.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                extra.push(flag);
                extra.push(items.iter().map(scalar).collect::<Result<Vec<_>>>()?.join(","));
            }
            v => {
                extra.push(flag);
                extra.push(scalar(&v)?);
            }
        }
    }
    let mut out = argv;
    out.splice(sub + 1..sub + 1, extra.into_iter().map(OsString::from));
    Ok(out)
}

fn scalar(v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => bail!("unsupported config value {other}"),
    }
}
