//! Command-line front end: `train`, `enhance`, `eval` and `inspect`.
//!
//! Settings resolve as built-in default, then `--config` file, then flags.
//! The config file is flat `key = value` text with `#` comments; the keys
//! are those listed by [`RunConfig::entries`].

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint::{self, Checkpoint};
use crate::dataio::{self, DataError};
use crate::losses::{LossConfig, PerceptualExtractor};
use crate::metrics::{self, PairMetrics};
use crate::network::{self, NetworkConfig};
use crate::tensor::Tensor;
use crate::training::{self, TrainConfig, TrainOptions};
use crate::wavelet::{self, Band, SubBands};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A failed command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs; exit 2.
    Usage(String),
    /// Anything that went wrong while running; exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Every setting of a run, flattened to `key = value` pairs.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainOptions,
    /// Dataset root holding the low-light and reference directories.
    pub data: Option<PathBuf>,
    pub low_dir: String,
    pub high_dir: String,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Archive replacing the built-in perceptual feature extractor.
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            train: TrainOptions::default(),
            data: None,
            low_dir: "low".into(),
            high_dir: "high".into(),
            out: None,
            checkpoint: None,
            perceptual_weights: None,
        }
    }
}

const KEY_HELP: &[(&str, &str)] = &[
    ("levels", "wavelet levels on the contracting path"),
    ("base_channels", "channel width at full resolution"),
    ("msc_depth", "convolutions per MSC block"),
    ("global_residual", "add the input to the output before clamping"),
    ("attention_reduction", "sub-band attention squeeze ratio"),
    ("w1", "dark-region pixel weight"),
    ("w2", "bright-region pixel weight"),
    ("w3", "perceptual weight"),
    ("w4", "SSIM weight"),
    ("bright_fraction", "share of pixels treated as bright"),
    ("smooth_l1_beta", "Smooth-L1 threshold"),
    ("gauss_a", "peak of the channel-loss Gaussian"),
    ("gauss_sigma_x", "channel-loss Gaussian spread along x"),
    ("gauss_sigma_y", "channel-loss Gaussian spread along y"),
    ("gauss_ksize", "channel-loss Gaussian size (odd)"),
    ("ssim_c1", "SSIM luminance stabilizer"),
    ("ssim_c2", "SSIM contrast stabilizer"),
    ("edge_loss", "enable the Sobel edge term"),
    ("channel_loss", "enable the channel term"),
    ("w_edge", "edge term weight"),
    ("w_channel", "channel term weight"),
    ("epochs", "total training epochs"),
    ("lr", "initial learning rate"),
    ("batch", "pairs per step"),
    ("patch", "square crop side, a multiple of 2^levels"),
    ("seed", "run seed"),
    ("deterministic", "single-threaded, reproducible execution"),
    ("augment", "random rotations and flips"),
    ("clip_grad_norm", "global gradient norm cap, 0 = off"),
    ("val_fraction", "share of pairs held out for the schedule"),
    ("patience", "plateau epochs tolerated before decay"),
    ("factor", "learning-rate decay factor"),
    ("min_lr", "learning-rate floor"),
    ("data", "dataset root"),
    ("low_dir", "low-light subdirectory of data"),
    ("high_dir", "reference subdirectory of data"),
    ("out", "output file or directory"),
    ("checkpoint", "checkpoint to resume from or run"),
    ("perceptual_weights", "perceptual extractor archive, empty = built-in"),
];

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Every key with its current value, in help order.
    ///
    /// ```
    /// use wavenhance::cli::{help_text, RunConfig};
    ///
    /// let defaults = RunConfig::default();
    /// let help = help_text();
    /// for (key, value) in defaults.entries() {
    ///     assert!(help.contains(&format!("{key} = {value}")), "{key} missing from help");
    ///     let mut c = RunConfig::default();
    ///     c.set(key, &value).unwrap();
    /// }
    /// assert_eq!(defaults.entries().len(), RunConfig::keys().count());
    /// ```
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        // Destructured without `..` so a new field fails to compile until listed.
        let RunConfig {
            network:
                NetworkConfig {
                    levels,
                    base_channels,
                    msc_depth,
                    global_residual,
                    attention_reduction,
                },
            loss:
                LossConfig {
                    w1,
                    w2,
                    w3,
                    w4,
                    bright_fraction,
                    smooth_l1_beta,
                    gauss_a,
                    gauss_sigma_x,
                    gauss_sigma_y,
                    gauss_ksize,
                    ssim_c1,
                    ssim_c2,
                    edge,
                    channel,
                    w_edge,
                    w_channel,
                },
            train:
                TrainOptions {
                    epochs,
                    lr,
                    batch,
                    patch,
                    seed,
                    deterministic,
                    augment,
                    clip_grad_norm,
                    val_fraction,
                    patience,
                    factor,
                    min_lr,
                    out_dir: _,
                },
            data,
            low_dir,
            high_dir,
            out,
            checkpoint,
            perceptual_weights,
        } = self;
        vec![
            ("levels", levels.to_string()),
            ("base_channels", base_channels.to_string()),
            ("msc_depth", msc_depth.to_string()),
            ("global_residual", global_residual.to_string()),
            ("attention_reduction", attention_reduction.to_string()),
            ("w1", w1.to_string()),
            ("w2", w2.to_string()),
            ("w3", w3.to_string()),
            ("w4", w4.to_string()),
            ("bright_fraction", bright_fraction.to_string()),
            ("smooth_l1_beta", smooth_l1_beta.to_string()),
            ("gauss_a", gauss_a.to_string()),
            ("gauss_sigma_x", gauss_sigma_x.to_string()),
            ("gauss_sigma_y", gauss_sigma_y.to_string()),
            ("gauss_ksize", gauss_ksize.to_string()),
            ("ssim_c1", ssim_c1.to_string()),
            ("ssim_c2", ssim_c2.to_string()),
            ("edge_loss", edge.to_string()),
            ("channel_loss", channel.to_string()),
            ("w_edge", w_edge.to_string()),
            ("w_channel", w_channel.to_string()),
            ("epochs", epochs.to_string()),
            ("lr", lr.to_string()),
            ("batch", batch.to_string()),
            ("patch", patch.to_string()),
            ("seed", seed.to_string()),
            ("deterministic", deterministic.to_string()),
            ("augment", augment.to_string()),
            ("clip_grad_norm", clip_grad_norm.unwrap_or(0.0).to_string()),
            ("val_fraction", val_fraction.to_string()),
            ("patience", patience.to_string()),
            ("factor", factor.to_string()),
            ("min_lr", min_lr.to_string()),
            ("data", fmt_path(data)),
            ("low_dir", low_dir.clone()),
            ("high_dir", high_dir.clone()),
            ("out", fmt_path(out)),
            ("checkpoint", fmt_path(checkpoint)),
            ("perceptual_weights", fmt_path(perceptual_weights)),
        ]
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEY_HELP.iter().map(|(k, _)| *k)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        let flag = |v: &str| parse_bool(v).ok_or_else(|| format!("invalid value `{v}` for `{key}`, expected true or false"));
        let n = &mut self.network;
        let l = &mut self.loss;
        let t = &mut self.train;
        match key {
            "levels" => n.levels = num(key, v)?,
            "base_channels" => n.base_channels = num(key, v)?,
            "msc_depth" => n.msc_depth = num(key, v)?,
            "global_residual" => n.global_residual = flag(v)?,
            "attention_reduction" => n.attention_reduction = num(key, v)?,
            "w1" => l.w1 = num(key, v)?,
            "w2" => l.w2 = num(key, v)?,
            "w3" => l.w3 = num(key, v)?,
            "w4" => l.w4 = num(key, v)?,
            "bright_fraction" => l.bright_fraction = num(key, v)?,
            "smooth_l1_beta" => l.smooth_l1_beta = num(key, v)?,
            "gauss_a" => l.gauss_a = num(key, v)?,
            "gauss_sigma_x" => l.gauss_sigma_x = num(key, v)?,
            "gauss_sigma_y" => l.gauss_sigma_y = num(key, v)?,
            "gauss_ksize" => l.gauss_ksize = num(key, v)?,
            "ssim_c1" => l.ssim_c1 = num(key, v)?,
            "ssim_c2" => l.ssim_c2 = num(key, v)?,
            "edge_loss" => l.edge = flag(v)?,
            "channel_loss" => l.channel = flag(v)?,
            "w_edge" => l.w_edge = num(key, v)?,
            "w_channel" => l.w_channel = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "patch" => t.patch = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "deterministic" => t.deterministic = flag(v)?,
            "augment" => t.augment = flag(v)?,
            "clip_grad_norm" => {
                let c: f64 = num(key, v)?;
                t.clip_grad_norm = (c > 0.0).then_some(c);
            }
            "val_fraction" => t.val_fraction = num(key, v)?,
            "patience" => t.patience = num(key, v)?,
            "factor" => t.factor = num(key, v)?,
            "min_lr" => t.min_lr = num(key, v)?,
            "data" => self.data = parse_path(v),
            "low_dir" => self.low_dir = v.to_owned(),
            "high_dir" => self.high_dir = v.to_owned(),
            "out" => self.out = parse_path(v),
            "checkpoint" => self.checkpoint = parse_path(v),
            "perceptual_weights" => self.perceptual_weights = parse_path(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies a flat `key = value` document. Errors carry `origin:line`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<Vec<&'static str>, String> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1));
            };
            let k = k.trim();
            self.set(k, v).map_err(|e| format!("{origin}:{}: {e}", i + 1))?;
            seen.extend(Self::keys().find(|key| *key == k));
        }
        Ok(seen)
    }

    /// The effective configuration as a config file.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// The key listing shown under `--help`.
pub fn help_text() -> String {
    let defaults = RunConfig::default().entries();
    let mut s = String::from("Config keys (`key = value` in --config files, or --set key=value):\n");
    for ((key, value), (_, help)) in defaults.iter().zip(KEY_HELP) {
        s.push_str(&format!("  {key} = {value}\n      {help}\n"));
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "wavenhance", version, about = "Wavelet U-Net low-light image enhancement", after_long_help = help_text())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a directory of paired low-light and reference PNGs.
    #[command(after_long_help = help_text())]
    Train(TrainArgs),
    /// Enhance one PNG or every PNG in a directory.
    #[command(after_long_help = help_text())]
    Enhance(EnhanceArgs),
    /// Score enhanced images against references.
    Eval(EvalArgs),
    /// Write the four Haar sub-bands of an image as PNGs.
    Inspect(InspectArgs),
}

/// Flags shared by every config-driven command.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long = "base-channels")]
    pub base_channels: Option<usize>,
    #[arg(long = "msc-depth")]
    pub msc_depth: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Dataset root containing `low/` and `high/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints and loss.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub w1: Option<f64>,
    #[arg(long)]
    pub w2: Option<f64>,
    #[arg(long)]
    pub w3: Option<f64>,
    #[arg(long)]
    pub w4: Option<f64>,
    #[arg(long = "no-edge-loss")]
    pub no_edge_loss: bool,
    #[arg(long = "no-channel-loss")]
    pub no_channel_loss: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EnhanceArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// PNG file or directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
    /// Output PNG, or directory when the input is a directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Directory of enhanced PNGs.
    #[arg(long)]
    pub enhanced: PathBuf,
    /// Directory of reference PNGs with the same names.
    #[arg(long)]
    pub reference: PathBuf,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Args, Debug, Clone)]
pub struct InspectArgs {
    /// Input PNG.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Also store the raw sub-bands and check that they reconstruct the input.
    #[arg(long)]
    pub roundtrip: bool,
}

/// Resolved configuration plus the keys set explicitly by file or flag.
pub struct Resolved {
    pub config: RunConfig,
    pub explicit: BTreeSet<&'static str>,
}

fn resolve(common: &ConfigArgs, extra: &[(&'static str, Option<String>)]) -> Result<Resolved, CliError> {
    let mut config = RunConfig::default();
    let mut explicit = BTreeSet::new();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        explicit.extend(
            config
                .apply_text(&text, &path.display().to_string())
                .map_err(CliError::Usage)?,
        );
    }
    let mut flags: Vec<(&'static str, Option<String>)> = vec![
        ("seed", common.seed.map(|v| v.to_string())),
        ("deterministic", common.deterministic.then(|| "true".into())),
        ("checkpoint", common.checkpoint.as_ref().map(|p| p.display().to_string())),
        ("levels", common.levels.map(|v| v.to_string())),
        ("base_channels", common.base_channels.map(|v| v.to_string())),
        ("msc_depth", common.msc_depth.map(|v| v.to_string())),
    ];
    flags.extend_from_slice(extra);
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, &v).map_err(|e| CliError::Usage(format!("--{}: {e}", key.replace('_', "-"))))?;
            explicit.insert(key);
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        let k = k.trim();
        config.set(k, v).map_err(|e| CliError::Usage(format!("--set: {e}")))?;
        explicit.extend(RunConfig::keys().find(|key| *key == k));
    }
    Ok(Resolved { config, explicit })
}

fn with_threads<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    if deterministic {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(runtime)?;
        Ok(pool.install(f))
    } else {
        Ok(f())
    }
}

fn extractor(cfg: &RunConfig) -> Result<PerceptualExtractor, CliError> {
    match &cfg.perceptual_weights {
        Some(p) => PerceptualExtractor::load(p, None)
            .map_err(|e| CliError::Usage(format!("perceptual weights {}: {e}", p.display()))),
        None => Ok(PerceptualExtractor::default()),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let extra = [
        ("data", path_str(&args.data)),
        ("out", path_str(&args.out)),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("batch", args.batch.map(|v| v.to_string())),
        ("patch", args.patch.map(|v| v.to_string())),
        ("w1", args.w1.map(|v| v.to_string())),
        ("w2", args.w2.map(|v| v.to_string())),
        ("w3", args.w3.map(|v| v.to_string())),
        ("w4", args.w4.map(|v| v.to_string())),
        ("edge_loss", args.no_edge_loss.then(|| "false".into())),
        ("channel_loss", args.no_channel_loss.then(|| "false".into())),
    ];
    let Resolved { config: cfg, .. } = resolve(&args.common, &extra)?;
    let data = cfg.data.clone().ok_or_else(|| CliError::Usage("train needs --data".into()))?;
    let out = cfg.out.clone().ok_or_else(|| CliError::Usage("train needs --out".into()))?;
    cfg.network.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.loss.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.train.validate(&cfg.network).map_err(|e| CliError::Usage(e.to_string()))?;

    let scan = dataio::scan_pairs(&data.join(&cfg.low_dir), &data.join(&cfg.high_dir)).map_err(|e| match e {
        DataError::NoPairs { .. } | DataError::Io { .. } => CliError::Usage(e.to_string()),
        other => runtime(other),
    })?;
    let (pairs, rejected) = dataio::load_pairs(&scan.pairs);
    if pairs.is_empty() {
        return Err(CliError::Runtime(format!("all {} pairs failed to load", rejected.len())));
    }
    let resume = match &cfg.checkpoint {
        Some(p) => Some(Checkpoint::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?),
        None => None,
    };
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    fs::write(out.join("run.cfg"), cfg.to_text()).map_err(runtime)?;

    let train_cfg = TrainConfig {
        network: cfg.network,
        loss: cfg.loss.clone(),
        options: TrainOptions {
            out_dir: Some(out.clone()),
            ..cfg.train.clone()
        },
        extractor: extractor(&cfg)?,
    };
    log::info!("training on {} pairs from {}", pairs.len(), data.display());
    let outcome = training::train(&pairs, &train_cfg, resume).map_err(runtime)?;
    println!(
        "trained {} epochs ({} steps); final loss {:.6}; checkpoints in {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.adam.step,
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

/// Pads to the network's size multiple with mirrored borders, enhances and
/// crops back.
pub fn enhance_padded(x: &Tensor, ck: &Checkpoint) -> Result<Tensor, CliError> {
    let s = x.shape();
    let m = ck.network.size_multiple();
    let (ph, pw) = ((m - s.h % m) % m, (m - s.w % m) % m);
    let padded = x.pad_reflect(ph, pw).map_err(runtime)?;
    let y = network::enhance(&padded, &ck.params, &ck.network).map_err(runtime)?;
    y.crop(0, 0, s.h, s.w).map_err(runtime)
}

pub fn cmd_enhance(args: &EnhanceArgs) -> Result<(), CliError> {
    let Resolved { config: cfg, explicit } = resolve(&args.common, &[])?;
    let ck_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("enhance needs --checkpoint".into()))?;
    let ck = checkpoint::load_checkpoint(&ck_path).map_err(|e| CliError::Usage(format!("{}: {e}", ck_path.display())))?;
    let mismatch: Vec<String> = RunConfig {
        network: ck.network,
        ..cfg.clone()
    }
    .entries()
    .into_iter()
    .zip(cfg.entries())
    .filter(|((k, a), (_, b))| explicit.contains(k) && a != b)
    .map(|((k, a), (_, b))| format!("{k}: checkpoint has {a}, config asks for {b}"))
    .collect();
    if !mismatch.is_empty() {
        return Err(CliError::Usage(format!("network config mismatch: {}", mismatch.join("; "))));
    }

    let jobs: Vec<(PathBuf, PathBuf)> = if args.input.is_dir() {
        let out = args
            .out
            .clone()
            .ok_or_else(|| CliError::Usage("directory input needs --out DIR".into()))?;
        fs::create_dir_all(&out).map_err(runtime)?;
        dataio::list_pngs(&args.input)
            .map_err(runtime)?
            .into_iter()
            .map(|name| (args.input.join(&name), out.join(&name)))
            .collect()
    } else {
        let out = args.out.clone().unwrap_or_else(|| {
            let stem = args.input.file_stem().unwrap_or_default().to_string_lossy();
            args.input.with_file_name(format!("{stem}.enhanced.png"))
        });
        vec![(args.input.clone(), out)]
    };
    if jobs.is_empty() {
        return Err(CliError::Usage(format!("no PNG files in {}", args.input.display())));
    }
    with_threads(cfg.train.deterministic, || -> Result<(), CliError> {
        for (src, dst) in &jobs {
            let x = dataio::load_image(src).map_err(runtime)?;
            let y = enhance_padded(&x, &ck)?;
            dataio::save_image(&y, dst).map_err(runtime)?;
            println!("{} -> {}", src.display(), dst.display());
        }
        Ok(())
    })?
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let names = dataio::list_pngs(&args.enhanced).map_err(|e| CliError::Usage(e.to_string()))?;
    if names.is_empty() {
        return Err(CliError::Usage(format!("no PNG files in {}", args.enhanced.display())));
    }
    let rows: Vec<PairMetrics> = with_threads(args.deterministic, || {
        names
            .par_iter()
            .map(|name| {
                let scored = (|| -> Result<(f64, f64), String> {
                    let e = dataio::load_image(&args.enhanced.join(name)).map_err(|e| e.to_string())?;
                    let g = dataio::load_image(&args.reference.join(name)).map_err(|e| e.to_string())?;
                    let p = metrics::psnr(&e, &g).map_err(|e| e.to_string())?;
                    let s = metrics::ssim_windowed(&e, &g).map_err(|e| e.to_string())?;
                    Ok((p, s))
                })();
                if let Err(e) = &scored {
                    log::warn!("{name}: {e}");
                }
                PairMetrics {
                    name: name.clone(),
                    result: scored,
                }
            })
            .collect()
    })?;
    let report = metrics::summarize(rows);
    let csv = report.to_csv();
    match &args.out {
        Some(p) => {
            fs::write(p, &csv).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            println!("mean PSNR {:.4} dB, mean SSIM {:.4} over {} images", report.psnr_db, report.ssim, report.valid_count());
        }
        None => print!("{csv}"),
    }
    if report.valid_count() == 0 {
        return Err(CliError::Runtime("no image pair could be scored".into()));
    }
    Ok(())
}

/// Archive holding the exact sub-band values written by `inspect --roundtrip`.
pub fn bands_path(out: &Path, stem: &str) -> PathBuf {
    out.join(format!("{stem}.bands.r2mw"))
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<(), CliError> {
    let x = dataio::load_image(&args.input).map_err(|e| CliError::Usage(e.to_string()))?;
    let s = x.shape();
    // Odd sizes get one mirrored row or column.
    let x = x.pad_reflect(s.h % 2, s.w % 2).map_err(runtime)?;
    let bands = wavelet::dwt(&x).map_err(runtime)?;
    let stem = args.input.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    fs::create_dir_all(&args.out).map_err(runtime)?;
    let display = wavelet::normalize_subbands(&bands, network::SUBBAND_VMAX);
    for (band, t) in display.iter() {
        let path = args.out.join(format!("{stem}.{}.png", band.name()));
        dataio::save_image(t, &path).map_err(runtime)?;
        println!("{}", path.display());
    }
    if args.roundtrip {
        let path = bands_path(&args.out, &stem);
        let entries: Vec<(String, Tensor)> = bands.iter().map(|(b, t)| (b.name().to_owned(), t.clone())).collect();
        checkpoint::write_archive(&path, &entries).map_err(runtime)?;
        let stored = checkpoint::read_archive(&path).map_err(runtime)?;
        let get = |b: Band| {
            stored
                .get(b.name())
                .cloned()
                .ok_or_else(|| runtime(format!("{}: band {} missing", path.display(), b.name())))
        };
        let restored = SubBands {
            ll: get(Band::LL)?,
            lh: get(Band::LH)?,
            hl: get(Band::HL)?,
            hh: get(Band::HH)?,
        };
        let y = wavelet::idwt(&restored).map_err(runtime)?;
        let err = y.max_abs_diff(&x).map_err(runtime)?;
        println!("roundtrip max abs error {err:e}");
        if err > 1e-12 {
            return Err(CliError::Runtime(format!("sub-band roundtrip error {err:e} exceeds 1e-12")));
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
