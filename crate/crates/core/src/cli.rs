//! Command-line front end: run configuration files and the subcommands.
//!
//! A run configuration is a UTF-8 file of `key = value` lines; `#` starts a
//! comment. Unknown keys are rejected and `--set key=value` flags override
//! the file. Commands that write outputs also write the resolved
//! configuration next to them.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autograd::GradcheckOptions;
use crate::data::{
    self, crop_image, AugmentPlan, AugmentedSet, DatasetSplit, LoadOptions, PnmImage, Protocol,
    Sample,
};
use crate::diagnostics::full_gradcheck;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::map::BinaryMap;
use crate::metrics::{render_overlay, EvalInput, MetricsReport};
use crate::model::{
    count_params, forward, load_checkpoint, save_checkpoint, ModelParams, RCNetConfig,
};
use crate::optim::{self, EpochLog, LossWeights, TrainConfig};
use crate::tensor::Tensor;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "model.rcn";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Everything a run needs, as read from a configuration file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub protocol: Protocol,
    pub out_dir: PathBuf,
    pub model: RCNetConfig,
    pub train: TrainConfig,
    pub augment: bool,
    pub augment_plan: AugmentPlan,
    /// Check image sizes and counts against the published dataset sizes.
    pub strict_dims: bool,
    pub whole_image_fov: bool,
    pub threshold: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: None,
            protocol: Protocol::DriveFixed,
            out_dir: PathBuf::from("runs/default"),
            model: RCNetConfig::default(),
            train: TrainConfig::default(),
            augment: true,
            augment_plan: AugmentPlan::default(),
            strict_dims: true,
            whole_image_fov: false,
            threshold: 0.5,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "data_root",
    "protocol",
    "out_dir",
    "channels",
    "convs_per_block",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "loss_weights",
    "deterministic",
    "augment",
    "rotation_step",
    "brightness_variants",
    "brightness_min",
    "brightness_max",
    "strict_dims",
    "whole_image_fov",
    "threshold",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Usage(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let plan = &mut self.augment_plan;
        match key {
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "protocol" => self.protocol = value.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "channels" => {
                let c: Vec<usize> = parse_list(key, value)?;
                self.model.channels = c.try_into().map_err(|_| {
                    Error::Usage("channels: expected six comma-separated counts".into())
                })?;
            }
            "convs_per_block" => self.model.convs_per_block = parse_value(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_value(key, value)?,
            "batch_size" => self.train.batch_size = parse_value(key, value)?,
            "epochs" => self.train.epochs = parse_value(key, value)?,
            "seed" => self.train.seed = parse_value(key, value)?,
            "loss_weights" => {
                self.train.loss_weights = if value == "auto" {
                    LossWeights::Auto
                } else {
                    let w: Vec<f64> = parse_list(key, value)?;
                    LossWeights::Manual(w.try_into().map_err(|_| {
                        Error::Usage("loss_weights: expected auto or two numbers".into())
                    })?)
                }
            }
            "deterministic" => self.train.deterministic = parse_bool(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "rotation_step" => plan.rotation_step = parse_value(key, value)?,
            "brightness_variants" => plan.brightness_variants = parse_value(key, value)?,
            "brightness_min" => plan.brightness_min = parse_value(key, value)?,
            "brightness_max" => plan.brightness_max = parse_value(key, value)?,
            "strict_dims" => self.strict_dims = parse_bool(key, value)?,
            "whole_image_fov" => self.whole_image_fov = parse_bool(key, value)?,
            "threshold" => self.threshold = parse_value(key, value)?,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown config key {key:?} (known: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            config
                .set(key.trim(), value)
                .map_err(|e| Error::Usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.augment {
            self.augment_plan.validate()?;
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// The dataset root, or a usage error naming the missing key.
    pub fn require_data_root(&self) -> Result<&Path> {
        match &self.data_root {
            Some(p) if p.is_dir() => Ok(p),
            Some(p) => Err(Error::Usage(format!(
                "data_root: {} is not a directory",
                p.display()
            ))),
            None => Err(Error::Usage("missing required key data_root".into())),
        }
    }

    /// Every key with its effective value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let weights = match self.train.loss_weights {
            LossWeights::Auto => "auto".to_string(),
            LossWeights::Manual(w) => join(&w),
        };
        let p = &self.augment_plan;
        let data_root = self.data_root.as_ref().map_or_else(
            || "# data_root = (unset)".to_string(),
            |d| format!("data_root = {}", d.display()),
        );
        [
            data_root,
            format!("protocol = {}", self.protocol),
            format!("out_dir = {}", self.out_dir.display()),
            format!("channels = {}", join(&self.model.channels)),
            format!("convs_per_block = {}", self.model.convs_per_block),
            format!("learning_rate = {}", self.train.learning_rate),
            format!("batch_size = {}", self.train.batch_size),
            format!("epochs = {}", self.train.epochs),
            format!("seed = {}", self.train.seed),
            format!("loss_weights = {weights}"),
            format!("deterministic = {}", self.train.deterministic),
            format!("augment = {}", self.augment),
            format!("rotation_step = {}", p.rotation_step),
            format!("brightness_variants = {}", p.brightness_variants),
            format!("brightness_min = {}", p.brightness_min),
            format!("brightness_max = {}", p.brightness_max),
            format!("strict_dims = {}", self.strict_dims),
            format!("whole_image_fov = {}", self.whole_image_fov),
            format!("threshold = {}", self.threshold),
        ]
        .join("\n")
            + "\n"
    }

    fn load_options(&self) -> LoadOptions {
        let mut opts = match (self.strict_dims, self.protocol) {
            (false, _) => LoadOptions::unchecked(),
            (true, Protocol::DriveFixed) => LoadOptions::drive(),
            (true, _) => LoadOptions::stare(),
        };
        opts.whole_image_fov = self.whole_image_fov;
        opts
    }

    /// Loads the split named by `protocol` from `data_root`.
    pub fn load_split(&self) -> Result<DatasetSplit> {
        let root = self.require_data_root()?;
        let opts = self.load_options();
        match self.protocol {
            Protocol::DriveFixed => data::load_drive_with(root, &opts),
            p => data::load_stare_with(root, p, &opts),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_resolved(config: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(RESOLVED_CONFIG), config.to_text())
}

// ---------------------------------------------------------------------------
// Commands

/// Trains a model and writes the checkpoint, log CSV and resolved config
/// under `out_dir`. Returns the per-epoch log.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let split = config.load_split()?;
    let out = &config.out_dir;
    create_dir(out)?;
    write_resolved(config, out)?;

    let params = ModelParams::build(config.model, config.train.seed)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log_text = format!("{}\n", EpochLog::CSV_HEADER);
    write_file(&log_path, &log_text)?;
    let mut log_error = None;
    let on_epoch = |e: &EpochLog| {
        eprintln!("{e}");
        log_text.push_str(&e.csv_row());
        log_text.push('\n');
        if let Err(err) = write_file(&log_path, &log_text) {
            log_error.get_or_insert(err);
        }
    };
    let outcome = if config.augment {
        let set = AugmentedSet::new(split.train, config.augment_plan.clone())?;
        optim::train(params, &set, &config.train, on_epoch)?
    } else {
        optim::train(params, &split.train, &config.train, on_epoch)?
    };
    if let Some(err) = log_error {
        return Err(err);
    }
    eprintln!(
        "class weights: background {:.4}, vessel {:.4}",
        outcome.weights[0], outcome.weights[1]
    );
    save_checkpoint(&outcome.params, out.join(CHECKPOINT_FILE))?;
    Ok(outcome.log)
}

/// Vessel probabilities `[H, W]` for an image of any size, cropped back to
/// the input size.
pub fn predict_image(params: &ModelParams<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::invalid(
            "predict",
            format!("expected [C, H, W], got {:?}", image.shape()),
        ));
    };
    let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
    let padded = data::pad_image(image, ph, pw).reshape(&[1, c, ph, pw])?;
    let out = forward(params, &padded, Mode::Eval, false)?;
    let vessel = Tensor::new(
        &[1, ph, pw],
        out.probs.data()[ph * pw..2 * ph * pw].to_vec(),
    )?;
    crop_image(&vessel, h, w).reshape(&[h, w])
}

/// Encodes probabilities as a 16-bit PGM scaled to `[0, 65535]`.
pub fn probability_pgm(probs: &Tensor<f32>) -> PnmImage {
    let (h, w) = (probs.shape()[0], probs.shape()[1]);
    let data = probs
        .data()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    PnmImage::gray(w, h, 65535, data)
}

fn ppm_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Usage(format!(
            "{} is neither a file nor a directory",
            input.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Usage(format!(
            "no .ppm images in {}",
            input.display()
        )));
    }
    Ok(files)
}

/// Writes `<stem>.pgm` probability maps for one image or a directory of
/// PPMs. Returns the written paths.
pub fn cmd_predict(checkpoint: &Path, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let params = load_checkpoint(checkpoint)?;
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for path in ppm_inputs(input)? {
        let image = data::read_rgb(&path)?;
        let probs = predict_image(&params, &image)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let target = out_dir.join(format!("{stem}.pgm"));
        probability_pgm(&probs).save(&target)?;
        written.push(target);
    }
    Ok(written)
}

/// Reads a probability map as values in `[0, 1]`.
pub fn read_probability_map(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = data::netpbm::read(path)?;
    if img.channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "expected a grayscale (P5) probability map".into(),
        });
    }
    let scale = img.maxval as f32;
    Ok((
        img.height,
        img.width,
        img.data.iter().map(|&v| v as f32 / scale).collect(),
    ))
}

fn unpadded(s: &Sample) -> (BinaryMap, BinaryMap) {
    let (h, w) = s.original;
    (s.label.cropped(h, w), s.fov.cropped(h, w))
}

/// Scores `<id>.pgm` maps in `pred_dir` against the test split of
/// `config`; writes the CSV and one overlay per image under `out_dir`.
pub fn cmd_evaluate(config: &RunConfig, pred_dir: &Path, out_dir: &Path) -> Result<MetricsReport> {
    config.validate()?;
    let split = config.load_split()?;
    create_dir(out_dir)?;
    write_resolved(config, out_dir)?;

    let mut loaded = Vec::with_capacity(split.test.len());
    for s in &split.test {
        let path = pred_dir.join(format!("{}.pgm", s.id));
        if !path.is_file() {
            return Err(Error::Usage(format!(
                "missing prediction for {} ({})",
                s.id,
                path.display()
            )));
        }
        let (h, w, probs) = read_probability_map(&path)?;
        if (h, w) != s.original {
            return Err(Error::Dataset(format!(
                "{}: prediction is {h}x{w}, image is {}x{}",
                s.id, s.original.0, s.original.1
            )));
        }
        let (gt, fov) = unpadded(s);
        loaded.push((s.id.clone(), probs, gt, fov));
    }
    let inputs: Vec<EvalInput> = loaded
        .iter()
        .map(|(id, probs, gt, fov)| EvalInput { id, probs, gt, fov })
        .collect();
    let report = MetricsReport::build(&inputs, config.threshold)?;
    for input in &inputs {
        let pred = BinaryMap::from_threshold(
            input.gt.height(),
            input.gt.width(),
            input.probs,
            config.threshold,
        )?;
        render_overlay(&pred, input.gt, input.fov)?
            .save(out_dir.join(format!("{}_overlay.ppm", input.id)))?;
    }
    write_file(&out_dir.join(METRICS_FILE), report.to_csv())?;
    Ok(report)
}

/// Writes every augmented training sample of the configured split.
pub fn cmd_augment(config: &RunConfig, out_dir: &Path) -> Result<usize> {
    config.validate()?;
    let split = config.load_split()?;
    create_dir(out_dir)?;
    write_resolved(config, out_dir)?;
    let originals: Vec<Sample> = split
        .train
        .iter()
        .map(|s| {
            let (h, w) = s.original;
            let (label, fov) = unpadded(s);
            Sample::new(s.id.clone(), crop_image(&s.image, h, w), label, fov)
        })
        .collect::<Result<_>>()?;
    AugmentedSet::new(originals, config.augment_plan.clone())?.materialize(out_dir)
}

/// Names of the feature maps [`cmd_dump_activations`] accepts.
pub fn activation_names(config: RCNetConfig) -> Result<Vec<String>> {
    let params = ModelParams::<f32>::build(config, 0)?;
    let x = Tensor::zeros(&[1, config.in_channels, 4, 4])?;
    let out = forward(&params, &x, Mode::Eval, true)?;
    Ok(out
        .activations
        .unwrap_or_default()
        .into_iter()
        .map(|(n, _)| n)
        .collect())
}

/// Min-max normalizes one channel to an 8-bit PGM; constant maps become 0.
pub fn channel_pgm(map: &[f32], h: usize, w: usize) -> PnmImage {
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let data = map
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    PnmImage::gray(w, h, 255, data)
}

/// Writes `<layer>_cNN.pgm` for every channel of each requested layer.
/// Maps keep the network's resolution for that layer (the padded input
/// divided by the pooling factor).
pub fn cmd_dump_activations(
    checkpoint: &Path,
    image: &Path,
    layers: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let params = load_checkpoint(checkpoint)?;
    let known = activation_names(*params.config())?;
    if let Some(bad) = layers.iter().find(|l| !known.contains(l)) {
        return Err(Error::Usage(format!(
            "unknown layer {bad:?} (known: {})",
            known.join(", ")
        )));
    }
    let img = data::read_rgb(image)?;
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
    let x = data::pad_image(&img, ph, pw).reshape(&[1, c, ph, pw])?;
    let out = forward(&params, &x, Mode::Eval, true)?;
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for (name, t) in out.activations.unwrap_or_default() {
        if !layers.contains(&name) {
            continue;
        }
        let (_, channels, mh, mw) = t.dims4()?;
        for ch in 0..channels {
            let plane = &t.data()[ch * mh * mw..(ch + 1) * mh * mw];
            let path = out_dir.join(format!("{name}_c{ch:02}.pgm"));
            channel_pgm(plane, mh, mw).save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "rcnet",
    version,
    about = "Retinal vessel segmentation with RC-Net"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` run configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        config.apply_overrides(&self.overrides)?;
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes model.rcn, train_log.csv and config.resolved to out_dir.
    Train(ConfigArgs),
    /// Write 16-bit vessel-probability PGMs for one PPM or a directory of them.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score <id>.pgm probability maps against the configured test split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every layer and the full network.
    Gradcheck {
        /// Check at most this many entries per tensor.
        #[arg(long)]
        max_entries: Option<usize>,
    },
    /// Print the number of learnable parameters.
    Params(ConfigArgs),
    /// Materialize the augmented training set.
    Augment {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-channel feature maps of named layers as PGMs.
    DumpActivations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated layer names; omit to list them.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs one parsed command; the value is the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => {
            let config = args.resolve()?;
            let log = cmd_train(&config)?;
            println!(
                "trained {} epochs; checkpoint {}",
                log.len(),
                config.out_dir.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Predict {
            checkpoint,
            input,
            out,
        } => {
            for path in cmd_predict(&checkpoint, &input, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate {
            config,
            predictions,
            out,
        } => {
            let report = cmd_evaluate(&config.resolve()?, &predictions, &out)?;
            print!("{report}");
        }
        Command::Gradcheck { max_entries } => {
            let opts = GradcheckOptions {
                max_entries,
                ..Default::default()
            };
            let report = full_gradcheck(&opts)?;
            println!("{report}");
            if !report.passed() {
                return Ok(1);
            }
        }
        Command::Params(args) => {
            let config = args.resolve()?;
            config.model.validate()?;
            println!(
                "{}",
                count_params(&ModelParams::<f32>::build(config.model, 0)?)
            );
        }
        Command::Augment { config, out } => {
            let n = cmd_augment(&config.resolve()?, &out)?;
            println!("wrote {n} augmented samples to {}", out.display());
        }
        Command::DumpActivations {
            checkpoint,
            image,
            layers,
            out,
        } => {
            if layers.is_empty() {
                let params = load_checkpoint(&checkpoint)?;
                for name in activation_names(*params.config())? {
                    println!("{name}");
                }
                return Ok(0);
            }
            let out =
                out.ok_or_else(|| Error::Usage("--out is required when --layers is given".into()))?;
            let written = cmd_dump_activations(&checkpoint, &image, &layers, &out)?;
            println!("wrote {} maps to {}", written.len(), out.display());
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::parse(
            "# run\nprotocol = stare-loo(3)  # holdout\nchannels = 4, 8, 16, 16, 8, 4\nloss_weights = 0.5,2\naugment = false\n",
        )
        .unwrap();
        assert_eq!(c.protocol, Protocol::StareLoo(3));
        assert_eq!(c.model.channels, [4, 8, 16, 16, 8, 4]);
        assert_eq!(c.train.loss_weights, LossWeights::Manual([0.5, 2.0]));
        assert!(!c.augment);
        c.apply_overrides(&["epochs=7".into()]).unwrap();
        assert_eq!(c.train.epochs, 7);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        let e = RunConfig::parse("learning_rat = 0.1").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("learning_rat"));
        assert!(RunConfig::parse("epochs").is_err());
        assert!(RunConfig::parse("epochs = many").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&[
            "data_root=/tmp/x".into(),
            "loss_weights=1,3.5".into(),
            "rotation_step=90".into(),
        ])
        .unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn missing_data_root_names_the_key() {
        let e = RunConfig::default().load_split().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("data_root"));
    }

    #[test]
    fn probability_encoding() {
        let p = Tensor::new(&[1, 3], vec![0.0f32, 0.5, 1.0]).unwrap();
        assert_eq!(probability_pgm(&p).data, vec![0, 32768, 65535]);
        let img = channel_pgm(&[1.0, 3.0, 2.0], 1, 3);
        assert_eq!(img.data, vec![0, 255, 128]);
        assert_eq!(channel_pgm(&[2.0; 3], 1, 3).data, vec![0; 3]);
    }

    #[test]
    fn activation_names_cover_the_bridge() {
        let names = activation_names(RCNetConfig::default()).unwrap();
        assert!(names.contains(&"bridge.out".to_string()));
        assert!(names.contains(&"up1.sum".to_string()));
    }
}
