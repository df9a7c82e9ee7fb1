use std::path::PathBuf;

use cellscope_core::model::Scale;
use cellscope_core::pointcloud::generator::{DEFAULT_LATENT, DEFAULT_SIZE, DEFAULT_VIEWS};
use cellscope_core::training::{PruneScope, DEFAULT_BATCH, DEFAULT_EPOCHS, DEFAULT_SEED};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "cellscope", version, about = "Blood-cell malaria diagnosis toolkit")]
pub struct Cli {
    /// Seed for every random choice: subsampling, splits, initialization,
    /// shuffling, augmentation and dropout.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Train the classifier and write weights, spec and history.
    Train(TrainArgs),
    /// Print accuracy, precision, recall and F1 for one split as JSON.
    Evaluate(EvaluateArgs),
    /// Magnitude-prune a classifier, then fine-tune with the zeros held.
    Prune(PruneArgs),
    /// Diagnose one image.
    Predict(PredictArgs),
    /// Reconstruct a point cloud from one image.
    Reconstruct(ReconstructArgs),
    /// Write synthetic data: generator views (NPY) or cell images (PNG).
    Synth(SynthArgs),
    /// Train the point-cloud generator on an NPY view dataset.
    TrainGen(TrainGenArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleArg {
    Mini,
    Full,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Mini => Scale::Mini,
            ScaleArg::Full => Scale::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeArg {
    Global,
    PerTensor,
}

impl From<ScopeArg> for PruneScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Global => PruneScope::Global,
            ScopeArg::PerTensor => PruneScope::PerTensor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    Obj,
    Pcd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Multi-view depth targets and input renders for `train-gen`.
    Generator,
    /// `Parasitized/` and `Uninfected/` PNG crops for `train`.
    Cells,
}

/// Dataset directory with `Parasitized/` and `Uninfected/` subdirectories.
#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Keep at most this many images per class (seeded draw).
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = ScaleArg::Mini)]
    pub scale: ScaleArg,
    #[arg(long, default_value_t = DEFAULT_EPOCHS, value_parser = at_least_one)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH, value_parser = at_least_one)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    pub lr: f64,
    /// Disable training-time augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Train the convolutional features too.
    #[arg(long)]
    pub unfreeze: bool,
    /// Weight file whose tensors replace the initial values of same-named
    /// parameters (pretrained features).
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = fraction)]
    pub sparsity: f64,
    #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
    pub scope: ScopeArg,
    /// Fine-tuning epochs after pruning; needs `--data` when positive.
    #[arg(long, default_value_t = 3)]
    pub fine_tune: usize,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BATCH, value_parser = at_least_one)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    pub lr: f64,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the sparse encoding here.
    #[arg(long)]
    pub sparse_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Version string reported in the output; defaults to a digest of the
    /// weight file.
    #[arg(long)]
    pub model_version: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub gen_weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Obj)]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Mask probability above which a pixel becomes a point.
    #[arg(long, default_value_t = 0.5, value_parser = fraction)]
    pub threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Generator)]
    pub kind: SynthKind,
    /// Samples to write; per class for `--kind cells`.
    #[arg(long, value_parser = at_least_one)]
    pub count: usize,
    /// `.npy` file for generator data, directory for cells.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub geometry: GeometryArgs,
}

/// Generator view layout; must agree between `synth` and `train-gen`.
#[derive(Debug, Args, Serialize)]
pub struct GeometryArgs {
    #[arg(long, default_value_t = DEFAULT_VIEWS, value_parser = at_least_one)]
    pub views: usize,
    /// Depth map and input image side in pixels (multiple of 8).
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    pub size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainGenArgs {
    /// View array written by `synth`; images are read from the
    /// `.images.npy` file beside it.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long, default_value_t = DEFAULT_LATENT, value_parser = at_least_one)]
    pub latent: usize,
    #[arg(long, default_value_t = 60, value_parser = at_least_one)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8, value_parser = at_least_one)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    pub lr: f64,
    /// Trailing fraction of the samples held out for best-epoch selection.
    #[arg(long, default_value_t = 0.1, value_parser = fraction)]
    pub val_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// TOML service configuration. Environment variables override it,
    /// flags override both.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub gen_weights: Option<PathBuf>,
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn at_least_one(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be a positive number"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn train_defaults() {
        let cli = Cli::try_parse_from(["cellscope", "train", "--data", "d", "--out", "w.e2ew"]).unwrap();
        assert_eq!(cli.seed, 42);
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.epochs, 25);
        assert_eq!(t.batch, 32);
        assert_eq!(t.scale, ScaleArg::Mini);
        assert!(!t.no_augment && !t.unfreeze);
    }

    #[test]
    fn seed_is_global() {
        let cli = Cli::try_parse_from(["cellscope", "predict", "--weights", "w", "--image", "i", "--seed", "7"]).unwrap();
        assert_eq!(cli.seed, 7);
    }

    #[test]
    fn bad_values_rejected() {
        for argv in [
            &["cellscope", "prune", "--weights", "w", "--out", "o", "--sparsity", "1.5"][..],
            &["cellscope", "train", "--data", "d", "--out", "o", "--epochs", "0"],
            &["cellscope", "train", "--data", "d", "--out", "o", "--lr", "-1"],
            &["cellscope", "predict", "--weights", "w", "--image", "i", "--bogus"],
            &["cellscope", "reconstruct", "--gen-weights", "g", "--image", "i", "--out", "o", "--format", "ply"],
        ] {
            let err = Cli::try_parse_from(argv).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{argv:?}");
        }
    }

    #[test]
    fn banner_fields_are_flat() {
        let cli = Cli::try_parse_from(["cellscope", "evaluate", "--weights", "w", "--data", "d"]).unwrap();
        let v = serde_json::to_value(&cli.command).unwrap();
        assert_eq!(v["command"], "evaluate");
        assert_eq!(v["data"], "d");
        assert_eq!(v["split"], "test");
    }
}
