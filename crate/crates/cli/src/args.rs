use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use scribseg::config::WorkbenchConfig;

/// Scribble-supervised segmentation on frozen transformer features.
///
/// Settings come from built-in defaults, then the `--config` TOML file, then
/// the override flags below; later sources win.
#[derive(Debug, Parser)]
#[command(name = "scribseg", version, about, long_about = None)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for weight initialization and training order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Inference tile edge in pixels.
    #[arg(long, global = true)]
    pub tile_size: Option<usize>,

    /// Fractional tile overlap in (0, 1).
    #[arg(long, global = true)]
    pub overlap: Option<f64>,

    /// Total-variation smoothing weight; 0 disables smoothing.
    #[arg(long, global = true)]
    pub tv_weight: Option<f64>,

    /// Training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,

    /// Feature provider id.
    #[arg(long, global = true)]
    pub provider: Option<String>,

    /// Micrometres per pixel.
    #[arg(long, global = true)]
    pub spacing_um: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the head on a directory of image/label pairs.
    Train(TrainArgs),
    /// Segment an image with a trained checkpoint.
    Infer(InferArgs),
    /// Score a predicted mask against a reference mask.
    Eval(EvalArgs),
    /// Write principal-component RGB maps of the backbone features.
    Viz(VizArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Generate a synthetic benchmark scene as a data directory.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with `images/<stem>.{png,tif,tiff}` and `labels/<stem>.png`.
    #[arg(long)]
    pub data: PathBuf,

    /// Checkpoint to write; the loss trace goes next to it as `.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,

    /// Treat labels as sparse scribbles (255 = unlabeled) instead of dense
    /// masks.
    #[arg(long)]
    pub scribbles: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub image: PathBuf,

    /// Output prefix: writes `<prefix>.png`, `<prefix>.classes.json` and
    /// `<prefix>.tiff`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,

    #[arg(long)]
    pub gt: PathBuf,

    /// Output prefix: writes `<prefix>.csv` and `<prefix>.json`.
    #[arg(long)]
    pub out: PathBuf,

    /// Class table JSON; defaults to the prediction's sidecar, then to one
    /// class per label value found.
    #[arg(long)]
    pub classes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub image: PathBuf,

    #[arg(long)]
    pub out_dir: PathBuf,

    /// Tap layer to render; repeat for several. Defaults to every tap layer.
    #[arg(long = "layer")]
    pub layers: Vec<usize>,

    /// Keep the token-resolution map instead of enlarging it to the image.
    #[arg(long)]
    pub no_upsample: bool,

    /// Also write `<layer>_montage.png` with the image on the left.
    #[arg(long)]
    pub montage: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Session store directory.
    #[arg(long)]
    pub data_dir: PathBuf,

    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,

    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,

    #[arg(long, default_value_t = 1024)]
    pub size: usize,

    /// 2 or 4.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

impl Overrides {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> scribseg::Result<WorkbenchConfig> {
        let mut c = match &self.config {
            Some(path) => WorkbenchConfig::load(path)?,
            None => WorkbenchConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.train.seed = seed;
            c.fusion.init_seed = seed;
        }
        if let Some(v) = self.tile_size {
            c.tile.tile_size = v;
        }
        if let Some(v) = self.overlap {
            c.tile.overlap = v;
        }
        if let Some(v) = self.tv_weight {
            c.tile.tv_weight = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs_full = v;
            c.train.epochs_interactive = v;
        }
        if let Some(v) = &self.provider {
            c.backbone.spec.provider_id = v.clone();
        }
        if let Some(v) = self.spacing_um {
            c.spacing_um = v;
        }
        c.validate()?;
        Ok(c)
    }
}
