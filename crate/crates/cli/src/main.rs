//! Experiment harness for activation-network models.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 divergence,
//! 5 gradient-check failure.

mod commands;
mod snapshot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use actnet_core::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::ShapeMismatch { .. } | Error::Geometry(_) => {
            EXIT_CONFIG
        }
        Error::Data(_) | Error::Io(_) => EXIT_DATA,
        Error::Diverged(_) => EXIT_DIVERGED,
    }
}

#[derive(Parser)]
#[command(name = "actnet", version, about = "Train and inspect networks with adaptive polynomial activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Model selection shared by several subcommands: either a spec file or
/// a named preset plus an activation variant.
#[derive(Args, Clone)]
pub struct ModelArgs {
    /// Path to a model spec file.
    #[arg(long, conflicts_with = "preset")]
    pub model_file: Option<PathBuf>,
    /// Built-in preset: mini_lenet | mini_unet.
    #[arg(long)]
    pub preset: Option<String>,
    /// Activation variant for presets:
    /// relu | poly_fixed | inhibition | attention | activation_net.
    #[arg(long, default_value = "activation_net")]
    pub variant: String,
    /// Polynomial order K of activation networks.
    #[arg(long, default_value_t = 5)]
    pub an_order: usize,
    /// Dense activation-net weight sharing: full | shared.
    #[arg(long, default_value = "full")]
    pub an_mode: String,
    /// Kernel extent of convolutional activation nets (odd).
    #[arg(long, default_value_t = 3)]
    pub an_kernel: usize,
    /// Symmetric clamp on u before powering; "none" disables.
    #[arg(long, default_value = "5.0")]
    pub an_clip: String,
    /// Activation-net init: identity | zero_v_tanh | tanh_taylor.
    #[arg(long, default_value = "zero_v_tanh")]
    pub an_init: String,
}

/// Dataset selection shared by training-like subcommands.
#[derive(Args, Clone)]
pub struct DataArgs {
    /// Dataset: mnist | cifar10 (IDX / CIFAR-10 binary layouts).
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    /// Directory with the dataset files; defaults to $ACTNET_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Class-stratified training subset size (0 = full set).
    #[arg(long, default_value_t = 0)]
    pub train_count: usize,
    /// Test subset size (0 = full set).
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    /// Gaussian noise variance for denoising targets.
    #[arg(long, default_value_t = 0.05)]
    pub noise_var: f64,
}

#[derive(Args, Clone)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable batch-level worker threads (results are identical).
    #[arg(long, default_value_t = false)]
    pub serial: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes run.json, losses.csv and model.json.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all five activation variants of a preset under an identical
    /// budget; writes compare.csv plus per-variant run artifacts.
    Compare {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter's gradient (double
    /// precision); exits 5 if any parameter exceeds the threshold.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        /// Input spatial shape override, e.g. 1x16x16 (presets only).
        #[arg(long)]
        input_shape: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Max coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Max relative error allowed.
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Write the JSON report here (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the per-site activation curves a trained snapshot
    /// induces for one input; writes CSV.
    DumpActivations {
        /// model.json written by `train`.
        #[arg(long)]
        snapshot: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Index of the input image in the test split.
        #[arg(long, default_value_t = 0)]
        input_index: usize,
        /// Layer to dump (all activation-net layers when omitted).
        #[arg(long)]
        layer: Option<String>,
        /// Dense node or conv channel to select.
        #[arg(long)]
        node: Option<usize>,
        /// Conv pixel "row,col" (center pixel when omitted).
        #[arg(long)]
        pixel: Option<String>,
        /// Sampling grid lo:hi:n for the activation abscissa.
        #[arg(long, default_value = "-3:3:61", allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic digit corpus in MNIST IDX layout.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4000)]
        train_count: usize,
        #[arg(long, default_value_t = 1000)]
        test_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the Taylor-preset activation coefficients as JSON.
    Presets {
        /// Polynomial order K.
        #[arg(long, default_value_t = 5)]
        order: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train { model, data, train, out } => commands::cmd_train(&model, &data, &train, &out),
        Command::Compare { model, data, train, out } => {
            commands::cmd_compare(&model, &data, &train, &out)
        }
        Command::Gradcheck { model, input_shape, seed, samples, threshold, out } => {
            commands::cmd_gradcheck(&model, input_shape.as_deref(), seed, samples, threshold, out.as_deref())
        }
        Command::DumpActivations {
            snapshot,
            data,
            input_index,
            layer,
            node,
            pixel,
            grid,
            out,
        } => commands::cmd_dump_activations(
            &snapshot,
            &data,
            input_index,
            layer.as_deref(),
            node,
            pixel.as_deref(),
            &grid,
            &out,
        ),
        Command::GenData { out, train_count, test_count, seed } => {
            commands::cmd_gen_data(&out, train_count, test_count, seed)
        }
        Command::Presets { order } => commands::cmd_presets(order),
    };
    match code {
        Ok(c) => ExitCode::from(c),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
