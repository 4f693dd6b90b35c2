//! Command-line front end: `tile`, `synth`, `train`, `eval` and `inspect`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use clap::{Args, Parser, Subcommand};
use image::{GrayImage, Luma};
use serde::Serialize;

use crate::data::{
    synth_dataset, tile_directory, Dataset, Domain, Normalization, Palette, ShiftSpec, SynthParams,
};
use crate::ddm;
use crate::error::{Error, Result};
use crate::network::Registry;
use crate::nn;
use crate::train::{evaluate_checkpoint, fit, Checkpoint, FitOptions, TrainConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable naming the default training config file.
pub const CONFIG_ENV: &str = "SEGADAPT_CONFIG";
/// Parameters of every run, written next to its outputs.
pub const RUN_SNAPSHOT: &str = "run_config.json";

#[derive(Debug, Parser)]
#[command(name = "segadapt", version, about = "Cross-domain semantic segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut a tile directory into patches and write a dataset with its manifest.
    Tile(TileArgs),
    /// Generate a paired synthetic source/target dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Dump channel-averaged feature maps of a checkpoint for some images.
    Inspect(InspectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TileArgs {
    /// Directory with images/, labels/ and meta.json.
    #[arg(long)]
    pub input_dir: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 512)]
    pub stride: usize,
    /// JSON palette {"<class>": [r, g, b]} overriding the one in meta.json.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Domain tag; target labels are marked evaluation-only.
    #[arg(long, default_value = "source", value_parser = ["source", "target"])]
    pub domain: String,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; source/ and target/ datasets are created inside.
    #[arg(long)]
    pub out: PathBuf,
    /// `identity`, `permute:a,b,c`, `scale:f`, or a `+`-joined combination.
    #[arg(long, default_value = "permute:2,0,1")]
    pub shift: String,
    #[arg(long, default_value_t = 4)]
    pub tiles: usize,
    #[arg(long, default_value_t = 128)]
    pub tile_size: usize,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// TOML config; defaults to $SEGADAPT_CONFIG, else built-in defaults.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Labelled source dataset directory.
    #[arg(long)]
    pub source: PathBuf,
    /// Target dataset directory (labels, if any, are not used).
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Config override `key=value`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub max_iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Log progress every N steps (0 disables).
    #[arg(long, default_value_t = 50)]
    pub progress_every: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path; a text table is written next to it with `.txt`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB image; repeatable. Sides must be divisible by the backbone stride.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    /// Output directory for the feature images.
    #[arg(long)]
    pub dump_features: PathBuf,
}

fn exit_code(err: &Error) -> i32 {
    if err.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_RUNTIME
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Tile(a) => cmd_tile(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn write_snapshot<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Snapshot<'a, T: Serialize> {
    command: &'a str,
    args: &'a T,
}

pub fn cmd_tile(a: &TileArgs) -> Result<()> {
    let palette = match &a.palette {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(
                serde_json::from_str::<Palette>(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let domain = if a.domain == "target" {
        Domain::Target
    } else {
        Domain::Source
    };
    let dataset = tile_directory(&a.input_dir, a.patch_size, a.stride, domain, palette)?;
    dataset.save(&a.output_dir)?;
    write_snapshot(
        &a.output_dir.join(RUN_SNAPSHOT),
        &Snapshot {
            command: "tile",
            args: a,
        },
    )?;
    let tiles: std::collections::BTreeSet<&str> =
        dataset.manifest.patches.iter().map(|p| p.tile_id.as_str()).collect();
    println!(
        "{} patches from {} tiles written to {}",
        dataset.len(),
        tiles.len(),
        a.output_dir.display()
    );
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let shift: ShiftSpec = a.shift.parse()?;
    let params = SynthParams {
        tile_size: a.tile_size,
        patch_size: a.patch_size,
        stride: a.patch_size,
        ..SynthParams::default()
    };
    let (source, target) = synth_dataset(a.seed, a.tiles, shift, &params)?;
    source.save(&a.out.join("source"))?;
    target.save(&a.out.join("target"))?;
    #[derive(Serialize)]
    struct SynthSnapshot<'a> {
        command: &'a str,
        args: &'a SynthArgs,
        params: &'a SynthParams,
    }
    write_snapshot(
        &a.out.join(RUN_SNAPSHOT),
        &SynthSnapshot {
            command: "synth",
            args: a,
            params: &params,
        },
    )?;
    println!(
        "{} source and {} target patches written to {}",
        source.len(),
        target.len(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut overrides = a.overrides.clone();
    if let Some(n) = a.max_iters {
        overrides.push(format!("max_iters={n}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let config = TrainConfig::load(a.config.as_deref(), &overrides)?;
    let source = Dataset::load(&a.source)?;
    let target = Dataset::load(&a.target)?;
    write_snapshot(
        &a.out.join(RUN_SNAPSHOT),
        &Snapshot {
            command: "train",
            args: a,
        },
    )?;
    let result = fit(
        &config,
        &source,
        &target,
        &FitOptions {
            out_dir: Some(a.out.clone()),
            resume: a.resume.clone(),
            progress_every: a.progress_every,
        },
    )?;
    println!(
        "trained to step {} ({} steps this run); outputs in {}",
        result.state.step,
        result.log.len(),
        a.out.display()
    );
    Ok(())
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let report = evaluate_checkpoint(&ckpt, &data, a.batch_size)?;
    write_snapshot(&a.report, &report)?;
    let table = report.to_table();
    let table_path = with_extension(&a.report, ".txt");
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    write_snapshot(
        &with_extension(&a.report, ".run.json"),
        &Snapshot {
            command: "eval",
            args: a,
        },
    )?;
    print!("{table}");
    Ok(())
}

/// File-name suffixes of the four dumped maps: raw and disentangled
/// features of each backbone.
pub const INSPECT_MAPS: [&str; 4] = [
    "features_source_style",
    "features_target_style",
    "disentangled_source_style",
    "disentangled_target_style",
];

fn read_image(path: &Path, norm: &Normalization, dtype: DType) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut pixels = vec![0u8; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            pixels[c * plane + i] = px.0[c];
        }
    }
    norm.image(&pixels, h, w, dtype)
}

/// Channel mean of `[1, C, h, w]`, min-max scaled to 8 bits.
fn channel_average_image(t: &Tensor) -> Result<GrayImage> {
    let (_, _, h, w) = t.dims4()?;
    let avg = nn::to_f64_vec(&t.mean(1)?)?;
    let (lo, hi) = avg
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = avg[y as usize * w + x as usize];
        Luma([((v - lo) / span * 255.0).round() as u8])
    }))
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let state = TrainState::from_checkpoint(&ckpt, &Registry::default())?;
    fs::create_dir_all(&a.dump_features).map_err(|e| Error::io(&a.dump_features, e))?;
    let mut written = 0;
    for path in &a.image {
        let x = read_image(path, &ckpt.meta.normalization, state.config.dtype())?;
        let features = state.ensemble.extract_domain(&x)?;
        let (ds, dt) = ddm::ddm_forward(&features.source_style, &features.target_style, &state.ensemble.ddm)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        for (name, t) in INSPECT_MAPS
            .iter()
            .zip([&features.source_style, &features.target_style, &ds, &dt])
        {
            let out = a.dump_features.join(format!("{stem}_{name}.png"));
            channel_average_image(t)?
                .save(&out)
                .map_err(|source| Error::Image { path: out.clone(), source })?;
            written += 1;
        }
    }
    write_snapshot(
        &a.dump_features.join(RUN_SNAPSHOT),
        &Snapshot {
            command: "inspect",
            args: a,
        },
    )?;
    println!("{written} feature maps written to {}", a.dump_features.display());
    Ok(())
}
