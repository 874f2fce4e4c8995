//! Command-line front end. Each subcommand is a thin wrapper over a library
//! function of the same name, so everything the binary does can be driven
//! from code.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{checkpoint_container, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image_io::save_png;
use crate::latent::{
    image_layout, interpolate_latents, sample_latent, tile_periodic, transplant, vary_tiles, ChannelSet,
    ImageLayout, LatentImage, LatentRect, LatentSpec, TileAxes,
};
use crate::metrics::{patch_statistics_distance, seam_report, SeamReport};
use crate::model::{Generator, Mode};
use crate::training::{sample_fake_crops, sample_real_crops, train, TrainState};
use crate::verify::{verify_checkpoint, verify_fresh, VerifyOptions, VerifyReport};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "LOCOGAN_THREADS";

/// Wrap-around tolerance of tiled outputs, in `[-1, 1]` pixel units.
pub const SEAM_TOLERANCE: f64 = 0.05;

/// Random projections used by the `metrics` command.
pub const METRIC_PROJECTIONS: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "locogan", version, about = "Train and sample locally conditioned convolutional GANs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for checkpoints and metrics.log.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Overrides the config's total step count.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides the config's seed (fresh runs only).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample one image of any size.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sample.png")]
        out: PathBuf,
    },
    /// Interpolate between two samples, possibly of different sizes.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        seed_b: u64,
        /// Defaults to --width.
        #[arg(long)]
        width_b: Option<usize>,
        /// Defaults to --height.
        #[arg(long)]
        height_b: Option<usize>,
        /// Number of frames, endpoints included.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Output directory for frame-NNN.png.
        #[arg(long, default_value = "frames")]
        out: PathBuf,
    },
    /// Render a periodic texture and report its seams.
    Tile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = TileMode::Plane)]
        mode: TileMode,
        /// Latent period; defaults to the coordinate period of the checkpoint.
        #[arg(long)]
        period: Option<usize>,
        /// Defaults to four periods.
        #[arg(long)]
        width: Option<usize>,
        /// Defaults to four periods (plane) or one period (strip).
        #[arg(long)]
        height: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Blend each tile's local noise with fresh noise of this weight.
        #[arg(long)]
        semi_periodic: Option<f64>,
        #[arg(long, default_value = "tile.png")]
        out: PathBuf,
    },
    /// Move latent channels of one sample into another.
    Transplant {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source sample (a).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Destination sample (b).
        #[arg(long, default_value_t = 1)]
        seed_b: u64,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        /// Latent rectangle `x,y,w,h`.
        #[arg(long)]
        region: String,
        #[arg(long, value_enum, default_value_t = Channels::Both)]
        channels: Channels,
        /// Output directory for a.png, b.png and transplant.png.
        #[arg(long, default_value = "transplant")]
        out: PathBuf,
    },
    /// Run the structural property suites.
    Verify {
        /// Verify these weights instead of a fresh default model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Patch-statistics distance between generated and real crops.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Takes the dataset from this config instead of the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also append the record here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TileMode {
    /// Periodic along x only.
    Strip,
    /// Periodic along both axes.
    Plane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Channels {
    Global,
    Local,
    Both,
}

impl From<Channels> for ChannelSet {
    fn from(c: Channels) -> Self {
        match c {
            Channels::Global => ChannelSet::Global,
            Channels::Local => ChannelSet::Local,
            Channels::Both => ChannelSet::Both,
        }
    }
}

/// Sizes the global thread pool from [`THREADS_ENV`], if set.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV}={value:?} is not a positive integer")))?;
    // A pool built earlier in the process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

/// Binary entry point: 0 on success, 1 on errors or failed verification.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|_| run(cli));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Executes one command; `Ok(false)` means verification failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            out,
            steps,
            seed,
        } => {
            let opts = TrainOptions {
                config,
                resume: checkpoint,
                out,
                steps,
                seed,
            };
            let outcome = run_training(&opts)?;
            println!("step={} checkpoint={}", outcome.step, outcome.last_checkpoint.display());
        }
        Command::Sample {
            checkpoint,
            width,
            height,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let img = sample_image(&ckpt.state.generator, height, width, seed)?;
            write_png(&out, &img)?;
        }
        Command::Interpolate {
            checkpoint,
            seed,
            width,
            height,
            seed_b,
            width_b,
            height_b,
            steps,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let a = (seed, (height, width));
            let b = (seed_b, (height_b.unwrap_or(height), width_b.unwrap_or(width)));
            let frames = interpolate_frames(&ckpt.state.generator, a, b, steps)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            frames
                .par_iter()
                .enumerate()
                .try_for_each(|(i, f)| write_png(&out.join(format!("frame-{i:03}.png")), f))?;
        }
        Command::Tile {
            checkpoint,
            mode,
            period,
            width,
            height,
            seed,
            semi_periodic,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let request = TileRequest {
                mode,
                period,
                height,
                width,
                seed,
                variation: semi_periodic,
            };
            let (img, report) = tile_image(&ckpt.state.generator, &request)?;
            write_png(&out, &img)?;
            let report_path = out.with_extension("seams.txt");
            fs::write(&report_path, report.to_string()).map_err(|e| Error::io(&report_path, e))?;
            print!("{report}");
        }
        Command::Transplant {
            checkpoint,
            seed,
            seed_b,
            width,
            height,
            region,
            channels,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let region = parse_region(&region)?;
            let [a, b, mixed] =
                transplant_images(&ckpt.state.generator, seed, seed_b, height, width, region, channels.into())?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (name, img) in [("a.png", &a), ("b.png", &b), ("transplant.png", &mixed)] {
                write_png(&out.join(name), img)?;
            }
        }
        Command::Verify {
            checkpoint,
            out,
            seed,
            trials,
        } => {
            let opts = VerifyOptions {
                seed,
                trials,
                ..VerifyOptions::default()
            };
            let report: VerifyReport = match checkpoint {
                Some(path) => verify_checkpoint(&Checkpoint::load(&path)?, &opts),
                None => verify_fresh(&opts)?,
            };
            print!("{report}");
            if let Some(path) = out {
                fs::write(&path, report.to_string()).map_err(|e| Error::io(&path, e))?;
            }
            if !report.passed() {
                for f in report.failures() {
                    eprintln!("failed: {} ({})", f.name, f.detail);
                }
                return Ok(false);
            }
        }
        Command::Metrics {
            checkpoint,
            config,
            samples,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset_config = config.map(|p| RunConfig::load(&p)).transpose()?;
            let distance = evaluate(&ckpt, dataset_config.as_ref(), samples, seed)?;
            let record = format!("step={} samples={samples} patch_distance={distance:.6}", ckpt.state.step);
            println!("{record}");
            if let Some(path) = out {
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{record}").map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(true)
}

fn write_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_png(path, img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub config: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub out: PathBuf,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub step: u64,
    pub last_checkpoint: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:08}.ckpt")
}

/// Trains (or resumes), writing `checkpoint-NNNNNNNN.ckpt` files and
/// appending one record per step to `metrics.log` in `opts.out`.
pub fn run_training(opts: &TrainOptions) -> Result<TrainOutcome> {
    let (mut config, resumed) = match (&opts.resume, &opts.config) {
        (Some(path), file) => {
            let ckpt = Checkpoint::load(path)?;
            if let Some(file) = file {
                let given = RunConfig::load(file)?;
                let comparable = |c: &RunConfig| RunConfig {
                    steps: 0,
                    ..c.clone()
                };
                if comparable(&given) != comparable(&ckpt.config) {
                    return Err(Error::ConfigMismatch(format!(
                        "{} differs from the configuration stored in {}",
                        file.display(),
                        path.display()
                    )));
                }
            }
            (ckpt.config.clone(), Some(ckpt))
        }
        (None, Some(file)) => (RunConfig::load(file)?, None),
        (None, None) => {
            return Err(Error::InvalidArgument("train needs --config or --checkpoint".into()));
        }
    };
    if let Some(steps) = opts.steps {
        config.steps = steps;
    }
    if let Some(seed) = opts.seed {
        if resumed.is_some() {
            return Err(Error::InvalidArgument("--seed cannot change a resumed run".into()));
        }
        config.seed = seed;
    }
    config.validate()?;
    let src = config.load_dataset()?;
    let coords = config.coordinates(Some(&src));
    let cfg = config.train_config(coords);
    let mut state = match resumed {
        Some(ckpt) => {
            if ckpt.coords != coords {
                return Err(Error::ConfigMismatch(
                    "dataset coordinates differ from those of the checkpoint".into(),
                ));
            }
            ckpt.state
        }
        None => TrainState::new(&cfg)?,
    };

    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let log_path = opts.out.join("metrics.log");
    let log = if state.step == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log);
    let mut last = None;
    train(
        &mut state,
        &cfg,
        &src,
        |m| writeln!(log, "{m}").map_err(|e| Error::io(&log_path, e)),
        |s| {
            let path = opts.out.join(checkpoint_name(s.step));
            checkpoint_container(&config, &coords, s).save(&path)?;
            last = Some(path);
            Ok(())
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let last_checkpoint = match last {
        Some(p) => p,
        None => {
            // Nothing left to train: still leave a checkpoint of the state.
            let path = opts.out.join(checkpoint_name(state.step));
            checkpoint_container(&config, &coords, &state).save(&path)?;
            path
        }
    };
    Ok(TrainOutcome {
        step: state.step,
        last_checkpoint,
    })
}

/// Latent for an `height × width` image drawn from `seed`, with its layout.
pub fn image_latent(g: &Generator, height: usize, width: usize, seed: u64) -> Result<(LatentImage, ImageLayout)> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("image size {height}x{width} must be at least 1x1")));
    }
    let layout = image_layout(g.footprint(), height, width)?;
    let spec = LatentSpec {
        coords: g.latent_spec.coords.for_image(height, width),
        ..g.latent_spec
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent =
        sample_latent(&spec, layout.latent_h, layout.latent_w, &mut rng).with_coordinates(g.footprint(), &layout.placement)?;
    Ok((latent, layout))
}

/// Generates `latent` and cuts the `height × width` image at the layout
/// offset.
pub fn render(g: &Generator, latent: &LatentImage, layout: &ImageLayout, height: usize, width: usize) -> Result<Array3<f64>> {
    let raw = g.generate(latent, Mode::Eval)?;
    Ok(raw.crop(layout.offset.0, layout.offset.1, height, width)?.data)
}

pub fn sample_image(g: &Generator, height: usize, width: usize, seed: u64) -> Result<Array3<f64>> {
    let (latent, layout) = image_latent(g, height, width, seed)?;
    render(g, &latent, &layout, height, width)
}

/// Frames at `t = i/(steps−1)` between `(seed, (h, w))` endpoints.
pub fn interpolate_frames(
    g: &Generator,
    a: (u64, (usize, usize)),
    b: (u64, (usize, usize)),
    steps: usize,
) -> Result<Vec<Array3<f64>>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let (la, _) = image_latent(g, a.1 .0, a.1 .1, a.0)?;
    let (lb, _) = image_latent(g, b.1 .0, b.1 .1, b.0)?;
    (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            let (latent, (h, w)) = interpolate_latents(&la, &lb, t, a.1, b.1, g.footprint())?;
            let layout = image_layout(g.footprint(), h, w)?;
            render(g, &latent, &layout, h, w)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRequest {
    pub mode: TileMode,
    pub period: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub seed: u64,
    pub variation: Option<f64>,
}

/// Renders a tiled texture and its wrap-around seam report.
pub fn tile_image(g: &Generator, req: &TileRequest) -> Result<(Array3<f64>, SeamReport)> {
    let fp = g.footprint();
    let scale = fp.integer_scale();
    let axes = match req.mode {
        TileMode::Strip => TileAxes::X,
        TileMode::Plane => TileAxes::XY,
    };
    let coords = g.latent_spec.coords;
    let period = match req.period {
        Some(p) => p,
        None => {
            let pixels = coords.period_x().ok_or_else(|| {
                Error::PeriodMismatch(format!("{} coordinates are not periodic", coords.mode.name()))
            })?;
            (pixels / fp.scale()).round().max(1.0) as usize
        }
    };
    let pixels = period * scale;
    let width = req.width.unwrap_or(4 * pixels);
    let height = req.height.unwrap_or(match req.mode {
        TileMode::Strip => pixels,
        TileMode::Plane => 4 * pixels,
    });
    let (latent, layout) = image_latent(g, height, width, req.seed)?;
    let mut latent = tile_periodic(&latent, period, axes, fp)?;
    if let Some(strength) = req.variation {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        rng.set_stream(1);
        latent = vary_tiles(&latent, strength, &mut rng)?;
    }
    let img = render(g, &latent, &layout, height, width)?;
    let report = seam_report(&img, pixels, axes == TileAxes::XY, SEAM_TOLERANCE)?;
    Ok((img, report))
}

/// Parses `x,y,w,h` in latent pixels.
pub fn parse_region(s: &str) -> Result<LatentRect> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::InvalidArgument(format!("region {s:?} is not x,y,w,h"));
    if parts.len() != 4 {
        return Err(bad());
    }
    let x: i64 = parts[0].parse().map_err(|_| bad())?;
    let y: i64 = parts[1].parse().map_err(|_| bad())?;
    let width: usize = parts[2].parse().map_err(|_| bad())?;
    let height: usize = parts[3].parse().map_err(|_| bad())?;
    Ok(LatentRect { x, y, width, height })
}

/// Samples `a` and `b` of one size and returns `[a, b, b with a's channels
/// in region]`.
pub fn transplant_images(
    g: &Generator,
    seed_a: u64,
    seed_b: u64,
    height: usize,
    width: usize,
    region: LatentRect,
    channels: ChannelSet,
) -> Result<[Array3<f64>; 3]> {
    let (la, layout) = image_latent(g, height, width, seed_a)?;
    let (lb, _) = image_latent(g, height, width, seed_b)?;
    let mixed = transplant(&lb, &la, region, channels)?;
    Ok([
        render(g, &la, &layout, height, width)?,
        render(g, &lb, &layout, height, width)?,
        render(g, &mixed, &layout, height, width)?,
    ])
}

/// Patch-statistics distance of a checkpoint against its dataset.
pub fn evaluate(ckpt: &Checkpoint, dataset: Option<&RunConfig>, samples: usize, seed: u64) -> Result<f64> {
    let source_config = dataset.unwrap_or(&ckpt.config);
    let src = source_config.load_dataset()?;
    let cfg = ckpt.train_config();
    let real = sample_real_crops(&src, samples, seed)?;
    let fake = sample_fake_crops(&ckpt.state.generator, &cfg, &src, samples, seed.wrapping_add(1))?;
    patch_statistics_distance(&real, &fake, METRIC_PROJECTIONS, seed)
}
