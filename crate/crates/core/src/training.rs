//! Crop-local adversarial training.
//!
//! Every step samples real crops at random windows, builds a fake latent for
//! each window (its own field latents plus fresh noise padding, with the
//! window's coordinates), and compares the two through the discriminator
//! using identical coordinate grids.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{FootprintMap, Grid};
use crate::image_io;
use crate::latent::{make_coordinate_grid, sample_latent, CoordinateSpec, CropWindow, LatentImage, LatentSpec, Placement};
use crate::model::{
    discriminator_input, Discriminator, GeneratedImage, Generator, GeneratorTape, Init, Mode, NetworkConfig,
    Parameters, REFERENCE_DISCRIMINATOR_WIDTHS, REFERENCE_GENERATOR_WIDTHS,
};
use crate::ops::{self, Batch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetMode {
    /// A directory of photos, each rescaled so its shorter edge is 128.
    Folder,
    /// One texture image used at its native size.
    Pattern,
}

impl DatasetMode {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetMode::Folder => "folder",
            DatasetMode::Pattern => "pattern",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "folder" => Some(DatasetMode::Folder),
            "pattern" => Some(DatasetMode::Pattern),
            _ => None,
        }
    }
}

/// Training images held in memory as `(3, h, w)` arrays in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    pub mode: DatasetMode,
    pub images: Vec<Array3<f64>>,
    /// (height, width) of every crop.
    pub crop: (usize, usize),
    pub paths: Vec<PathBuf>,
}

/// Shorter edge of folder-mode images.
pub const FOLDER_SHORT_EDGE: u32 = 128;

impl DatasetSource {
    pub fn from_images(mode: DatasetMode, images: Vec<Array3<f64>>, crop: (usize, usize)) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if crop.0 == 0 || crop.1 == 0 {
            return Err(Error::InvalidArgument("crop size must be at least 1x1".into()));
        }
        for img in &images {
            let (c, h, w) = img.dim();
            if c != 3 {
                return Err(Error::ShapeMismatch(format!("dataset image has {c} channels")));
            }
            if crop.0 > h || crop.1 > w {
                return Err(Error::CropLargerThanImage {
                    crop_h: crop.0,
                    crop_w: crop.1,
                    image_h: h,
                    image_w: w,
                });
            }
        }
        Ok(DatasetSource {
            mode,
            images,
            crop,
            paths: Vec::new(),
        })
    }

    /// Loads a folder (sorted by file name) or a single pattern image.
    pub fn load(path: &Path, mode: DatasetMode, crop: (usize, usize)) -> Result<Self> {
        let files = match mode {
            DatasetMode::Pattern => vec![path.to_path_buf()],
            DatasetMode::Folder => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                    .map_err(|e| Error::io(path, e))?
                    .filter_map(|entry| entry.ok().map(|e| e.path()))
                    .filter(|p| p.is_file() && image_io::is_supported(p))
                    .collect();
                files.sort();
                files
            }
        };
        let mut images = Vec::with_capacity(files.len());
        for file in &files {
            let rgb = image_io::load_rgb8(file)?;
            let rgb = match mode {
                DatasetMode::Folder => image_io::resize_short_edge(&rgb, FOLDER_SHORT_EDGE),
                DatasetMode::Pattern => rgb,
            };
            images.push(image_io::from_rgb8(&rgb));
        }
        let mut src = DatasetSource::from_images(mode, images, crop)?;
        src.paths = files;
        Ok(src)
    }

    /// (height, width) of image `index`.
    pub fn image_size(&self, index: usize) -> (usize, usize) {
        let (_, h, w) = self.images[index].dim();
        (h, w)
    }

    /// Coordinate spec for crops of image `index`: linear coordinates span
    /// `[-1, 1]` over each image; periodic ones keep their pixel period.
    pub fn coordinate_spec(&self, base: &CoordinateSpec, index: usize) -> CoordinateSpec {
        let (h, w) = self.image_size(index);
        base.for_image(h, w)
    }
}

/// A real crop and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RealCrop {
    pub pixels: Array3<f64>,
    /// Margin is left at 0; the trainer fills in its own.
    pub window: CropWindow,
    pub image: usize,
}

/// Uniformly random image, then uniformly random valid window.
pub fn sample_real_crop<R: Rng + ?Sized>(src: &DatasetSource, rng: &mut R) -> Result<RealCrop> {
    if src.images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let image = rng.random_range(0..src.images.len());
    let (h, w) = src.image_size(image);
    let (ch, cw) = src.crop;
    if ch > h || cw > w {
        return Err(Error::CropLargerThanImage {
            crop_h: ch,
            crop_w: cw,
            image_h: h,
            image_w: w,
        });
    }
    let y = rng.random_range(0..=h - ch);
    let x = rng.random_range(0..=w - cw);
    Ok(RealCrop {
        pixels: src.images[image].slice(s![.., y..y + ch, x..x + cw]).to_owned(),
        window: CropWindow::new(x as i64, y as i64, ch, cw, 0),
        image,
    })
}

fn check_probability(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(Error::DomainError(p))
    }
}

/// `−(log D(x) + log(1 − D(G(z))))`, averaged over the batch.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_real.len() != d_fake.len() {
        return Err(Error::InvalidArgument(format!(
            "{} real and {} fake probabilities",
            d_real.len(),
            d_fake.len()
        )));
    }
    let mut total = 0.0;
    for (&r, &f) in d_real.iter().zip(d_fake) {
        total -= check_probability(r)?.ln() + (1.0 - check_probability(f)?).ln();
    }
    Ok(total / d_real.len() as f64)
}

/// Non-saturating generator loss `−log D(G(z))`, averaged over the batch.
pub fn generator_loss(d_fake: &[f64]) -> Result<f64> {
    if d_fake.is_empty() {
        return Err(Error::InvalidArgument("no fake probabilities".into()));
    }
    let mut total = 0.0;
    for &f in d_fake {
        total -= check_probability(f)?.ln();
    }
    Ok(total / d_fake.len() as f64)
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(net: &mut P, lr: f64, betas: (f64, f64)) -> Self {
        let shapes: Vec<Vec<usize>> = net.parameters_mut().iter().map(|p| p.shape().to_vec()).collect();
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect(),
        }
    }

    pub fn step<P: Parameters>(&mut self, net: &mut P, grads: &[ArrayD<f64>]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        let mut params = net.parameters_mut();
        assert_eq!(params.len(), grads.len(), "gradient count differs from parameter count");
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub latent: LatentSpec,
    /// Side of every fake latent; 10×10 latents pair with 64×64
    /// crops.
    pub latent_size: usize,
    pub generator: NetworkConfig,
    pub discriminator: NetworkConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    pub checkpoint_every: u64,
    pub init: Init,
}

impl TrainConfig {
    pub fn new(latent: LatentSpec, generator_widths: &[usize], discriminator_widths: &[usize]) -> Self {
        TrainConfig {
            generator: NetworkConfig::generator(&latent, generator_widths),
            discriminator: NetworkConfig::discriminator(latent.coords.channels(), discriminator_widths, true),
            latent,
            latent_size: 10,
            batch_size: 16,
            steps: 1000,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            betas: (0.5, 0.999),
            seed: 0,
            checkpoint_every: 100,
            init: Init::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("latent_size", self.latent_size as f64),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("checkpoint_every", self.checkpoint_every as f64),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be positive (got {v})")));
            }
        }
        for (key, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("must lie in [0, 1) (got {b})")));
            }
        }
        self.latent.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(LatentSpec::default(), &REFERENCE_GENERATOR_WIDTHS, &REFERENCE_DISCRIMINATOR_WIDTHS)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean discriminator probability on real crops.
    pub d_real: f64,
    pub d_fake: f64,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.6} {:.6} {:.6} {:.6}",
            self.step, self.d_loss, self.g_loss, self.d_real, self.d_fake
        )
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub last: Option<StepMetrics>,
}

impl TrainState {
    /// Initializes both networks from `cfg.seed`; the same stream then
    /// drives training.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut generator = Generator::new(cfg.generator.clone(), cfg.latent, cfg.init, &mut rng)?;
        let mut discriminator = Discriminator::new(cfg.discriminator.clone(), cfg.init, &mut rng)?;
        let adam_g = Adam::new(&mut generator, cfg.lr_generator, cfg.betas);
        let adam_d = Adam::new(&mut discriminator, cfg.lr_discriminator, cfg.betas);
        Ok(TrainState {
            generator,
            discriminator,
            adam_g,
            adam_d,
            step: 0,
            rng,
            last: None,
        })
    }
}

/// Fake latent of side `latent_size` (per axis) whose raw output covers
/// `window` with at least the footprint margin around the window's own
/// latents. Returns the latent and the window's (y, x) offset in the raw
/// output.
pub fn fake_latent_for_window<R: Rng + ?Sized>(
    spec: &LatentSpec,
    window: &CropWindow,
    latent_size: (usize, usize),
    fp: &FootprintMap,
    rng: &mut R,
) -> Result<(LatentImage, (usize, usize))> {
    let scale = fp.integer_scale() as i64;
    let required = window.required_margin(fp)?;
    let core = window.latent_window(fp);
    let axis = |start: i64, len: usize, n: usize, core_lo: i64, core_len: usize| -> Result<(i64, usize)> {
        let raw = fp.output_size(n)? as i64;
        // Center the window in the raw output, snapped to the latent grid.
        let slack = raw - len as i64;
        let first = ((start as f64 - slack as f64 / 2.0) / scale as f64 + 0.5).floor() as i64;
        let last = first + n as i64 - 1;
        let core_hi = core_lo + core_len as i64 - 1;
        let available = (core_lo - first).min(last - core_hi);
        let covered = scale * first <= start && start + len as i64 <= scale * first + raw;
        if !covered || available < required as i64 {
            return Err(Error::MarginTooSmall {
                margin: available.max(0) as usize,
                required,
            });
        }
        Ok((first, (start - scale * first) as usize))
    };
    let (fy, oy) = axis(window.y, window.height, latent_size.0, core.y, core.height)?;
    let (fx, ox) = axis(window.x, window.width, latent_size.1, core.x, core.width)?;
    let placement = Placement::at((scale * fx) as f64, (scale * fy) as f64);
    let latent = sample_latent(spec, latent_size.0, latent_size.1, rng).with_coordinates(fp, &placement)?;
    Ok((latent, (oy, ox)))
}

/// Fake latents with the windows they render and the discriminator's
/// coordinate grids for those windows.
#[derive(Debug, Clone)]
pub struct FakeBatch {
    pub latents: Vec<LatentImage>,
    /// (y, x) of each window in its raw output.
    pub offsets: Vec<(usize, usize)>,
    pub coords: Vec<Grid>,
    pub crop: (usize, usize),
}

fn crop_raw(raw: &Batch, offsets: &[(usize, usize)], crop: (usize, usize)) -> Vec<GeneratedImage> {
    offsets
        .iter()
        .enumerate()
        .map(|(n, &(oy, ox))| GeneratedImage {
            data: raw.slice(s![.., n, oy..oy + crop.0, ox..ox + crop.1]).to_owned(),
        })
        .collect()
}

/// Scatters a gradient on cropped fakes back into raw-output shape.
fn uncrop_grad(d_input: &Batch, offsets: &[(usize, usize)], raw_hw: (usize, usize)) -> Batch {
    let (_, n, h, w) = d_input.dim();
    let mut out = Batch::zeros((3, n, raw_hw.0, raw_hw.1));
    for (i, &(oy, ox)) in offsets.iter().enumerate() {
        out.slice_mut(s![.., i, oy..oy + h, ox..ox + w])
            .assign(&d_input.slice(s![..3, i, .., ..]));
    }
    out
}

/// Result of the discriminator objective on one real and one fake batch.
#[derive(Debug, Clone)]
pub struct DiscriminatorObjective {
    pub loss: f64,
    pub grads: Vec<ArrayD<f64>>,
    pub d_real: f64,
    pub d_fake: f64,
}

/// Discriminator loss and its parameter gradients. Computed from logits, so
/// it stays finite where the probabilities round to 0 or 1.
pub fn discriminator_objective(d: &Discriminator, real: &Batch, fake: &Batch) -> Result<DiscriminatorObjective> {
    let (lr, tape_r) = d.forward(real)?;
    let (lf, tape_f) = d.forward(fake)?;
    let b = lr.len() as f64;
    let loss = (lr.iter().map(|&z| ops::softplus(-z)).sum::<f64>() + lf.iter().map(|&z| ops::softplus(z)).sum::<f64>())
        / b;
    let dr: Array1<f64> = lr.mapv(|z| (ops::sigmoid(z) - 1.0) / b);
    let df: Array1<f64> = lf.mapv(|z| ops::sigmoid(z) / b);
    let (mut grads, _) = d.backward(&tape_r, &dr);
    let (grads_f, _) = d.backward(&tape_f, &df);
    for (g, gf) in grads.iter_mut().zip(grads_f) {
        *g += &gf;
    }
    Ok(DiscriminatorObjective {
        loss,
        grads,
        d_real: lr.iter().map(|&z| ops::sigmoid(z)).sum::<f64>() / b,
        d_fake: lf.iter().map(|&z| ops::sigmoid(z)).sum::<f64>() / b,
    })
}

struct Rendered {
    input: Batch,
    tape: GeneratorTape,
    raw_hw: (usize, usize),
}

fn render(g: &Generator, fake: &FakeBatch, coord_channels: usize) -> Result<Rendered> {
    let (raw, tape) = g.forward(&fake.latents, Mode::Train)?;
    let (_, _, rh, rw) = raw.dim();
    let crops = crop_raw(&raw, &fake.offsets, fake.crop);
    let input = discriminator_input(&crops, &fake.coords, coord_channels)?;
    Ok(Rendered {
        input,
        tape,
        raw_hw: (rh, rw),
    })
}

fn generator_step(g: &Generator, d: &Discriminator, fake: &FakeBatch, r: &Rendered) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let (lf, tape) = d.forward(&r.input)?;
    let b = lf.len() as f64;
    let loss = lf.iter().map(|&z| ops::softplus(-z)).sum::<f64>() / b;
    let dl = lf.mapv(|z| (ops::sigmoid(z) - 1.0) / b);
    let (_, d_input) = d.backward(&tape, &dl);
    let d_raw = uncrop_grad(&d_input, &fake.offsets, r.raw_hw);
    Ok((loss, g.backward(&r.tape, &d_raw)))
}

/// Generator loss (non-saturating) on a fake batch, with gradients for the
/// generator's parameters. Normalization uses batch statistics.
pub fn generator_objective(g: &Generator, d: &Discriminator, fake: &FakeBatch) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let r = render(g, fake, d.config.coord_channels)?;
    generator_step(g, d, fake, &r)
}

/// Samples a real batch and the matching fake batch.
pub fn sample_batches(
    cfg: &TrainConfig,
    src: &DatasetSource,
    fp: &FootprintMap,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch, FakeBatch)> {
    let mut reals = Vec::with_capacity(cfg.batch_size);
    let mut fake = FakeBatch {
        latents: Vec::with_capacity(cfg.batch_size),
        offsets: Vec::with_capacity(cfg.batch_size),
        coords: Vec::with_capacity(cfg.batch_size),
        crop: src.crop,
    };
    for _ in 0..cfg.batch_size {
        let mut real = sample_real_crop(src, rng)?;
        real.window.margin = fp.margin();
        let coords = src.coordinate_spec(&cfg.latent.coords, real.image);
        let grid = make_coordinate_grid(&coords, &real.window, src.crop.0, src.crop.1);
        let spec = LatentSpec { coords, ..cfg.latent };
        let (latent, offset) =
            fake_latent_for_window(&spec, &real.window, (cfg.latent_size, cfg.latent_size), fp, rng)?;
        reals.push(GeneratedImage { data: real.pixels });
        fake.latents.push(latent);
        fake.offsets.push(offset);
        fake.coords.push(grid);
    }
    let real = discriminator_input(&reals, &fake.coords, cfg.latent.coords.channels())?;
    Ok((real, fake))
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, src: &DatasetSource) -> Result<StepMetrics> {
    let fp = state.generator.footprint().clone();
    let (real, fake) = sample_batches(cfg, src, &fp, &mut state.rng)?;

    state.discriminator.advance_spectral()?;
    let rendered = render(&state.generator, &fake, cfg.latent.coords.channels())?;
    state.generator.update_running_stats(&rendered.tape);

    let d_obj = discriminator_objective(&state.discriminator, &real, &rendered.input)?;
    state.adam_d.step(&mut state.discriminator, &d_obj.grads);

    let (g_loss, g_grads) = generator_step(&state.generator, &state.discriminator, &fake, &rendered)?;
    state.adam_g.step(&mut state.generator, &g_grads);

    state.step += 1;
    let metrics = StepMetrics {
        step: state.step,
        d_loss: d_obj.loss,
        g_loss,
        d_real: d_obj.d_real,
        d_fake: d_obj.d_fake,
    };
    state.last = Some(metrics);
    Ok(metrics)
}

/// Runs until `cfg.steps`. `on_checkpoint` sees the initial state of a fresh
/// run, every `checkpoint_every`-th step and the final step.
pub fn train<F, C>(
    state: &mut TrainState,
    cfg: &TrainConfig,
    src: &DatasetSource,
    mut on_step: F,
    mut on_checkpoint: C,
) -> Result<()>
where
    F: FnMut(&StepMetrics) -> Result<()>,
    C: FnMut(&TrainState) -> Result<()>,
{
    if state.step == 0 {
        on_checkpoint(state)?;
    }
    while state.step < cfg.steps {
        let metrics = train_step(state, cfg, src)?;
        on_step(&metrics)?;
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.steps {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

/// Real crops drawn with a private stream, for evaluation.
pub fn sample_real_crops(src: &DatasetSource, count: usize, seed: u64) -> Result<Vec<Array3<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_real_crop(src, &mut rng).map(|c| c.pixels)).collect()
}

/// Fake crops rendered in evaluation mode at random windows, for evaluation.
pub fn sample_fake_crops(
    g: &Generator,
    cfg: &TrainConfig,
    src: &DatasetSource,
    count: usize,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fp = g.footprint().clone();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut real = sample_real_crop(src, &mut rng)?;
        real.window.margin = fp.margin();
        let coords = src.coordinate_spec(&cfg.latent.coords, real.image);
        let spec = LatentSpec { coords, ..cfg.latent };
        let (latent, (oy, ox)) =
            fake_latent_for_window(&spec, &real.window, (cfg.latent_size, cfg.latent_size), &fp, &mut rng)?;
        let raw = g.generate(&latent, Mode::Eval)?;
        out.push(raw.crop(oy, ox, src.crop.0, src.crop.1)?.data);
    }
    Ok(out)
}
