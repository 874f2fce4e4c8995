//! Structural property suites run by `locogan verify`.
//!
//! Every suite draws from its own RNG stream, so suites are independent and
//! may run concurrently. Probes that need many forward passes (shape law,
//! footprint) run on a narrow clone of the generator: same layer geometry and
//! coordinate plan, fewer channels.

use std::fmt;

use nalgebra::DMatrix;
use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::latent::{
    crop_with_noise_padding, sample_latent, tile_periodic, CoordinateMode, CoordinateSpec,
    CropWindow, GlobalPlan, LatentImage, LatentSpec, Placement, TileAxes,
};
use crate::model::{
    spectral_normalize_converged, Discriminator, Generator, Init, Mode, NetworkConfig, Parameters,
    REFERENCE_DISCRIMINATOR_WIDTHS, REFERENCE_GENERATOR_WIDTHS,
};

/// Weight initialization of fresh verification models and probe clones.
/// Variance-preserving weights keep activations at unit scale, so the
/// tolerance checks are not passed trivially by near-constant outputs.
pub const PROBE_INIT: Init = Init::FanIn(1.0);

/// Channel width of the narrow clones used by the shape and footprint probes.
pub const PROBE_WIDTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub equivariance: f64,
    pub stitching: f64,
    pub periodicity: f64,
    pub spectral: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            equivariance: 1e-4,
            stitching: 1e-4,
            periodicity: 1e-3,
            spectral: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Trials of the equivariance and stitching suites.
    pub trials: usize,
    /// Output pixels checked by the footprint probe.
    pub probe_pixels: usize,
    /// Latent sizes covered by the shape law.
    pub shape_sizes: std::ops::RangeInclusive<usize>,
    pub tolerances: Tolerances,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            trials: 20,
            probe_pixels: 100,
            shape_sizes: 4..=32,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skip => "skip",
        }
    }
}

/// Outcome of one suite. `value` is the suite's worst observed quantity
/// (a max-abs difference, or a mismatch count for exact suites).
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: Status,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn measured(name: &'static str, value: f64, tolerance: f64, detail: String) -> Self {
        // Exact suites use tolerance 0 and pass only at value 0.
        let pass = if tolerance == 0.0 { value == 0.0 } else { value < tolerance };
        CheckResult {
            name,
            status: if pass { Status::Pass } else { Status::Fail },
            value,
            tolerance,
            detail,
        }
    }

    fn errored(name: &'static str, e: Error) -> Self {
        CheckResult {
            name,
            status: Status::Fail,
            value: f64::NAN,
            tolerance: f64::NAN,
            detail: format!("error: {e}"),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "check={} status={} value={:e} tolerance={:e}",
            self.name,
            self.status.name(),
            self.value,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " detail=\"{}\"", self.detail.replace('"', "'"))?;
        }
        Ok(())
    }
}

/// One line per suite, then a summary line.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub subject: String,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| c.status == Status::Fail).collect()
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "subject={}", self.subject)?;
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed: Vec<&str> = self.failures().iter().map(|c| c.name).collect();
        writeln!(
            f,
            "result={} failures={}",
            if failed.is_empty() { "pass" } else { "fail" },
            if failed.is_empty() { "none".to_string() } else { failed.join(",") }
        )
    }
}

/// Default generator/discriminator pair with probe initialization.
pub fn fresh_model(seed: u64) -> Result<(Generator, Discriminator)> {
    let spec = LatentSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Generator::new(
        NetworkConfig::generator(&spec, &REFERENCE_GENERATOR_WIDTHS),
        spec,
        PROBE_INIT,
        &mut rng,
    )?;
    let d = Discriminator::new(
        NetworkConfig::discriminator(spec.coords.channels(), &REFERENCE_DISCRIMINATOR_WIDTHS, true),
        PROBE_INIT,
        &mut rng,
    )?;
    Ok((g, d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Suite {
    ShapeLaw,
    Footprint,
    Equivariance,
    Stitching,
    Periodicity,
    Spectral,
    Determinism,
}

const SUITES: [Suite; 7] = [
    Suite::ShapeLaw,
    Suite::Footprint,
    Suite::Equivariance,
    Suite::Stitching,
    Suite::Periodicity,
    Suite::Spectral,
    Suite::Determinism,
];

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::ShapeLaw => "shape_law",
            Suite::Footprint => "footprint",
            Suite::Equivariance => "equivariance",
            Suite::Stitching => "stitching",
            Suite::Periodicity => "periodicity",
            Suite::Spectral => "spectral",
            Suite::Determinism => "determinism",
        }
    }
}

enum Subject<'a> {
    Fresh { seed: u64, g: Generator, d: Discriminator },
    Checkpoint(&'a Checkpoint),
}

impl Subject<'_> {
    fn generator(&self) -> &Generator {
        match self {
            Subject::Fresh { g, .. } => g,
            Subject::Checkpoint(c) => &c.state.generator,
        }
    }

    fn discriminator(&self) -> &Discriminator {
        match self {
            Subject::Fresh { d, .. } => d,
            Subject::Checkpoint(c) => &c.state.discriminator,
        }
    }
}

/// Runs every suite on a freshly initialized default model.
pub fn verify_fresh(opts: &VerifyOptions) -> Result<VerifyReport> {
    let (g, d) = fresh_model(opts.seed)?;
    let subject = Subject::Fresh { seed: opts.seed, g, d };
    Ok(run(&subject, opts, format!("fresh seed={}", opts.seed)))
}

/// Runs every suite on the weights of a checkpoint.
pub fn verify_checkpoint(ckpt: &Checkpoint, opts: &VerifyOptions) -> VerifyReport {
    run(&Subject::Checkpoint(ckpt), opts, format!("checkpoint step={}", ckpt.state.step))
}

fn run(subject: &Subject<'_>, opts: &VerifyOptions, label: String) -> VerifyReport {
    let checks = SUITES
        .par_iter()
        .enumerate()
        .map(|(i, &suite)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64 + 1);
            run_suite(suite, subject, opts, &mut rng).unwrap_or_else(|e| CheckResult::errored(suite.name(), e))
        })
        .collect();
    VerifyReport { subject: label, checks }
}

fn run_suite(suite: Suite, subject: &Subject<'_>, opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let g = subject.generator();
    let tol = &opts.tolerances;
    let name = suite.name();
    match suite {
        Suite::ShapeLaw => {
            let clone = narrow_clone(g, g.latent_spec, rng)?;
            let (bad, detail) = shape_law(&clone, opts.shape_sizes.clone(), rng)?;
            Ok(CheckResult::measured(name, bad as f64, 0.0, detail))
        }
        Suite::Footprint => {
            let clone = narrow_clone(g, g.latent_spec, rng)?;
            let bad = footprint_probe(&clone, 8, opts.probe_pixels, rng)?;
            Ok(CheckResult::measured(
                name,
                bad as f64,
                0.0,
                format!("{} pixels, latent 8x8", opts.probe_pixels),
            ))
        }
        Suite::Equivariance => {
            let worst = equivariance(g, 6, opts.trials, rng)?;
            Ok(CheckResult::measured(name, worst, tol.equivariance, format!("{} trials", opts.trials)))
        }
        Suite::Stitching => {
            let worst = stitching(g, 64, opts.trials, rng)?;
            Ok(CheckResult::measured(name, worst, tol.stitching, format!("{} trials, 64x64 crops", opts.trials)))
        }
        Suite::Periodicity => {
            let coords = g.latent_spec.coords;
            let period = coords.period_x().map(|p| p / g.footprint().scale());
            let (model, period, how) = match period {
                Some(p) if (p - p.round()).abs() < 1e-9 && p >= 1.0 => (g.clone(), p.round() as usize, "own weights"),
                _ => {
                    let spec = LatentSpec {
                        coords: CoordinateSpec::periodic(CoordinateMode::PeriodicX, 128, 128, 4.0 * g.footprint().scale()),
                        ..g.latent_spec
                    };
                    let clone = Generator::new(
                        NetworkConfig::generator(&spec, &hidden_widths(g)),
                        spec,
                        PROBE_INIT,
                        rng,
                    )?;
                    (clone, 4, "periodic clone")
                }
            };
            let worst = strip_periodicity(&model, period, 3, rng)?;
            Ok(CheckResult::measured(
                name,
                worst,
                tol.periodicity,
                format!("{how}, latent period {period}, 3 periods"),
            ))
        }
        Suite::Spectral => {
            let d = subject.discriminator();
            if !d.config.has_spectral_norm() {
                return Ok(CheckResult {
                    name,
                    status: Status::Skip,
                    value: f64::NAN,
                    tolerance: tol.spectral,
                    detail: "spectral normalization disabled".into(),
                });
            }
            let worst = spectral_error(d)?;
            Ok(CheckResult::measured(name, worst, tol.spectral, "stored vectors, converged".into()))
        }
        Suite::Determinism => {
            let mismatches = determinism(subject, rng)?;
            Ok(CheckResult::measured(name, mismatches as f64, 0.0, String::new()))
        }
    }
}

fn hidden_widths(g: &Generator) -> Vec<usize> {
    let w = g.config.widths();
    w[..w.len() - 1].to_vec()
}

/// Same layer geometry and latent plan, [`PROBE_WIDTH`] channels per layer.
pub fn narrow_clone<R: Rng + ?Sized>(g: &Generator, spec: LatentSpec, rng: &mut R) -> Result<Generator> {
    let widths = vec![PROBE_WIDTH; g.config.layers.len() - 1];
    let mut config = NetworkConfig::generator(&spec, &widths);
    for (dst, src) in config.layers.iter_mut().zip(&g.config.layers) {
        dst.kernel = src.kernel;
        dst.stride = src.stride;
        dst.padding = src.padding;
    }
    Generator::new(config, spec, PROBE_INIT, rng)
}

/// Latent of size `h × w` placed with its raw pixel 0 at full pixel
/// `(y0, x0)`.
pub fn placed_latent<R: Rng + ?Sized>(
    g: &Generator,
    h: usize,
    w: usize,
    y0: f64,
    x0: f64,
    rng: &mut R,
) -> Result<LatentImage> {
    sample_latent(&g.latent_spec, h, w, rng).with_coordinates(g.footprint(), &Placement::at(x0, y0))
}

/// Number of latent sizes where the analytic size, the 16n − 63 law (for
/// four stride-2 layers) and the forward pass disagree.
pub fn shape_law<R: Rng + ?Sized>(
    g: &Generator,
    sizes: std::ops::RangeInclusive<usize>,
    rng: &mut R,
) -> Result<(usize, String)> {
    let table_stack = g.config.layers.len() == 5 && (g.footprint().scale() - 16.0).abs() < 1e-12;
    let mut bad = Vec::new();
    for n in sizes {
        let analytic = g.output_size(n)?;
        let law_ok = !table_stack || analytic as i64 == 16 * n as i64 - 63;
        let out = g.generate(&placed_latent(g, n, n, 0.0, 0.0, rng)?, Mode::Eval)?;
        if !law_ok || out.height() != analytic || out.width() != analytic {
            bad.push(n.to_string());
        }
    }
    let detail = if bad.is_empty() { String::new() } else { format!("sizes {}", bad.join(",")) };
    Ok((bad.len(), detail))
}

/// Perturbs every latent pixel of an `n × n` latent and counts probed output
/// pixels whose influencing latent set differs from the analytic footprint.
pub fn footprint_probe<R: Rng + ?Sized>(g: &Generator, n: usize, pixels: usize, rng: &mut R) -> Result<usize> {
    let base = placed_latent(g, n, n, 0.0, 0.0, rng)?;
    let reference = g.generate(&base, Mode::Eval)?.data;
    let (_, h, w) = reference.dim();
    let intervals = g.footprint().intervals(n)?;
    let probes: Vec<(usize, usize)> = (0..pixels)
        .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
        .collect();
    let mut influenced = vec![vec![false; n * n]; pixels];
    for a in 0..n {
        for b in 0..n {
            let mut latent = base.clone();
            bump(&mut latent, a, b);
            let out = g.generate(&latent, Mode::Eval)?.data;
            for (k, &(y, x)) in probes.iter().enumerate() {
                influenced[k][a * n + b] = (0..3).any(|c| out[[c, y, x]] != reference[[c, y, x]]);
            }
        }
    }
    let mut bad = 0;
    for (k, &(y, x)) in probes.iter().enumerate() {
        let (ylo, yhi) = intervals[y];
        let (xlo, xhi) = intervals[x];
        let matches = (0..n * n).all(|i| {
            let (a, b) = (i / n, i % n);
            let analytic = (ylo..=yhi).contains(&a) && (xlo..=xhi).contains(&b);
            analytic == influenced[k][i]
        });
        if !matches {
            bad += 1;
        }
    }
    Ok(bad)
}

fn bump(latent: &mut LatentImage, a: usize, b: usize) {
    if latent.spec.local_channels > 0 {
        latent.local.slice_mut(s![.., a, b]).mapv_inplace(|v| v + 1.0);
    } else {
        let mut field = latent.global_field();
        field.slice_mut(s![.., a, b]).mapv_inplace(|v| v + 1.0);
        latent.global = GlobalPlan::PerPixel(field);
        latent.edited = true;
    }
}

fn window_latent(field: &LatentImage, y: usize, x: usize, h: usize, w: usize) -> LatentImage {
    let global = match &field.global {
        GlobalPlan::Constant(v) => GlobalPlan::Constant(v.clone()),
        GlobalPlan::PerPixel(f) => GlobalPlan::PerPixel(f.slice(s![.., y..y + h, x..x + w]).to_owned()),
    };
    LatentImage {
        spec: field.spec,
        height: h,
        width: w,
        edited: field.edited,
        global,
        local: field.local.slice(s![.., y..y + h, x..x + w]).to_owned(),
        coords: None,
    }
}

fn max_abs_diff(a: ndarray::ArrayView3<f64>, b: ndarray::ArrayView3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst interior difference between the output of a latent shifted by one
/// pixel (alternating axes) and the correspondingly shifted output.
pub fn equivariance<R: Rng + ?Sized>(g: &Generator, n: usize, trials: usize, rng: &mut R) -> Result<f64> {
    let fp = g.footprint();
    let scale = fp.integer_scale();
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (dy, dx) = if t % 2 == 0 { (0, 1) } else { (1, 0) };
        let field = sample_latent(&g.latent_spec, n + 1, n + 1, rng);
        let a = window_latent(&field, 0, 0, n, n).with_coordinates(fp, &Placement::at(0.0, 0.0))?;
        let b = window_latent(&field, dy, dx, n, n)
            .with_coordinates(fp, &Placement::at((scale * dx) as f64, (scale * dy) as f64))?;
        let ya = g.generate(&a, Mode::Eval)?.data;
        let yb = g.generate(&b, Mode::Eval)?.data;
        let (_, h, w) = ya.dim();
        let (sy, sx) = (scale * dy, scale * dx);
        let diff = max_abs_diff(
            ya.slice(s![.., sy.., sx..]),
            yb.slice(s![.., ..h - sy, ..w - sx]),
        );
        worst = worst.max(diff);
    }
    Ok(worst)
}

/// Worst disagreement of two overlapping `crop × crop` windows cut from one
/// latent field, over the pixels both windows determine from field latents.
pub fn stitching<R: Rng + ?Sized>(g: &Generator, crop: usize, trials: usize, rng: &mut R) -> Result<f64> {
    let fp = g.footprint();
    let field = sample_latent(&g.latent_spec, 24, 24, rng);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let x1 = rng.random_range(64..160i64);
        let y1 = rng.random_range(64..160i64);
        let w1 = CropWindow::new(x1, y1, crop, crop, 0);
        let w2 = CropWindow::new(x1 + rng.random_range(1..17), y1 + rng.random_range(1..17), crop, crop, 0);
        let (Some(r1), Some(r2)) = (w1.core_determined(fp), w2.core_determined(fp)) else {
            continue;
        };
        let (oy0, ox0) = (r1.0.max(r2.0), r1.1.max(r2.1));
        let (oy1, ox1) = (r1.2.min(r2.2), r1.3.min(r2.3));
        if oy0 >= oy1 || ox0 >= ox1 {
            continue;
        }
        let render = |w: CropWindow, rng: &mut R| -> Result<Array3<f64>> {
            let w = CropWindow {
                margin: w.required_margin(fp)?,
                ..w
            };
            let latent = crop_with_noise_padding(&field, &w, fp, rng)?;
            let (_, (oy, ox)) = w.raw_layout(fp);
            Ok(g.generate(&latent, Mode::Eval)?.crop(oy, ox, w.height, w.width)?.data)
        };
        let c1 = render(w1, rng)?;
        let c2 = render(w2, rng)?;
        let at = |c: &Array3<f64>, w: &CropWindow| {
            let (y0, x0) = ((oy0 - w.y) as usize, (ox0 - w.x) as usize);
            let (y1, x1) = ((oy1 - w.y) as usize, (ox1 - w.x) as usize);
            c.slice(s![.., y0..y1, x0..x1]).to_owned()
        };
        worst = worst.max(max_abs_diff(at(&c1, &w1).view(), at(&c2, &w2).view()));
        done += 1;
    }
    Ok(worst)
}

/// Worst difference between output columns one period apart on a strip
/// `periods` latent periods wide with tiled local channels.
pub fn strip_periodicity<R: Rng + ?Sized>(g: &Generator, period: usize, periods: usize, rng: &mut R) -> Result<f64> {
    let fp = g.footprint();
    let latent = placed_latent(g, 5, period * periods, 0.0, 0.0, rng)?;
    let latent = tile_periodic(&latent, period, TileAxes::X, fp)?;
    let out = g.generate(&latent, Mode::Eval)?.data;
    let shift = period * fp.integer_scale();
    let w = out.dim().2;
    if shift >= w {
        return Err(Error::PeriodMismatch(format!("period of {shift} pixels exceeds the {w}-pixel strip")));
    }
    Ok(max_abs_diff(out.slice(s![.., .., shift..]), out.slice(s![.., .., ..w - shift])))
}

/// Largest `|σ_max(W/σ̂) − 1|` over spectrally normalized layers, with σ̂
/// from power iteration started at the stored vector and σ_max from an SVD.
pub fn spectral_error(d: &Discriminator) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (w, u) in d.weight_matrices().iter().zip(d.spectral_vectors()) {
        let Some(u) = u else { continue };
        let (normalized, _, _) = spectral_normalize_converged(w.view(), u, 1e-15, 10_000)?;
        worst = worst.max((largest_singular_value(&normalized) - 1.0).abs());
    }
    Ok(worst)
}

pub fn largest_singular_value(m: &ndarray::Array2<f64>) -> f64 {
    let (r, c) = m.dim();
    let dm = DMatrix::from_row_iterator(r, c, m.iter().cloned());
    dm.singular_values().iter().cloned().fold(0.0, f64::max)
}

fn determinism(subject: &Subject<'_>, rng: &mut ChaCha8Rng) -> Result<usize> {
    let g = subject.generator();
    let mut mismatches = 0;
    let seed: u64 = rng.random();
    let draw = || -> Result<Array3<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let latent = placed_latent(g, 5, 5, 0.0, 0.0, &mut r)?;
        Ok(g.generate(&latent, Mode::Eval)?.data)
    };
    let (a, b) = (draw()?, draw()?);
    if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
        mismatches += 1;
    }
    match subject {
        Subject::Fresh { seed, g, d } => {
            let (g2, d2) = fresh_model(*seed)?;
            if !same_tensors(g, &g2) || !same_tensors(d, &d2) {
                mismatches += 1;
            }
        }
        Subject::Checkpoint(c) => {
            let bytes = c.to_bytes();
            if Checkpoint::from_bytes(&bytes)?.to_bytes() != bytes {
                mismatches += 1;
            }
        }
    }
    Ok(mismatches)
}

fn same_tensors<P: Parameters>(a: &P, b: &P) -> bool {
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|((na, va), (nb, vb))| {
            na == nb && va.shape() == vb.shape() && va.iter().zip(vb.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}
