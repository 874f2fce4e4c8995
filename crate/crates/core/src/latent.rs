//! Noise-image latents: global (master plan) channels that are constant per
//! sample, local i.i.d. noise channels, and coordinate channels describing
//! where in the full image each pixel lives.
//!
//! A [`LatentImage`] carries its coordinates as a dense [`Grid`] sampled once
//! per raw-output pixel over the footprint extent reported by
//! [`FootprintMap::dense_extent`]. The generator resamples that grid to the
//! size of every layer, so coordinates seen by a layer pixel are the world
//! coordinates of its footprint center.

use std::f64::consts::PI;

use ndarray::{s, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{resample_grid, resample_grid_at, FootprintMap, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateMode {
    /// `(x, y)`
    Linear,
    /// `(cos αx, sin αx, y)`
    PeriodicX,
    /// `(cos αx, sin αx, cos αy, sin αy)`
    PeriodicXY,
}

impl CoordinateMode {
    pub fn name(&self) -> &'static str {
        match self {
            CoordinateMode::Linear => "linear",
            CoordinateMode::PeriodicX => "periodic_x",
            CoordinateMode::PeriodicXY => "periodic_xy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(CoordinateMode::Linear),
            "periodic_x" => Some(CoordinateMode::PeriodicX),
            "periodic_xy" => Some(CoordinateMode::PeriodicXY),
            _ => None,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            CoordinateMode::Linear => 2,
            CoordinateMode::PeriodicX => 3,
            CoordinateMode::PeriodicXY => 4,
        }
    }
}

/// How pixel positions become coordinate channels.
///
/// World coordinates map full-image pixel `i` of an axis with `H` pixels to
/// `2i/(H−1) − 1`, so the reference image spans `[-1, 1]`; positions outside
/// the reference extend linearly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateSpec {
    pub mode: CoordinateMode,
    /// (height, width) of the reference image in pixels.
    pub reference: (usize, usize),
    /// Angular frequency in radians per world unit (periodic modes).
    pub alpha: f64,
}

impl CoordinateSpec {
    pub fn linear(height: usize, width: usize) -> Self {
        CoordinateSpec {
            mode: CoordinateMode::Linear,
            reference: (height, width),
            alpha: 0.0,
        }
    }

    /// Periodic coordinates whose x period is `period` full-image pixels.
    pub fn periodic(mode: CoordinateMode, height: usize, width: usize, period: f64) -> Self {
        let alpha = if mode == CoordinateMode::Linear {
            0.0
        } else {
            alpha_for_period(width, period)
        };
        CoordinateSpec {
            mode,
            reference: (height, width),
            alpha,
        }
    }

    pub fn channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.reference.0 == 0 || self.reference.1 == 0 {
            return Err(Error::InvalidArgument(
                "coordinate reference extent must be at least 1x1".into(),
            ));
        }
        if self.mode != CoordinateMode::Linear && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "periodic coordinates need alpha > 0 (got {})",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Same mode and frequency over a different reference extent. Linear
    /// coordinates are re-normalized; periodic ones keep their pixel period.
    pub fn for_image(&self, height: usize, width: usize) -> Self {
        match self.mode {
            CoordinateMode::Linear => CoordinateSpec::linear(height, width),
            _ => *self,
        }
    }

    pub fn world_x(&self, x: f64) -> f64 {
        world(x, self.reference.1)
    }

    pub fn world_y(&self, y: f64) -> f64 {
        world(y, self.reference.0)
    }

    /// Pixel period along x implied by `alpha`.
    pub fn period_x(&self) -> Option<f64> {
        match self.mode {
            CoordinateMode::Linear => None,
            _ => Some(PI * (self.reference.1 as f64 - 1.0).max(1.0) / self.alpha),
        }
    }

    /// Pixel period along y implied by `alpha` (periodic_xy only).
    pub fn period_y(&self) -> Option<f64> {
        match self.mode {
            CoordinateMode::PeriodicXY => {
                Some(PI * (self.reference.0 as f64 - 1.0).max(1.0) / self.alpha)
            }
            _ => None,
        }
    }

    /// Coordinate channels at full-image position (x, y).
    pub fn encode(&self, x: f64, y: f64, out: &mut [f64]) {
        let wx = self.world_x(x);
        let wy = self.world_y(y);
        match self.mode {
            CoordinateMode::Linear => {
                out[0] = wx;
                out[1] = wy;
            }
            CoordinateMode::PeriodicX => {
                out[0] = (self.alpha * wx).cos();
                out[1] = (self.alpha * wx).sin();
                out[2] = wy;
            }
            CoordinateMode::PeriodicXY => {
                out[0] = (self.alpha * wx).cos();
                out[1] = (self.alpha * wx).sin();
                out[2] = (self.alpha * wy).cos();
                out[3] = (self.alpha * wy).sin();
            }
        }
    }

    /// Coordinate grid at the outer product of the given full-image positions.
    pub fn grid_at(&self, ys: &[f64], xs: &[f64]) -> Grid {
        let c = self.channels();
        let mut values = Array3::zeros((c, ys.len(), xs.len()));
        let mut buf = vec![0.0; c];
        for (i, &y) in ys.iter().enumerate() {
            for (j, &x) in xs.iter().enumerate() {
                self.encode(x, y, &mut buf);
                for (ch, &v) in buf.iter().enumerate() {
                    values[[ch, i, j]] = v;
                }
            }
        }
        Grid::new(values)
    }
}

fn world(pos: f64, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 * pos / (extent as f64 - 1.0) - 1.0
    }
}

/// `alpha` such that `period` pixels along an axis of `extent` pixels span
/// one full turn.
pub fn alpha_for_period(extent: usize, period: f64) -> f64 {
    PI * (extent as f64 - 1.0).max(1.0) / period
}

/// Channel layout of a latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSpec {
    pub global_channels: usize,
    pub local_channels: usize,
    pub coords: CoordinateSpec,
}

impl Default for LatentSpec {
    fn default() -> Self {
        LatentSpec {
            global_channels: 16,
            local_channels: 2,
            coords: CoordinateSpec::linear(128, 128),
        }
    }
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.global_channels + self.local_channels == 0 {
            return Err(Error::InvalidArgument(
                "a latent needs at least one global or local channel".into(),
            ));
        }
        self.coords.validate()
    }

    /// Noise channels (global + local), excluding coordinates.
    pub fn value_channels(&self) -> usize {
        self.global_channels + self.local_channels
    }

    /// Channels entering the first generator layer.
    pub fn input_channels(&self) -> usize {
        self.value_channels() + self.coords.channels()
    }
}

/// Master-plan storage: one value per channel, or per pixel once edited.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalPlan {
    Constant(Vec<f64>),
    PerPixel(Array3<f64>),
}

/// A noise-like latent image.
#[derive(Debug, Clone)]
pub struct LatentImage {
    pub spec: LatentSpec,
    pub height: usize,
    pub width: usize,
    pub global: GlobalPlan,
    /// (local_channels, height, width)
    pub local: Array3<f64>,
    /// Dense coordinate grid (see module docs); required by the generator.
    pub coords: Option<Grid>,
    /// Set once the master plan stops being spatially constant.
    pub edited: bool,
}

impl PartialEq for LatentImage {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.height == other.height
            && self.width == other.width
            && self.global_field() == other.global_field()
            && self.local == other.local
            && self.coords == other.coords
    }
}

impl LatentImage {
    /// Global channels materialized per pixel: (global_channels, h, w).
    pub fn global_field(&self) -> Array3<f64> {
        match &self.global {
            GlobalPlan::Constant(values) => {
                let mut out = Array3::zeros((values.len(), self.height, self.width));
                for (c, &v) in values.iter().enumerate() {
                    out.index_axis_mut(Axis(0), c).fill(v);
                }
                out
            }
            GlobalPlan::PerPixel(field) => field.clone(),
        }
    }

    /// Per-channel `max − min` of the global channels.
    pub fn global_spread(&self) -> Vec<f64> {
        let field = self.global_field();
        field
            .outer_iter()
            .map(|ch| {
                let max = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = ch.iter().cloned().fold(f64::INFINITY, f64::min);
                if ch.is_empty() {
                    0.0
                } else {
                    max - min
                }
            })
            .collect()
    }

    /// Global then local channels: (value_channels, h, w).
    pub fn value_field(&self) -> Array3<f64> {
        let g = self.global_field();
        ndarray::concatenate(Axis(0), &[g.view(), self.local.view()]).unwrap()
    }

    /// Attaches a dense coordinate grid for the given raw-output placement.
    pub fn attach_coordinates(&mut self, fp: &FootprintMap, placement: &Placement) -> Result<()> {
        self.coords = Some(dense_coordinates(
            &self.spec.coords,
            fp,
            self.height,
            self.width,
            placement,
        )?);
        Ok(())
    }

    pub fn with_coordinates(mut self, fp: &FootprintMap, placement: &Placement) -> Result<Self> {
        self.attach_coordinates(fp, placement)?;
        Ok(self)
    }
}

/// Maps raw generator output pixels to full-image positions:
/// `x_full = x0 + pitch_x · raw_x` (likewise for y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub x0: f64,
    pub y0: f64,
    pub pitch_x: f64,
    pub pitch_y: f64,
}

impl Placement {
    /// Unit-pitch placement whose raw pixel (0, 0) sits at full pixel (x0, y0).
    pub fn at(x0: f64, y0: f64) -> Self {
        Placement {
            x0,
            y0,
            pitch_x: 1.0,
            pitch_y: 1.0,
        }
    }
}

/// Dense coordinate grid for a `latent_h × latent_w` latent.
pub fn dense_coordinates(
    spec: &CoordinateSpec,
    fp: &FootprintMap,
    latent_h: usize,
    latent_w: usize,
    placement: &Placement,
) -> Result<Grid> {
    let (oy, len_y) = fp.dense_extent(latent_h)?;
    let (ox, len_x) = fp.dense_extent(latent_w)?;
    let ys: Vec<f64> = (0..len_y)
        .map(|g| placement.y0 + placement.pitch_y * (oy + g as f64))
        .collect();
    let xs: Vec<f64> = (0..len_x)
        .map(|g| placement.x0 + placement.pitch_x * (ox + g as f64))
        .collect();
    Ok(spec.grid_at(&ys, &xs))
}

/// Layout of a full `height × width` image generated in one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageLayout {
    pub latent_h: usize,
    pub latent_w: usize,
    /// Offset of the image inside the raw output, (y, x).
    pub offset: (usize, usize),
    pub placement: Placement,
}

/// Solves latent sizes per axis and places the centered crop at full-image
/// pixel (0, 0).
pub fn image_layout(fp: &FootprintMap, height: usize, width: usize) -> Result<ImageLayout> {
    let (latent_h, off_y) = crate::geometry::latent_size_for_target(height, fp.layers())?;
    let (latent_w, off_x) = crate::geometry::latent_size_for_target(width, fp.layers())?;
    Ok(ImageLayout {
        latent_h,
        latent_w,
        offset: (off_y, off_x),
        placement: Placement::at(-(off_x as f64), -(off_y as f64)),
    })
}

/// Rectangle of latent indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentRect {
    pub x: i64,
    pub y: i64,
    pub width: usize,
    pub height: usize,
}

impl LatentRect {
    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn contains(&self, y: i64, x: i64) -> bool {
        y >= self.y
            && y < self.y + self.height as i64
            && x >= self.x
            && x < self.x + self.width as i64
    }
}

/// A window of output pixels in the full-image frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: i64,
    pub y: i64,
    pub height: usize,
    pub width: usize,
    /// Fresh-noise latent pixels padded around the window's own latents.
    pub margin: usize,
}

impl CropWindow {
    pub fn new(x: i64, y: i64, height: usize, width: usize, margin: usize) -> Self {
        CropWindow {
            x,
            y,
            height,
            width,
            margin,
        }
    }

    /// Field latents owning the window's pixels. Field latent `I` has its
    /// footprint center at full pixel `scale·I + latent_offset`.
    pub fn latent_window(&self, fp: &FootprintMap) -> LatentRect {
        let x0 = fp.owner(self.x as f64);
        let x1 = fp.owner((self.x + self.width as i64 - 1) as f64);
        let y0 = fp.owner(self.y as f64);
        let y1 = fp.owner((self.y + self.height as i64 - 1) as f64);
        LatentRect {
            x: x0,
            y: y0,
            width: (x1 - x0 + 1) as usize,
            height: (y1 - y0 + 1) as usize,
        }
    }

    /// Latent rectangle including the margin, in field indices.
    pub fn padded_window(&self, fp: &FootprintMap) -> LatentRect {
        pad_rect(self.latent_window(fp), self.margin)
    }

    /// Smallest margin whose padded latent produces every window pixel.
    pub fn required_margin(&self, fp: &FootprintMap) -> Result<usize> {
        let core = self.latent_window(fp);
        let limit = fp.margin() + 4 * fp.layers().len() + 4;
        for m in 0..=limit {
            if covers(fp, &pad_rect(core, m), self)? {
                return Ok(m);
            }
        }
        Err(Error::InvalidArgument(format!(
            "window {self:?} cannot be covered by any margin up to {limit}"
        )))
    }

    /// Where the padded latent's raw output lands in the full image, and the
    /// window's (y, x) offset inside that raw output.
    pub fn raw_layout(&self, fp: &FootprintMap) -> (Placement, (usize, usize)) {
        let padded = self.padded_window(fp);
        let scale = fp.integer_scale() as i64;
        let (px, py) = (scale * padded.x, scale * padded.y);
        (
            Placement::at(px as f64, py as f64),
            ((self.y - py) as usize, (self.x - px) as usize),
        )
    }

    /// Window-pixel rectangle (y0, x0, y1, x1), exclusive ends, of pixels
    /// whose whole footprint lies inside the window's own (unpadded) latents.
    pub fn core_determined(&self, fp: &FootprintMap) -> Option<(i64, i64, i64, i64)> {
        let core = self.latent_window(fp);
        let axis = |start: i64, len: usize, lo: i64, width: usize| -> Option<(i64, i64)> {
            let hi = lo + width as i64 - 1;
            let inside: Vec<i64> = (start..start + len as i64)
                .filter(|&p| {
                    let (a, b) = footprint_of(fp, p);
                    a >= lo && b <= hi
                })
                .collect();
            Some((*inside.first()?, *inside.last()? + 1))
        };
        let (y0, y1) = axis(self.y, self.height, core.y, core.height)?;
        let (x0, x1) = axis(self.x, self.width, core.x, core.width)?;
        Some((y0, x0, y1, x1))
    }
}

fn pad_rect(r: LatentRect, m: usize) -> LatentRect {
    LatentRect {
        x: r.x - m as i64,
        y: r.y - m as i64,
        width: r.width + 2 * m,
        height: r.height + 2 * m,
    }
}

fn covers(fp: &FootprintMap, padded: &LatentRect, w: &CropWindow) -> Result<bool> {
    let scale = fp.integer_scale() as i64;
    let axis = |start: i64, n: usize, lo: i64, len: usize| -> Result<bool> {
        let out = match fp.output_size(n) {
            Ok(o) => o as i64,
            Err(_) => return Ok(false),
        };
        let raw0 = scale * start;
        Ok(raw0 <= lo && lo + len as i64 <= raw0 + out)
    };
    Ok(axis(padded.x, padded.width, w.x, w.width)? && axis(padded.y, padded.height, w.y, w.height)?)
}

/// Field-latent interval influencing full-image pixel `p` (one axis).
fn footprint_of(fp: &FootprintMap, p: i64) -> (i64, i64) {
    // Intervals are translation invariant in the field frame; evaluate in a
    // latent large enough that clipping never binds.
    let scale = fp.integer_scale() as i64;
    let n = 4 * fp.layers().iter().map(|l| l.kernel).sum::<usize>() + 8;
    let base = p.div_euclid(scale) - (n as i64) / 2;
    let raw = p - scale * base;
    let iv = fp.intervals(n).expect("interior footprint");
    let (lo, hi) = iv[raw as usize];
    (base + lo as i64, base + hi as i64)
}

/// Draws a latent: one standard-normal value per global channel and i.i.d.
/// standard-normal local noise. Coordinates are attached separately.
pub fn sample_latent<R: Rng + ?Sized>(
    spec: &LatentSpec,
    height: usize,
    width: usize,
    rng: &mut R,
) -> LatentImage {
    let global: Vec<f64> = (0..spec.global_channels)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let local = gaussian_field(spec.local_channels, height, width, rng);
    LatentImage {
        spec: *spec,
        height,
        width,
        global: GlobalPlan::Constant(global),
        local,
        coords: None,
        edited: false,
    }
}

pub(crate) fn gaussian_field<R: Rng + ?Sized>(
    c: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Array3<f64> {
    let data: Vec<f64> = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
    Array3::from_shape_vec((c, h, w), data).unwrap()
}

/// Cuts the latent for `window` out of a latent field.
///
/// Local values at the window's own latents are copied from the field
/// (fresh noise where the field does not reach); the margin ring always gets
/// fresh noise. The master plan extends constantly; coordinates are computed
/// for the window's placement.
pub fn crop_with_noise_padding<R: Rng + ?Sized>(
    field: &LatentImage,
    window: &CropWindow,
    fp: &FootprintMap,
    rng: &mut R,
) -> Result<LatentImage> {
    let required = window.required_margin(fp)?;
    if window.margin < required {
        return Err(Error::MarginTooSmall {
            margin: window.margin,
            required,
        });
    }
    let core = window.latent_window(fp);
    let padded = window.padded_window(fp);
    let (h, w) = (padded.height, padded.width);
    let mut local = gaussian_field(field.spec.local_channels, h, w, rng);
    for i in 0..h {
        let fy = padded.y + i as i64;
        for j in 0..w {
            let fx = padded.x + j as i64;
            let in_field =
                fy >= 0 && fx >= 0 && (fy as usize) < field.height && (fx as usize) < field.width;
            if core.contains(fy, fx) && in_field {
                for c in 0..field.spec.local_channels {
                    local[[c, i, j]] = field.local[[c, fy as usize, fx as usize]];
                }
            }
        }
    }
    let global = match &field.global {
        GlobalPlan::Constant(v) => GlobalPlan::Constant(v.clone()),
        GlobalPlan::PerPixel(_) => {
            return Err(Error::InvalidArgument(
                "cropping an edited (per-pixel) master plan is not supported".into(),
            ))
        }
    };
    let (placement, _) = window.raw_layout(fp);
    let mut out = LatentImage {
        spec: field.spec,
        height: h,
        width: w,
        global,
        local,
        coords: None,
        edited: false,
    };
    out.attach_coordinates(fp, &placement)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileAxes {
    X,
    XY,
}

/// Verifies that the latent's coordinates repeat every `period` latent pixels
/// along `axes`.
pub fn check_period(
    coords: &CoordinateSpec,
    period: usize,
    axes: TileAxes,
    fp: &FootprintMap,
) -> Result<()> {
    let pixels = period as f64 * fp.scale();
    let check = |found: Option<f64>, axis: &str| -> Result<()> {
        match found {
            Some(p) if (p - pixels).abs() <= 1e-6 * pixels.max(1.0) => Ok(()),
            Some(p) => Err(Error::PeriodMismatch(format!(
                "{axis} coordinate period is {p} pixels but the latent period {period} spans {pixels} pixels"
            ))),
            None => Err(Error::PeriodMismatch(format!(
                "{} coordinates are not periodic along {axis}",
                coords.mode.name()
            ))),
        }
    };
    check(coords.period_x(), "x")?;
    if axes == TileAxes::XY {
        check(coords.period_y(), "y")?;
    }
    Ok(())
}

/// Repeats local channels circularly with latent period `period` along
/// `axes`. The coordinate spec must be periodic with a matching period.
pub fn tile_periodic(
    latent: &LatentImage,
    period: usize,
    axes: TileAxes,
    fp: &FootprintMap,
) -> Result<LatentImage> {
    if period == 0 || period > latent.width || (axes == TileAxes::XY && period > latent.height) {
        return Err(Error::PeriodMismatch(format!(
            "period {period} does not fit a {}x{} latent",
            latent.height, latent.width
        )));
    }
    check_period(&latent.spec.coords, period, axes, fp)?;
    let mut out = latent.clone();
    let (c, h, w) = latent.local.dim();
    for ch in 0..c {
        for i in 0..h {
            let si = if axes == TileAxes::XY { i % period } else { i };
            for j in 0..w {
                out.local[[ch, i, j]] = latent.local[[ch, si, j % period]];
            }
        }
    }
    Ok(out)
}

/// Semi-periodic variant of a tiled latent: every local value is blended
/// with fresh noise, `√(1−s²)·tiled + s·noise`, so tiles differ while
/// coordinates and the master plan stay shared.
pub fn vary_tiles<R: Rng + ?Sized>(latent: &LatentImage, strength: f64, rng: &mut R) -> Result<LatentImage> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!(
            "tile variation {strength} is outside [0, 1]"
        )));
    }
    let (c, h, w) = latent.local.dim();
    let noise = gaussian_field(c, h, w, rng);
    let keep = (1.0 - strength * strength).sqrt();
    let mut out = latent.clone();
    out.local = &latent.local * keep + &noise * strength;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSet {
    Global,
    Local,
    Both,
}

impl ChannelSet {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global" => Some(ChannelSet::Global),
            "local" => Some(ChannelSet::Local),
            "both" => Some(ChannelSet::Both),
            _ => None,
        }
    }
}

/// Copies the selected channels of `src` inside `region` into `dst`.
/// Coordinates always come from `dst`.
pub fn transplant(
    dst: &LatentImage,
    src: &LatentImage,
    region: LatentRect,
    channels: ChannelSet,
) -> Result<LatentImage> {
    if dst.spec != src.spec || dst.height != src.height || dst.width != src.width {
        return Err(Error::ShapeMismatch(format!(
            "transplant needs equal latents ({}x{} vs {}x{})",
            dst.height, dst.width, src.height, src.width
        )));
    }
    let fits = region.x >= 0
        && region.y >= 0
        && region.x as usize + region.width <= dst.width
        && region.y as usize + region.height <= dst.height;
    if !fits {
        return Err(Error::RegionOutOfBounds {
            region: (
                region.x.max(0) as usize,
                region.y.max(0) as usize,
                region.width,
                region.height,
            ),
            height: dst.height,
            width: dst.width,
        });
    }
    let mut out = dst.clone();
    if region.is_empty() {
        return Ok(out);
    }
    let (y0, x0) = (region.y as usize, region.x as usize);
    let (y1, x1) = (y0 + region.height, x0 + region.width);
    let whole = y0 == 0 && x0 == 0 && y1 == dst.height && x1 == dst.width;

    if matches!(channels, ChannelSet::Local | ChannelSet::Both) {
        out.local
            .slice_mut(s![.., y0..y1, x0..x1])
            .assign(&src.local.slice(s![.., y0..y1, x0..x1]));
    }
    if matches!(channels, ChannelSet::Global | ChannelSet::Both) {
        if whole {
            out.global = src.global.clone();
            out.edited = src.edited;
        } else {
            let mut field = dst.global_field();
            field
                .slice_mut(s![.., y0..y1, x0..x1])
                .assign(&src.global_field().slice(s![.., y0..y1, x0..x1]));
            out.global = GlobalPlan::PerPixel(field);
            out.edited = true;
        }
    }
    Ok(out)
}

/// Mixes two latents of (possibly) different image sizes.
///
/// The target image size is `round((1−t)·size_a + t·size_b)` per axis; both
/// latents are resampled bilinearly to the target latent size and mixed
/// linearly, then coordinates are rebuilt for the target image.
pub fn interpolate_latents(
    a: &LatentImage,
    b: &LatentImage,
    t: f64,
    size_a: (usize, usize),
    size_b: (usize, usize),
    fp: &FootprintMap,
) -> Result<(LatentImage, (usize, usize))> {
    let same_layout = a.spec.global_channels == b.spec.global_channels
        && a.spec.local_channels == b.spec.local_channels
        && a.spec.coords.mode == b.spec.coords.mode;
    if !same_layout {
        return Err(Error::ShapeMismatch(
            "interpolated latents must share channel counts and coordinate mode".into(),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} is outside [0, 1]")));
    }
    let mix_size = |sa: usize, sb: usize| ((1.0 - t) * sa as f64 + t * sb as f64).round() as usize;
    let target = (mix_size(size_a.0, size_b.0), mix_size(size_a.1, size_b.1));
    let layout = image_layout(fp, target.0, target.1)?;
    let (h, w) = (layout.latent_h, layout.latent_w);

    let resize = |field: &Array3<f64>| -> Array3<f64> {
        resample_grid(&Grid::new(field.clone()), h, w).into_values()
    };
    let mix = |x: &Array3<f64>, y: &Array3<f64>| -> Array3<f64> {
        let mut out = x * (1.0 - t);
        out.scaled_add(t, y);
        out
    };
    let local = mix(&resize(&a.local), &resize(&b.local));
    let global = match (&a.global, &b.global) {
        (GlobalPlan::Constant(ga), GlobalPlan::Constant(gb)) => GlobalPlan::Constant(
            ga.iter()
                .zip(gb)
                .map(|(&x, &y)| (1.0 - t) * x + t * y)
                .collect(),
        ),
        _ => GlobalPlan::PerPixel(mix(&resize(&a.global_field()), &resize(&b.global_field()))),
    };
    let mut spec = a.spec;
    spec.coords = a.spec.coords.for_image(target.0, target.1);
    let mut out = LatentImage {
        spec,
        height: h,
        width: w,
        edited: matches!(global, GlobalPlan::PerPixel(_)),
        global,
        local,
        coords: None,
    };
    out.attach_coordinates(fp, &layout.placement)?;
    Ok((out, target))
}

/// Coordinate grid for the pixels of `window`, evaluated at the window's
/// full-image pixel positions and resampled to `target_h × target_w`.
pub fn make_coordinate_grid(
    spec: &CoordinateSpec,
    window: &CropWindow,
    target_h: usize,
    target_w: usize,
) -> Grid {
    let ys: Vec<f64> = (0..window.height).map(|i| (window.y + i as i64) as f64).collect();
    let xs: Vec<f64> = (0..window.width).map(|j| (window.x + j as i64) as f64).collect();
    resample_grid(&spec.grid_at(&ys, &xs), target_h, target_w)
}

/// Samples the dense grid of a latent at the pixels of one generator stage.
pub(crate) fn stage_coordinates(
    coords: &Grid,
    fp: &FootprintMap,
    stage: usize,
    latent_h: usize,
    latent_w: usize,
) -> Result<Grid> {
    let ys = fp.stage_positions(stage, latent_h)?;
    let xs = fp.stage_positions(stage, latent_w)?;
    Ok(resample_grid_at(coords, &ys, &xs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fp() -> FootprintMap {
        FootprintMap::new(&NetworkConfig::reference_generator(20, 2).layers).unwrap()
    }

    #[test]
    fn linear_corners_and_center() {
        let spec = CoordinateSpec::linear(128, 128);
        let w = CropWindow::new(0, 0, 128, 128, 0);
        let g = make_coordinate_grid(&spec, &w, 128, 128);
        assert_eq!(g.values()[[0, 0, 0]], -1.0);
        assert_eq!(g.values()[[1, 0, 0]], -1.0);
        assert_eq!(g.values()[[0, 127, 127]], 1.0);
        assert_eq!(g.values()[[1, 127, 127]], 1.0);

        let spec = CoordinateSpec::linear(9, 9);
        let g = make_coordinate_grid(&spec, &CropWindow::new(0, 0, 9, 9, 0), 9, 9);
        assert_eq!(g.values()[[0, 4, 4]], 0.0);
        assert_eq!(g.values()[[1, 4, 4]], 0.0);
    }

    #[test]
    fn periodic_at_zero_phase() {
        let spec = CoordinateSpec::periodic(CoordinateMode::PeriodicX, 9, 9, 4.0);
        let mut out = [0.0; 3];
        // World x = 0 at the center column.
        spec.encode(4.0, 0.0, &mut out);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn sampled_latent_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = LatentSpec::default();
        let z = sample_latent(&spec, 10, 10, &mut rng);
        assert_eq!(z.value_field().dim().0, 18);
        assert!(z.global_spread().iter().all(|&d| d == 0.0));
        assert_eq!(spec.input_channels(), 20);
    }

    #[test]
    fn crop_whole_field_without_margin() {
        // Identity stack: every latent pixel is its own output pixel.
        let id = FootprintMap::new(&[crate::geometry::LayerSpec::transposed(5, 3, 1, 1, 0)])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = LatentSpec {
            global_channels: 2,
            local_channels: 1,
            coords: CoordinateSpec::linear(6, 6),
        };
        let field = sample_latent(&spec, 6, 6, &mut rng)
            .with_coordinates(&id, &Placement::at(0.0, 0.0))
            .unwrap();
        let w = CropWindow::new(0, 0, 6, 6, 0);
        let crop = crop_with_noise_padding(&field, &w, &id, &mut rng).unwrap();
        assert_eq!(crop, field);
    }

    #[test]
    fn margin_guard() {
        let fp = fp();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field = sample_latent(&LatentSpec::default(), 12, 12, &mut rng);
        let w = CropWindow::new(15, 0, 64, 64, 1);
        assert!(matches!(
            crop_with_noise_padding(&field, &w, &fp, &mut rng),
            Err(Error::MarginTooSmall { .. })
        ));
        let ok = CropWindow::new(15, 0, 64, 64, fp.margin());
        assert!(crop_with_noise_padding(&field, &ok, &fp, &mut rng).is_ok());
    }

    #[test]
    fn tile_examples() {
        let fp = fp();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut spec = LatentSpec::default();
        spec.coords = CoordinateSpec::periodic(CoordinateMode::PeriodicX, 128, 128, 64.0);
        let z = sample_latent(&spec, 6, 12, &mut rng);
        let t = tile_periodic(&z, 4, TileAxes::X, &fp).unwrap();
        for j in 0..8 {
            assert_eq!(
                t.local.slice(s![.., .., j]),
                t.local.slice(s![.., .., j + 4])
            );
        }
        assert!(matches!(
            tile_periodic(&z, 3, TileAxes::X, &fp),
            Err(Error::PeriodMismatch(_))
        ));
        let z4 = sample_latent(&spec, 6, 4, &mut rng);
        assert_eq!(tile_periodic(&z4, 4, TileAxes::X, &fp).unwrap(), z4);
    }

    #[test]
    fn transplant_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = LatentSpec::default();
        let a = sample_latent(&spec, 6, 6, &mut rng);
        let b = sample_latent(&spec, 6, 6, &mut rng);
        let all = LatentRect { x: 0, y: 0, width: 6, height: 6 };
        let none = LatentRect { x: 2, y: 2, width: 0, height: 0 };
        assert_eq!(transplant(&b, &a, all, ChannelSet::Both).unwrap(), a);
        assert_eq!(transplant(&b, &a, none, ChannelSet::Both).unwrap(), b);

        let left = LatentRect { x: 0, y: 0, width: 3, height: 6 };
        let mixed = transplant(&b, &a, left, ChannelSet::Global).unwrap();
        assert!(mixed.edited);
        let g = mixed.global_field();
        let (ga, gb) = (a.global_field(), b.global_field());
        assert_eq!(g.slice(s![.., .., ..3]), ga.slice(s![.., .., ..3]));
        assert_eq!(g.slice(s![.., .., 3..]), gb.slice(s![.., .., 3..]));
        assert_eq!(mixed.local, b.local);

        let bad = LatentRect { x: 4, y: 0, width: 3, height: 6 };
        assert!(matches!(
            transplant(&b, &a, bad, ChannelSet::Local),
            Err(Error::RegionOutOfBounds { .. })
        ));
    }

    #[test]
    fn interpolation_midpoint_size() {
        let fp = fp();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = LatentSpec::default();
        let la = image_layout(&fp, 128, 192).unwrap();
        let lb = image_layout(&fp, 160, 160).unwrap();
        let a = sample_latent(&spec, la.latent_h, la.latent_w, &mut rng);
        let b = sample_latent(&spec, lb.latent_h, lb.latent_w, &mut rng);
        let (_, size) = interpolate_latents(&a, &b, 0.5, (128, 192), (160, 160), &fp).unwrap();
        assert_eq!(size, (144, 176));
    }
}
