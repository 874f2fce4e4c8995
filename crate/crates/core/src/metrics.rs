//! Desk-scale quality measures: a sliced transport distance between patch
//! distributions, and wrap-around seam discrepancies of periodic outputs.

use std::fmt;

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Side and stride of the square patches compared by
/// [`patch_statistics_distance`].
pub const PATCH_SIZE: usize = 8;
pub const PATCH_STRIDE: usize = 4;

/// Flattened `size × size` patches (rows) taken every `stride` pixels.
pub fn extract_patches(images: &[Array3<f64>], size: usize, stride: usize) -> Result<Array2<f64>> {
    let first = images.first().ok_or(Error::EmptySet)?;
    let (c, h, w) = first.dim();
    if size == 0 || stride == 0 || size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "patch {size} (stride {stride}) does not fit {h}x{w} crops"
        )));
    }
    let per_axis = |n: usize| (n - size) / stride + 1;
    let per_image = per_axis(h) * per_axis(w);
    let mut out = Array2::zeros((images.len() * per_image, c * size * size));
    let mut row = 0;
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch("crops in a set must share a size".into()));
        }
        for y in (0..=h - size).step_by(stride) {
            for x in (0..=w - size).step_by(stride) {
                let patch = img.slice(s![.., y..y + size, x..x + size]);
                out.row_mut(row).iter_mut().zip(patch.iter()).for_each(|(o, &v)| *o = v);
                row += 1;
            }
        }
    }
    Ok(out)
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions
/// (sorted inputs), by integrating the difference of quantile functions.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / na as f64;
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        total += (next - t) * (a[i] - b[j]).abs();
        t = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Unit directions drawn from `seed`.
pub fn random_directions(count: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((count, dim));
    for mut row in out.rows_mut() {
        loop {
            row.iter_mut().for_each(|v: &mut f64| *v = StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
                break;
            }
        }
    }
    out
}

/// Sliced transport distance between two patch sets (rows), averaged over
/// the given directions.
pub fn sliced_distance(a: &Array2<f64>, b: &Array2<f64>, directions: &Array2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    if a.ncols() != b.ncols() || a.ncols() != directions.ncols() {
        return Err(Error::ShapeMismatch("patch dimensions differ".into()));
    }
    let pa = a.dot(&directions.t());
    let pb = b.dot(&directions.t());
    let mut total = 0.0;
    for k in 0..directions.nrows() {
        let mut xa: Vec<f64> = pa.column(k).to_vec();
        let mut xb: Vec<f64> = pb.column(k).to_vec();
        xa.sort_by(f64::total_cmp);
        xb.sort_by(f64::total_cmp);
        total += wasserstein_1d_sorted(&xa, &xb);
    }
    Ok(total / directions.nrows() as f64)
}

/// Sliced 1-D transport distance between the 8×8 patch distributions of two
/// crop sets, over `projections` random directions drawn from `seed`.
pub fn patch_statistics_distance(
    real: &[Array3<f64>],
    generated: &[Array3<f64>],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::EmptySet);
    }
    if real[0].dim() != generated[0].dim() {
        return Err(Error::ShapeMismatch(format!(
            "real crops {:?} and generated crops {:?} differ in size",
            real[0].dim(),
            generated[0].dim()
        )));
    }
    if projections == 0 {
        return Err(Error::InvalidArgument("at least one projection is needed".into()));
    }
    let (_, h, w) = real[0].dim();
    let size = PATCH_SIZE.min(h).min(w);
    let a = extract_patches(real, size, PATCH_STRIDE)?;
    let b = extract_patches(generated, size, PATCH_STRIDE)?;
    let directions = random_directions(projections, a.ncols(), seed);
    sliced_distance(&a, &b, &directions)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSeam {
    pub max: f64,
    pub mean: f64,
}

/// Wrap-around discrepancy of a periodic image: pixels one period apart
/// are compared over the whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct SeamReport {
    /// Period in pixels.
    pub period: usize,
    pub x: Option<AxisSeam>,
    pub y: Option<AxisSeam>,
    pub tolerance: f64,
    pub pass: bool,
}

impl SeamReport {
    pub fn max_discrepancy(&self) -> f64 {
        [self.x, self.y].iter().flatten().map(|a| a.max).fold(0.0, f64::max)
    }
}

impl fmt::Display for SeamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "period={}", self.period)?;
        for (name, axis) in [("x", self.x), ("y", self.y)] {
            if let Some(a) = axis {
                writeln!(f, "{name}.max={:.6e}", a.max)?;
                writeln!(f, "{name}.mean={:.6e}", a.mean)?;
            }
        }
        writeln!(f, "tolerance={}", self.tolerance)?;
        writeln!(f, "pass={}", self.pass)
    }
}

fn axis_seam(img: &Array3<f64>, period: usize, along_x: bool) -> Result<AxisSeam> {
    let (_, h, w) = img.dim();
    let extent = if along_x { w } else { h };
    if period == 0 || period >= extent {
        return Err(Error::PeriodMismatch(format!(
            "period {period} needs an image longer than one period (extent {extent})"
        )));
    }
    let diff = if along_x {
        &img.slice(s![.., .., period..]) - &img.slice(s![.., .., ..w - period])
    } else {
        &img.slice(s![.., period.., ..]) - &img.slice(s![.., ..h - period, ..])
    };
    let abs: Array3<f64> = diff.mapv(f64::abs);
    Ok(AxisSeam {
        max: abs.iter().cloned().fold(0.0, f64::max),
        mean: abs.mean().unwrap_or(0.0),
    })
}

/// Seam discrepancies along x, and along y when `both_axes`.
pub fn seam_report(img: &Array3<f64>, period: usize, both_axes: bool, tolerance: f64) -> Result<SeamReport> {
    let x = Some(axis_seam(img, period, true)?);
    let y = if both_axes { Some(axis_seam(img, period, false)?) } else { None };
    let mut report = SeamReport {
        period,
        x,
        y,
        tolerance,
        pass: false,
    };
    report.pass = report.max_discrepancy() < tolerance;
    Ok(report)
}
