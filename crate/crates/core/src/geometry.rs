//! Spatial arithmetic of fully convolutional stacks.
//!
//! Everything here is a pure function of layer hyper-parameters: output
//! sizes, the latent size needed for a target resolution, the receptive
//! footprint of every output pixel, the affine maps placing each layer's
//! pixels in output coordinates, and bilinear grid resampling.

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// One convolution (or transposed convolution) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl LayerSpec {
    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            transposed: true,
        }
    }

    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            transposed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidLayer(format!(
                "kernel and stride must be at least 1 (got kernel {}, stride {})",
                self.kernel, self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidLayer(format!(
                "channel counts must be at least 1 (got {} -> {})",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Output size as a signed quantity, before the positivity check.
    fn raw_output(&self, n: usize) -> i64 {
        let (n, k, s, p) = (
            n as i64,
            self.kernel as i64,
            self.stride as i64,
            self.padding as i64,
        );
        if self.transposed {
            (n - 1) * s - 2 * p + k
        } else {
            let span = n + 2 * p - k;
            if span < 0 {
                0
            } else {
                span / s + 1
            }
        }
    }
}

/// Spatial output size of one layer. `layer_index` only labels errors.
fn checked_output(n: usize, layer: &LayerSpec, layer_index: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::NonPositiveOutput {
            layer: layer_index,
            input: n,
        });
    }
    let out = layer.raw_output(n);
    if out < 1 {
        return Err(Error::NonPositiveOutput {
            layer: layer_index,
            input: n,
        });
    }
    Ok(out as usize)
}

/// Output size of a single layer for input size `n`.
///
/// Transposed layers follow `(n-1)·stride − 2·padding + kernel`, ordinary
/// ones `floor((n + 2·padding − kernel)/stride) + 1`.
pub fn layer_output_size(n: usize, layer: &LayerSpec) -> Result<usize> {
    checked_output(n, layer, 1)
}

/// Composition of [`layer_output_size`] over a stack. Errors name the
/// offending layer (1-based).
pub fn stack_output_size(n: usize, layers: &[LayerSpec]) -> Result<usize> {
    stack_sizes(n, layers).map(|sizes| *sizes.last().unwrap())
}

/// Spatial size at every stage: `sizes[0] = n`, `sizes[l]` is the output of
/// layer `l` (1-based).
pub fn stack_sizes(n: usize, layers: &[LayerSpec]) -> Result<Vec<usize>> {
    let mut sizes = Vec::with_capacity(layers.len() + 1);
    sizes.push(n);
    let mut cur = n;
    for (i, layer) in layers.iter().enumerate() {
        cur = checked_output(cur, layer, i + 1)?;
        sizes.push(cur);
    }
    Ok(sizes)
}

/// Smallest latent size whose raw output covers `target`, and the offset of
/// the centered `target`-sized window inside that raw output.
pub fn latent_size_for_target(target: usize, layers: &[LayerSpec]) -> Result<(usize, usize)> {
    if target == 0 {
        return Err(Error::InvalidArgument("target size must be at least 1".into()));
    }
    // Output size grows at least linearly in n for every stack we accept, so
    // a bound of target + max kernel is generous.
    let bound = target + layers.iter().map(|l| l.kernel).sum::<usize>() + 8;
    for n in 1..=bound {
        if let Ok(out) = stack_output_size(n, layers) {
            if out >= target {
                return Ok((n, (out - target) / 2));
            }
        }
    }
    Err(Error::InvalidArgument(format!(
        "no latent size up to {bound} reaches {target} output pixels"
    )))
}

/// Affine map `i ↦ scale·i + offset` from a layer's pixel index to the
/// output pixel coordinate at the center of its footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub scale: f64,
    pub offset: f64,
}

impl AffineMap {
    pub fn apply(&self, i: f64) -> f64 {
        self.scale * i + self.offset
    }

    /// `self` followed by `outer`.
    pub fn then(&self, outer: &AffineMap) -> AffineMap {
        AffineMap {
            scale: outer.scale * self.scale,
            offset: outer.scale * self.offset + outer.offset,
        }
    }
}

/// Receptive footprint of a transposed-convolution (generator) stack.
///
/// `maps[l]` places pixels of stage `l` (0 = latent, `L` = raw output) in
/// raw-output coordinates. Latent intervals per output pixel depend on the
/// latent size and are produced by [`FootprintMap::intervals`].
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintMap {
    layers: Vec<LayerSpec>,
    maps: Vec<AffineMap>,
}

/// Builds the footprint map of a generator stack.
pub fn receptive_footprint(layers: &[LayerSpec]) -> Result<FootprintMap> {
    FootprintMap::new(layers)
}

impl FootprintMap {
    pub fn new(layers: &[LayerSpec]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidLayer("empty layer stack".into()));
        }
        for layer in layers {
            layer.validate()?;
            if !layer.transposed {
                return Err(Error::InvalidLayer(
                    "footprints are defined for transposed-convolution stacks".into(),
                ));
            }
            if layer.kernel < layer.stride {
                return Err(Error::InvalidLayer(format!(
                    "kernel {} below stride {} leaves output pixels without input",
                    layer.kernel, layer.stride
                )));
            }
        }
        let mut maps = vec![
            AffineMap {
                scale: 1.0,
                offset: 0.0
            };
            layers.len() + 1
        ];
        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            // Input pixel i of a transposed layer touches outputs
            // [i·s − p, i·s − p + k − 1]; its center moves to the next stage.
            let local = AffineMap {
                scale: layer.stride as f64,
                offset: -(layer.padding as f64) + (layer.kernel as f64 - 1.0) / 2.0,
            };
            maps[l] = local.then(&maps[l + 1]);
        }
        Ok(FootprintMap {
            layers: layers.to_vec(),
            maps,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-stage affine maps into raw-output coordinates.
    pub fn maps(&self) -> &[AffineMap] {
        &self.maps
    }

    /// Output pixels per latent pixel.
    pub fn scale(&self) -> f64 {
        self.maps[0].scale
    }

    /// Integer scale factor; the generator stacks used here always have one.
    pub fn integer_scale(&self) -> usize {
        self.scale().round() as usize
    }

    /// Raw-output coordinate of latent pixel 0's footprint center.
    pub fn latent_offset(&self) -> f64 {
        self.maps[0].offset
    }

    pub fn output_size(&self, n: usize) -> Result<usize> {
        stack_output_size(n, &self.layers)
    }

    /// Inclusive latent interval influencing each raw output pixel, for a
    /// latent of size `n` (one axis; 2-D footprints are products).
    pub fn intervals(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        let sizes = stack_sizes(n, &self.layers)?;
        let out = *sizes.last().unwrap();
        let mut result = Vec::with_capacity(out);
        for j in 0..out as i64 {
            let (mut lo, mut hi) = (j, j);
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let (k, s, p) = (
                    layer.kernel as i64,
                    layer.stride as i64,
                    layer.padding as i64,
                );
                let in_max = sizes[l] as i64 - 1;
                lo = div_ceil(lo + p - k + 1, s).max(0);
                hi = div_floor(hi + p, s).min(in_max);
                debug_assert!(lo <= hi);
            }
            result.push((lo as usize, hi as usize));
        }
        Ok(result)
    }

    /// Latent pixel whose footprint-center cell contains raw output pixel
    /// `raw` (ties round up).
    pub fn owner(&self, raw: f64) -> i64 {
        ((raw - self.latent_offset()) / self.scale() + 0.5).floor() as i64
    }

    /// Latent margin: the largest distance, in latent pixels, between an
    /// output pixel's owner and the far end of its footprint. A window whose
    /// owning latent pixels are padded by this many latent pixels on every
    /// side is fully covered by the raw output.
    pub fn margin(&self) -> usize {
        // Interior pixels of a latent large enough that clipping never binds.
        let period = self.integer_scale().max(1);
        let n = 4 * self.layers.iter().map(|l| l.kernel).sum::<usize>().max(1) + 8;
        let intervals = match self.intervals(n) {
            Ok(iv) => iv,
            Err(_) => return 0,
        };
        let mid = intervals.len() / 2;
        let mut margin = 0i64;
        for j in mid..(mid + period).min(intervals.len()) {
            let owner = self.owner(j as f64);
            let (lo, hi) = intervals[j];
            margin = margin.max(owner - lo as i64).max(hi as i64 - owner);
        }
        margin.max(0) as usize
    }

    /// Raw-output extent of the dense coordinate grid that accompanies a
    /// latent of size `n`: one sample per raw pixel, spanning the footprint
    /// centers of every stage. Returns (raw coordinate of sample 0, length).
    pub fn dense_extent(&self, n: usize) -> Result<(f64, usize)> {
        let sizes = stack_sizes(n, &self.layers)?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (map, &size) in self.maps.iter().zip(&sizes) {
            lo = lo.min(map.apply(0.0));
            hi = hi.max(map.apply(size as f64 - 1.0));
        }
        let lo = lo.floor();
        let len = (hi.ceil() - lo) as usize + 1;
        Ok((lo, len))
    }

    /// Positions, in dense-grid sample units, of the pixels of stage `stage`
    /// for a latent of size `n`.
    pub fn stage_positions(&self, stage: usize, n: usize) -> Result<Vec<f64>> {
        let sizes = stack_sizes(n, &self.layers)?;
        let (origin, _) = self.dense_extent(n)?;
        let map = self.maps[stage];
        Ok((0..sizes[stage])
            .map(|i| map.apply(i as f64) - origin)
            .collect())
    }
}

fn div_floor(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

fn div_ceil(a: i64, b: i64) -> i64 {
    -(-a).div_euclid(b)
}

/// A multi-channel spatial array of reals, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    values: Array3<f64>,
}

impl Grid {
    pub fn new(values: Array3<f64>) -> Self {
        Grid { values }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Grid {
            values: Array3::zeros((channels, height, width)),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Bilinear resize with endpoint alignment: target pixel `i` samples source
/// position `i·(S−1)/(T−1)`; a 1-pixel target samples the source center.
pub fn resample_grid(g: &Grid, target_h: usize, target_w: usize) -> Grid {
    if g.height() == target_h && g.width() == target_w {
        return g.clone();
    }
    let ys = aligned_positions(g.height(), target_h);
    let xs = aligned_positions(g.width(), target_w);
    resample_grid_at(g, &ys, &xs)
}

fn aligned_positions(src: usize, dst: usize) -> Vec<f64> {
    if dst == 1 {
        return vec![(src as f64 - 1.0) / 2.0];
    }
    let step = (src as f64 - 1.0) / (dst as f64 - 1.0);
    (0..dst).map(|i| i as f64 * step).collect()
}

/// Interpolation weights for sampling a 1-D axis of length `len` at `pos`.
/// Positions beyond either end extrapolate along the edge cell.
fn linear_weights(len: usize, pos: f64) -> (usize, usize, f64) {
    if len == 1 {
        return (0, 0, 0.0);
    }
    let cell = (pos.floor() as i64).clamp(0, len as i64 - 2) as usize;
    (cell, cell + 1, pos - cell as f64)
}

/// Bilinear sampling of `g` at arbitrary fractional row/column positions.
/// Integer positions return the stored samples exactly.
pub fn resample_grid_at(g: &Grid, ys: &[f64], xs: &[f64]) -> Grid {
    let (c, h, w) = g.values.dim();
    let xw: Vec<_> = xs.iter().map(|&x| linear_weights(w, x)).collect();
    let mut out = Array3::zeros((c, ys.len(), xs.len()));
    for (oy, &y) in ys.iter().enumerate() {
        let (y0, y1, ty) = linear_weights(h, y);
        for ch in 0..c {
            let src = g.values.index_axis(ndarray::Axis(0), ch);
            for (ox, &(x0, x1, tx)) in xw.iter().enumerate() {
                let top = lerp(src[[y0, x0]], src[[y0, x1]], tx);
                let bottom = lerp(src[[y1, x0]], src[[y1, x1]], tx);
                out[[ch, oy, ox]] = lerp(top, bottom, ty);
            }
        }
    }
    Grid { values: out }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        (1.0 - t) * a + t * b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkConfig;

    fn reference_stack() -> Vec<LayerSpec> {
        NetworkConfig::reference_generator(20, 2).layers
    }

    #[test]
    fn transposed_layer_sizes() {
        let l = LayerSpec::transposed(1, 1, 4, 2, 3);
        assert_eq!(layer_output_size(10, &l).unwrap(), 16);
        assert_eq!(layer_output_size(16, &l).unwrap(), 28);
        let id = LayerSpec::transposed(1, 1, 1, 1, 0);
        for n in 1..20 {
            assert_eq!(layer_output_size(n, &id).unwrap(), n);
        }
    }

    #[test]
    fn conv_layer_sizes() {
        let l = LayerSpec::conv(3, 8, 4, 2, 1);
        assert_eq!(layer_output_size(64, &l).unwrap(), 32);
        let last = LayerSpec::conv(8, 1, 4, 1, 0);
        assert_eq!(layer_output_size(4, &last).unwrap(), 1);
        assert!(matches!(
            layer_output_size(3, &last),
            Err(Error::NonPositiveOutput { .. })
        ));
    }

    #[test]
    fn generator_composition() {
        let layers = reference_stack();
        assert_eq!(
            stack_sizes(10, &layers).unwrap(),
            vec![10, 16, 28, 52, 100, 97]
        );
        assert_eq!(stack_output_size(12, &layers).unwrap(), 129);
        match stack_output_size(3, &layers) {
            Err(Error::NonPositiveOutput { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("expected failure at layer 2, got {other:?}"),
        }
    }

    #[test]
    fn latent_solver_examples() {
        let layers = reference_stack();
        assert_eq!(latent_size_for_target(64, &layers).unwrap(), (8, 0));
        assert_eq!(latent_size_for_target(97, &layers).unwrap(), (10, 0));
        assert_eq!(latent_size_for_target(90, &layers).unwrap(), (10, 3));
        assert_eq!(latent_size_for_target(128, &layers).unwrap(), (12, 0));
        assert_eq!(latent_size_for_target(1, &layers).unwrap(), (4, 0));
    }

    #[test]
    fn identity_footprint() {
        let fp = FootprintMap::new(&[LayerSpec::transposed(1, 1, 1, 1, 0)]).unwrap();
        let iv = fp.intervals(7).unwrap();
        for (j, &(lo, hi)) in iv.iter().enumerate() {
            assert_eq!((lo, hi), (j, j));
        }
        assert_eq!(fp.margin(), 0);
    }

    #[test]
    fn reference_stack_affine_maps() {
        let fp = FootprintMap::new(&reference_stack()).unwrap();
        let offsets: Vec<_> = fp.maps().iter().map(|m| (m.scale, m.offset)).collect();
        assert_eq!(
            offsets,
            vec![
                (16.0, -24.0),
                (8.0, -12.0),
                (4.0, -6.0),
                (2.0, -3.0),
                (1.0, -1.5),
                (1.0, 0.0)
            ]
        );
        assert_eq!(fp.margin(), 2);
        assert_eq!(fp.dense_extent(10).unwrap(), (-24.0, 145));
    }

    #[test]
    fn resample_examples() {
        let g = Grid::new(Array3::from_shape_vec((1, 1, 2), vec![-1.0, 1.0]).unwrap());
        let r = resample_grid(&g, 1, 3);
        assert_eq!(r.values().as_slice().unwrap(), &[-1.0, 0.0, 1.0]);
        let c = Grid::new(Array3::from_elem((2, 3, 5), 0.25));
        let r = resample_grid(&c, 7, 2);
        assert!(r.values().iter().all(|&v| v == 0.25));
        assert_eq!(r.channels(), 2);
    }
}
