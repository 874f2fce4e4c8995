//! Fully convolutional generator and spectrally normalized discriminator.
//!
//! The generator is a stack of transposed convolutions. Before every layer
//! the latent's coordinate grid is resampled to that layer's resolution and
//! concatenated to the features, so each layer knows where in the image it
//! is working. The discriminator receives coordinates with its input only.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{stack_sizes, FootprintMap, Grid, LayerSpec};
use crate::latent::{stage_coordinates, LatentImage, LatentSpec};
use crate::ops::{self, Batch, NormCache};

/// Leaky-rectifier slope of the discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Running-statistics momentum of generator normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Feature widths of the reference generator.
pub const REFERENCE_GENERATOR_WIDTHS: [usize; 4] = [1024, 512, 256, 128];
/// Feature widths of the reference discriminator.
pub const REFERENCE_DISCRIMINATOR_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; spectral vectors are advanced by the trainer.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Layer plan of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// `in_channels` includes injected coordinate channels.
    pub layers: Vec<LayerSpec>,
    pub coord_channels: usize,
    /// Generator: coordinates before every layer. Discriminator: input only.
    pub coords_every_layer: bool,
    pub batch_norm: Vec<bool>,
    pub spectral_norm: Vec<bool>,
}

impl NetworkConfig {
    /// Generator with `(4,2,3)` transposed layers for every width and a final
    /// `(4,1,3)` layer to RGB.
    pub fn generator_with(input_channels: usize, coord_channels: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len() + 1);
        let mut cin = input_channels;
        for &w in widths {
            layers.push(LayerSpec::transposed(cin, w, 4, 2, 3));
            cin = w + coord_channels;
        }
        layers.push(LayerSpec::transposed(cin, 3, 4, 1, 3));
        let n = layers.len();
        NetworkConfig {
            layers,
            coord_channels,
            coords_every_layer: true,
            batch_norm: (0..n).map(|i| i + 1 < n).collect(),
            spectral_norm: vec![false; n],
        }
    }

    pub fn generator(latent: &LatentSpec, widths: &[usize]) -> Self {
        Self::generator_with(latent.input_channels(), latent.coords.channels(), widths)
    }

    pub fn reference_generator(input_channels: usize, coord_channels: usize) -> Self {
        Self::generator_with(input_channels, coord_channels, &REFERENCE_GENERATOR_WIDTHS)
    }

    /// `(4,2,1)` strided convolutions for every width, then `(4,1,0)` to one
    /// logit. Spectral normalization (optional) covers all but the last layer.
    pub fn discriminator(coord_channels: usize, widths: &[usize], spectral: bool) -> Self {
        let mut layers = Vec::with_capacity(widths.len() + 1);
        let mut cin = 3 + coord_channels;
        for &w in widths {
            layers.push(LayerSpec::conv(cin, w, 4, 2, 1));
            cin = w;
        }
        layers.push(LayerSpec::conv(cin, 1, 4, 1, 0));
        let n = layers.len();
        NetworkConfig {
            layers,
            coord_channels,
            coords_every_layer: false,
            batch_norm: vec![false; n],
            spectral_norm: (0..n).map(|i| spectral && i + 1 < n).collect(),
        }
    }

    /// Output channels of every layer.
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_channels).collect()
    }

    pub fn has_spectral_norm(&self) -> bool {
        self.spectral_norm.iter().any(|&s| s)
    }

    fn validate_generator(&self, latent: &LatentSpec) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ConfigMismatch("generator has no layers".into()));
        }
        if self.batch_norm.len() != self.layers.len() || self.spectral_norm.len() != self.layers.len() {
            return Err(Error::ConfigMismatch("per-layer flags do not match the layer count".into()));
        }
        if self.coord_channels != latent.coords.channels() {
            return Err(Error::ConfigMismatch(format!(
                "{} coordinate channels configured, latent provides {}",
                self.coord_channels,
                latent.coords.channels()
            )));
        }
        let mut expected = latent.input_channels();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if !layer.transposed {
                return Err(Error::ConfigMismatch(format!("generator layer {} is not transposed", i + 1)));
            }
            if layer.in_channels != expected {
                return Err(Error::ConfigMismatch(format!(
                    "generator layer {} expects {} input channels, channel plan gives {}",
                    i + 1,
                    layer.in_channels,
                    expected
                )));
            }
            expected = layer.out_channels + self.coord_channels;
        }
        if self.layers.last().unwrap().out_channels != 3 {
            return Err(Error::ConfigMismatch("generator must end in 3 color channels".into()));
        }
        if *self.batch_norm.last().unwrap() {
            return Err(Error::ConfigMismatch("the final generator layer is not normalized".into()));
        }
        Ok(())
    }

    fn validate_discriminator(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ConfigMismatch("discriminator has no layers".into()));
        }
        if self.batch_norm.len() != self.layers.len() || self.spectral_norm.len() != self.layers.len() {
            return Err(Error::ConfigMismatch("per-layer flags do not match the layer count".into()));
        }
        let mut expected = 3 + self.coord_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.transposed {
                return Err(Error::ConfigMismatch(format!("discriminator layer {} is transposed", i + 1)));
            }
            if layer.in_channels != expected {
                return Err(Error::ConfigMismatch(format!(
                    "discriminator layer {} expects {} input channels, channel plan gives {}",
                    i + 1,
                    layer.in_channels,
                    expected
                )));
            }
            expected = layer.out_channels;
        }
        if expected != 1 {
            return Err(Error::ConfigMismatch("discriminator must end in one channel".into()));
        }
        Ok(())
    }
}

/// Weight initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with the given deviation.
    Normal(f64),
    /// Zero-mean normal with deviation `gain / sqrt(effective fan-in)`.
    FanIn(f64),
}

impl Default for Init {
    fn default() -> Self {
        Init::Normal(0.02)
    }
}

impl Init {
    fn std(&self, layer: &LayerSpec) -> f64 {
        match *self {
            Init::Normal(s) => s,
            Init::FanIn(gain) => {
                let taps = (layer.kernel * layer.kernel) as f64;
                let fan_in = if layer.transposed {
                    layer.in_channels as f64 * taps / (layer.stride * layer.stride) as f64
                } else {
                    layer.in_channels as f64 * taps
                };
                gain / fan_in.max(1.0).sqrt()
            }
        }
    }
}

fn normal_array<R: Rng + ?Sized>(shape: (usize, usize, usize, usize), std: f64, rng: &mut R) -> Array4<f64> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let data: Vec<f64> = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Array4::from_shape_vec(shape, data).unwrap()
}

fn unit_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

/// A generated RGB image, `(3, height, width)` with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub data: Array3<f64>,
}

impl GeneratedImage {
    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Window `(y, x, height, width)` of this image.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<GeneratedImage> {
        if y + height > self.height() || x + width > self.width() {
            return Err(Error::ShapeMismatch(format!(
                "crop {height}x{width}+{y}+{x} exceeds a {}x{} image",
                self.height(),
                self.width()
            )));
        }
        Ok(GeneratedImage {
            data: self.data.slice(s![.., y..y + height, x..x + width]).to_owned(),
        })
    }

    /// Crop of the centered `height × width` window.
    pub fn center_crop(&self, height: usize, width: usize) -> Result<GeneratedImage> {
        if height > self.height() || width > self.width() {
            return Err(Error::ShapeMismatch(format!(
                "center crop {height}x{width} exceeds a {}x{} image",
                self.height(),
                self.width()
            )));
        }
        self.crop((self.height() - height) / 2, (self.width() - width) / 2, height, width)
    }
}

/// Parameter access shared by the optimizer and checkpoints.
pub trait Parameters {
    /// Trainable tensors, in gradient order.
    fn parameters_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;
    /// Every persisted tensor (parameters and buffers) with its name.
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNormParams {
    fn new(c: usize) -> Self {
        BatchNormParams {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GenLayer {
    /// (Cin, Cout, k, k)
    weight: Array4<f64>,
    bias: Option<Array1<f64>>,
    norm: Option<BatchNormParams>,
}

/// Generator weights with their channel plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: NetworkConfig,
    pub latent_spec: LatentSpec,
    footprint: FootprintMap,
    layers: Vec<GenLayer>,
}

/// Everything the generator backward pass needs.
#[derive(Debug, Clone)]
pub struct GeneratorTape {
    inputs: Vec<Batch>,
    norms: Vec<Option<NormCache>>,
    outputs: Vec<Batch>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(
        config: NetworkConfig,
        latent_spec: LatentSpec,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        latent_spec.validate()?;
        config.validate_generator(&latent_spec)?;
        let footprint = FootprintMap::new(&config.layers)?;
        let layers = config
            .layers
            .iter()
            .zip(&config.batch_norm)
            .map(|(l, &bn)| GenLayer {
                weight: normal_array((l.in_channels, l.out_channels, l.kernel, l.kernel), init.std(l), rng),
                bias: (!bn).then(|| Array1::zeros(l.out_channels)),
                norm: bn.then(|| BatchNormParams::new(l.out_channels)),
            })
            .collect();
        Ok(Generator {
            config,
            latent_spec,
            footprint,
            layers,
        })
    }

    pub fn footprint(&self) -> &FootprintMap {
        &self.footprint
    }

    pub fn output_size(&self, n: usize) -> Result<usize> {
        self.footprint.output_size(n)
    }

    /// Raw output for one latent.
    pub fn generate(&self, latent: &LatentImage, mode: Mode) -> Result<GeneratedImage> {
        let (out, _) = self.forward_impl(std::slice::from_ref(latent), mode, false)?;
        Ok(GeneratedImage {
            data: out.index_axis(Axis(1), 0).to_owned(),
        })
    }

    /// Raw outputs for a batch of equally sized latents, `(3, N, H, W)`.
    pub fn forward(&self, latents: &[LatentImage], mode: Mode) -> Result<(Batch, GeneratorTape)> {
        let (out, tape) = self.forward_impl(latents, mode, true)?;
        Ok((out, tape.unwrap()))
    }

    fn input_batch(&self, latents: &[LatentImage]) -> Result<(Batch, usize, usize)> {
        let first = latents
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty latent batch".into()))?;
        let (h, w) = (first.height, first.width);
        let spec = &self.latent_spec;
        let (_, dense_h) = self.footprint.dense_extent(h)?;
        let (_, dense_w) = self.footprint.dense_extent(w)?;
        let cin = spec.input_channels();
        let mut x = Batch::zeros((cin, latents.len(), h, w));
        for (n, z) in latents.iter().enumerate() {
            if z.height != h || z.width != w {
                return Err(Error::ShapeMismatch("latents in a batch must share a size".into()));
            }
            if z.spec.global_channels != spec.global_channels
                || z.spec.local_channels != spec.local_channels
                || z.spec.coords.mode != spec.coords.mode
            {
                return Err(Error::ShapeMismatch("latent channel layout differs from the generator's".into()));
            }
            let coords = z
                .coords
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("latent has no coordinate grid".into()))?;
            if coords.height() != dense_h || coords.width() != dense_w {
                return Err(Error::ShapeMismatch(format!(
                    "coordinate grid is {}x{}, a {h}x{w} latent needs {dense_h}x{dense_w}",
                    coords.height(),
                    coords.width()
                )));
            }
            let values = z.value_field();
            let vc = values.dim().0;
            x.slice_mut(s![..vc, n, .., ..]).assign(&values);
            let c0 = stage_coordinates(coords, &self.footprint, 0, h, w)?;
            x.slice_mut(s![vc.., n, .., ..]).assign(c0.values());
        }
        Ok((x, h, w))
    }

    fn stage_coords(&self, latents: &[LatentImage], stage: usize, h: usize, w: usize) -> Result<Batch> {
        let sh = stack_sizes(h, &self.config.layers)?[stage];
        let sw = stack_sizes(w, &self.config.layers)?[stage];
        let mut out = Batch::zeros((self.config.coord_channels, latents.len(), sh, sw));
        for (n, z) in latents.iter().enumerate() {
            let g = stage_coordinates(z.coords.as_ref().unwrap(), &self.footprint, stage, h, w)?;
            out.slice_mut(s![.., n, .., ..]).assign(g.values());
        }
        Ok(out)
    }

    fn forward_impl(
        &self,
        latents: &[LatentImage],
        mode: Mode,
        record: bool,
    ) -> Result<(Batch, Option<GeneratorTape>)> {
        let (mut x, h, w) = self.input_batch(latents)?;
        let hs = stack_sizes(h, &self.config.layers)?;
        let ws = stack_sizes(w, &self.config.layers)?;
        let mut tape = GeneratorTape {
            inputs: Vec::new(),
            norms: Vec::new(),
            outputs: Vec::new(),
        };
        let last = self.layers.len() - 1;
        for (l, (layer, spec)) in self.layers.iter().zip(&self.config.layers).enumerate() {
            if l > 0 && self.config.coords_every_layer {
                let coords = self.stage_coords(latents, l, h, w)?;
                x = ndarray::concatenate(Axis(0), &[x.view(), coords.view()]).unwrap();
            }
            let z = ops::conv_transpose_forward(
                &x,
                &layer.weight,
                layer.bias.as_ref(),
                spec.stride,
                spec.padding,
                (hs[l + 1], ws[l + 1]),
            );
            let (y, cache) = match &layer.norm {
                Some(bn) => {
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => Some((&bn.running_mean, &bn.running_var)),
                    };
                    let (mut y, cache) = ops::batch_norm_forward(&z, &bn.gamma, &bn.beta, running);
                    y.mapv_inplace(|v| v.max(0.0));
                    (y, Some(cache))
                }
                None if l == last => (z.mapv(f64::tanh), None),
                None => (z.mapv(|v| v.max(0.0)), None),
            };
            if record {
                tape.inputs.push(x);
                tape.norms.push(cache);
                tape.outputs.push(y.clone());
            }
            x = y;
        }
        Ok((x, record.then_some(tape)))
    }

    /// Parameter gradients for upstream gradient `d_out` on the raw output
    /// `(3, N, H, W)`, ordered like [`Parameters::parameters_mut`].
    pub fn backward(&self, tape: &GeneratorTape, d_out: &Batch) -> Vec<ArrayD<f64>> {
        let last = self.layers.len() - 1;
        let mut grads: Vec<Vec<ArrayD<f64>>> = vec![Vec::new(); self.layers.len()];
        let mut d = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let spec = &self.config.layers[l];
            let y = &tape.outputs[l];
            let mut layer_grads = Vec::new();
            let dz = match (&layer.norm, &tape.norms[l]) {
                (Some(bn), Some(cache)) => {
                    let mut dpost = d;
                    ndarray::Zip::from(&mut dpost).and(y).for_each(|g, &v| {
                        if v <= 0.0 {
                            *g = 0.0
                        }
                    });
                    let (dgamma, dbeta, dz) = ops::batch_norm_backward(&dpost, cache, &bn.gamma);
                    layer_grads.push(dgamma.into_dyn());
                    layer_grads.push(dbeta.into_dyn());
                    dz
                }
                _ => {
                    let mut dz = d;
                    if l == last {
                        ndarray::Zip::from(&mut dz).and(y).for_each(|g, &v| *g *= 1.0 - v * v);
                    } else {
                        ndarray::Zip::from(&mut dz).and(y).for_each(|g, &v| {
                            if v <= 0.0 {
                                *g = 0.0
                            }
                        });
                    }
                    dz
                }
            };
            let (dw, db, dx) =
                ops::conv_transpose_backward(&dz, &tape.inputs[l], &layer.weight, spec.stride, spec.padding);
            let mut ordered = vec![dw.into_dyn()];
            if layer.bias.is_some() {
                ordered.push(db.into_dyn());
            }
            ordered.extend(layer_grads);
            grads[l] = ordered;
            if l > 0 {
                let features = self.config.layers[l - 1].out_channels;
                d = dx.slice(s![..features, .., .., ..]).to_owned();
            } else {
                d = dx;
            }
        }
        grads.into_iter().flatten().collect()
    }

    /// Folds a training forward pass's batch statistics into the running
    /// estimates.
    pub fn update_running_stats(&mut self, tape: &GeneratorTape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.norms) {
            if let (Some(bn), Some(cache)) = (layer.norm.as_mut(), cache) {
                if !cache.batch_stats {
                    continue;
                }
                bn.running_mean *= 1.0 - BN_MOMENTUM;
                bn.running_mean.scaled_add(BN_MOMENTUM, &cache.mean);
                bn.running_var *= 1.0 - BN_MOMENTUM;
                bn.running_var.scaled_add(BN_MOMENTUM, &cache.var_unbiased);
            }
        }
    }

    pub fn layer_norm(&self, layer: usize) -> Option<&BatchNormParams> {
        self.layers.get(layer).and_then(|l| l.norm.as_ref())
    }

    pub fn layer_norm_mut(&mut self, layer: usize) -> Option<&mut BatchNormParams> {
        self.layers.get_mut(layer).and_then(|l| l.norm.as_mut())
    }
}

impl Parameters for Generator {
    fn parameters_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weight.view_mut().into_dyn());
            if let Some(b) = layer.bias.as_mut() {
                out.push(b.view_mut().into_dyn());
            }
            if let Some(bn) = layer.norm.as_mut() {
                out.push(bn.gamma.view_mut().into_dyn());
                out.push(bn.beta.view_mut().into_dyn());
            }
        }
        out
    }

    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("generator.layer{}", i + 1);
            out.push((format!("{p}.weight"), layer.weight.view().into_dyn()));
            if let Some(b) = &layer.bias {
                out.push((format!("{p}.bias"), b.view().into_dyn()));
            }
            if let Some(bn) = &layer.norm {
                out.push((format!("{p}.bn.gamma"), bn.gamma.view().into_dyn()));
                out.push((format!("{p}.bn.beta"), bn.beta.view().into_dyn()));
                out.push((format!("{p}.bn.running_mean"), bn.running_mean.view().into_dyn()));
                out.push((format!("{p}.bn.running_var"), bn.running_var.view().into_dyn()));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("generator.layer{}", i + 1);
            out.push((format!("{p}.weight"), layer.weight.view_mut().into_dyn()));
            if let Some(b) = layer.bias.as_mut() {
                out.push((format!("{p}.bias"), b.view_mut().into_dyn()));
            }
            if let Some(bn) = layer.norm.as_mut() {
                out.push((format!("{p}.bn.gamma"), bn.gamma.view_mut().into_dyn()));
                out.push((format!("{p}.bn.beta"), bn.beta.view_mut().into_dyn()));
                out.push((format!("{p}.bn.running_mean"), bn.running_mean.view_mut().into_dyn()));
                out.push((format!("{p}.bn.running_var"), bn.running_var.view_mut().into_dyn()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DiscLayer {
    /// (Cout, Cin, k, k)
    weight: Array4<f64>,
    bias: Array1<f64>,
    /// Persistent power-iteration vector of spectrally normalized layers.
    u: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: NetworkConfig,
    layers: Vec<DiscLayer>,
}

#[derive(Debug, Clone)]
struct SpectralCache {
    sigma: f64,
    u: Array1<f64>,
    v: Array1<f64>,
    normalized: Array4<f64>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorTape {
    cols: Vec<Array2<f64>>,
    in_hw: Vec<(usize, usize)>,
    pre: Vec<Batch>,
    spectral: Vec<Option<SpectralCache>>,
    out_hw: (usize, usize),
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, init: Init, rng: &mut R) -> Result<Self> {
        config.validate_discriminator()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (l, &sn) in config.layers.iter().zip(&config.spectral_norm) {
            let weight = normal_array((l.out_channels, l.in_channels, l.kernel, l.kernel), init.std(l), rng);
            let u = sn.then(|| unit_vector(l.out_channels, rng));
            layers.push(DiscLayer {
                weight,
                bias: Array1::zeros(l.out_channels),
                u,
            });
        }
        Ok(Discriminator { config, layers })
    }

    /// Input channels: RGB plus coordinates.
    pub fn input_channels(&self) -> usize {
        3 + self.config.coord_channels
    }

    /// Checks that an input of this size reduces to at least one logit.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hs = stack_sizes(h, &self.config.layers)?;
        let ws = stack_sizes(w, &self.config.layers)?;
        Ok((*hs.last().unwrap(), *ws.last().unwrap()))
    }

    fn weight_matrix(weight: &Array4<f64>) -> ArrayView2<'_, f64> {
        let (cout, cin, k, _) = weight.dim();
        weight.view().into_shape_with_order((cout, cin * k * k)).unwrap()
    }

    fn spectral_cache(weight: &Array4<f64>, u: &Array1<f64>) -> Result<SpectralCache> {
        let w2 = Self::weight_matrix(weight);
        let t = w2.t().dot(u);
        let sigma = t.dot(&t).sqrt();
        if !(sigma > 0.0) {
            return Err(Error::DegenerateMatrix);
        }
        Ok(SpectralCache {
            sigma,
            u: u.clone(),
            v: t / sigma,
            normalized: weight / sigma,
        })
    }

    /// One power-iteration step on every spectrally normalized layer.
    pub fn advance_spectral(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if let Some(u) = layer.u.as_mut() {
                let w2 = Self::weight_matrix(&layer.weight);
                let (_, next_u, _) = power_step(w2, u)?;
                *u = next_u;
            }
        }
        Ok(())
    }

    /// Spectral vectors of normalized layers (`None` for plain layers).
    pub fn spectral_vectors(&self) -> Vec<Option<&Array1<f64>>> {
        self.layers.iter().map(|l| l.u.as_ref()).collect()
    }

    /// Reshaped `(Cout, Cin·k·k)` kernels of every layer.
    pub fn weight_matrices(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(|l| Self::weight_matrix(&l.weight).to_owned()).collect()
    }

    /// Logits for `(3 + coords, N, H, W)` inputs. Spatial logit maps (from
    /// inputs larger than the design size) are averaged.
    pub fn forward(&self, x: &Batch) -> Result<(Array1<f64>, DiscriminatorTape)> {
        let (c, n, h, w) = x.dim();
        if c != self.input_channels() {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {} input channels, got {c}",
                self.input_channels()
            )));
        }
        let hs = stack_sizes(h, &self.config.layers)?;
        let ws = stack_sizes(w, &self.config.layers)?;
        let mut tape = DiscriminatorTape {
            cols: Vec::new(),
            in_hw: Vec::new(),
            pre: Vec::new(),
            spectral: Vec::new(),
            out_hw: (*hs.last().unwrap(), *ws.last().unwrap()),
        };
        let last = self.layers.len() - 1;
        let mut cur = x.clone();
        for (l, (layer, spec)) in self.layers.iter().zip(&self.config.layers).enumerate() {
            let cache = match &layer.u {
                Some(u) => Some(Self::spectral_cache(&layer.weight, u)?),
                None => None,
            };
            let weight = cache.as_ref().map(|c| &c.normalized).unwrap_or(&layer.weight);
            let (z, cols) = ops::conv2d_forward(
                &cur,
                weight,
                Some(&layer.bias),
                spec.stride,
                spec.padding,
                (hs[l + 1], ws[l + 1]),
            );
            tape.cols.push(cols);
            tape.in_hw.push((hs[l], ws[l]));
            tape.spectral.push(cache);
            cur = if l == last {
                z.clone()
            } else {
                z.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
            };
            tape.pre.push(z);
        }
        let (oh, ow) = tape.out_hw;
        let area = (oh * ow) as f64;
        let logits = (0..n)
            .map(|i| cur.slice(s![0, i, .., ..]).sum() / area)
            .collect();
        Ok((logits, tape))
    }

    /// Probabilities in the open interval (0, 1).
    pub fn discriminate(&self, images: &[GeneratedImage], coords: &[Grid]) -> Result<Vec<f64>> {
        let x = discriminator_input(images, coords, self.config.coord_channels)?;
        let (logits, _) = self.forward(&x)?;
        Ok(logits.iter().map(|&z| probability(z)).collect())
    }

    /// Parameter gradients and the gradient with respect to the input, for
    /// upstream gradients on the logits.
    pub fn backward(&self, tape: &DiscriminatorTape, d_logits: &Array1<f64>) -> (Vec<ArrayD<f64>>, Batch) {
        let n = d_logits.len();
        let (oh, ow) = tape.out_hw;
        let area = (oh * ow) as f64;
        let mut d = Batch::zeros((1, n, oh, ow));
        for i in 0..n {
            d.slice_mut(s![0, i, .., ..]).fill(d_logits[i] / area);
        }
        let last = self.layers.len() - 1;
        let mut grads: Vec<Vec<ArrayD<f64>>> = vec![Vec::new(); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let spec = &self.config.layers[l];
            if l != last {
                ndarray::Zip::from(&mut d).and(&tape.pre[l]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g *= LEAKY_SLOPE
                    }
                });
            }
            let cache = tape.spectral[l].as_ref();
            let weight = cache.map(|c| &c.normalized).unwrap_or(&layer.weight);
            let (dw_eff, db, dx) =
                ops::conv2d_backward(&d, &tape.cols[l], weight, spec.stride, spec.padding, tape.in_hw[l]);
            let dw = match cache {
                Some(c) => {
                    // W_sn = W/σ with ∂σ/∂W = u vᵀ.
                    let inner: f64 = dw_eff.iter().zip(c.normalized.iter()).map(|(a, b)| a * b).sum();
                    let mut dw = dw_eff / c.sigma;
                    let outer = outer(&c.u, &c.v);
                    let mut dw2 = dw.view_mut().into_shape_with_order(outer.dim()).unwrap();
                    dw2.scaled_add(-inner / c.sigma, &outer);
                    dw
                }
                None => dw_eff,
            };
            grads[l] = vec![dw.into_dyn(), db.into_dyn()];
            d = dx;
        }
        (grads.into_iter().flatten().collect(), d)
    }
}

impl Parameters for Discriminator {
    fn parameters_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weight.view_mut().into_dyn());
            out.push(layer.bias.view_mut().into_dyn());
        }
        out
    }

    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("discriminator.layer{}", i + 1);
            out.push((format!("{p}.weight"), layer.weight.view().into_dyn()));
            out.push((format!("{p}.bias"), layer.bias.view().into_dyn()));
            if let Some(u) = &layer.u {
                out.push((format!("{p}.spectral_u"), u.view().into_dyn()));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("discriminator.layer{}", i + 1);
            out.push((format!("{p}.weight"), layer.weight.view_mut().into_dyn()));
            out.push((format!("{p}.bias"), layer.bias.view_mut().into_dyn()));
            if let Some(u) = layer.u.as_mut() {
                out.push((format!("{p}.spectral_u"), u.view_mut().into_dyn()));
            }
        }
        out
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Sigmoid, kept strictly inside (0, 1).
pub fn probability(logit: f64) -> f64 {
    ops::sigmoid(logit).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Stacks images and their coordinate grids into a discriminator batch.
pub fn discriminator_input(images: &[GeneratedImage], coords: &[Grid], coord_channels: usize) -> Result<Batch> {
    if images.len() != coords.len() || images.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} images with {} coordinate grids",
            images.len(),
            coords.len()
        )));
    }
    let (h, w) = (images[0].height(), images[0].width());
    let mut x = Batch::zeros((3 + coord_channels, images.len(), h, w));
    for (i, (img, grid)) in images.iter().zip(coords).enumerate() {
        if img.height() != h || img.width() != w || img.data.dim().0 != 3 {
            return Err(Error::ShapeMismatch("discriminator images must share a 3-channel size".into()));
        }
        if grid.channels() != coord_channels || grid.height() != h || grid.width() != w {
            return Err(Error::ShapeMismatch(format!(
                "coordinate grid {}x{}x{} does not match image {h}x{w} with {coord_channels} channels",
                grid.channels(),
                grid.height(),
                grid.width()
            )));
        }
        x.slice_mut(s![..3, i, .., ..]).assign(&img.data);
        x.slice_mut(s![3.., i, .., ..]).assign(grid.values());
    }
    Ok(x)
}

/// One power-iteration step: `v ∝ Wᵀu`, `u' ∝ Wv`. Returns (v, u', uᵀWv).
fn power_step(w: ArrayView2<f64>, u: &Array1<f64>) -> Result<(Array1<f64>, Array1<f64>, f64)> {
    let t = w.t().dot(u);
    let tn = t.dot(&t).sqrt();
    if !(tn > 0.0) {
        return Err(Error::DegenerateMatrix);
    }
    let v = t / tn;
    let wv = w.dot(&v);
    let wn = wv.dot(&wv).sqrt();
    if !(wn > 0.0) {
        return Err(Error::DegenerateMatrix);
    }
    let next = &wv / wn;
    let sigma = next.dot(&wv);
    Ok((v, next, sigma))
}

/// Power-iteration spectral normalization of a 2-D weight matrix.
///
/// Alternates `v ∝ Wᵀu`, `u ∝ Wv` for `iterations` steps, estimates
/// `σ = uᵀWv` and returns `(W/σ, u, σ)`.
pub fn spectral_normalize(
    weight: ArrayView2<f64>,
    u: &Array1<f64>,
    iterations: usize,
) -> Result<(Array2<f64>, Array1<f64>, f64)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("spectral normalization needs at least one iteration".into()));
    }
    if u.len() != weight.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "u has {} entries for a matrix with {} rows",
            u.len(),
            weight.nrows()
        )));
    }
    if weight.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateMatrix);
    }
    let mut u = u.clone();
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let (_, next, s) = power_step(weight, &u)?;
        u = next;
        sigma = s;
    }
    Ok((weight.to_owned() / sigma, u, sigma))
}

/// Iterates spectral normalization until σ changes by less than `tol`
/// (relative) or `max_iterations` is reached.
pub fn spectral_normalize_converged(
    weight: ArrayView2<f64>,
    u: &Array1<f64>,
    tol: f64,
    max_iterations: usize,
) -> Result<(Array2<f64>, Array1<f64>, f64)> {
    let (_, mut u, mut sigma) = spectral_normalize(weight, u, 1)?;
    for _ in 1..max_iterations {
        let (_, next, s) = power_step(weight, &u)?;
        let done = (s - sigma).abs() <= tol * s.abs();
        u = next;
        sigma = s;
        if done {
            break;
        }
    }
    Ok((weight.to_owned() / sigma, u, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{image_layout, sample_latent, CoordinateSpec};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_channel_plan() {
        let spec = LatentSpec::default();
        let cfg = NetworkConfig::generator(&spec, &REFERENCE_GENERATOR_WIDTHS);
        assert_eq!(cfg.layers[0].in_channels, 20);
        assert_eq!(cfg.widths(), vec![1024, 512, 256, 128, 3]);
        assert_eq!(cfg.layers[1].in_channels, 1026);
        let kinds: Vec<_> = cfg.layers.iter().map(|l| (l.kernel, l.stride, l.padding)).collect();
        assert_eq!(kinds, vec![(4, 2, 3), (4, 2, 3), (4, 2, 3), (4, 2, 3), (4, 1, 3)]);

        let d = NetworkConfig::discriminator(2, &REFERENCE_DISCRIMINATOR_WIDTHS, true);
        assert_eq!(d.layers[0].in_channels, 5);
        assert_eq!(stack_sizes(64, &d.layers).unwrap(), vec![64, 32, 16, 8, 4, 1]);
        assert_eq!(d.spectral_norm, vec![true, true, true, true, false]);
        assert_eq!(d.layers.last().unwrap().out_channels, 1);
    }

    #[test]
    fn empty_config_is_rejected() {
        let spec = LatentSpec::default();
        let mut cfg = NetworkConfig::generator(&spec, &[8]);
        cfg.layers.clear();
        cfg.batch_norm.clear();
        cfg.spectral_norm.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            Generator::new(cfg, spec, Init::default(), &mut rng),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn generated_range_and_size() {
        let spec = LatentSpec {
            coords: CoordinateSpec::linear(64, 64),
            ..LatentSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(NetworkConfig::generator(&spec, &[16, 8, 8, 4]), spec, Init::FanIn(3.0), &mut rng)
            .unwrap();
        let layout = image_layout(g.footprint(), 90, 90).unwrap();
        assert_eq!((layout.latent_h, layout.offset), (10, (3, 3)));
        let z = sample_latent(&spec, 10, 10, &mut rng)
            .with_coordinates(g.footprint(), &layout.placement)
            .unwrap();
        let raw = g.generate(&z, Mode::Eval).unwrap();
        assert_eq!((raw.height(), raw.width()), (97, 97));
        assert!(raw.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let img = raw.center_crop(90, 90).unwrap();
        assert_eq!((img.height(), img.width()), (90, 90));
    }

    #[test]
    fn spectral_examples() {
        let u = array![1.0, 0.0];
        let id = array![[1.0, 0.0], [0.0, 1.0]];
        let (w, _, sigma) = spectral_normalize(id.view(), &u, 1).unwrap();
        assert_eq!(sigma, 1.0);
        assert_eq!(w, id);

        let u = array![0.6, 0.8];
        let d = array![[2.0, 0.0], [0.0, 1.0]];
        let (w, _, sigma) = spectral_normalize_converged(d.view(), &u, 1e-15, 500).unwrap();
        assert!((sigma - 2.0).abs() < 1e-9);
        assert!((w[[0, 0]] - 1.0).abs() < 1e-9 && (w[[1, 1]] - 0.5).abs() < 1e-9);

        let zero = Array2::<f64>::zeros((3, 3));
        assert!(matches!(
            spectral_normalize(zero.view(), &array![1.0, 0.0, 0.0], 3),
            Err(Error::DegenerateMatrix)
        ));
    }

    #[test]
    fn discriminator_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Discriminator::new(NetworkConfig::discriminator(2, &[4, 4, 8, 8], true), Init::Normal(0.5), &mut rng)
            .unwrap();
        let images: Vec<_> = (0..3)
            .map(|_| GeneratedImage {
                data: Array3::from_shape_fn((3, 64, 64), |_| rng.random_range(-1.0..1.0)),
            })
            .collect();
        let coords = vec![Grid::zeros(2, 64, 64); 3];
        let p = d.discriminate(&images, &coords).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let again = d.discriminate(&images[1..2], &coords[1..2]).unwrap();
        assert_eq!(again[0], p[1]);
        assert!(matches!(
            d.discriminate(&images[..1], &[Grid::zeros(2, 32, 64)]),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
