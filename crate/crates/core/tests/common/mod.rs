#![allow(dead_code)]

use locogan::geometry::LayerSpec;
use locogan::latent::{make_coordinate_grid, sample_latent, CoordinateSpec, CropWindow, LatentSpec, Placement};
use locogan::model::{discriminator_input, Discriminator, GeneratedImage, Generator, Init, NetworkConfig};
use locogan::training::FakeBatch;
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn toy_latent_spec() -> LatentSpec {
    LatentSpec {
        global_channels: 4,
        local_channels: 2,
        coords: CoordinateSpec::linear(16, 16),
    }
}

/// 4 → 8 → 16 → 16 generator with 8-channel hidden layers.
pub fn toy_generator_config(spec: &LatentSpec) -> NetworkConfig {
    let cc = spec.coords.channels();
    NetworkConfig {
        layers: vec![
            LayerSpec::transposed(spec.input_channels(), 8, 4, 2, 1),
            LayerSpec::transposed(8 + cc, 8, 4, 2, 1),
            LayerSpec::transposed(8 + cc, 3, 3, 1, 1),
        ],
        coord_channels: cc,
        coords_every_layer: true,
        batch_norm: vec![true, true, false],
        spectral_norm: vec![false; 3],
    }
}

/// 16 → 8 → 4 → 1 discriminator.
pub fn toy_discriminator_config(cc: usize) -> NetworkConfig {
    NetworkConfig::discriminator(cc, &[8, 8], true)
}

pub struct Toy {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub fake: FakeBatch,
    pub real: Array4<f64>,
}

pub fn toy(rng: &mut ChaCha8Rng, batch: usize) -> Toy {
    let spec = toy_latent_spec();
    let generator = Generator::new(toy_generator_config(&spec), spec, Init::FanIn(1.5), rng).unwrap();
    let discriminator =
        Discriminator::new(toy_discriminator_config(spec.coords.channels()), Init::FanIn(1.5), rng).unwrap();
    let window = CropWindow::new(0, 0, 16, 16, 0);
    let grid = make_coordinate_grid(&spec.coords, &window, 16, 16);
    let latents = (0..batch)
        .map(|_| {
            sample_latent(&spec, 4, 4, rng)
                .with_coordinates(generator.footprint(), &Placement::at(0.0, 0.0))
                .unwrap()
        })
        .collect();
    let reals: Vec<GeneratedImage> = (0..batch)
        .map(|_| GeneratedImage {
            data: Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let coords = vec![grid; batch];
    let real = discriminator_input(&reals, &coords, spec.coords.channels()).unwrap();
    Toy {
        generator,
        discriminator,
        fake: FakeBatch {
            latents,
            offsets: vec![(0, 0); batch],
            coords,
            crop: (16, 16),
        },
        real,
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// 256×256 noisy texture with period 32 along both axes: cosine ramps in two
/// channels and a checkerboard sign in the third.
pub fn periodic_texture(seed: u64) -> Array3<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let tau = 2.0 * std::f64::consts::PI / 32.0;
    Array3::from_shape_fn((3, 256, 256), |(c, y, x)| {
        let (fx, fy) = ((tau * x as f64).cos(), (tau * y as f64).cos());
        let v = match c {
            0 => 0.7 * fx,
            1 => 0.7 * fy,
            _ => 0.6 * (fx * fy).signum(),
        };
        (v + noise.sample(&mut rng)).clamp(-1.0, 1.0)
    })
}

/// Writes the texture and a pattern-mode config into `dir`; returns the
/// config path.
pub fn write_pattern_run(dir: &std::path::Path, extra: &str) -> std::path::PathBuf {
    locogan::image_io::save_png(dir.join("texture.png"), &periodic_texture(7)).unwrap();
    let text = format!(
        "dataset = texture.png\ndataset_mode = pattern\ncoord_mode = periodic_xy\nperiod = 64\n{extra}"
    );
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn pick<R: Rng>(grads: &[ndarray::ArrayD<f64>], rng: &mut R) -> (usize, usize) {
    let total: usize = grads.iter().map(|g| g.len()).sum();
    let mut k = rng.random_range(0..total);
    for (i, g) in grads.iter().enumerate() {
        if k < g.len() {
            return (i, k);
        }
        k -= g.len();
    }
    unreachable!()
}

fn nudge<P: locogan::model::Parameters>(net: &mut P, tensor: usize, index: usize, delta: f64) {
    let mut params = net.parameters_mut();
    params[tensor].as_slice_mut().expect("contiguous parameter")[index] += delta;
}

const FD_STEP: f64 = 1e-6;

/// Worst relative error of the generator-loss gradient against central
/// differences on `samples` random parameters of the toy model.
pub fn generator_gradient_error(seed: u64, samples: usize) -> f64 {
    use locogan::training::generator_objective;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = toy(&mut rng, 3);
    let (_, grads) = generator_objective(&t.generator, &t.discriminator, &t.fake).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (ti, k) = pick(&grads, &mut rng);
        let analytic = grads[ti].as_slice().unwrap()[k];
        let mut g = t.generator.clone();
        nudge(&mut g, ti, k, FD_STEP);
        let (plus, _) = generator_objective(&g, &t.discriminator, &t.fake).unwrap();
        nudge(&mut g, ti, k, -2.0 * FD_STEP);
        let (minus, _) = generator_objective(&g, &t.discriminator, &t.fake).unwrap();
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * FD_STEP), 1e-6));
    }
    worst
}

/// Same for the discriminator loss on a fixed fake batch.
pub fn discriminator_gradient_error(seed: u64, samples: usize) -> f64 {
    use locogan::model::Mode;
    use locogan::training::discriminator_objective;
    use ndarray::Axis;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = toy(&mut rng, 3);
    let (raw, _) = t.generator.forward(&t.fake.latents, Mode::Train).unwrap();
    let images: Vec<GeneratedImage> = raw
        .axis_iter(Axis(1))
        .map(|v| GeneratedImage { data: v.to_owned() })
        .collect();
    let fake = discriminator_input(&images, &t.fake.coords, 2).unwrap();
    let base = discriminator_objective(&t.discriminator, &t.real, &fake).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (ti, k) = pick(&base.grads, &mut rng);
        let analytic = base.grads[ti].as_slice().unwrap()[k];
        let mut d = t.discriminator.clone();
        nudge(&mut d, ti, k, FD_STEP);
        let plus = discriminator_objective(&d, &t.real, &fake).unwrap().loss;
        nudge(&mut d, ti, k, -2.0 * FD_STEP);
        let minus = discriminator_objective(&d, &t.real, &fake).unwrap().loss;
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * FD_STEP), 1e-6));
    }
    worst
}

/// Pattern run with narrow networks, small batches and `steps` steps.
pub fn write_tiny_run(dir: &std::path::Path, steps: u64, extra: &str) -> std::path::PathBuf {
    write_pattern_run(
        dir,
        &format!(
            "generator_widths = 8,8,8,8\ndiscriminator_widths = 4,4,8,8\nbatch_size = 2\nsteps = {steps}\n\
             checkpoint_every = 2\nseed = 5\n{extra}"
        ),
    )
}
