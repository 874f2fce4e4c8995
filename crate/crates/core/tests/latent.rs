use locogan::geometry::FootprintMap;
use locogan::latent::{
    crop_with_noise_padding, interpolate_latents, sample_latent, tile_periodic, transplant, vary_tiles, ChannelSet,
    CoordinateMode, CoordinateSpec, CropWindow, LatentImage, LatentRect, LatentSpec, Placement, TileAxes,
};
use locogan::model::NetworkConfig;
use locogan::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fp() -> FootprintMap {
    FootprintMap::new(&NetworkConfig::reference_generator(20, 2).layers).unwrap()
}

fn periodic_spec(mode: CoordinateMode, period: f64) -> LatentSpec {
    LatentSpec {
        coords: CoordinateSpec::periodic(mode, 128, 128, period),
        ..LatentSpec::default()
    }
}

#[test]
fn local_noise_is_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = LatentSpec {
        local_channels: 1,
        ..LatentSpec::default()
    };
    let z = sample_latent(&spec, 1000, 1000, &mut rng);
    let n = z.local.len() as f64;
    let mean = z.local.sum() / n;
    let var = z.local.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0);
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.02, "variance {var}");
}

#[test]
fn master_plan_is_spatially_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = sample_latent(&LatentSpec::default(), 6, 9, &mut rng);
    assert!(z.global_spread().iter().all(|&s| s == 0.0));
    assert_eq!(z.value_field().dim(), (18, 6, 9));
    assert_eq!(LatentSpec::default().input_channels(), 20);
}

#[test]
fn overlapping_windows_copy_identical_field_values() {
    let fp = fp();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = sample_latent(&LatentSpec::default(), 20, 20, &mut rng);
    let margin = fp.margin();
    let a = CropWindow::new(80, 64, 64, 64, margin);
    let b = CropWindow::new(112, 80, 64, 64, margin);
    let la = crop_with_noise_padding(&field, &a, &fp, &mut rng).unwrap();
    let lb = crop_with_noise_padding(&field, &b, &fp, &mut rng).unwrap();
    let (ca, cb) = (a.latent_window(&fp), b.latent_window(&fp));
    let (pa, pb) = (a.padded_window(&fp), b.padded_window(&fp));
    let mut shared = 0;
    for y in ca.y.max(cb.y)..(ca.y + ca.height as i64).min(cb.y + cb.height as i64) {
        for x in ca.x.max(cb.x)..(ca.x + ca.width as i64).min(cb.x + cb.width as i64) {
            for c in 0..2 {
                let va = la.local[[c, (y - pa.y) as usize, (x - pa.x) as usize]];
                let vb = lb.local[[c, (y - pb.y) as usize, (x - pb.x) as usize]];
                assert_eq!(va, vb);
                assert_eq!(va, field.local[[c, y as usize, x as usize]]);
            }
            shared += 1;
        }
    }
    assert!(shared > 0);
}

#[test]
fn thin_margin_is_rejected() {
    let fp = fp();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let field = sample_latent(&LatentSpec::default(), 12, 12, &mut rng);
    let w = CropWindow::new(40, 40, 64, 64, 0);
    let required = w.required_margin(&fp).unwrap();
    assert!(required > 0);
    match crop_with_noise_padding(&field, &CropWindow { margin: required - 1, ..w }, &fp, &mut rng) {
        Err(Error::MarginTooSmall { margin, required: r }) => assert_eq!((margin, r), (required - 1, required)),
        other => panic!("expected MarginTooSmall, got {other:?}"),
    }
    assert!(crop_with_noise_padding(&field, &CropWindow { margin: required, ..w }, &fp, &mut rng).is_ok());
}

#[test]
fn tiling_guards_the_coordinate_period() {
    let fp = fp();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = sample_latent(&periodic_spec(CoordinateMode::PeriodicX, 64.0), 4, 12, &mut rng);
    assert!(tile_periodic(&z, 4, TileAxes::X, &fp).is_ok());
    assert!(matches!(tile_periodic(&z, 3, TileAxes::X, &fp), Err(Error::PeriodMismatch(_))));
    assert!(matches!(tile_periodic(&z, 4, TileAxes::XY, &fp), Err(Error::PeriodMismatch(_))));
    let linear = sample_latent(&LatentSpec::default(), 4, 12, &mut rng);
    assert!(matches!(tile_periodic(&linear, 4, TileAxes::X, &fp), Err(Error::PeriodMismatch(_))));
}

#[test]
fn tiling_once_is_identity() {
    let fp = fp();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = sample_latent(&periodic_spec(CoordinateMode::PeriodicX, 16.0 * 7.0), 5, 7, &mut rng);
    assert_eq!(tile_periodic(&z, 7, TileAxes::X, &fp).unwrap(), z);
}

#[test]
fn varied_tiles_share_coordinates_and_plan() {
    let fp = fp();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = sample_latent(&periodic_spec(CoordinateMode::PeriodicXY, 64.0), 8, 8, &mut rng)
        .with_coordinates(&fp, &Placement::at(0.0, 0.0))
        .unwrap();
    let tiled = tile_periodic(&z, 4, TileAxes::XY, &fp).unwrap();
    assert_eq!(vary_tiles(&tiled, 0.0, &mut rng).unwrap(), tiled);
    let varied = vary_tiles(&tiled, 0.3, &mut rng).unwrap();
    assert_eq!(varied.coords, tiled.coords);
    assert_eq!(varied.global_field(), tiled.global_field());
    let (a, b) = (varied.local.slice(ndarray::s![.., 0..4, 0..4]), varied.local.slice(ndarray::s![.., 0..4, 4..8]));
    assert_ne!(a, b);
    assert!(vary_tiles(&tiled, 1.5, &mut rng).is_err());
}

fn pair(seed: u64, h: usize, w: usize) -> (LatentImage, LatentImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = LatentSpec::default();
    (sample_latent(&spec, h, w, &mut rng), sample_latent(&spec, h, w, &mut rng))
}

#[test]
fn transplant_identities() {
    let (a, b) = pair(8, 6, 8);
    let whole = LatentRect { x: 0, y: 0, width: 8, height: 6 };
    assert_eq!(transplant(&b, &a, whole, ChannelSet::Both).unwrap(), a);
    let empty = LatentRect { width: 0, ..whole };
    assert_eq!(transplant(&b, &a, empty, ChannelSet::Both).unwrap(), b);

    let left = LatentRect { width: 4, ..whole };
    let mixed = transplant(&b, &a, left, ChannelSet::Global).unwrap();
    let (g, ga, gb) = (mixed.global_field(), a.global_field(), b.global_field());
    assert_eq!(g.slice(ndarray::s![.., .., ..4]), ga.slice(ndarray::s![.., .., ..4]));
    assert_eq!(g.slice(ndarray::s![.., .., 4..]), gb.slice(ndarray::s![.., .., 4..]));
    assert_eq!(mixed.local, b.local);

    let outside = LatentRect { x: 5, ..left };
    assert!(matches!(
        transplant(&b, &a, outside, ChannelSet::Local),
        Err(Error::RegionOutOfBounds { .. })
    ));
}

#[test]
fn interpolation_endpoints_and_sizes() {
    let fp = fp();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = sample_latent(&LatentSpec { coords: CoordinateSpec::linear(128, 192), ..LatentSpec::default() }, 12, 16, &mut rng);
    let b = sample_latent(&LatentSpec { coords: CoordinateSpec::linear(160, 160), ..LatentSpec::default() }, 14, 14, &mut rng);
    let (start, size) = interpolate_latents(&a, &b, 0.0, (128, 192), (160, 160), &fp).unwrap();
    assert_eq!(size, (128, 192));
    assert_eq!((start.local.clone(), start.global_field()), (a.local.clone(), a.global_field()));
    let (end, size) = interpolate_latents(&a, &b, 1.0, (128, 192), (160, 160), &fp).unwrap();
    assert_eq!(size, (160, 160));
    assert_eq!((end.local.clone(), end.global_field()), (b.local.clone(), b.global_field()));
    let (_, mid) = interpolate_latents(&a, &b, 0.5, (128, 192), (160, 160), &fp).unwrap();
    assert_eq!(mid, (144, 176));
    assert!(interpolate_latents(&a, &b, 1.5, (128, 192), (160, 160), &fp).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiled_columns_repeat(p in 1usize..6, reps in 1usize..4, h in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = periodic_spec(CoordinateMode::PeriodicXY, 16.0 * p as f64);
        let z = sample_latent(&spec, h.max(p), p * reps + 1, &mut rng);
        let t = tile_periodic(&z, p, TileAxes::XY, &fp()).unwrap();
        let (_, rows, cols) = t.local.dim();
        for i in 0..rows {
            for j in 0..cols {
                prop_assert_eq!(t.local[[0, i, j]], z.local[[0, i % p, j % p]]);
                if j + p < cols {
                    prop_assert_eq!(t.local[[1, i, j]], t.local[[1, i, j + p]]);
                }
            }
        }
    }

    #[test]
    fn interpolated_sizes_stay_between_endpoints(t in 0.0f64..=1.0, h in 16usize..200, w in 16usize..200) {
        let fp = fp();
        let (a, b) = pair(10, 6, 6);
        let (z, (th, tw)) = interpolate_latents(&a, &b, t, (64, 64), (h, w), &fp).unwrap();
        prop_assert!(th >= h.min(64) && th <= h.max(64));
        prop_assert!(tw >= w.min(64) && tw <= w.max(64));
        prop_assert!(fp.output_size(z.height).unwrap() >= th);
        prop_assert!(fp.output_size(z.width).unwrap() >= tw);
    }
}
