mod common;

use locogan::checkpoint::{payload_offsets, Checkpoint, Container, FORMAT_VERSION, MAGIC};
use locogan::config::RunConfig;
use locogan::image_io::{decode_value, encode_value, from_rgb8, load_image, save_png, to_rgb8};
use locogan::latent::CoordinateMode;
use locogan::training::TrainState;
use locogan::Error;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_checkpoint(dir: &std::path::Path) -> Checkpoint {
    let config = RunConfig::load(&common::write_tiny_run(dir, 1, "")).unwrap();
    let src = config.load_dataset().unwrap();
    let coords = config.coordinates(Some(&src));
    let state = TrainState::new(&config.train_config(coords)).unwrap();
    Checkpoint { config, coords, state }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);
    assert!(bytes.starts_with(format!("{MAGIC}\nversion {FORMAT_VERSION}\n").as_bytes()));
}

#[test]
fn corrupted_payload_names_its_array() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = tiny_checkpoint(dir.path()).to_bytes();
    for (name, (start, len)) in payload_offsets(&bytes).unwrap() {
        if len == 0 {
            continue;
        }
        let mut bad = bytes.clone();
        bad[start + len / 2] ^= 0x10;
        let err = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains(&format!("'{name}'")), "{err}");
    }
}

#[test]
fn malformed_containers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = tiny_checkpoint(dir.path()).to_bytes();

    let newer = String::from_utf8_lossy(&bytes)
        .replacen(&format!("version {FORMAT_VERSION}"), "version 99", 1)
        .into_bytes();
    assert!(matches!(
        Container::from_bytes(&newer),
        Err(Error::VersionMismatch { found: 99, expected: FORMAT_VERSION })
    ));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Container::from_bytes(&magic), Err(Error::Checkpoint(_))));

    for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
        assert!(Container::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn config_parsing_rules() {
    let cfg = RunConfig::parse("# run\n\nsteps = 12   # short\ncoord_mode = periodic_x\nperiod=48\n").unwrap();
    assert_eq!(cfg.steps, 12);
    assert_eq!(cfg.coord_mode, CoordinateMode::PeriodicX);
    assert_eq!(cfg.period, 48.0);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);

    let key_of = |text: &str| match RunConfig::parse(text) {
        Err(Error::Config { key, .. }) => key,
        other => panic!("expected a config error for {text:?}, got {other:?}"),
    };
    assert_eq!(key_of("colour = red"), "colour");
    assert_eq!(key_of("steps = 1\nsteps = 2"), "steps");
    assert_eq!(key_of("batch_size = 0"), "batch_size");
    assert_eq!(key_of("beta1 = 1.5"), "beta1");
    assert_eq!(key_of("generator_widths = 8,x"), "generator_widths");
}

#[test]
fn config_dataset_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::write_pattern_run(dir.path(), "");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.dataset.as_deref(), Some(dir.path().join("texture.png").as_path()));
    assert!(cfg.load_dataset().is_ok());

    let err = RunConfig::parse("steps = 3").unwrap().load_dataset().unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key == "dataset"), "{err}");
}

#[test]
fn pixel_value_mapping() {
    assert_eq!(encode_value(-1.0), 0);
    assert_eq!(encode_value(1.0), 255);
    assert_eq!(encode_value(0.0), 128);
    assert_eq!(encode_value(7.0), 255);
    for b in 0..=255u8 {
        assert_eq!(encode_value(decode_value(b)), b);
    }
}

#[test]
fn png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Array3::from_shape_fn((3, 13, 21), |_| rng.random_range(-1.0..=1.0));
    let path = dir.path().join("a.png");
    save_png(&path, &img).unwrap();
    let back = load_image(&path).unwrap();
    assert_eq!(back.dim(), img.dim());
    assert!(back.iter().zip(&img).all(|(a, b)| (a - b).abs() <= 1.0 / 127.5));
    assert_eq!(to_rgb8(&back).unwrap(), to_rgb8(&img).unwrap());

    let one = Array3::from_elem((3, 1, 1), 0.3);
    save_png(dir.path().join("one.png"), &one).unwrap();
    let back = load_image(dir.path().join("one.png")).unwrap();
    assert!(back.iter().all(|v| (v - 0.3).abs() <= 1.0 / 127.5));
    assert_eq!(from_rgb8(&to_rgb8(&back).unwrap()), back);
}

#[test]
fn jpeg_inputs_and_unsupported_formats() {
    let dir = tempfile::tempdir().unwrap();
    let flat = image::RgbImage::from_pixel(9, 7, image::Rgb([200, 40, 128]));
    let jpeg = dir.path().join("flat.jpg");
    flat.save(&jpeg).unwrap();
    let back = load_image(&jpeg).unwrap();
    assert_eq!(back.dim(), (3, 7, 9));
    assert!((back[[0, 3, 4]] - decode_value(200)).abs() < 0.05);

    let bmp = dir.path().join("flat.bmp");
    std::fs::write(&bmp, b"BM").unwrap();
    assert!(load_image(&bmp).is_err());
    assert!(load_image(dir.path().join("missing.png")).is_err());
}
