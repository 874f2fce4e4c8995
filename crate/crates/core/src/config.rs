//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default; unknown
//! or repeated keys are errors. The defaults describe the reference setup:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `dataset` | (none) | image folder or pattern image; required by `train` |
//! | `dataset_mode` | `folder` | `folder` (shorter edge → 128) or `pattern` |
//! | `crop_height`, `crop_width` | `64` | training crop size |
//! | `global_channels` | `16` | master-plan channels |
//! | `local_channels` | `2` | local noise channels |
//! | `coord_mode` | `linear` | `linear`, `periodic_x` or `periodic_xy` |
//! | `coord_reference` | `auto` | `HxW` extent mapped to `[-1, 1]`; `auto` is 128x128 for folders and the image size for patterns |
//! | `period` | `64` | pixel period of periodic coordinates |
//! | `latent_size` | `10` | side of each training latent |
//! | `generator_widths` | `1024,512,256,128` | hidden generator widths |
//! | `discriminator_widths` | `64,128,256,512` | hidden discriminator widths |
//! | `spectral_norm` | `true` | normalize discriminator layers 1..L-1 |
//! | `init_std` | `0.02` | deviation of the normal weight init |
//! | `batch_size` | `16` | crops per step |
//! | `steps` | `1000` | total steps |
//! | `lr_generator`, `lr_discriminator` | `0.0002` | learning rates |
//! | `beta1`, `beta2` | `0.5`, `0.999` | moment coefficients |
//! | `seed` | `0` | seed of the whole run |
//! | `checkpoint_every` | `100` | checkpoint cadence in steps |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::latent::{CoordinateMode, CoordinateSpec, LatentSpec};
use crate::model::{Init, NetworkConfig};
use crate::training::{DatasetMode, DatasetSource, TrainConfig, FOLDER_SHORT_EDGE};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub dataset_mode: DatasetMode,
    pub crop_height: usize,
    pub crop_width: usize,
    pub global_channels: usize,
    pub local_channels: usize,
    pub coord_mode: CoordinateMode,
    pub coord_reference: Option<(usize, usize)>,
    pub period: f64,
    pub latent_size: usize,
    pub generator_widths: Vec<usize>,
    pub discriminator_widths: Vec<usize>,
    pub spectral_norm: bool,
    pub init_std: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            dataset_mode: DatasetMode::Folder,
            crop_height: 64,
            crop_width: 64,
            global_channels: 16,
            local_channels: 2,
            coord_mode: CoordinateMode::Linear,
            coord_reference: None,
            period: 64.0,
            latent_size: 10,
            generator_widths: vec![1024, 512, 256, 128],
            discriminator_widths: vec![64, 128, 256, 512],
            spectral_norm: true,
            init_std: 0.02,
            batch_size: 16,
            steps: 1000,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

const KEYS: [&str; 22] = [
    "dataset",
    "dataset_mode",
    "crop_height",
    "crop_width",
    "global_channels",
    "local_channels",
    "coord_mode",
    "coord_reference",
    "period",
    "latent_size",
    "generator_widths",
    "discriminator_widths",
    "spectral_norm",
    "init_std",
    "batch_size",
    "steps",
    "lr_generator",
    "lr_discriminator",
    "beta1",
    "beta2",
    "seed",
    "checkpoint_every",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse {v:?} as a number")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> = v.split(',').map(|s| parse_num(key, s.trim())).collect();
    let items = items?;
    if items.is_empty() || items.contains(&0) {
        return Err(Error::config(key, "widths must be positive"));
    }
    Ok(items)
}

fn join(list: &[usize]) -> String {
    list.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), format!("expected key = value, got {line:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::config(key, "unknown key"));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. A relative `dataset` resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(dataset), Some(dir)) = (&cfg.dataset, path.parent()) {
            if dataset.is_relative() {
                cfg.dataset = Some(dir.join(dataset));
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "dataset_mode" => {
                self.dataset_mode =
                    DatasetMode::parse(v).ok_or_else(|| Error::config(key, format!("unknown mode {v:?}")))?
            }
            "crop_height" => self.crop_height = parse_num(key, v)?,
            "crop_width" => self.crop_width = parse_num(key, v)?,
            "global_channels" => self.global_channels = parse_num(key, v)?,
            "local_channels" => self.local_channels = parse_num(key, v)?,
            "coord_mode" => {
                self.coord_mode =
                    CoordinateMode::parse(v).ok_or_else(|| Error::config(key, format!("unknown mode {v:?}")))?
            }
            "coord_reference" => {
                self.coord_reference = if v == "auto" {
                    None
                } else {
                    let (h, w) = v
                        .split_once('x')
                        .ok_or_else(|| Error::config(key, "expected HxW or auto"))?;
                    Some((parse_num(key, h.trim())?, parse_num(key, w.trim())?))
                }
            }
            "period" => self.period = parse_num(key, v)?,
            "latent_size" => self.latent_size = parse_num(key, v)?,
            "generator_widths" => self.generator_widths = parse_list(key, v)?,
            "discriminator_widths" => self.discriminator_widths = parse_list(key, v)?,
            "spectral_norm" => {
                self.spectral_norm = match v {
                    "true" => true,
                    "false" => false,
                    _ => return Err(Error::config(key, "expected true or false")),
                }
            }
            "init_std" => self.init_std = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "lr_generator" => self.lr_generator = parse_num(key, v)?,
            "lr_discriminator" => self.lr_discriminator = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            _ => unreachable!(),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive_int = [
            ("crop_height", self.crop_height as u64),
            ("crop_width", self.crop_width as u64),
            ("latent_size", self.latent_size as u64),
            ("batch_size", self.batch_size as u64),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (key, v) in positive_int {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.global_channels + self.local_channels == 0 {
            return Err(Error::config("local_channels", "global + local channels must be at least 1"));
        }
        for (key, v) in [
            ("period", self.period),
            ("init_std", self.init_std),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be positive (got {v})")));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1) (got {v})")));
            }
        }
        if let Some((h, w)) = self.coord_reference {
            if h == 0 || w == 0 {
                return Err(Error::config("coord_reference", "extent must be at least 1x1"));
            }
        }
        Ok(())
    }

    /// Canonical text with every key, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dataset = self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let reference = match self.coord_reference {
            Some((h, w)) => format!("{h}x{w}"),
            None => "auto".into(),
        };
        let _ = writeln!(s, "dataset = {dataset}");
        let _ = writeln!(s, "dataset_mode = {}", self.dataset_mode.name());
        let _ = writeln!(s, "crop_height = {}", self.crop_height);
        let _ = writeln!(s, "crop_width = {}", self.crop_width);
        let _ = writeln!(s, "global_channels = {}", self.global_channels);
        let _ = writeln!(s, "local_channels = {}", self.local_channels);
        let _ = writeln!(s, "coord_mode = {}", self.coord_mode.name());
        let _ = writeln!(s, "coord_reference = {reference}");
        let _ = writeln!(s, "period = {}", self.period);
        let _ = writeln!(s, "latent_size = {}", self.latent_size);
        let _ = writeln!(s, "generator_widths = {}", join(&self.generator_widths));
        let _ = writeln!(s, "discriminator_widths = {}", join(&self.discriminator_widths));
        let _ = writeln!(s, "spectral_norm = {}", self.spectral_norm);
        let _ = writeln!(s, "init_std = {}", self.init_std);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "lr_generator = {}", self.lr_generator);
        let _ = writeln!(s, "lr_discriminator = {}", self.lr_discriminator);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    pub fn crop(&self) -> (usize, usize) {
        (self.crop_height, self.crop_width)
    }

    /// Loads the configured dataset. Errors name the `dataset` key.
    pub fn load_dataset(&self) -> Result<DatasetSource> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::config("dataset", "required for training but not set"))?;
        if !path.exists() {
            return Err(Error::config("dataset", format!("{} does not exist", path.display())));
        }
        DatasetSource::load(path, self.dataset_mode, self.crop())
    }

    /// Coordinate spec with the reference extent resolved against `src`.
    pub fn coordinates(&self, src: Option<&DatasetSource>) -> CoordinateSpec {
        let reference = self.coord_reference.unwrap_or_else(|| match (self.dataset_mode, src) {
            (DatasetMode::Pattern, Some(src)) => src.image_size(0),
            _ => (FOLDER_SHORT_EDGE as usize, FOLDER_SHORT_EDGE as usize),
        });
        CoordinateSpec::periodic(self.coord_mode, reference.0, reference.1, self.period)
    }

    pub fn latent_spec(&self, coords: CoordinateSpec) -> LatentSpec {
        LatentSpec {
            global_channels: self.global_channels,
            local_channels: self.local_channels,
            coords,
        }
    }

    pub fn train_config(&self, coords: CoordinateSpec) -> TrainConfig {
        let latent = self.latent_spec(coords);
        TrainConfig {
            latent,
            latent_size: self.latent_size,
            generator: NetworkConfig::generator(&latent, &self.generator_widths),
            discriminator: NetworkConfig::discriminator(
                coords.channels(),
                &self.discriminator_widths,
                self.spectral_norm,
            ),
            batch_size: self.batch_size,
            steps: self.steps,
            lr_generator: self.lr_generator,
            lr_discriminator: self.lr_discriminator,
            betas: (self.beta1, self.beta2),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            init: Init::Normal(self.init_std),
        }
    }
}
