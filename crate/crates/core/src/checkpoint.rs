//! Versioned single-file container for weights, optimizer state and run
//! metadata.
//!
//! Layout (all text lines end in `\n`):
//!
//! ```text
//! LOCOGAN CHECKPOINT
//! version 1
//! metadata <bytes>
//! <key=value lines>
//! arrays <count>
//! array <name> <dims, comma separated> f64le <bytes> <crc32 hex>
//! <little-endian payload>
//! ...
//! end
//! ```
//!
//! Writing is deterministic, so save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::latent::{CoordinateMode, CoordinateSpec, GlobalPlan, LatentImage, LatentSpec};
use crate::model::Parameters;
use crate::training::{StepMetrics, TrainConfig, TrainState};

pub const MAGIC: &str = "LOCOGAN CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered metadata plus named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: Vec<(String, String)>,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl Container {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("metadata key '{key}' is missing")))
    }

    fn meta_num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata key '{key}' has invalid value {v:?}")))
    }

    pub fn array(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Checkpoint(format!("array '{name}' is missing")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(format!("{MAGIC}\nversion {FORMAT_VERSION}\nmetadata {}\n", meta.len()).as_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(format!("arrays {}\n", self.arrays.len()).as_bytes());
        for (name, array) in &self.arrays {
            let mut payload = Vec::with_capacity(array.len() * 8);
            for v in array.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let dims = array.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            let dims = if dims.is_empty() { "-".to_string() } else { dims };
            let crc = crc32fast::hash(&payload);
            out.extend_from_slice(format!("array {name} {dims} f64le {} {crc:08x}\n", payload.len()).as_bytes());
            out.extend_from_slice(&payload);
            out.push(b'\n');
        }
        out.extend_from_slice(b"end\n");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.line()? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad header)".into()));
        }
        let version_line = r.line()?;
        let version: u32 = version_line
            .strip_prefix("version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad version line {version_line:?}")))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len: usize = r.counted("metadata")?;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut metadata = Vec::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line {line:?}")))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        let count: usize = r.counted("arrays")?;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let header = r.line()?;
            let parts: Vec<&str> = header.split(' ').collect();
            if parts.len() != 6 || parts[0] != "array" || parts[3] != "f64le" {
                return Err(Error::Checkpoint(format!("bad array header {header:?}")));
            }
            let name = parts[1].to_string();
            let bad = |what: &str| Error::Checkpoint(format!("array '{name}' has a bad {what}"));
            let shape: Vec<usize> = if parts[2] == "-" {
                Vec::new()
            } else {
                parts[2]
                    .split(',')
                    .map(|d| d.parse().map_err(|_| bad("shape")))
                    .collect::<Result<_>>()?
            };
            let len: usize = parts[4].parse().map_err(|_| bad("length"))?;
            let crc = u32::from_str_radix(parts[5], 16).map_err(|_| bad("checksum field"))?;
            if len != shape.iter().product::<usize>() * 8 {
                return Err(bad("length for its shape"));
            }
            let payload = r
                .take(len)
                .map_err(|_| Error::Checkpoint(format!("array '{name}' is truncated")))?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Checkpoint(format!("array '{name}' is corrupted (checksum mismatch)")));
            }
            if r.take(1)? != b"\n" {
                return Err(bad("terminator"));
            }
            let values: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap()));
        }
        if r.line()? != "end" {
            return Err(Error::Checkpoint("missing end marker".into()));
        }
        Ok(Container { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header line is not UTF-8".into()))
    }

    fn counted(&mut self, key: &str) -> Result<usize> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("expected '{key} <n>', got {line:?}")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}

fn coords_metadata(prefix: &str, coords: &CoordinateSpec, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.mode"), coords.mode.name().into()));
    out.push((
        format!("{prefix}.reference"),
        format!("{}x{}", coords.reference.0, coords.reference.1),
    ));
    out.push((format!("{prefix}.alpha_bits"), format!("{:016x}", coords.alpha.to_bits())));
}

fn coords_from(c: &Container, prefix: &str) -> Result<CoordinateSpec> {
    let mode = c.meta(&format!("{prefix}.mode"))?;
    let mode = CoordinateMode::parse(mode)
        .ok_or_else(|| Error::Checkpoint(format!("unknown coordinate mode {mode:?}")))?;
    let reference = c.meta(&format!("{prefix}.reference"))?;
    let (h, w) = reference
        .split_once('x')
        .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
        .ok_or_else(|| Error::Checkpoint(format!("bad coordinate reference {reference:?}")))?;
    let bits = c.meta(&format!("{prefix}.alpha_bits"))?;
    let alpha = u64::from_str_radix(bits, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("bad alpha bits {bits:?}")))?;
    Ok(CoordinateSpec {
        mode,
        reference: (h, w),
        alpha,
    })
}

fn layer_summary(layers: &[crate::geometry::LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| {
            format!(
                "{}:{}>{}:k{}s{}p{}",
                if l.transposed { "T" } else { "C" },
                l.in_channels,
                l.out_channels,
                l.kernel,
                l.stride,
                l.padding
            )
        })
        .collect::<Vec<_>>()
        .join(";")
}

/// A training run frozen at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Resolved coordinate spec the run was trained with.
    pub coords: CoordinateSpec,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn train_config(&self) -> TrainConfig {
        self.config.train_config(self.coords)
    }

    pub fn to_container(&self) -> Container {
        checkpoint_container(&self.config, &self.coords, &self.state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "training" {
            return Err(Error::Checkpoint("file does not hold a training checkpoint".into()));
        }
        let text: String = c
            .metadata
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k} = {v}\n")))
            .collect();
        let config = RunConfig::parse(&text)?;
        let coords = coords_from(c, "coords")?;
        let cfg = config.train_config(coords);
        let mut state = TrainState::new(&cfg)?;

        load_tensors(&mut state.generator, c)?;
        load_tensors(&mut state.discriminator, c)?;
        load_moments(&mut state.adam_g, "adam.generator", c)?;
        load_moments(&mut state.adam_d, "adam.discriminator", c)?;
        state.adam_g.t = c.meta_num("adam.generator.t")?;
        state.adam_d.t = c.meta_num("adam.discriminator.t")?;
        state.step = c.meta_num("step")?;

        let seed: [u8; 32] = unhex(c.meta("rng.seed")?)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::Checkpoint("bad rng seed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(c.meta_num("rng.stream")?);
        rng.set_word_pos(c.meta_num("rng.word_pos")?);
        state.rng = rng;

        let last = c.meta("last")?;
        state.last = if last == "none" {
            None
        } else {
            let f: Vec<&str> = last.split(' ').collect();
            let bits = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| u64::from_str_radix(s, 16).ok())
                    .map(f64::from_bits)
                    .ok_or_else(|| Error::Checkpoint(format!("bad last-metrics record {last:?}")))
            };
            Some(StepMetrics {
                step: f
                    .first()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("bad last-metrics record {last:?}")))?,
                d_loss: bits(1)?,
                g_loss: bits(2)?,
                d_real: bits(3)?,
                d_fake: bits(4)?,
            })
        };
        Ok(Checkpoint { config, coords, state })
    }
}

/// Serializes a training state without cloning it.
pub fn checkpoint_container(config: &RunConfig, coords: &CoordinateSpec, state: &TrainState) -> Container {
    let mut metadata = vec![("kind".to_string(), "training".to_string())];
    for line in config.to_text().lines() {
        let (k, v) = line.split_once(" = ").unwrap();
        metadata.push((format!("config.{k}"), v.to_string()));
    }
    coords_metadata("coords", coords, &mut metadata);
    metadata.push(("generator.layers".into(), layer_summary(&state.generator.config.layers)));
    metadata.push(("discriminator.layers".into(), layer_summary(&state.discriminator.config.layers)));
    let maps = state
        .generator
        .footprint()
        .maps()
        .iter()
        .map(|m| format!("{}:{}", m.scale, m.offset))
        .collect::<Vec<_>>()
        .join(";");
    metadata.push(("footprint.maps".into(), maps));
    metadata.push(("footprint.margin".into(), state.generator.footprint().margin().to_string()));
    metadata.push(("step".into(), state.step.to_string()));
    metadata.push(("seed".into(), config.seed.to_string()));
    metadata.push(("rng.seed".into(), hex(&state.rng.get_seed())));
    metadata.push(("rng.stream".into(), state.rng.get_stream().to_string()));
    metadata.push(("rng.word_pos".into(), state.rng.get_word_pos().to_string()));
    metadata.push(("adam.generator.t".into(), state.adam_g.t.to_string()));
    metadata.push(("adam.discriminator.t".into(), state.adam_d.t.to_string()));
    let last = match &state.last {
        None => "none".to_string(),
        Some(m) => format!(
            "{} {:016x} {:016x} {:016x} {:016x}",
            m.step,
            m.d_loss.to_bits(),
            m.g_loss.to_bits(),
            m.d_real.to_bits(),
            m.d_fake.to_bits()
        ),
    };
    metadata.push(("last".into(), last));

    let mut arrays: Vec<(String, ArrayD<f64>)> = Vec::new();
    for (name, t) in state.generator.tensors() {
        arrays.push((name, t.to_owned()));
    }
    for (name, t) in state.discriminator.tensors() {
        arrays.push((name, t.to_owned()));
    }
    for (prefix, adam) in [("adam.generator", &state.adam_g), ("adam.discriminator", &state.adam_d)] {
        for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
            arrays.push((format!("{prefix}.m.{i}"), m.clone()));
            arrays.push((format!("{prefix}.v.{i}"), v.clone()));
        }
    }
    Container { metadata, arrays }
}

fn assign(name: &str, target: &mut ndarray::ArrayViewMutD<f64>, source: &ArrayD<f64>) -> Result<()> {
    if target.shape() != source.shape() {
        return Err(Error::Checkpoint(format!(
            "array '{name}' has shape {:?}, the configuration expects {:?}",
            source.shape(),
            target.shape()
        )));
    }
    target.assign(source);
    Ok(())
}

fn load_tensors<P: Parameters>(net: &mut P, c: &Container) -> Result<()> {
    for (name, mut t) in net.tensors_mut() {
        assign(&name, &mut t, c.array(&name)?)?;
    }
    Ok(())
}

fn load_moments(adam: &mut crate::training::Adam, prefix: &str, c: &Container) -> Result<()> {
    for (i, (m, v)) in adam.m.iter_mut().zip(adam.v.iter_mut()).enumerate() {
        let name = format!("{prefix}.m.{i}");
        assign(&name, &mut m.view_mut(), c.array(&name)?)?;
        let name = format!("{prefix}.v.{i}");
        assign(&name, &mut v.view_mut(), c.array(&name)?)?;
    }
    Ok(())
}

/// Stores a latent (values, coordinates and spec) in the same container.
pub fn latent_container(latent: &LatentImage) -> Container {
    let spec = &latent.spec;
    let mut metadata = vec![
        ("kind".to_string(), "latent".to_string()),
        ("latent.height".into(), latent.height.to_string()),
        ("latent.width".into(), latent.width.to_string()),
        ("latent.global_channels".into(), spec.global_channels.to_string()),
        ("latent.local_channels".into(), spec.local_channels.to_string()),
        ("latent.edited".into(), latent.edited.to_string()),
    ];
    coords_metadata("coords", &spec.coords, &mut metadata);
    let mut arrays = Vec::new();
    match &latent.global {
        GlobalPlan::Constant(v) => arrays.push(("global.constant".into(), ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.clone()).unwrap())),
        GlobalPlan::PerPixel(f) => arrays.push(("global.per_pixel".into(), f.clone().into_dyn())),
    }
    arrays.push(("local".into(), latent.local.clone().into_dyn()));
    if let Some(g) = &latent.coords {
        arrays.push(("coords".into(), g.values().clone().into_dyn()));
    }
    Container { metadata, arrays }
}

pub fn latent_from_container(c: &Container) -> Result<LatentImage> {
    if c.meta("kind")? != "latent" {
        return Err(Error::Checkpoint("file does not hold a latent".into()));
    }
    let spec = LatentSpec {
        global_channels: c.meta_num("latent.global_channels")?,
        local_channels: c.meta_num("latent.local_channels")?,
        coords: coords_from(c, "coords")?,
    };
    let to3 = |name: &str, a: &ArrayD<f64>| -> Result<ndarray::Array3<f64>> {
        a.clone()
            .into_dimensionality()
            .map_err(|_| Error::Checkpoint(format!("array '{name}' is not three-dimensional")))
    };
    let global = match c.array("global.constant") {
        Ok(a) => GlobalPlan::Constant(a.iter().copied().collect()),
        Err(_) => GlobalPlan::PerPixel(to3("global.per_pixel", c.array("global.per_pixel")?)?),
    };
    let coords = match c.array("coords") {
        Ok(a) => Some(Grid::new(to3("coords", a)?)),
        Err(_) => None,
    };
    Ok(LatentImage {
        spec,
        height: c.meta_num("latent.height")?,
        width: c.meta_num("latent.width")?,
        global,
        local: to3("local", c.array("local")?)?,
        coords,
        edited: c.meta_num("latent.edited")?,
    })
}

/// Index of `name` in a container's arrays, for tests that corrupt files.
pub fn payload_offsets(bytes: &[u8]) -> Result<BTreeMap<String, (usize, usize)>> {
    let c = Container::from_bytes(bytes)?;
    let mut out = BTreeMap::new();
    let mut search = 0;
    for (name, a) in &c.arrays {
        let key = format!("array {name} ");
        let start = find(bytes, key.as_bytes(), search)
            .ok_or_else(|| Error::Checkpoint(format!("array '{name}' header not found")))?;
        let header_end = start + bytes[start..].iter().position(|&b| b == b'\n').unwrap() + 1;
        out.insert(name.clone(), (header_end, a.len() * 8));
        search = header_end + a.len() * 8;
    }
    Ok(out)
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    hay[from..].windows(needle.len()).position(|w| w == needle).map(|p| p + from)
}
