//! Dataset manifests, PNG files, checkpoints and the loss trace.
//!
//! Checkpoint container (all integers little-endian):
//!
//! | offset      | size | content                                     |
//! |-------------|------|---------------------------------------------|
//! | 0           | 8    | magic `GVCKPT\r\n`                          |
//! | 8           | 4    | `u32` format version (currently 1)          |
//! | 12          | 8    | `u64` header length `H` in bytes            |
//! | 20          | H    | UTF-8 JSON header                           |
//! | 20 + H      | P    | payload: `f32` values, tensor after tensor  |
//!
//! The header is an object with `kind` (`"train_state"` or
//! `"scene_classifier"`), a kind-specific `meta` object, `payload_bytes`
//! (= `P`), and `tensors`: a list of `{name, shape, offset, len}` where
//! `offset` and `len` count `f32` elements from the start of the payload.
//! Tensors are stored row-major, back to back in table order, and the
//! table must tile the payload exactly. Nothing follows the payload.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::{AdamState, ParamStore};
use crate::training::{LossRecord, TrainConfig, TrainState};
use crate::types::{Image, LandCover, PairedSample, GROUND_SIDE, OVERHEAD_SIDE};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GVCKPT\r\n";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub location_id: String,
    pub overhead_path: String,
    pub ground_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LandCover>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub longitude: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })
}

/// Decodes a PNG to 8-bit RGB, returning `(bytes, height, width)`.
/// Palette, grayscale and alpha images are converted; 16-bit is stripped.
pub fn read_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let png_err = |reason: String| Error::Png {
        path: path.to_owned(),
        reason,
    };
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| png_err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0]; 3]).collect(),
        other => return Err(png_err(format!("unsupported color type {other:?}"))),
    };
    Ok((rgb, h, w))
}

pub fn encode_png(bytes: &[u8], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(bytes.len(), height * width * 3, "RGB buffer size");
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(bytes).expect("in-memory PNG data");
        writer.finish().expect("in-memory PNG finish");
    }
    out
}

pub fn write_png(path: &Path, bytes: &[u8], height: usize, width: usize) -> Result<()> {
    write_atomic(path, &encode_png(bytes, height, width))
}

fn read_image<const S: usize>(path: &Path) -> std::result::Result<Image<S>, String> {
    let (bytes, h, w) = read_png(path).map_err(|e| e.to_string())?;
    if h != S || w != S {
        return Err(format!(
            "{} is {w}x{h}, expected {S}x{S} (images are never resized)",
            path.display()
        ));
    }
    Image::from_bytes(&bytes, h, w).map_err(|e| e.to_string())
}

/// Reads and validates a manifest without touching the image files.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::InvalidInput(format!(
            "{}: unsupported manifest version {} (expected {MANIFEST_VERSION})",
            path.display(),
            manifest.version
        )));
    }
    let mut seen = HashSet::new();
    for (index, e) in manifest.entries.iter().enumerate() {
        if !seen.insert(e.location_id.as_str()) {
            return Err(Error::ManifestEntry {
                index,
                reason: format!("duplicate location_id `{}`", e.location_id),
            });
        }
    }
    Ok(manifest)
}

/// Loads every pair in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<PairedSample>> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    manifest
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| {
            let entry_err = |reason| Error::ManifestEntry { index, reason };
            let overhead =
                read_image::<OVERHEAD_SIDE>(&base.join(&e.overhead_path)).map_err(entry_err)?;
            let ground =
                read_image::<GROUND_SIDE>(&base.join(&e.ground_path)).map_err(entry_err)?;
            Ok(PairedSample {
                overhead,
                ground,
                location_id: e.location_id.clone(),
                label: e.label,
            })
        })
        .collect()
}

/// Writes `overhead/<id>.png`, `ground/<id>.png` and the manifest under
/// `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[PairedSample]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let overhead_path = format!("overhead/{}.png", s.location_id);
        let ground_path = format!("ground/{}.png", s.location_id);
        write_png(
            &dir.join(&overhead_path),
            &s.overhead.to_bytes(),
            OVERHEAD_SIDE,
            OVERHEAD_SIDE,
        )?;
        write_png(
            &dir.join(&ground_path),
            &s.ground.to_bytes(),
            GROUND_SIDE,
            GROUND_SIDE,
        )?;
        entries.push(ManifestEntry {
            location_id: s.location_id.clone(),
            overhead_path,
            ground_path,
            label: s.label,
            latitude: None,
            longitude: None,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    write_json(
        &DatasetManifest {
            version: MANIFEST_VERSION,
            entries,
        },
        &path,
    )?;
    Ok(path)
}

pub fn write_loss_trace(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut text = String::from("step,d_loss,g_loss\n");
    for r in history {
        text.push_str(&format!("{},{},{}\n", r.step, r.d_loss, r.g_loss));
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize| {
        Error::InvalidInput(format!(
            "{}: malformed loss trace line {line}",
            path.display()
        ))
    };
    let mut lines = text.lines();
    if lines.next() != Some("step,d_loss,g_loss") {
        return Err(bad(1));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(i + 2));
            }
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad(i + 2))?,
                d_loss: f[1].parse().map_err(|_| bad(i + 2))?,
                g_loss: f[2].parse().map_err(|_| bad(i + 2))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    kind: String,
    meta: serde_json::Value,
    payload_bytes: usize,
    tensors: Vec<TensorEntry>,
}

/// Tensors read back from a container, keyed by name.
pub(crate) type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Serializes a container. Tensor order is the order given.
pub(crate) fn encode_container(
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Vec<u8> {
    let mut table = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in tensors {
        table.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len(),
        });
        offset += data.len();
    }
    let header = ContainerHeader {
        kind: kind.to_owned(),
        meta,
        payload_bytes: offset * 4,
        tensors: table,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, data) in tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode_container(
    path: &Path,
    bytes: &[u8],
    expected_kind: &str,
) -> Result<(serde_json::Value, TensorMap)> {
    let fail = |reason: String| Error::checkpoint(path, reason);
    if bytes.len() < PREAMBLE {
        return Err(fail(format!("truncated: {} bytes", bytes.len())));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fail("truncated header".into()))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| fail(format!("malformed header: {e}")))?;
    if header.kind != expected_kind {
        return Err(fail(format!(
            "holds a `{}`, expected `{expected_kind}`",
            header.kind
        )));
    }
    let payload = &bytes[header_end..];
    if payload.len() != header.payload_bytes {
        return Err(fail(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut expected_offset = 0usize;
    let mut tensors = TensorMap::new();
    for t in header.tensors {
        let elems = t.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if elems != Some(t.len) || t.offset != expected_offset {
            return Err(fail(format!("shape table inconsistent at `{}`", t.name)));
        }
        expected_offset += t.len;
        if expected_offset * 4 > payload.len() {
            return Err(fail(format!("tensor `{}` runs past the payload", t.name)));
        }
        let data = payload[t.offset * 4..expected_offset * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(t.name.clone(), (t.shape, data)).is_some() {
            return Err(fail(format!("duplicate tensor `{}`", t.name)));
        }
    }
    if expected_offset * 4 != payload.len() {
        return Err(fail("shape table does not cover the payload".into()));
    }
    Ok((header.meta, tensors))
}

pub(crate) fn push_store(
    out: &mut Vec<(String, Vec<usize>, Vec<f32>)>,
    prefix: &str,
    store: &ParamStore<f32>,
) {
    for (name, p) in store.iter() {
        out.push((format!("{prefix}{name}"), p.shape.clone(), p.data.clone()));
    }
}

/// Removes every tensor under `prefix` into a store.
pub(crate) fn take_store(tensors: &mut TensorMap, prefix: &str) -> ParamStore<f32> {
    let names: Vec<String> = tensors
        .keys()
        .filter(|k| k.starts_with(prefix))
        .cloned()
        .collect();
    let mut store = ParamStore::new();
    for name in names {
        let (shape, data) = tensors.remove(&name).expect("listed key");
        store.insert(&name[prefix.len()..], shape, data);
    }
    store
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    /// 32-byte key as lowercase hex.
    seed: String,
    stream: u64,
    /// Decimal string: JSON numbers cannot carry a full `u128`.
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Option<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 {
            return None;
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(self.seed.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    train_config: TrainConfig,
    generator_config: GeneratorConfig,
    discriminator_config: DiscriminatorConfig,
    step: u64,
    epoch: u64,
    gen_adam_t: u64,
    disc_adam_t: u64,
    rng: RngState,
    history_len: usize,
}

const KIND_TRAIN: &str = "train_state";

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let meta = TrainMeta {
        train_config: state.config,
        generator_config: *state.generator.config(),
        discriminator_config: *state.discriminator.config(),
        step: state.step,
        epoch: state.epoch,
        gen_adam_t: state.gen_adam.t,
        disc_adam_t: state.disc_adam.t,
        rng: RngState::capture(&state.rng),
        history_len: state.history.len(),
    };
    let mut tensors = Vec::new();
    push_store(&mut tensors, "gen.param.", &state.generator.params);
    push_store(&mut tensors, "gen.buffer.", &state.generator.buffers);
    push_store(&mut tensors, "gen.adam_m.", &state.gen_adam.m);
    push_store(&mut tensors, "gen.adam_v.", &state.gen_adam.v);
    push_store(&mut tensors, "disc.param.", &state.discriminator.params);
    push_store(&mut tensors, "disc.buffer.", &state.discriminator.buffers);
    push_store(&mut tensors, "disc.adam_m.", &state.disc_adam.m);
    push_store(&mut tensors, "disc.adam_v.", &state.disc_adam.v);
    let n = state.history.len();
    tensors.push((
        "history.d_loss".into(),
        vec![n],
        state.history.iter().map(|r| r.d_loss).collect(),
    ));
    tensors.push((
        "history.g_loss".into(),
        vec![n],
        state.history.iter().map(|r| r.g_loss).collect(),
    ));
    let meta = serde_json::to_value(meta).expect("meta serializes");
    encode_container(KIND_TRAIN, meta, &tensors)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state))
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<TrainState> {
    let (meta, mut tensors) = decode_container(path, bytes, KIND_TRAIN)?;
    let fail = |reason: String| Error::checkpoint(path, reason);
    let meta: TrainMeta =
        serde_json::from_value(meta).map_err(|e| fail(format!("malformed metadata: {e}")))?;
    let wrap = |e: Error| fail(e.to_string());
    let generator = Generator::from_parts(
        meta.generator_config,
        take_store(&mut tensors, "gen.param."),
        take_store(&mut tensors, "gen.buffer."),
    )
    .map_err(wrap)?;
    let discriminator = Discriminator::from_parts(
        meta.discriminator_config,
        take_store(&mut tensors, "disc.param."),
        take_store(&mut tensors, "disc.buffer."),
    )
    .map_err(wrap)?;
    let adam = |tensors: &mut TensorMap, prefix: &str, params: &ParamStore<f32>, t| {
        let m = take_store(tensors, &format!("{prefix}adam_m."));
        let v = take_store(tensors, &format!("{prefix}adam_v."));
        params.check_congruent(&m, "Adam first moments")?;
        params.check_congruent(&v, "Adam second moments")?;
        Ok::<_, Error>(AdamState { m, v, t })
    };
    let gen_adam = adam(&mut tensors, "gen.", &generator.params, meta.gen_adam_t).map_err(wrap)?;
    let disc_adam = adam(
        &mut tensors,
        "disc.",
        &discriminator.params,
        meta.disc_adam_t,
    )
    .map_err(wrap)?;
    let mut history_part = |name: &str| {
        tensors
            .remove(name)
            .filter(|(shape, _)| shape == &[meta.history_len])
            .map(|(_, data)| data)
            .ok_or_else(|| fail(format!("missing or misshapen `{name}`")))
    };
    let d = history_part("history.d_loss")?;
    let g = history_part("history.g_loss")?;
    if let Some(extra) = tensors.keys().next() {
        return Err(fail(format!("unexpected tensor `{extra}`")));
    }
    let history = d
        .into_iter()
        .zip(g)
        .enumerate()
        .map(|(i, (d_loss, g_loss))| LossRecord {
            step: i as u64 + 1,
            d_loss,
            g_loss,
        })
        .collect();
    let rng = meta
        .rng
        .restore()
        .ok_or_else(|| fail("malformed RNG state".into()))?;
    meta.train_config.validate().map_err(wrap)?;
    Ok(TrainState {
        config: meta.train_config,
        generator,
        discriminator,
        gen_adam,
        disc_adam,
        step: meta.step,
        epoch: meta.epoch,
        rng,
        history,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::DiscriminatorConfig;
    use crate::generator::Variant;
    use crate::scene::make_dataset;
    use crate::types::Seed;
    use rand::RngCore;

    fn small_state() -> TrainState {
        let config = TrainConfig {
            batch_size: 2,
            epochs: 2,
            ..TrainConfig::default()
        };
        let gen = GeneratorConfig {
            base_width: 1,
            ..GeneratorConfig::tiny(Variant::Mid)
        };
        let disc = DiscriminatorConfig {
            base_width: 1,
            feature_dim: 8,
            ..DiscriminatorConfig::tiny()
        };
        TrainState::new(config, gen, disc).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_identity() {
        let data = make_dataset(Seed(9), 2, 0.5).unwrap();
        let mut state = small_state();
        state.train_step(&[&data[0], &data[1]]).unwrap();
        state.rng.next_u64();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back == state);
        let mut a = state.rng.clone();
        let mut b = back.rng.clone();
        assert_eq!(a.next_u64(), b.next_u64());
        assert_eq!(encode_checkpoint(&back), fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_or_corrupt_checkpoints_are_rejected() {
        let bytes = encode_checkpoint(&small_state());
        let p = Path::new("x.ckpt");
        for cut in [0, 10, 25, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(p, &bytes[..cut]),
                Err(Error::Checkpoint { .. })
            ));
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_checkpoint(p, &longer).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 2;
        let err = decode_checkpoint(p, &wrong_version).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn shape_table_mismatch_is_rejected() {
        let bytes = encode_checkpoint(&small_state());
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let needle = "\"shape\":[1,3,5,5]";
        assert!(text.contains(needle));
        // Same byte length, different element count.
        let patched = text.replacen(needle, "\"shape\":[1,3,5,4]", 1);
        let mut bad = bytes.clone();
        let pos = text.find(needle).unwrap();
        bad[pos..pos + needle.len()].copy_from_slice(&patched.as_bytes()[pos..pos + needle.len()]);
        let err = decode_checkpoint(Path::new("x"), &bad).unwrap_err();
        assert!(err.to_string().contains("shape table"), "{err}");
    }

    #[test]
    fn dataset_roundtrip_is_pixel_identical() {
        let data = make_dataset(Seed(3), 4, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.location_id, b.location_id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.overhead.to_bytes(), b.overhead.to_bytes());
            assert_eq!(a.ground.to_bytes(), b.ground.to_bytes());
        }
    }

    #[test]
    fn wrong_image_size_names_the_entry() {
        let data = make_dataset(Seed(3), 2, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &data).unwrap();
        let m = read_manifest(&manifest).unwrap();
        write_png(
            &dir.path().join(&m.entries[1].overhead_path),
            &vec![0u8; 100 * 100 * 3],
            100,
            100,
        )
        .unwrap();
        match load_dataset(&manifest) {
            Err(Error::ManifestEntry { index, reason }) => {
                assert_eq!(index, 1);
                assert!(reason.contains("100x100"), "{reason}");
            }
            other => panic!("expected entry error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_missing_files_are_rejected() {
        let data = make_dataset(Seed(3), 2, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &data).unwrap();
        let mut m = read_manifest(&manifest).unwrap();
        m.entries[1].location_id = m.entries[0].location_id.clone();
        write_json(&m, &manifest).unwrap();
        assert!(matches!(
            load_dataset(&manifest),
            Err(Error::ManifestEntry { index: 1, .. })
        ));
        m.entries[1].location_id = "other".into();
        m.entries[1].ground_path = "ground/missing.png".into();
        write_json(&m, &manifest).unwrap();
        match load_dataset(&manifest) {
            Err(Error::ManifestEntry { index: 1, reason }) => assert!(reason.contains("missing")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_schema_is_strict() {
        let ok = r#"{"version":1,"entries":[{"location_id":"a","overhead_path":"o.png",
            "ground_path":"g.png","label":"urban","latitude":51.5,"longitude":-0.1}]}"#;
        let m: DatasetManifest = serde_json::from_str(ok).unwrap();
        assert_eq!(m.entries[0].label, Some(LandCover::Urban));
        let bad = r#"{"version":1,"entries":[],"extra":true}"#;
        assert!(serde_json::from_str::<DatasetManifest>(bad).is_err());
    }

    #[test]
    fn loss_trace_roundtrip() {
        let h = vec![
            LossRecord {
                step: 1,
                d_loss: 1.386_294_4,
                g_loss: 0.1 + 0.2,
            },
            LossRecord {
                step: 2,
                d_loss: 1e-7,
                g_loss: 3.0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_loss_trace(&h, &p).unwrap();
        assert!(fs::read_to_string(&p)
            .unwrap()
            .starts_with("step,d_loss,g_loss\n1,"));
        assert_eq!(read_loss_trace(&p).unwrap(), h);
    }
}
