//! Binary dataset parsing, image file I/O, and versioned checkpoints.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffusion::LossKind;
use crate::image::ImageTensor;
use crate::nn::{Adam, AdamParams, NoisePredictor, NoisePredictorConfig, Real, TrainState};
use crate::schedule::VarianceSchedule;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Parsed IDX tensor (unsigned-byte element type).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl IdxTensor {
    /// Number of items along the first dimension.
    pub fn count(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }
}

/// Parse an IDX file: big-endian magic and dims, payload validated to the
/// exact length the header promises.
pub fn read_idx(path: &Path) -> Result<IdxTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload { expected: 4, actual: bytes.len() });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndim = match magic {
        IDX_MAGIC_LABELS => 1usize,
        IDX_MAGIC_IMAGES => 3usize,
        other => return Err(Error::BadMagic(other)),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::TruncatedPayload { expected: header, actual: bytes.len() });
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 4 + 4 * d;
        dims.push(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as usize);
    }
    let mut total: usize = 1;
    for &d in &dims {
        if d == 0 {
            return Err(Error::DimOverflow(dims.clone()));
        }
        total = total.checked_mul(d).ok_or_else(|| Error::DimOverflow(dims.clone()))?;
    }
    let actual = bytes.len() - header;
    if actual != total {
        return Err(Error::TruncatedPayload { expected: total, actual });
    }
    Ok(IdxTensor { magic, dims, payload: bytes[header..].to_vec() })
}

/// Serialize an IDX tensor in the canonical big-endian layout.
pub fn write_idx(t: &IdxTensor, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * t.dims.len() + t.payload.len());
    out.extend_from_slice(&t.magic.to_be_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.payload);
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

/// Write an 8-bit grayscale or RGB PNG.
pub fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let h = img.height() as u32;
    let w = img.width() as u32;
    let bytes = img.to_storage_u8();
    let n = img.height() * img.width();
    let result = match img.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("sized buffer")
            .save_with_format(path, image::ImageFormat::Png),
        3 => {
            // CHW planes to interleaved RGB
            let mut inter = Vec::with_capacity(3 * n);
            for i in 0..n {
                inter.push(bytes[i]);
                inter.push(bytes[n + i]);
                inter.push(bytes[2 * n + i]);
            }
            image::RgbImage::from_raw(w, h, inter)
                .expect("sized buffer")
                .save_with_format(path, image::ImageFormat::Png)
        }
        c => return Err(Error::invalid(format!("cannot encode {c}-channel image"))),
    };
    result.map_err(|e| Error::MalformedImage { path: path.display().to_string(), detail: e.to_string() })
}

/// Read an 8-bit grayscale or RGB PNG into model space.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::open(path).map_err(|e| Error::MalformedImage {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            ImageTensor::from_storage_u8(1, h as usize, w as usize, g.as_raw())
        }
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            let n = (w * h) as usize;
            let raw = rgb.as_raw();
            let mut chw = vec![0u8; 3 * n];
            for i in 0..n {
                chw[i] = raw[3 * i];
                chw[n + i] = raw[3 * i + 1];
                chw[2 * n + i] = raw[3 * i + 2];
            }
            ImageTensor::from_storage_u8(3, h as usize, w as usize, &chw)
        }
        image::DynamicImage::ImageLuma16(_)
        | image::DynamicImage::ImageRgb16(_)
        | image::DynamicImage::ImageLumaA16(_)
        | image::DynamicImage::ImageRgba16(_) => {
            Err(Error::UnsupportedBitDepth(path.display().to_string()))
        }
        other => Err(Error::MalformedImage {
            path: path.display().to_string(),
            detail: format!("unsupported color type {:?}", other.color()),
        }),
    }
}

/// Load every PNG in a directory, sorted by file name.
pub fn read_png_dir(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e.eq_ignore_ascii_case("png")).unwrap_or(false))
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            read_png(&p).map(|img| (name, img))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"BFRCKPT\0";
const CKPT_VERSION: u32 = 1;

const SECTION_HEADER: u32 = 1;
const SECTION_PARAMS: u32 = 2;
const SECTION_ADAM_M: u32 = 3;
const SECTION_ADAM_V: u32 = 4;

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    dtype: String,
    config: NoisePredictorConfig,
    schedule: (usize, f64, f64),
    loss_kind: LossKind,
    adam: AdamParams,
    adam_t: u64,
    step: u64,
    param_count: usize,
    build_seed: u64,
}

fn push_section(out: &mut Vec<u8>, tag: u32, payload: &[u8]) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let digest = Sha256::digest(payload);
    out.extend_from_slice(&digest);
}

fn floats_to_bytes<T: Real>(vals: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_f64().to_le_bytes());
    }
    out
}

fn bytes_to_floats<T: Real>(bytes: &[u8], section: &str) -> Result<Vec<T>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::TruncatedCheckpoint(format!("{section} not a multiple of 8 bytes")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect())
}

fn dtype_name<T: Real>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Serialize training state: a JSON header plus little-endian `f64` payloads
/// (parameters in layout order, then both optimizer moments), each section
/// guarded by a SHA-256 checksum.
pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CKPT_VERSION,
        dtype: dtype_name::<T>().to_string(),
        config: state.model().config().clone(),
        schedule: state.schedule().triple(),
        loss_kind: state.loss_kind(),
        adam: state.optimizer().hp,
        adam_t: state.optimizer().t,
        step: state.step(),
        param_count: state.model().param_count(),
        build_seed: 0,
    };
    let header_json = serde_json::to_vec(&header).expect("serializable header");

    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    push_section(&mut out, SECTION_HEADER, &header_json);
    push_section(&mut out, SECTION_PARAMS, &floats_to_bytes(state.model().params()));
    push_section(&mut out, SECTION_ADAM_M, &floats_to_bytes(&state.optimizer().m));
    push_section(&mut out, SECTION_ADAM_V, &floats_to_bytes(&state.optimizer().v));
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_section<'a>(bytes: &'a [u8], pos: &mut usize, want_tag: u32) -> Result<&'a [u8]> {
    if bytes.len() < *pos + 12 {
        return Err(Error::TruncatedCheckpoint(format!("section header at byte {}", *pos)));
    }
    let tag = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().expect("4 bytes"));
    if tag != want_tag {
        return Err(Error::TruncatedCheckpoint(format!("expected section {want_tag}, found {tag}")));
    }
    let len = u64::from_le_bytes(bytes[*pos + 4..*pos + 12].try_into().expect("8 bytes")) as usize;
    let start = *pos + 12;
    if bytes.len() < start + len + 32 {
        return Err(Error::TruncatedCheckpoint(format!("section {want_tag} payload")));
    }
    let payload = &bytes[start..start + len];
    let stored = &bytes[start + len..start + len + 32];
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored {
        return Err(Error::ChecksumFailure(format!("section {want_tag}")));
    }
    *pos = start + len + 32;
    Ok(payload)
}

/// Load a checkpoint saved by [`save_checkpoint`] with matching precision.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::TruncatedCheckpoint("missing magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch { found: version, supported: CKPT_VERSION });
    }
    let mut pos = 12usize;
    let header_bytes = read_section(&bytes, &mut pos, SECTION_HEADER)?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::TruncatedCheckpoint(format!("header json: {e}")))?;
    if header.dtype != dtype_name::<T>() {
        return Err(Error::invalid(format!(
            "checkpoint stores {} parameters, requested {}",
            header.dtype,
            dtype_name::<T>()
        )));
    }

    let params: Vec<T> = bytes_to_floats(read_section(&bytes, &mut pos, SECTION_PARAMS)?, "params")?;
    let m: Vec<T> = bytes_to_floats(read_section(&bytes, &mut pos, SECTION_ADAM_M)?, "adam_m")?;
    let v: Vec<T> = bytes_to_floats(read_section(&bytes, &mut pos, SECTION_ADAM_V)?, "adam_v")?;
    if params.len() != header.param_count || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::TruncatedCheckpoint("payload length mismatch".into()));
    }

    let mut model: NoisePredictor<T> = NoisePredictor::build(header.config, 0)?;
    model.set_params(params)?;
    let schedule = VarianceSchedule::linear(header.schedule.0, header.schedule.1, header.schedule.2)?;
    let opt = Adam { hp: header.adam, m, v, t: header.adam_t };
    Ok(TrainState::from_parts(model, schedule, header.loss_kind, opt, header.step))
}

/// Load just the model from a checkpoint (inference use).
pub fn load_model<T: Real>(path: &Path) -> Result<NoisePredictor<T>> {
    Ok(load_checkpoint::<T>(path)?.into_model())
}
