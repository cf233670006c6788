//! Binary raster containers.
//!
//! Every raw raster is little-endian: a 4-byte magic, then `u32` width,
//! height and channel count, then the row-major payload.
//!
//! | magic  | contents       | channels                 | payload |
//! |--------|----------------|--------------------------|---------|
//! | `RSIM` | image          | 1 or 3                   | f32     |
//! | `RSDP` | depth          | 1 (0 = invalid)          | f32     |
//! | `RSPM` | pointmap       | 4 (x, y, z, valid flag)  | f32     |
//! | `RSFL` | flow           | 3 (dx, dy, valid flag)   | f32     |
//! | `RSSG` | segmentation   | 1                        | u16     |
//! | `RSFT` | float tensor   | any                      | f32     |
//!
//! Images may also be read from and written to 8-bit PNG, and depth from and
//! to PFM.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DepthMap, ImageBuffer, Pointmap, SceneError};
use crate::warp::FlowField;

pub const MAGIC_IMAGE: &[u8; 4] = b"RSIM";
pub const MAGIC_DEPTH: &[u8; 4] = b"RSDP";
pub const MAGIC_POINTMAP: &[u8; 4] = b"RSPM";
pub const MAGIC_FLOW: &[u8; 4] = b"RSFL";
pub const MAGIC_SEGMENTATION: &[u8; 4] = b"RSSG";
pub const MAGIC_TENSOR: &[u8; 4] = b"RSFT";

const HEADER_LEN: usize = 16;
const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

/// Label-id raster as stored on disk (the label table lives in the manifest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

/// Unconstrained multi-channel float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Any raster this crate can store.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    Image(ImageBuffer),
    Depth(DepthMap),
    Pointmap(Pointmap),
    Flow(FlowField),
    Segmentation(LabelGrid),
    Tensor(FloatRaster),
}

impl Raster {
    pub fn magic(&self) -> &'static [u8; 4] {
        match self {
            Raster::Image(_) => MAGIC_IMAGE,
            Raster::Depth(_) => MAGIC_DEPTH,
            Raster::Pointmap(_) => MAGIC_POINTMAP,
            Raster::Flow(_) => MAGIC_FLOW,
            Raster::Segmentation(_) => MAGIC_SEGMENTATION,
            Raster::Tensor(_) => MAGIC_TENSOR,
        }
    }

    /// `(width, height, channels)` as written in the header.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            Raster::Image(b) => (b.width, b.height, b.channels),
            Raster::Depth(d) => (d.width, d.height, 1),
            Raster::Pointmap(p) => (p.width, p.height, 4),
            Raster::Flow(f) => (f.width, f.height, 3),
            Raster::Segmentation(s) => (s.width, s.height, 1),
            Raster::Tensor(t) => (t.width, t.height, t.channels),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Raster::Image(_) => "image",
            Raster::Depth(_) => "depth",
            Raster::Pointmap(_) => "pointmap",
            Raster::Flow(_) => "flow",
            Raster::Segmentation(_) => "segmentation",
            Raster::Tensor(_) => "tensor",
        }
    }

    /// Serializes to the raw container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (w, h, c) = self.dims();
        let mut out = encode_header(self.magic(), w, h, c);
        let mut put = |v: f32| out.extend_from_slice(&v.to_le_bytes());
        match self {
            Raster::Image(b) => b.data.iter().for_each(|v| put(*v)),
            Raster::Depth(d) => d
                .data
                .iter()
                .zip(&d.valid)
                .for_each(|(v, ok)| put(if *ok { *v } else { 0.0 })),
            Raster::Pointmap(p) => {
                for (pt, ok) in p.data.iter().zip(&p.valid) {
                    pt.iter().for_each(|v| put(*v));
                    put(if *ok { 1.0 } else { 0.0 });
                }
            }
            Raster::Flow(f) => {
                for (d, ok) in f.flow.iter().zip(&f.valid) {
                    put(d[0]);
                    put(d[1]);
                    put(if *ok { 1.0 } else { 0.0 });
                }
            }
            Raster::Tensor(t) => t.data.iter().for_each(|v| put(*v)),
            Raster::Segmentation(s) => {
                for id in &s.labels {
                    out.extend_from_slice(&id.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a raw container, dispatching on the magic.
    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self, SceneError> {
        let header = decode_header(bytes, context)?;
        let (w, h, c) = (header.width, header.height, header.channels);
        let n = w * h;
        let malformed = |reason: String| SceneError::MalformedHeader {
            context: context.to_string(),
            reason,
        };
        let payload = &bytes[HEADER_LEN..];
        let expect_channels = |want: usize| {
            if c == want {
                Ok(())
            } else {
                Err(malformed(format!("expected {want} channels, header says {c}")))
            }
        };
        if &header.magic == MAGIC_SEGMENTATION {
            expect_channels(1)?;
            check_payload(payload.len(), n * 2, context)?;
            let labels = payload
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect();
            return Ok(Raster::Segmentation(LabelGrid {
                width: w,
                height: h,
                labels,
            }));
        }
        check_payload(payload.len(), n * c * 4, context)?;
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let flag = |v: f32| -> Result<bool, SceneError> {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(malformed(format!("validity flag must be 0 or 1, found {v}")))
            }
        };
        match &header.magic {
            MAGIC_IMAGE => {
                if let Some(v) = floats.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(malformed(format!("image value {v} outside [0, 1]")));
                }
                ImageBuffer::from_data(w, h, c, floats)
                    .map(Raster::Image)
                    .map_err(|e| malformed(e.to_string()))
            }
            MAGIC_DEPTH => {
                expect_channels(1)?;
                Ok(Raster::Depth(DepthMap::from_values(w, h, floats)))
            }
            MAGIC_POINTMAP => {
                expect_channels(4)?;
                let mut pm = Pointmap::new(w, h);
                for (i, px) in floats.chunks_exact(4).enumerate() {
                    let ok = flag(px[3])?;
                    if ok && px[..3].iter().any(|v| !v.is_finite()) {
                        return Err(malformed(format!("non-finite valid point at pixel {i}")));
                    }
                    pm.data[i] = [px[0], px[1], px[2]];
                    pm.valid[i] = ok;
                }
                Ok(Raster::Pointmap(pm))
            }
            MAGIC_FLOW => {
                expect_channels(3)?;
                let mut flow = FlowField::new(w, h);
                for (i, px) in floats.chunks_exact(3).enumerate() {
                    let ok = flag(px[2])?;
                    if ok && !(px[0].is_finite() && px[1].is_finite()) {
                        return Err(malformed(format!("non-finite valid flow at pixel {i}")));
                    }
                    flow.flow[i] = [px[0], px[1]];
                    flow.valid[i] = ok;
                }
                Ok(Raster::Flow(flow))
            }
            MAGIC_TENSOR => Ok(Raster::Tensor(FloatRaster {
                width: w,
                height: h,
                channels: c,
                data: floats,
            })),
            _ => unreachable!("magic checked in decode_header"),
        }
    }
}

pub(crate) struct Header {
    pub magic: [u8; 4],
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

pub(crate) fn encode_header(magic: &[u8; 4], w: usize, h: usize, c: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + w * h * c * 4);
    out.extend_from_slice(magic);
    for v in [w, h, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out
}

/// Reads the 16-byte header without checking the magic against a known set.
pub(crate) fn decode_header_any(bytes: &[u8], context: &str) -> Result<Header, SceneError> {
    if bytes.len() < HEADER_LEN {
        return Err(SceneError::MalformedHeader {
            context: context.to_string(),
            reason: format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len()),
        });
    }
    let u = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    Ok(Header {
        magic,
        width: u(4),
        height: u(8),
        channels: u(12),
    })
}

fn decode_header(bytes: &[u8], context: &str) -> Result<Header, SceneError> {
    if bytes.len() >= 4 {
        let known = [
            MAGIC_IMAGE,
            MAGIC_DEPTH,
            MAGIC_POINTMAP,
            MAGIC_FLOW,
            MAGIC_SEGMENTATION,
            MAGIC_TENSOR,
        ];
        if !known.iter().any(|m| bytes[..4] == m[..]) {
            return Err(SceneError::MagicMismatch {
                path: context.into(),
                expected: "one of RSIM/RSDP/RSPM/RSFL/RSSG/RSFT".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
    }
    let header = decode_header_any(bytes, context)?;
    if header.width == 0 || header.height == 0 || header.channels == 0 {
        return Err(SceneError::MalformedHeader {
            context: context.to_string(),
            reason: format!("zero dimension {}x{}x{}", header.width, header.height, header.channels),
        });
    }
    Ok(header)
}

fn check_payload(found: usize, expected: usize, context: &str) -> Result<(), SceneError> {
    if found != expected {
        return Err(SceneError::MalformedHeader {
            context: context.to_string(),
            reason: format!("payload is {found} bytes, header implies {expected}"),
        });
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), SceneError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, SceneError> {
    fs::read(path).map_err(io_err(path))
}

/// Writes a raster. Paths ending in `.png` (images) or `.pfm` (depth) use
/// those formats; everything else uses the raw container.
pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    match (raster, extension(path).as_deref()) {
        (Raster::Image(img), Some("png")) => write_png(img, path),
        (Raster::Depth(depth), Some("pfm")) => write_bytes(path, &encode_pfm(depth)),
        _ => write_bytes(path, &raster.to_bytes()),
    }
}

/// Reads a raster, recognising raw containers, PNG images and PFM depth.
pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster, SceneError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let context = path.display().to_string();
    if bytes.starts_with(PNG_SIGNATURE) {
        return read_png(&bytes, &context).map(Raster::Image);
    }
    if bytes.starts_with(b"Pf") || bytes.starts_with(b"PF") {
        return decode_pfm(&bytes, &context).map(Raster::Depth);
    }
    Raster::from_bytes(&bytes, &context)
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

/// Quantizes a unit-range value to 8 bits.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(img: &ImageBuffer, path: &Path) -> Result<(), SceneError> {
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize_u8(*v)).collect();
    let color = if img.channels == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, color).map_err(|e| SceneError::IoFailure {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

fn read_png(bytes: &[u8], context: &str) -> Result<ImageBuffer, SceneError> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| {
        SceneError::MalformedHeader {
            context: context.to_string(),
            reason: e.to_string(),
        }
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = match decoded.color().channel_count() {
        1 | 2 => (1, decoded.into_luma8().into_raw()),
        _ => (3, decoded.into_rgb8().into_raw()),
    };
    let data = raw.into_iter().map(|b| b as f32 / 255.0).collect();
    ImageBuffer::from_data(w, h, channels, data)
}

fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    // Negative scale marks little-endian; PFM rows run bottom to top.
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            let v = if depth.valid[i] { depth.data[i] } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_pfm(bytes: &[u8], context: &str) -> Result<DepthMap, SceneError> {
    let malformed = |reason: &str| SceneError::MalformedHeader {
        context: context.to_string(),
        reason: reason.to_string(),
    };
    // Header is three whitespace-terminated tokens after the magic line.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(malformed("only single-channel (Pf) PFM depth is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| malformed("bad PFM width"))?;
    let h: usize = fields[2].parse().map_err(|_| malformed("bad PFM height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| malformed("bad PFM scale"))?;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    check_payload(payload.len(), w * h * 4, context)?;
    let mut values = vec![0.0f32; w * h];
    for (k, b) in payload.chunks_exact(4).enumerate() {
        let raw = [b[0], b[1], b[2], b[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, x) = (k / w, k % w);
        values[(h - 1 - row) * w + x] = v;
    }
    Ok(DepthMap::from_values(w, h, values))
}
