//! File formats.
//!
//! # Frames
//!
//! A frame is stored as an image plus a JSON sidecar with the same stem:
//!
//! ```text
//! frame_0001.png    16-bit grayscale, row = azimuth bin, col = range bin,
//!                   pixel = round(value / peak_value * 65535)
//! frame_0001.f32    alternative: rows * cols little-endian f32, row-major
//! frame_0001.json   {"azimuth_res": 1.8, "range_res": 0.35,
//!                    "peak_value": 255.0, "frame_index": 1,
//!                    "rows": 200, "cols": 288}
//! ```
//!
//! `rows` and `cols` are required for raw files and optional for PNG.
//! Frames cover 360 degrees, so `azimuth_res` must equal `360 / rows`.
//!
//! # Measurements
//!
//! A compressed frame (`.rms`) is a header followed by one record per block,
//! all little-endian:
//!
//! ```text
//! offset size  frame header (48 bytes)
//!      0    4  magic "RMSF"
//!      4    1  version = 1
//!      5    3  reserved, zero
//!      8    4  rows         u32
//!     12    4  cols         u32
//!     16    4  block_rows   u32
//!     20    4  block_cols   u32
//!     24    8  range_res    f64
//!     32    8  peak_value   f64
//!     40    4  frame_index  u32
//!     44    4  record count u32
//!
//! offset size  block record (32-byte header + payload)
//!      0    4  magic "RMSR"
//!      4    1  version = 1
//!      5    1  matrix kind: 0 gaussian, 1 bpbd, 2 bpd
//!      6    2  reserved, zero
//!      8    4  m            u32
//!     12    4  n            u32
//!     16    8  matrix seed  u64
//!     24    4  azimuth block u32
//!     28    4  range block   u32
//!     32  4*m  measurements f32
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BlockGrid, BlockIndex, GeometryError, RadarFrame};
use crate::sensing::{MatrixDescriptor, MatrixKind, MeasurementSet};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Geometry {
        path: PathBuf,
        #[source]
        source: GeometryError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    Png,
    Raw,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Png => "png",
            FrameFormat::Raw => "f32",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "png" => Some(FrameFormat::Png),
            "f32" | "raw" => Some(FrameFormat::Raw),
            _ => None,
        }
    }
}

impl std::str::FromStr for FrameFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "png" => Ok(FrameFormat::Png),
            "raw" | "f32" => Ok(FrameFormat::Raw),
            other => Err(format!("unknown frame format `{other}` (png, raw)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub azimuth_res: f64,
    pub range_res: f64,
    pub peak_value: f64,
    pub frame_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
}

impl FrameMeta {
    pub fn of(frame: &RadarFrame) -> Self {
        Self {
            azimuth_res: frame.azimuth_res(),
            range_res: frame.range_res(),
            peak_value: frame.peak_value(),
            frame_index: frame.frame_index(),
            rows: Some(frame.rows()),
            cols: Some(frame.cols()),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Conventional file name of frame `index`.
pub fn frame_file_name(index: u32, format: FrameFormat) -> String {
    format!("frame_{index:04}.{}", format.extension())
}

fn read_meta(path: &Path) -> Result<FrameMeta, IoError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|e| format_err(&side, e.to_string()))
}

fn write_meta(path: &Path, frame: &RadarFrame) -> Result<(), IoError> {
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&FrameMeta::of(frame)).expect("plain struct");
    fs::write(&side, text + "\n").map_err(io_err(&side))
}

fn build_frame(path: &Path, data: Array2<f64>, meta: &FrameMeta) -> Result<RadarFrame, IoError> {
    let (rows, cols) = data.dim();
    if meta.rows.is_some_and(|r| r != rows) || meta.cols.is_some_and(|c| c != cols) {
        return Err(format_err(
            path,
            format!("sidecar says {:?}x{:?}, data is {rows}x{cols}", meta.rows, meta.cols),
        ));
    }
    if (meta.azimuth_res - 360.0 / rows as f64).abs() > 1e-9 {
        return Err(format_err(
            path,
            format!("azimuth_res {} does not match 360 / {rows}", meta.azimuth_res),
        ));
    }
    RadarFrame::new(data, meta.range_res, meta.peak_value, meta.frame_index).map_err(|source| IoError::Geometry {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_frame_png(path: &Path, frame: &RadarFrame) -> Result<(), IoError> {
    let (rows, cols) = (frame.rows(), frame.cols());
    let scale = 65535.0 / frame.peak_value();
    let mut bytes = Vec::with_capacity(rows * cols * 2);
    for &v in frame.data().iter() {
        let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_png(path, cols, rows, png::BitDepth::Sixteen, &bytes)?;
    write_meta(path, frame)
}

fn write_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let png_err = |e: png::EncodingError| format_err(path, e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn read_frame_png(path: &Path) -> Result<RadarFrame, IoError> {
    let meta = read_meta(path)?;
    let file = File::open(path).map_err(io_err(path))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let png_err = |e: png::DecodingError| format_err(path, e.to_string());
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(format_err(
            path,
            format!("expected 16-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let scale = meta.peak_value / 65535.0;
    let data = Array2::from_shape_fn((h, w), |(r, c)| {
        let i = 2 * (r * w + c);
        f64::from(u16::from_be_bytes([buf[i], buf[i + 1]])) * scale
    });
    build_frame(path, data, &meta)
}

pub fn write_frame_raw(path: &Path, frame: &RadarFrame) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(frame.len() * 4);
    for &v in frame.data().iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    write_meta(path, frame)
}

pub fn read_frame_raw(path: &Path) -> Result<RadarFrame, IoError> {
    let meta = read_meta(path)?;
    let (rows, cols) = match (meta.rows, meta.cols) {
        (Some(r), Some(c)) => (r, c),
        _ => return Err(format_err(&sidecar_path(path), "raw frames need `rows` and `cols`")),
    };
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != rows * cols * 4 {
        return Err(format_err(
            path,
            format!("{} bytes, expected {} for {rows}x{cols} f32", bytes.len(), rows * cols * 4),
        ));
    }
    let data = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let i = 4 * (r * cols + c);
        f64::from(f32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]))
    });
    // f32 rounding may push the peak a hair over
    let data = data.mapv(|v| v.min(meta.peak_value));
    build_frame(path, data, &meta)
}

pub fn read_frame(path: &Path) -> Result<RadarFrame, IoError> {
    match FrameFormat::from_path(path) {
        Some(FrameFormat::Png) => read_frame_png(path),
        Some(FrameFormat::Raw) => read_frame_raw(path),
        None => Err(format_err(path, "unknown frame extension (png, f32, raw)")),
    }
}

pub fn write_frame(path: &Path, frame: &RadarFrame, format: FrameFormat) -> Result<(), IoError> {
    match format {
        FrameFormat::Png => write_frame_png(path, frame),
        FrameFormat::Raw => write_frame_raw(path, frame),
    }
}

/// Writes frames as `frame_NNNN.<ext>` into `dir`, creating it if needed.
pub fn write_frames(dir: &Path, frames: &[RadarFrame], format: FrameFormat) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    frames
        .iter()
        .map(|f| {
            let p = dir.join(frame_file_name(f.frame_index(), format));
            write_frame(&p, f, format).map(|_| p)
        })
        .collect()
}

/// Reads every frame file in `dir`, sorted by frame index.
pub fn read_frames(dir: &Path) -> Result<Vec<RadarFrame>, IoError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| FrameFormat::from_path(p).is_some() && sidecar_path(p).exists())
        .collect();
    paths.sort();
    let mut frames = paths.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>, _>>()?;
    frames.sort_by_key(|f| f.frame_index());
    if frames.is_empty() {
        return Err(format_err(dir, "no frame files found"));
    }
    Ok(frames)
}

/// 8-bit mask image: 255 where set.
pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<(), IoError> {
    let (rows, cols) = mask.dim();
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path, cols, rows, png::BitDepth::Eight, &bytes)
}

/// 8-bit grayscale rendering scaled to `[0, peak]`.
pub fn write_image_png(path: &Path, pixels: &Array2<f64>, peak: f64) -> Result<(), IoError> {
    let (rows, cols) = pixels.dim();
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v / peak * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_png(path, cols, rows, png::BitDepth::Eight, &bytes)
}

const FRAME_MAGIC: &[u8; 4] = b"RMSF";
const RECORD_MAGIC: &[u8; 4] = b"RMSR";
const VERSION: u8 = 1;

/// Frame metadata and per-block measurements as stored in `.rms` files.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFrame {
    pub rows: usize,
    pub cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub range_res: f64,
    pub peak_value: f64,
    pub frame_index: u32,
    pub sets: Vec<MeasurementSet>,
}

impl CompressedFrame {
    pub fn new(frame: &RadarFrame, grid: &BlockGrid, sets: Vec<MeasurementSet>) -> Self {
        Self {
            rows: frame.rows(),
            cols: frame.cols(),
            block_rows: grid.block_rows,
            block_cols: grid.block_cols,
            range_res: frame.range_res(),
            peak_value: frame.peak_value(),
            frame_index: frame.frame_index(),
            sets,
        }
    }

    pub fn grid(&self) -> Result<BlockGrid, GeometryError> {
        BlockGrid::new(
            self.rows,
            self.cols,
            self.block_rows,
            self.block_cols,
            360.0 / self.rows as f64,
            self.range_res,
        )
    }

    /// An all-zero frame carrying this frame's metadata.
    pub fn template(&self) -> Result<RadarFrame, GeometryError> {
        RadarFrame::new(
            Array2::zeros((self.rows, self.cols)),
            self.range_res,
            self.peak_value,
            self.frame_index,
        )
    }

    pub fn total_measurements(&self) -> usize {
        self.sets.iter().map(|s| s.y.len()).sum()
    }
}

fn to_u32(v: usize, what: &str) -> std::io::Result<u32> {
    u32::try_from(v).map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{what} = {v} exceeds u32")))
}

pub fn encode_record<W: Write>(mut w: W, set: &MeasurementSet) -> std::io::Result<()> {
    w.write_all(RECORD_MAGIC)?;
    w.write_all(&[VERSION, set.desc.kind.code(), 0, 0])?;
    w.write_all(&to_u32(set.y.len(), "m")?.to_le_bytes())?;
    w.write_all(&to_u32(set.desc.n, "n")?.to_le_bytes())?;
    w.write_all(&set.desc.seed.to_le_bytes())?;
    w.write_all(&to_u32(set.block.az, "azimuth block")?.to_le_bytes())?;
    w.write_all(&to_u32(set.block.rng, "range block")?.to_le_bytes())?;
    for &v in &set.y {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

fn decode_record(cur: &mut Cursor) -> Result<MeasurementSet, String> {
    let start = cur.pos;
    if cur.take(4)? != RECORD_MAGIC {
        return Err(format!("bad record magic at byte {start}"));
    }
    let [version, kind, _, _] = cur.array::<4>()?;
    if version != VERSION {
        return Err(format!("unsupported record version {version}"));
    }
    let kind = MatrixKind::from_code(kind).ok_or_else(|| format!("unknown matrix kind {kind}"))?;
    let m = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    let seed = cur.u64()?;
    let az = cur.u32()? as usize;
    let rng = cur.u32()? as usize;
    let payload = cur.take(m.checked_mul(4).ok_or("record too large")?)?;
    let y = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
        .collect();
    Ok(MeasurementSet {
        block: BlockIndex::new(az, rng),
        desc: MatrixDescriptor { kind, m, n, seed },
        y,
    })
}

pub fn encode_frame<W: Write>(mut w: W, cf: &CompressedFrame) -> std::io::Result<()> {
    w.write_all(FRAME_MAGIC)?;
    w.write_all(&[VERSION, 0, 0, 0])?;
    for (v, what) in [
        (cf.rows, "rows"),
        (cf.cols, "cols"),
        (cf.block_rows, "block_rows"),
        (cf.block_cols, "block_cols"),
    ] {
        w.write_all(&to_u32(v, what)?.to_le_bytes())?;
    }
    w.write_all(&cf.range_res.to_le_bytes())?;
    w.write_all(&cf.peak_value.to_le_bytes())?;
    w.write_all(&cf.frame_index.to_le_bytes())?;
    w.write_all(&to_u32(cf.sets.len(), "record count")?.to_le_bytes())?;
    for s in &cf.sets {
        encode_record(&mut w, s)?;
    }
    Ok(())
}

pub fn decode_frame(bytes: &[u8]) -> Result<CompressedFrame, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != FRAME_MAGIC {
        return Err("bad frame magic".into());
    }
    let [version, ..] = cur.array::<4>()?;
    if version != VERSION {
        return Err(format!("unsupported frame version {version}"));
    }
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let block_rows = cur.u32()? as usize;
    let block_cols = cur.u32()? as usize;
    let range_res = cur.f64()?;
    let peak_value = cur.f64()?;
    let frame_index = cur.u32()?;
    let count = cur.u32()? as usize;
    let sets = (0..count).map(|_| decode_record(&mut cur)).collect::<Result<Vec<_>, _>>()?;
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok(CompressedFrame {
        rows,
        cols,
        block_rows,
        block_cols,
        range_res,
        peak_value,
        frame_index,
        sets,
    })
}

pub fn write_compressed(path: &Path, cf: &CompressedFrame) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    encode_frame(&mut w, cf).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_compressed(path: &Path) -> Result<CompressedFrame, IoError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_frame(&bytes).map_err(|m| format_err(path, m))
}
