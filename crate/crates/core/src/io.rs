//! File formats: PFM float maps, 8-bit PGM, radar CSV and JSON, all written
//! atomically through a temp file in the target directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Single-channel float map, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Grayscale little-endian PFM (`Pf`, scale -1). Values are stored as `f32`
/// and rows bottom to top, as the format requires.
pub fn encode_pfm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pfm buffer size");
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(values.len() * 4);
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(path: &Path, bytes: &[u8]) -> Result<FloatMap, IoError> {
    let mut fields = Vec::with_capacity(4);
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
            return Err(format_err(path, "truncated PFM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err(path, "non-ascii PFM header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "Pf" {
        return Err(format_err(path, format!("expected grayscale PFM magic 'Pf', found '{}'", fields[0])));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad PFM {what} '{s}'")));
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let scale: f64 = fields[3].parse().map_err(|_| format_err(path, format!("bad PFM scale '{}'", fields[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(path, "PFM scale must be nonzero"));
    }
    let little = scale < 0.0;
    let need = width * height * 4;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != need {
        return Err(format_err(path, format!("PFM raster has {} bytes, expected {need}", raster.len())));
    }
    let mut values = vec![0.0; width * height];
    for (k, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (height - 1 - k / width, k % width);
        values[row * width + col] = f64::from(v);
    }
    Ok(FloatMap { width, height, values })
}

pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), IoError> {
    if values.len() != width * height {
        return Err(format_err(path, format!("{} values for a {width}x{height} map", values.len())));
    }
    write_atomic(path, &encode_pfm(width, height, values))
}

pub fn read_pfm(path: &Path) -> Result<FloatMap, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pfm(path, &bytes)
}

/// Binary 8-bit PGM of values in `[0, 1]`.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm buffer size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Returns values scaled back to `[0, 1]`.
pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<FloatMap, IoError> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected binary PGM magic 'P5', found '{}'", fields[0])));
    }
    let nums: Vec<usize> = fields[1..]
        .iter()
        .map(|s| s.parse().map_err(|_| format_err(path, format!("bad PGM header field '{s}'"))))
        .collect::<Result<_, _>>()?;
    let (width, height, maxval) = (nums[0], nums[1], nums[2]);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("unsupported PGM maxval {maxval}")));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != width * height {
        return Err(format_err(path, format!("PGM raster has {} bytes, expected {}", raster.len(), width * height)));
    }
    let values = raster.iter().map(|b| f64::from(*b) / maxval as f64).collect();
    Ok(FloatMap { width, height, values })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), IoError> {
    if values.len() != width * height {
        return Err(format_err(path, format!("{} values for a {width}x{height} image", values.len())));
    }
    write_atomic(path, &encode_pgm(width, height, values))
}

pub fn read_pgm(path: &Path) -> Result<FloatMap, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RadarRow {
    x: f64,
    y: f64,
    z: f64,
}

/// Serializes rows with a header into memory.
pub fn csv_bytes<T: Serialize>(path: &Path, rows: &[T]) -> Result<Vec<u8>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|source| IoError::Csv { path: path.to_path_buf(), source })?;
    }
    w.into_inner().map_err(|e| format_err(path, e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    write_atomic(path, &csv_bytes(path, rows)?)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(|source| IoError::Csv { path: path.to_path_buf(), source })?;
    r.deserialize().map(|row| row.map_err(|source| IoError::Csv { path: path.to_path_buf(), source })).collect()
}

/// Radar returns in the sensor frame as `x,y,z` (meters).
pub fn write_radar_csv(path: &Path, points: &[Vector3<f64>]) -> Result<(), IoError> {
    let rows: Vec<RadarRow> = points.iter().map(|p| RadarRow { x: p.x, y: p.y, z: p.z }).collect();
    write_csv(path, &rows)
}

pub fn read_radar_csv(path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    Ok(read_csv::<RadarRow>(path)?.into_iter().map(|r| Vector3::new(r.x, r.y, r.z)).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}
