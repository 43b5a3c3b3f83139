//! Tensor files and report emission.
//!
//! Native tensor layout, all little-endian:
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 4     | magic `EQTN`                    |
//! | 1     | version `0x01`                  |
//! | 1     | ndim (always 4)                 |
//! | 16    | four `u32` dims (B, C, H, W)    |
//! | 1     | scalar width: 4 (f32), 8 (f64)  |
//! | ...   | C-order payload                 |
//!
//! NumPy `.npy` v1.0 files holding a C-order 4-D `<f4`/`<f8` array are read too.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{EquivarianceReport, ReportCell};
use crate::spectral::RadialPsd;
use crate::tensor::{Dims, FeatureMap, TensorError};
use crate::verify::{SweepRow, Thresholds};

pub const MAGIC: &[u8; 4] = b"EQTN";
pub const VERSION: u8 = 1;
const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const HEADER_LEN: usize = 4 + 1 + 1 + 16 + 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: unrecognized magic bytes {found:02x?}")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: String },
    #[error("{path}: expected a 4-dimensional tensor, found {ndim} dimensions")]
    WrongNdim { path: PathBuf, ndim: usize },
    #[error("{path}: unsupported element type {dtype}")]
    UnsupportedDtype { path: PathBuf, dtype: String },
    #[error("{path}: truncated: expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: malformed header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorError,
    },
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_path_buf(), source }
}

/// On-disk element width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Reads a native or `.npy` tensor, widening f32 payloads.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureMap<f64>, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(fs_err(path))?;
    decode_tensor(&bytes, path)
}

/// Decodes tensor bytes; `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<FeatureMap<f64>, IoError> {
    if bytes.starts_with(MAGIC) {
        decode_native(bytes, path)
    } else if bytes.starts_with(NPY_MAGIC) {
        decode_npy(bytes, path)
    } else {
        Err(IoError::BadMagic { path: path.to_path_buf(), found: bytes.iter().take(6).copied().collect() })
    }
}

fn truncated(path: &Path, expected: usize, actual: usize) -> IoError {
    IoError::Truncated { path: path.to_path_buf(), expected, actual }
}

fn decode_native(bytes: &[u8], path: &Path) -> Result<FeatureMap<f64>, IoError> {
    if bytes.len() < 6 {
        return Err(truncated(path, HEADER_LEN, bytes.len()));
    }
    if bytes[4] != VERSION {
        return Err(IoError::UnsupportedVersion { path: path.to_path_buf(), version: bytes[4].to_string() });
    }
    let ndim = bytes[5] as usize;
    if ndim != 4 {
        return Err(IoError::WrongNdim { path: path.to_path_buf(), ndim });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(path, HEADER_LEN, bytes.len()));
    }
    let dims: Dims = std::array::from_fn(|i| {
        let o = 6 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    });
    let width = match bytes[22] {
        4 => 4,
        8 => 8,
        code => {
            return Err(IoError::UnsupportedDtype { path: path.to_path_buf(), dtype: format!("scalar code {code}") })
        }
    };
    decode_payload(&bytes[HEADER_LEN..], dims, width, path, HEADER_LEN)
}

fn decode_payload(
    payload: &[u8],
    dims: Dims,
    width: usize,
    path: &Path,
    offset: usize,
) -> Result<FeatureMap<f64>, IoError> {
    let n: usize = dims.iter().product();
    let expected = n * width;
    if payload.len() != expected {
        return Err(truncated(path, offset + expected, offset + payload.len()));
    }
    let data: Vec<f64> = if width == 4 {
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
    } else {
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    };
    FeatureMap::new(dims, data).map_err(|source| IoError::Tensor { path: path.to_path_buf(), source })
}

fn decode_npy(bytes: &[u8], path: &Path) -> Result<FeatureMap<f64>, IoError> {
    let bad = |reason: &str| IoError::BadHeader { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 10 {
        return Err(truncated(path, 10, bytes.len()));
    }
    if (bytes[6], bytes[7]) != (1, 0) {
        return Err(IoError::UnsupportedVersion {
            path: path.to_path_buf(),
            version: format!("{}.{}", bytes[6], bytes[7]),
        });
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + hlen {
        return Err(truncated(path, 10 + hlen, bytes.len()));
    }
    let header = std::str::from_utf8(&bytes[10..10 + hlen]).map_err(|_| bad("header is not ASCII"))?;

    let descr = dict_value(header, "descr").ok_or_else(|| bad("missing 'descr'"))?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    let width = match descr {
        "<f4" => 4,
        "<f8" => 8,
        other => return Err(IoError::UnsupportedDtype { path: path.to_path_buf(), dtype: other.to_string() }),
    };
    match dict_value(header, "fortran_order") {
        Some("False") => {}
        Some("True") => return Err(bad("Fortran-order arrays are not supported")),
        _ => return Err(bad("missing 'fortran_order'")),
    }
    let shape = dict_value(header, "shape").ok_or_else(|| bad("missing 'shape'"))?;
    let dims: Vec<usize> = shape
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("non-integer shape entry")))
        .collect::<Result<_, _>>()?;
    let dims: Dims =
        dims.as_slice().try_into().map_err(|_| IoError::WrongNdim { path: path.to_path_buf(), ndim: dims.len() })?;
    decode_payload(&bytes[10 + hlen..], dims, width, path, 10 + hlen)
}

/// Raw text of `key`'s value in a Python dict literal such as the `.npy` header.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') { rest.find(')')? + 1 } else { rest.find([',', '}'])? };
    Some(rest[..end].trim())
}

/// Encodes `x` in the native format.
pub fn encode_tensor(x: &FeatureMap<f64>, precision: Precision) -> Vec<u8> {
    let width = precision.code() as usize;
    let mut out = Vec::with_capacity(HEADER_LEN + x.len() * width);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(4);
    for d in x.dims() {
        out.extend_from_slice(&u32::try_from(d).expect("dimension fits in u32").to_le_bytes());
    }
    out.push(precision.code());
    for &v in x.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn write_tensor(x: &FeatureMap<f64>, path: impl AsRef<Path>, precision: Precision) -> Result<(), IoError> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(x, precision)).map_err(fs_err(path))
}

/// All `.eqtn` and `.npy` files in `dir`, read in file-name order.
pub fn read_tensor_dir(dir: impl AsRef<Path>) -> Result<Vec<FeatureMap<f64>>, IoError> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(fs_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(fs_err(dir)))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("eqtn" | "npy")));
    paths.sort();
    paths.iter().map(read_tensor).collect()
}

/// Six significant digits in scientific notation.
pub fn sci(v: f64) -> String {
    format!("{v:.5e}")
}

fn create(path: &Path) -> Result<csv::Writer<fs::File>, IoError> {
    let file = fs::File::create(path).map_err(fs_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<(), IoError> {
    w.flush().map_err(fs_err(path))
}

/// CSV with header `layer,group,mean,stderr,n`.
pub fn write_report(report: &EquivarianceReport, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    w.write_record(["layer", "group", "mean", "stderr", "n"]).map_err(csv_err(path))?;
    for c in &report.cells {
        w.write_record([c.layer.clone(), c.group.to_string(), sci(c.mean), sci(c.stderr), c.n.to_string()])
            .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EquivarianceReport, IoError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let cells = r.deserialize::<ReportCell>().collect::<Result<Vec<_>, _>>().map_err(csv_err(path))?;
    Ok(EquivarianceReport { cells })
}

/// Run metadata stored next to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub dims: Option<Dims>,
    pub thresholds: Option<Thresholds>,
}

impl RunMetadata {
    pub fn new(command: &str, seed: u64) -> Self {
        RunMetadata {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            dims: None,
            thresholds: None,
        }
    }
}

/// JSON document mirroring a CSV output at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonMirror<R> {
    pub metadata: RunMetadata,
    pub results: R,
}

pub fn write_json<R: Serialize>(metadata: &RunMetadata, results: &R, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let doc = JsonMirror { metadata: metadata.clone(), results };
    let mut text =
        serde_json::to_string_pretty(&doc).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(fs_err(path))
}

pub fn read_json<R: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<JsonMirror<R>, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

/// PSD table with columns `r_lo,r_hi,power,count`, preceded by `layer` when
/// several spectra are written together.
pub fn write_psd(spectra: &[(&str, &RadialPsd)], path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let named = spectra.len() != 1;
    let mut w = create(path)?;
    let mut header = vec!["r_lo", "r_hi", "power", "count"];
    if named {
        header.insert(0, "layer");
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for (name, psd) in spectra {
        for (i, (&p, &c)) in psd.power.iter().zip(&psd.counts).enumerate() {
            let mut rec = vec![sci(psd.edges[i]), sci(psd.edges[i + 1]), sci(p), c.to_string()];
            if named {
                rec.insert(0, name.to_string());
            }
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    finish(w, path)
}

/// One row per configuration; `affine` is `none` when absent, `measured` is
/// `indeterminate` between thresholds.
pub fn write_sweep(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    w.write_record([
        "center",
        "scale",
        "affine",
        "predicted",
        "shift_error",
        "translation_error",
        "measured",
        "agreement",
    ])
    .map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.center.to_string(),
            r.scale.to_string(),
            r.affine.map_or_else(|| "none".to_string(), |a| a.to_string()),
            r.predicted.to_string(),
            sci(r.shift_error),
            sci(r.translation_error),
            r.measured.map_or_else(|| "indeterminate".to_string(), |m| m.to_string()),
            r.agrees().to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

/// Writes `maps` as `map_0000.eqtn`, `map_0001.eqtn`, ... into `dir`.
pub fn write_tensor_dir(
    maps: &[FeatureMap<f64>],
    dir: impl AsRef<Path>,
    precision: Precision,
) -> Result<Vec<PathBuf>, IoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    maps.iter()
        .enumerate()
        .map(|(i, m)| {
            let p = dir.join(format!("map_{i:04}.eqtn"));
            write_tensor(m, &p, precision).map(|_| p)
        })
        .collect()
}
