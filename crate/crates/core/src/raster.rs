//! Single-channel rasters and the `FMAP/1` file format.
//!
//! An FMAP file is one JSON header line
//! `{"magic":"FMAP","version":1,"width":W,"height":H,"dtype":"f32le"}`
//! terminated by `\n`, followed by the row-major little-endian payload.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<P> {
    width: usize,
    height: usize,
    data: Vec<P>,
}

impl<P: Copy + Default> Raster<P> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![P::default(); width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "raster {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<P> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: P) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[P] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Copy out the window `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside raster");
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.row(y)[x0..x0 + w]);
        }
        Self { width: w, height: h, data }
    }

    pub fn map<Q: Copy + Default>(&self, f: impl Fn(P) -> Q) -> Raster<Q> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<P: Copy + Into<f64>> Raster<P> {
    /// Sum in double precision.
    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| v.into()).sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().map(|&v| v.into()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_f64(&self) -> Raster<f64> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v.into()).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FmapHeader {
    magic: String,
    version: u32,
    width: usize,
    height: usize,
    dtype: String,
}

/// Decoded FMAP payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Fmap {
    F32(Raster<f32>),
    U8(Raster<u8>),
}

fn header_bytes(width: usize, height: usize, dtype: &str) -> Vec<u8> {
    let h = FmapHeader {
        magic: "FMAP".into(),
        version: 1,
        width,
        height,
        dtype: dtype.into(),
    };
    let mut out = serde_json::to_vec(&h).expect("header serializes");
    out.push(b'\n');
    out
}

pub fn encode_f32(r: &Raster<f32>) -> Vec<u8> {
    let mut out = header_bytes(r.width, r.height, "f32le");
    out.reserve(r.data.len() * 4);
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_u8(r: &Raster<u8>) -> Vec<u8> {
    let mut out = header_bytes(r.width, r.height, "u8");
    out.extend_from_slice(&r.data);
    out
}

pub fn write_f32(path: &Path, r: &Raster<f32>) -> Result<()> {
    crate::io::write_atomic(path, &encode_f32(r))
}

pub fn write_u8(path: &Path, r: &Raster<u8>) -> Result<()> {
    crate::io::write_atomic(path, &encode_u8(r))
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Fmap> {
    let schema = |message: String| Error::Schema {
        path: origin.into(),
        message,
    };
    let mut reader = BufReader::new(bytes);
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io(origin, e))?;
    if line.last() != Some(&b'\n') {
        return Err(schema("missing FMAP header line".into()));
    }
    let header: FmapHeader =
        serde_json::from_slice(&line).map_err(|e| schema(format!("FMAP header: {e}")))?;
    if header.magic != "FMAP" || header.version != 1 {
        return Err(schema(format!(
            "unsupported FMAP magic/version {}/{}",
            header.magic, header.version
        )));
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(origin, e))?;
    let n = header.width * header.height;
    match header.dtype.as_str() {
        "f32le" => {
            if payload.len() != 4 * n {
                return Err(schema(format!("expected {} payload bytes, found {}", 4 * n, payload.len())));
            }
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Fmap::F32(Raster::from_vec(header.width, header.height, data)?))
        }
        "u8" => {
            if payload.len() != n {
                return Err(schema(format!("expected {n} payload bytes, found {}", payload.len())));
            }
            Ok(Fmap::U8(Raster::from_vec(header.width, header.height, payload)?))
        }
        other => Err(schema(format!("unknown dtype {other:?}"))),
    }
}

pub fn read(path: &Path) -> Result<Fmap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Read an `f32le` FMAP (density map).
pub fn read_f32(path: &Path) -> Result<Raster<f32>> {
    match read(path)? {
        Fmap::F32(r) => Ok(r),
        Fmap::U8(_) => Err(Error::Schema {
            path: path.into(),
            message: "expected dtype f32le, found u8".into(),
        }),
    }
}

/// Read a `u8` FMAP whose values must be 0 or 1 (segmentation map).
pub fn read_binary(path: &Path) -> Result<Raster<u8>> {
    match read(path)? {
        Fmap::U8(r) if r.data().iter().all(|&v| v <= 1) => Ok(r),
        Fmap::U8(_) => Err(Error::Schema {
            path: path.into(),
            message: "segmentation values must be 0 or 1".into(),
        }),
        Fmap::F32(_) => Err(Error::Schema {
            path: path.into(),
            message: "expected dtype u8, found f32le".into(),
        }),
    }
}
