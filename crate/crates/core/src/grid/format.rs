//! `PYLD0001` field files.
//!
//! Layout, all little-endian: 8-byte magic; `u32` T, V, H, W; V variable
//! records (`u16` name length, UTF-8 name, `f64` mean, std, loss weight, and
//! level or NaN); H `f64` latitudes; W `f64` longitudes; then `T*V*H*W` `f32`
//! values in `(t, v, h, w)` row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array4;

use super::{FieldBatch, VariableSpec};
use crate::error::{Error, Result};

pub const FIELD_MAGIC: &[u8; 8] = b"PYLD0001";

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self {
            buf,
            pos: 0,
            section: "header",
        }
    }

    pub(crate) fn section(&mut self, name: &'static str) {
        self.section = name;
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!("truncated {}", self.section)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.err("dimension overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            msg: "name is not valid UTF-8".into(),
        })
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.remaining() < 8 || &self.buf[..8] != magic {
            return Err(self.err("bad magic"));
        }
        self.pos = 8;
        Ok(())
    }
}

pub(crate) fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len =
        u16::try_from(name.len()).map_err(|_| Error::Config(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

pub fn write_fields_to<W: Write>(x: &FieldBatch, mut out: W) -> Result<()> {
    let (t, v, h, w) = x.dims();
    let mut buf = Vec::with_capacity(64 + t * v * h * w * 4);
    buf.extend_from_slice(FIELD_MAGIC);
    for d in [t, v, h, w] {
        let d =
            u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for s in x.specs() {
        put_name(&mut buf, &s.name)?;
        for f in [s.mean, s.std, s.loss_weight, s.level.unwrap_or(f64::NAN)] {
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    for f in x.lat().iter().chain(x.lon()) {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    for f in x.data().iter() {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_fields(x: &FieldBatch, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_fields_to(x, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_fields_from(bytes: &[u8]) -> Result<FieldBatch> {
    let mut c = Cursor::new(bytes);
    c.expect_magic(FIELD_MAGIC)?;
    let dims = [c.u32()?, c.u32()?, c.u32()?, c.u32()?].map(|d| d as usize);
    let [t, v, h, w] = dims;
    let mut specs = Vec::with_capacity(v.min(1 << 16));
    for _ in 0..v {
        let name = c.name()?;
        let (mean, std, loss_weight, level) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?);
        specs.push(VariableSpec {
            name,
            level: (!level.is_nan()).then_some(level),
            mean,
            std,
            loss_weight,
        });
    }
    c.section("coordinates");
    let coord = |n: usize, c: &mut Cursor| -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|b| b > c.remaining()) {
            return Err(c.err("truncated coordinates"));
        }
        (0..n).map(|_| c.f64()).collect()
    };
    let lat = coord(h, &mut c)?;
    let lon = coord(w, &mut c)?;
    c.section("payload");
    let count = [t, v, h, w]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| c.err("dimension overflow"))?;
    let values = c.f32_vec(count)?;
    if c.remaining() != 0 {
        return Err(c.err(format!("{} trailing bytes", c.remaining())));
    }
    let data = Array4::from_shape_vec((t, v, h, w), values).map_err(|e| c.err(e.to_string()))?;
    FieldBatch::new(data, lat, lon, specs)
}

pub fn read_fields(path: impl AsRef<Path>) -> Result<FieldBatch> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_fields_from(&fs::read(path)?)
}
