//! RVOL volume files: a UTF-8 JSON header line terminated by `\n`, followed
//! by a little-endian raw voxel payload. Round-trips are bit-exact.

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RvolHeader {
    pub dtype: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub kind: String,
    pub format: String,
}

/// Payload of an RVOL file.
#[derive(Clone, Debug)]
pub enum RvolData {
    F32(Array3<f32>),
    U8(Array3<u8>),
}

pub struct Rvol {
    pub header: RvolHeader,
    pub data: RvolData,
}

pub fn write_f32(
    path: &Path,
    vol: &Array3<f32>,
    spacing: [f64; 3],
    kind: &str,
    format: &str,
) -> Result<()> {
    let (d, h, w) = vol.dim();
    let header = RvolHeader {
        dtype: "f32".into(),
        dims: [d, h, w],
        spacing,
        kind: kind.into(),
        format: format.into(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    // standard layout guaranteed by construction of our arrays
    let flat = vol
        .as_slice()
        .ok_or_else(|| Error::Contract("volume must be contiguous".into()))?;
    let mut buf = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_u8(
    path: &Path,
    vol: &Array3<u8>,
    spacing: [f64; 3],
    kind: &str,
    format: &str,
) -> Result<()> {
    let (d, h, w) = vol.dim();
    let header = RvolHeader {
        dtype: "u8".into(),
        dims: [d, h, w],
        spacing,
        kind: kind.into(),
        format: format.into(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let flat = vol
        .as_slice()
        .ok_or_else(|| Error::Contract("volume must be contiguous".into()))?;
    out.write_all(flat)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Rvol> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: RvolHeader = serde_json::from_str(line.trim_end())?;
    let [d, h, w] = header.dims;
    let n = d * h * w;
    let data = match header.dtype.as_str() {
        "f32" => {
            let mut bytes = vec![0u8; n * 4];
            reader.read_exact(&mut bytes)?;
            let mut vals = Vec::with_capacity(n);
            for chunk in bytes.chunks_exact(4) {
                vals.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            RvolData::F32(
                Array3::from_shape_vec((d, h, w), vals)
                    .map_err(|e| Error::Shape(e.to_string()))?,
            )
        }
        "u8" => {
            let mut bytes = vec![0u8; n];
            reader.read_exact(&mut bytes)?;
            RvolData::U8(
                Array3::from_shape_vec((d, h, w), bytes)
                    .map_err(|e| Error::Shape(e.to_string()))?,
            )
        }
        other => return Err(Error::Parse {
            line: 1,
            msg: format!("unknown dtype {other:?}"),
        }),
    };
    Ok(Rvol { header, data })
}

pub fn read_f32(path: &Path) -> Result<(RvolHeader, Array3<f32>)> {
    let rv = read(path)?;
    match rv.data {
        RvolData::F32(a) => Ok((rv.header, a)),
        RvolData::U8(_) => Err(Error::Contract(format!(
            "{}: expected f32 payload, found u8",
            path.display()
        ))),
    }
}

pub fn read_u8(path: &Path) -> Result<(RvolHeader, Array3<u8>)> {
    let rv = read(path)?;
    match rv.data {
        RvolData::U8(a) => Ok((rv.header, a)),
        RvolData::F32(_) => Err(Error::Contract(format!(
            "{}: expected u8 payload, found f32",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn f32_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rvol");
        let vol = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| {
            (z as f32 * 100.0 + y as f32 * 10.0 + x as f32) * 1.000001 - 512.5
        });
        write_f32(&path, &vol, [1.0, 0.7, 0.7], "ct", "none").unwrap();
        let (hdr, back) = read_f32(&path).unwrap();
        assert_eq!(hdr.dims, [3, 4, 5]);
        assert_eq!(hdr.dtype, "f32");
        assert!(vol
            .iter()
            .zip(back.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn u8_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.rvol");
        let vol = Array3::from_shape_fn((2, 3, 4), |(z, y, x)| ((z + y + x) % 4) as u8);
        write_u8(&path, &vol, [1.0; 3], "labels", "separation").unwrap();
        let (hdr, back) = read_u8(&path).unwrap();
        assert_eq!(hdr.format, "separation");
        assert_eq!(vol, back);
    }
}
