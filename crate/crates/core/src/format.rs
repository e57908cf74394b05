//! Binary tensor (`FMAP`) and layer-parameter (`DATP`) files.
//!
//! `FMAP`: magic `b"FMAP"`, `u16` version (1), `u16` dtype (1 = f64 LE),
//! `u8` rank, `rank x u32` extents, then the row-major payload. All integers
//! little-endian.
//!
//! `DATP`: magic `b"DATP"`, `u16` version (1), `u32` section count, then per
//! section a `u32` byte length, the UTF-8 name, and an `FMAP` body. The
//! section `shape` holds `[d_model, n_heads, n_points, offset_scale,
//! per_head_offsets]`; the remaining sections are the named weight tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attention::{DeformAttnParams, LayerShape, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const DATP_MAGIC: &[u8; 4] = b"DATP";
pub const VERSION: u16 = 1;
pub const DTYPE_F64_LE: u16 = 1;
const SHAPE_SECTION: &str = "shape";

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F64_LE.to_le_bytes());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(Error::Format(format!(
                "truncated {what}: expected {n} bytes, found {available}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u16("version")?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.magic(FMAP_MAGIC)?;
        self.version()?;
        let dtype = self.u16("dtype")?;
        if dtype != DTYPE_F64_LE {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let rank = self.u8("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("extent")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("extents {dims:?} overflow")))?;
        let payload = self.take(n, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            bytes.len() - r.pos
        )));
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.len());
    encode_tensor(t, &mut buf);
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

fn shape_tensor(shape: &LayerShape) -> Tensor {
    Tensor::new(
        vec![5],
        vec![
            shape.d_model as f64,
            shape.n_heads as f64,
            shape.n_points as f64,
            shape.offset_scale,
            if shape.per_head_offsets { 1.0 } else { 0.0 },
        ],
    )
    .expect("5 values")
}

fn shape_from_tensor(t: &Tensor) -> Result<LayerShape> {
    let v = t.data();
    if t.dims() != [5] {
        return Err(Error::Format(format!(
            "'shape' section must hold 5 values, has dims {:?}",
            t.dims()
        )));
    }
    let count = |x: f64, name: &str| {
        if x >= 1.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
            Ok(x as usize)
        } else {
            Err(Error::Format(format!("'{name}' must be a positive integer, got {x}")))
        }
    };
    Ok(LayerShape {
        d_model: count(v[0], "d_model")?,
        n_heads: count(v[1], "n_heads")?,
        n_points: count(v[2], "n_points")?,
        offset_scale: v[3],
        per_head_offsets: v[4] != 0.0,
    })
}

pub fn encode_params(params: &DeformAttnParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATP_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let named = params.named_tensors();
    out.extend_from_slice(&((named.len() + 1) as u32).to_le_bytes());
    let shape = shape_tensor(&params.shape);
    for (name, t) in std::iter::once((SHAPE_SECTION, &shape)).chain(named) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<DeformAttnParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(DATP_MAGIC)?;
    r.version()?;
    let count = r.u32("section count")?;
    let mut sections = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("section name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "section name")?)
            .map_err(|e| Error::Format(format!("section name is not UTF-8: {e}")))?
            .to_owned();
        let t = r.tensor()?;
        if sections.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate section '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last section",
            bytes.len() - r.pos
        )));
    }
    let shape = shape_from_tensor(
        &sections
            .remove(SHAPE_SECTION)
            .ok_or_else(|| Error::Format("missing 'shape' section".into()))?,
    )?;
    if let Some(extra) = sections.keys().find(|k| !TENSOR_NAMES.contains(&k.as_str())) {
        return Err(Error::Format(format!("unknown section '{extra}'")));
    }
    DeformAttnParams::from_tensors(shape, sections)
}

pub fn save_params(path: &Path, params: &DeformAttnParams) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<DeformAttnParams> {
    decode_params(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{random_feature_map, LayerShape};

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        assert_eq!(&buf[..4], b"FMAP");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[1, 0]);
        assert_eq!(buf[8], 2);
        assert_eq!(&buf[9..17], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[17..25], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 17 + 16);
    }

    #[test]
    fn tensor_round_trip() {
        let t = random_feature_map(3, 4, 5, 9).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        let back = decode_tensor(&buf).unwrap();
        assert_eq!(back, t);
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let t = random_feature_map(1, 2, 2, 1).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        buf.truncate(buf.len() - 3);
        let err = decode_tensor(&buf).unwrap_err().to_string();
        assert!(err.contains("expected 32 bytes, found 29"), "{err}");
    }

    #[test]
    fn rejects_bad_headers() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_tensor(&wrong), Err(Error::Format(m)) if m.contains("magic")));
        let mut dtype = buf.clone();
        dtype[6] = 2;
        assert!(decode_tensor(&dtype).is_err());
        let mut trailing = buf;
        trailing.push(0);
        assert!(decode_tensor(&trailing).is_err());
    }

    #[test]
    fn params_round_trip() {
        let shape = LayerShape {
            per_head_offsets: false,
            ..LayerShape::default()
        };
        let p = DeformAttnParams::synthesize(shape, 33).unwrap();
        let back = decode_params(&encode_params(&p)).unwrap();
        assert_eq!(back.shape, p.shape);
        assert_eq!(back.named_tensors(), p.named_tensors());
        assert_eq!(back.seed, None);
    }

    #[test]
    fn params_reject_corruption() {
        let p = DeformAttnParams::synthesize(LayerShape::default(), 1).unwrap();
        let bytes = encode_params(&p);
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes.clone();
        magic[..4].copy_from_slice(b"FMAP");
        assert!(decode_params(&magic).is_err());
    }
}
