//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "2HDE"
//! u32    format version (1)
//! u32    tensor count
//! per tensor:
//!   u16  name length, then UTF-8 name
//!   u8   element tag (0 = f32, 1 = f64)
//!   u8   rank, then rank x u32 extents
//!   raw little-endian values
//! ```
//!
//! Batch-norm running statistics are stored as ordinary named tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"2HDE";
pub const VERSION: u32 = 1;

/// Serialises named tensors into the checkpoint byte layout.
pub fn encode<'a, T: Element>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(entries.len())
            .map_err(too_large)?
            .to_le_bytes(),
    );
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(too_large)?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::TAG);
        out.push(u8::try_from(t.shape().len()).map_err(too_large)?);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(too_large)?.to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn too_large<E>(_: E) -> Error {
    Error::Data("checkpoint field exceeds its encoded width".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn values<E: Element, T: Element>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(
            n.checked_mul(E::BYTES)
                .ok_or_else(|| Error::format(self.path, "tensor too large"))?,
        )?;
        Ok(raw
            .chunks_exact(E::BYTES)
            .map(|c| T::from_f64_lossy(E::read_le(c).as_f64()))
            .collect())
    }
}

/// Parses checkpoint bytes into named tensors of element type `T`. Values
/// stored with a different element type are converted.
pub fn decode<T: Element>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(path, "tensor too large"))?;
        let data = match tag {
            t if t == f32::TAG => r.values::<f32, T>(n)?,
            t if t == f64::TAG => r.values::<f64, T>(n)?,
            other => {
                return Err(Error::format(path, format!("unknown element tag {other}")));
            }
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

impl<T: Element> Model<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(self.state())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        Self::from_state(decode(bytes, path)?)
    }

    /// Loads a checkpoint; the architecture is recovered from tensor names
    /// and shapes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Head, ModelConfig};

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode([("a", &t)]).unwrap();
        assert_eq!(&bytes[..4], b"2HDE");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 29);
    }

    #[test]
    fn rejects_unknown_version() {
        let t = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let mut bytes = encode([("a", &t)]).unwrap();
        bytes[4] = 2;
        let err = decode::<f64>(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let t = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let bytes = encode([("a", &t)]).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let cfg = ModelConfig {
            width_scale: 0.0625,
            dense_block_layers: 1,
            ..ModelConfig::tiny()
        };
        for heads in [None, Some(Head::Aif), Some(Head::Depth)] {
            let mut m = Model::<f32>::build(&cfg, 9).unwrap();
            if let Some(h) = heads {
                m = m.without_head(h).unwrap();
            }
            let bytes = m.to_bytes().unwrap();
            let back = Model::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back.architecture(), m.architecture());
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
