//! `SSCK` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SSCK"  u32 version
//! repeated until end of file:
//!   u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
//!   rank × u32 extents, product(extents) × f32 values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SSCK";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode<T: Scalar>(tensors: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::config(format!("tensor name `{name}` is too long")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::config(format!("tensor `{name}` has too many axes")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::config(format!("tensor `{name}` extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::BadCheckpoint(format!(
                "truncated {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadCheckpoint("missing SSCK magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::BadCheckpoint(format!("tensor name at byte {} is not UTF-8", r.pos)))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::BadCheckpoint(format!(
                "tensor `{name}` has unsupported dtype code {dtype}"
            )));
        }
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::BadCheckpoint(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    std::fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Converts decoded tensors to another precision.
pub fn cast_all<T: Scalar>(tensors: &[(String, Tensor<f32>)]) -> Vec<(String, Tensor<T>)> {
    tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_record_layout() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("w", &t)]).unwrap();
        let mut expected = b"SSCK".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(0);
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic() {
        let err = decode(b"XXXX\x01\x00\x00\x00").unwrap_err();
        assert!(matches!(err, Error::BadCheckpoint(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncated_payload() {
        let t = Tensor::<f32>::ones(&[3, 3]);
        let mut bytes = encode(&[("a", &t)]).unwrap();
        bytes.pop();
        assert!(decode(&bytes).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn unknown_dtype() {
        let t = Tensor::<f32>::ones(&[1]);
        let mut bytes = encode(&[("a", &t)]).unwrap();
        bytes[4 + 4 + 2 + 1] = 7;
        assert!(decode(&bytes).unwrap_err().to_string().contains("dtype code 7"));
    }

    proptest! {
        #[test]
        fn round_trip(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..4),
            seed in any::<u32>(),
        ) {
            let tensors: Vec<(String, Tensor<f32>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let t = Tensor::from_fn(s, |j| ((seed as usize + j * 31 + i) % 97) as f32 - 48.5);
                    (format!("t{i}.weight"), t)
                })
                .collect();
            let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
            let back = decode(&encode(&refs).unwrap()).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }
}
