//! Flat binary weight checkpoints.
//!
//! Layout (all integers `u32` little-endian):
//!
//! ```text
//! magic   8 bytes  "MVPCKPT\0"
//! version u32      1
//! repeated until EOF:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank u32, dims (rank × u32)
//!   data (product(dims) × f32 LE, row-major)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const MAGIC: &[u8; 8] = b"MVPCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    /// Append every parameter of `module` under `prefix`.
    pub fn extend_from(&mut self, prefix: &str, module: &dyn Parameters) {
        module.visit(prefix, &mut |name, a| {
            self.arrays.push(NamedArray {
                name: name.to_string(),
                dims: a.shape().to_vec(),
                data: a.iter().map(|v| *v as f32).collect(),
            });
        });
    }

    /// Overwrite every parameter of `module` from this checkpoint. Each
    /// parameter must be present with matching dims.
    pub fn load_into(&self, prefix: &str, module: &mut dyn Parameters) -> Result<()> {
        let index: BTreeMap<&str, &NamedArray> = self.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut problems = Vec::new();
        module.visit_mut(prefix, &mut |name, mut dst| match index.get(name) {
            None => problems.push(format!("missing array `{name}`")),
            Some(src) if src.dims != dst.shape() => problems.push(format!(
                "array `{name}` has dims {:?}, expected {:?}",
                src.dims,
                dst.shape()
            )),
            Some(src) => {
                for (d, s) in dst.iter_mut().zip(src.data.iter()) {
                    *d = *s as f64;
                }
            }
        });
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(problems.join("; ")))
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for a in &self.arrays {
            let name = a.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(a.dims.len() as u32).to_le_bytes())?;
            for d in &a.dims {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in &a.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut arrays = Vec::new();
        loop {
            let name_len = match read_u32(&mut r) {
                Ok(n) => n as usize,
                Err(Error::Io(e)) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e),
            };
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, dims, data });
        }
        Ok(Self { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, ParamInit};

    #[test]
    fn byte_layout_matches_documented_format() {
        let mut ck = Checkpoint::new();
        ck.push(NamedArray {
            name: "ab".into(),
            dims: vec![1, 2],
            data: vec![1.0, -2.0],
        });
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"MVPCKPT\0");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(Checkpoint::read_from(buf.as_slice()).unwrap(), ck);
    }

    #[test]
    fn module_round_trip_is_lossless() {
        let src = Linear::init(&mut ParamInit::new(3), 5, 4);
        let mut ck = Checkpoint::new();
        ck.extend_from("lin", &src);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut dst = Linear::init(&mut ParamInit::new(99), 5, 4);
        Checkpoint::read_from(buf.as_slice())
            .unwrap()
            .load_into("lin", &mut dst)
            .unwrap();
        assert_eq!(src, dst);
    }

    #[test]
    fn load_reports_shape_mismatch() {
        let src = Linear::init(&mut ParamInit::new(3), 5, 4);
        let mut ck = Checkpoint::new();
        ck.extend_from("lin", &src);
        let mut dst = Linear::init(&mut ParamInit::new(3), 4, 4);
        let err = ck.load_into("lin", &mut dst).unwrap_err();
        assert!(err.to_string().contains("lin.weight"));
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOTACKPT\x01\0\0\0".to_vec();
        assert!(matches!(Checkpoint::read_from(buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
