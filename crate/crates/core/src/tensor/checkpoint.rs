//! `SBCK` checkpoint container.
//!
//! ```text
//! "SBCK" | u32 version | u32 count
//! count × ( u32 name_len | name utf-8 | u32 rank | rank × u64 dim | f64 payload )
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SBCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            message: format!("truncated {what}"),
        })?;
        self.offset += N;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor {
        inner: r,
        offset: 0,
    };
    if &c.take::<4>("magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected SBCK".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = c.u32("count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let mut name = vec![0u8; len];
        c.inner.read_exact(&mut name).map_err(|_| Error::Format {
            offset: c.offset,
            message: "truncated name".into(),
        })?;
        let at = c.offset;
        c.offset += len;
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            offset: at,
            message: "name is not utf-8".into(),
        })?;
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(c.take("dim")?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(c.take("payload")?));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let f = File::create(path)?;
    write_checkpoint(BufWriter::new(f), &params.named_tensors())
}

pub fn load_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let tensors = read_checkpoint(BufReader::new(File::open(path)?))?;
    params.load(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Param;

    #[test]
    fn round_trip_is_bit_exact() {
        let tensors = vec![
            ("a".to_string(), Tensor::new(&[2, 2], vec![1.0, -0.5, 1e-300, f64::MAX]).unwrap()),
            ("b.bias".to_string(), Tensor::zeros(&[3])),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &tensors).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, tensors);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        assert!(matches!(
            read_checkpoint(&b"NOPE\x01\0\0\0\0\0\0\0"[..]),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".into(), Tensor::zeros(&[4]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_and_missing_tensor() {
        let mut set = ParamSet::new();
        set.push(&Param::new("w", Tensor::zeros(&[2])));
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.sbck");
        assert!(matches!(load_checkpoint(&missing, &set), Err(Error::Missing(_))));

        let path = dir.path().join("other.sbck");
        let f = File::create(&path).unwrap();
        write_checkpoint(f, &[("v".into(), Tensor::zeros(&[2]))]).unwrap();
        assert!(load_checkpoint(&path, &set).is_err());
    }
}
