//! Binary container of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"HRTENSOR"
//! version  u32 (= 1)
//! meta     u64 length + UTF-8 bytes
//! count    u64
//! per tensor:
//!   name   u64 length + UTF-8 bytes
//!   dtype  u8 (0 = f64)
//!   rank   u32, then rank x u64 dims
//!   values numel x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HRTENSOR";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
// Guards against allocating absurd buffers from a corrupt header.
const MAX_LEN: u64 = 1 << 40;

pub fn write_container(path: &Path, meta: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, meta)?;
        w.write_all(&(tensors.len() as u64).to_le_bytes())?;
        for (name, t) in tensors {
            write_str(&mut w, name)?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a tensor container".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta = read_str(&mut r).map_err(|e| bad(e.to_string()))?;
    let count = read_u64(&mut r)?;
    if count > MAX_LEN {
        return Err(bad(format!("implausible tensor count {count}")));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = read_str(&mut r).map_err(|e| bad(e.to_string()))?;
        let mut dtype = [0u8];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(bad(format!("tensor `{name}` has unsupported dtype {}", dtype[0])));
        }
        let rank = read_u32(&mut r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if numel > MAX_LEN {
            return Err(bad(format!("tensor `{name}` is implausibly large")));
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok((meta, out))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u64(r)?;
    if n > MAX_LEN {
        return Err(Error::Checkpoint(format!("implausible string length {n}")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let tensors = vec![
            ("a".to_string(), Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
            ("b".to_string(), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()),
            ("empty".to_string(), Tensor::zeros(0, 4)),
        ];
        write_container(&path, "{\"k\":1}", &tensors).unwrap();
        let (meta, back) = read_container(&path).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"NOTATENSORFILE").unwrap();
        assert!(matches!(read_container(&path), Err(Error::Checkpoint(_))));
    }
}
