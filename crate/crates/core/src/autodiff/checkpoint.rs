//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CMCKPT\0\0"
//! version u32
//! count   u32
//! per parameter:
//!   name_len u32, name utf-8,
//!   rank u32, dims u64 * rank,
//!   values f64 * product(dims)   (raw little-endian bits)
//! ```
//!
//! Values are written bit-for-bit, so a save/load round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Parameter;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CMCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_params(path: &Path, params: &[Parameter]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.tensor.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
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

/// Reads the full flat list of (name, shape, values).
pub fn load_params(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic bytes",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 name", path.display())))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        out.push((name, shape, values));
    }
    Ok(out)
}

/// Loads values into an existing registry; names and shapes must match
/// exactly.
pub fn load_params_into(path: &Path, params: &[Parameter]) -> Result<()> {
    let stored = load_params(path)?;
    if stored.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{}: has {} parameters, model has {}",
            path.display(),
            stored.len(),
            params.len()
        )));
    }
    for (p, (name, shape, values)) in params.iter().zip(&stored) {
        if &p.name != name {
            return Err(Error::Checkpoint(format!(
                "{}: parameter name mismatch: {} vs {}",
                path.display(),
                p.name,
                name
            )));
        }
        if p.tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape mismatch for {}: {:?} vs {:?}",
                path.display(),
                name,
                p.tensor.shape(),
                shape
            )));
        }
        p.tensor.set_data(values)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let params = vec![
            Parameter::new("a.weight", vec![2, 3], vec![0.1, -0.2, 1e-300, f64::MIN_POSITIVE, 3.7, -0.0]).unwrap(),
            Parameter::new("a.bias", vec![3], vec![1.0 / 3.0, 2.0_f64.sqrt(), -7.25]).unwrap(),
        ];
        save_params(&path, &params).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (p, (name, shape, values)) in params.iter().zip(&loaded) {
            assert_eq!(&p.name, name);
            assert_eq!(p.tensor.shape(), shape.as_slice());
            let orig: Vec<u64> = p.tensor.value().iter().map(|v| v.to_bits()).collect();
            let back: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(orig, back);
        }

        // and the same bytes twice
        let path2 = dir.path().join("params2.ckpt");
        save_params(&path2, &params).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let params = vec![Parameter::new("w", vec![2], vec![1.0, 2.0]).unwrap()];
        save_params(&path, &params).unwrap();

        let renamed = vec![Parameter::new("v", vec![2], vec![0.0; 2]).unwrap()];
        assert!(load_params_into(&path, &renamed).is_err());

        let reshaped = vec![Parameter::new("w", vec![1, 2], vec![0.0; 2]).unwrap()];
        assert!(load_params_into(&path, &reshaped).is_err());

        let ok = vec![Parameter::new("w", vec![2], vec![0.0; 2]).unwrap()];
        load_params_into(&path, &ok).unwrap();
        assert_eq!(ok[0].tensor.value(), vec![1.0, 2.0]);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load_params(&path).is_err());
    }
}
