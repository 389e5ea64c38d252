//! Binary array container used for persisted densities and trajectory
//! checkpoints.
//!
//! Layout: magic `RFL1`, `u32` rank, `rank` x `u64` dimensions, then the
//! row-major payload as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"RFL1";

pub struct ArrayData {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

pub fn write_array(path: &Path, dims: &[u64], data: &[f64]) -> Result<()> {
    let expected: u64 = dims.iter().product();
    if expected != data.len() as u64 {
        return Err(CoreError::InvalidParameter(format!(
            "array payload has {} entries but dims imply {}",
            data.len(),
            expected
        )));
    }
    // write-then-rename so partial writes never leave a corrupt file behind
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            f.write_all(&d.to_le_bytes())?;
        }
        for &v in data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<ArrayData> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::MalformedArrayFile(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut rank_bytes = [0u8; 4];
    f.read_exact(&mut rank_bytes)?;
    let rank = u32::from_le_bytes(rank_bytes) as usize;
    if rank > 8 {
        return Err(CoreError::MalformedArrayFile(format!(
            "implausible rank {rank}"
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        f.read_exact(&mut b)?;
        dims.push(u64::from_le_bytes(b));
    }
    let count: u64 = dims.iter().product();
    let mut data = Vec::with_capacity(count as usize);
    let mut b = [0u8; 8];
    for _ in 0..count {
        f.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(ArrayData { dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join("rflow-array-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.rfl");
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        write_array(&path, &[2, 3, 4], &data).unwrap();
        let back = read_array(&path).unwrap();
        assert_eq!(back.dims, vec![2, 3, 4]);
        assert_eq!(back.data, data);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_dim_mismatch() {
        let dir = std::env::temp_dir().join("rflow-array-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.rfl");
        assert!(write_array(&path, &[3, 3], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("rflow-array-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("magic.rfl");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_array(&path),
            Err(CoreError::MalformedArrayFile(_))
        ));
    }
}
