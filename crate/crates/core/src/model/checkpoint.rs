//! Versioned binary checkpoints: magic "SVAE", u32 version, then
//! length-prefixed named f64 tensors, all little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SvaeError};
use crate::linalg::Mat;

const MAGIC: &[u8; 4] = b"SVAE";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, tensors: &BTreeMap<String, Mat>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u32).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&(m.nrows() as u32).to_le_bytes())?;
        f.write_all(&(m.ncols() as u32).to_le_bytes())?;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                f.write_all(&m[(i, j)].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Mat>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SvaeError::MagicMismatch { expected: "SVAE" });
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(SvaeError::Length(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    f.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        f.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| SvaeError::Length("invalid tensor name".into()))?;
        f.read_exact(&mut u32buf)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        f.read_exact(&mut u32buf)?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut data = vec![0f64; rows * cols];
        let mut f64buf = [0u8; 8];
        for v in data.iter_mut() {
            f.read_exact(&mut f64buf)?;
            *v = f64::from_le_bytes(f64buf);
        }
        out.insert(name, Mat::from_row_slice(rows, cols, &data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join(format!("svae_ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "enc.0.w".to_string(),
            Mat::from_row_slice(2, 3, &[1.0, -2.5, 0.0, 1e-300, 3.7, f64::MIN_POSITIVE]),
        );
        tensors.insert("meta".to_string(), Mat::from_row_slice(1, 2, &[4.0, 8.0]));
        write_checkpoint(&path, &tensors).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(tensors, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join(format!("svae_ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPE____").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(SvaeError::MagicMismatch { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
