//! Bit-exact tensor file format.
//!
//! Layout: magic bytes "FYP1", u32 LE rank, rank x u32 LE dims, then the
//! row-major IEEE-754 float32 payload, little-endian.

use crate::error::{PipelineError, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FYP1";

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn write_tensor_to(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
    for &d in t.dims() {
        if d > u32::MAX as usize {
            return Err(PipelineError::Parameter(format!("dimension {} exceeds u32", d)));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            PipelineError::NotFound(path.display().to_string())
        } else {
            PipelineError::Io(e)
        }
    })?);
    read_tensor_from(&mut r).map_err(|e| match e {
        PipelineError::Integrity(msg) => {
            PipelineError::Integrity(format!("{}: {}", path.display(), msg))
        }
        other => other,
    })
}

pub fn read_tensor_from(r: &mut impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| PipelineError::Integrity("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(PipelineError::Integrity(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(PipelineError::Integrity(format!("implausible rank {}", rank)));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|_| PipelineError::Integrity("truncated payload".into()))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(PipelineError::Integrity("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(&dims, data)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| PipelineError::Integrity("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::NormalSource;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fyp1");
        let mut src = NormalSource::from_seed(1);
        let t = Tensor::<f32>::randn(&[3, 4, 5], &mut src);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
        // writing again produces identical bytes
        let bytes1 = std::fs::read(&path).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fyp1");
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"FYP1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(
            f32::from_le_bytes(bytes[16..20].try_into().unwrap()),
            0.0f32
        );
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fyp1");
        let t = Tensor::<f32>::zeros(&[4]);
        write_tensor(&path, &t).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(PipelineError::Integrity(_))));

        write_tensor(&path, &t).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(PipelineError::Integrity(_))));
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(
            read_tensor(Path::new("/definitely/not/here.fyp1")),
            Err(PipelineError::NotFound(_))
        ));
    }
}
