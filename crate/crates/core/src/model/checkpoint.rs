use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::ModelParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;

/// Writes `SGCK`, u32 version, u32 tensor count, then per tensor a u16 name
/// length, the name bytes, u32 rows, u32 cols and little-endian f32 data.
pub fn write_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let tensors = params.named_tensors();
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("tensor name too long: {name}"),
        })?;
        f.write_all(&len.to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&(t.nrows() as u32).to_le_bytes())?;
        f.write_all(&(t.ncols() as u32).to_le_bytes())?;
        for &v in t.iter() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads every named tensor of an SGCK file, in file order.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Array2<f64>)>> {
    let path = path.as_ref();
    let err = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(err("truncated file".into()));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|e| err(e.to_string()))?;
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let data = take(rows * cols * 4)?;
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Array2::from_shape_vec((rows, cols), values).map_err(|e| err(e.to_string()))?;
        out.push((name, t));
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Modality;
    use crate::model::{init_params, Architecture, ModelConfig};

    #[test]
    fn round_trip_within_f32_precision() {
        let arch = Architecture::Multimodal(ModelConfig {
            d: 4,
            ..ModelConfig::default()
        });
        let p = init_params(&arch, &[(Modality::Visual, 3), (Modality::Textual, 5)], 3, 6, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sgck");
        write_checkpoint(&path, &p).unwrap();
        let back = ModelParams::from_named(&p, read_checkpoint(&path).unwrap()).unwrap();
        for ((_, a), (_, b)) in p.named_tensors().iter().zip(back.named_tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-7 * x.abs().max(1e-30));
            }
        }
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SGCK");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2 + 12 + 3);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sgck");
        fs::write(&path, b"SGCK\x01\x00\x00\x00\x05\x00\x00\x00").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
