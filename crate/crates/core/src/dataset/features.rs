use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SGFM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }

    /// Name of the conventional feature file inside a dataset directory.
    pub fn file_name(self) -> &'static str {
        match self {
            Modality::Visual => "image_feat.sgfm",
            Modality::Textual => "text_feat.sgfm",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v" | "visual" | "image" => Ok(Modality::Visual),
            "t" | "textual" | "text" => Ok(Modality::Textual),
            other => Err(Error::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

/// Dense per-item features of one modality; row `r` belongs to item `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    data: Arc<Array2<f64>>,
}

impl FeatureMatrix {
    pub fn new(modality: Modality, data: Array2<f64>) -> Result<Self> {
        if let Some((idx, _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{modality} features at {idx:?}")));
        }
        Ok(FeatureMatrix {
            modality,
            data: Arc::new(data),
        })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn shared(&self) -> Arc<Array2<f64>> {
        Arc::clone(&self.data)
    }

    /// Indices of rows that are entirely zero.
    pub fn zero_rows(&self) -> Vec<usize> {
        self.data
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(_, r)| r.iter().all(|&v| v == 0.0))
            .map(|(k, _)| k)
            .collect()
    }
}

/// Reads an SGFM file: `SGFM`, u32 version, u32 rows, u32 cols, then
/// row-major little-endian f32 values.
pub fn load_feature_matrix(path: impl AsRef<Path>, modality: Modality, expected_items: usize) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let err = |message: String| Error::FeatureFile {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(err(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
    let (version, rows, cols) = (word(4), word(8) as usize, word(12) as usize);
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    if rows != expected_items {
        return Err(err(format!(
            "file has {rows} rows but the dataset has {expected_items} items"
        )));
    }
    let expected_len = 16 + rows * cols * 4;
    if bytes.len() != expected_len {
        return Err(err(format!("expected {expected_len} bytes, found {}", bytes.len())));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for (k, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(err(format!(
                "non-finite value at row {}, col {}",
                k / cols.max(1),
                k % cols.max(1)
            )));
        }
        values.push(v as f64);
    }
    let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| err(e.to_string()))?;
    FeatureMatrix::new(modality, data)
}

/// Writes a feature matrix in SGFM format (values narrowed to f32).
pub fn write_feature_matrix(path: impl AsRef<Path>, features: &Array2<f64>) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(features.nrows() as u32).to_le_bytes())?;
    f.write_all(&(features.ncols() as u32).to_le_bytes())?;
    for &v in features.iter() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn raw_file(magic: &[u8], rows: u32, cols: u32, values: &[f32]) -> tempfile::NamedTempFile {
        let mut bytes = magic.to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(rows.to_le_bytes());
        bytes.extend(cols.to_le_bytes());
        for v in values {
            bytes.extend(v.to_le_bytes());
        }
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&bytes).unwrap();
        f
    }

    #[test]
    fn one_by_one_file() {
        let f = raw_file(b"SGFM", 1, 1, &[0.5]);
        let m = load_feature_matrix(f.path(), Modality::Textual, 1).unwrap();
        assert_eq!(m.data(), &array![[0.5]]);
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.sgfm");
        write_feature_matrix(&p, &array![[1.0, 2.0]]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], &[0x53, 0x47, 0x46, 0x4D]);
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn row_count_mismatch() {
        let f = raw_file(b"SGFM", 10, 1, &[1.0; 10]);
        assert!(load_feature_matrix(f.path(), Modality::Visual, 7).is_err());
    }

    #[test]
    fn bad_magic_and_non_finite() {
        let f = raw_file(b"SGFX", 1, 1, &[1.0]);
        assert!(load_feature_matrix(f.path(), Modality::Visual, 1).is_err());
        let f = raw_file(b"SGFM", 1, 2, &[1.0, f32::NAN]);
        assert!(load_feature_matrix(f.path(), Modality::Visual, 1).is_err());
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("v".parse::<Modality>().unwrap(), Modality::Visual);
        assert_eq!("textual".parse::<Modality>().unwrap(), Modality::Textual);
        assert!("audio".parse::<Modality>().is_err());
    }
}
