//! On-disk container for named arrays: a directory holding `manifest.json`
//! (array table plus free-form metadata) and `data.bin` (raw little-endian
//! values, row-major). Checkpoints and recorded episodes both use it.

use crate::array::DenseArray;
use crate::error::{Result, TensorError};
use crate::scalar::{Dtype, Scalar};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
const FORMAT_NAME: &str = "named-array-container";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestArray {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    arrays: Vec<ManifestArray>,
    meta: serde_json::Value,
}

/// Accumulates arrays in memory, then writes both files at once.
pub struct ContainerWriter {
    arrays: Vec<ManifestArray>,
    buf: Vec<u8>,
    meta: serde_json::Value,
}

impl Default for ContainerWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl ContainerWriter {
    pub fn new() -> Self {
        Self {
            arrays: Vec::new(),
            buf: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn set_meta(&mut self, meta: serde_json::Value) {
        self.meta = meta;
    }

    pub fn add<T: Scalar>(&mut self, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(TensorError::ShapeMismatch {
                context: "container add",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(TensorError::Contract(format!(
                "array {name:?} added twice"
            )));
        }
        let offset = self.buf.len() as u64;
        for &v in data {
            v.write_le(&mut self.buf);
        }
        self.arrays.push(ManifestArray {
            name: name.to_string(),
            dtype: T::DTYPE.name().to_string(),
            shape: shape.to_vec(),
            offset,
            bytes: (data.len() * T::DTYPE.size()) as u64,
        });
        Ok(())
    }

    pub fn add_array<T: Scalar>(&mut self, name: &str, array: &DenseArray<T>) -> Result<()> {
        self.add(name, array.shape(), array.data())
    }

    /// Creates the directory if needed and writes both files.
    pub fn write(self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            arrays: self.arrays,
            meta: self.meta,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| TensorError::Format(format!("manifest encode: {e}")))?;
        fs::write(dir.join(MANIFEST_FILE), json)?;
        fs::write(dir.join(DATA_FILE), &self.buf)?;
        Ok(())
    }
}

/// Reads a container directory, validating the manifest against the data
/// file before any array is decoded.
pub struct ContainerReader {
    arrays: Vec<ManifestArray>,
    data: Vec<u8>,
    meta: serde_json::Value,
}

impl ContainerReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = fs::read_to_string(&manifest_path).map_err(|e| TensorError::Load {
            name: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
        let manifest: Manifest = serde_json::from_str(&json).map_err(|e| TensorError::Format(
            format!("{}: {e}", manifest_path.display()),
        ))?;
        if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
            return Err(TensorError::Format(format!(
                "{}: unsupported format {:?} v{}",
                manifest_path.display(),
                manifest.format,
                manifest.version
            )));
        }
        let data_path = dir.join(DATA_FILE);
        let data = fs::read(&data_path).map_err(|e| TensorError::Load {
            name: data_path.display().to_string(),
            reason: e.to_string(),
        })?;
        for entry in &manifest.arrays {
            let dtype = Dtype::parse(&entry.dtype).ok_or_else(|| TensorError::Load {
                name: entry.name.clone(),
                reason: format!("unknown dtype {:?}", entry.dtype),
            })?;
            let count: usize = entry.shape.iter().product();
            if entry.bytes as usize != count * dtype.size() {
                return Err(TensorError::Load {
                    name: entry.name.clone(),
                    reason: format!(
                        "shape {:?} wants {} bytes, manifest records {}",
                        entry.shape,
                        count * dtype.size(),
                        entry.bytes
                    ),
                });
            }
            let end = entry.offset + entry.bytes;
            if end as usize > data.len() {
                return Err(TensorError::Load {
                    name: entry.name.clone(),
                    reason: format!(
                        "range {}..{} exceeds data file of {} bytes",
                        entry.offset,
                        end,
                        data.len()
                    ),
                });
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &manifest.arrays {
            if !seen.insert(entry.name.as_str()) {
                return Err(TensorError::Format(format!(
                    "duplicate array {:?} in manifest",
                    entry.name
                )));
            }
        }
        Ok(Self {
            arrays: manifest.arrays,
            data,
            meta: manifest.meta,
        })
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.meta
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|a| a.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.entry(name)?.shape)
    }

    fn entry(&self, name: &str) -> Result<&ManifestArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| TensorError::Load {
                name: name.to_string(),
                reason: "not present in manifest".into(),
            })
    }

    /// Decodes an array, casting through f64 when the stored dtype differs
    /// from the requested one.
    pub fn read<T: Scalar>(&self, name: &str) -> Result<DenseArray<T>> {
        let entry = self.entry(name)?;
        let dtype = Dtype::parse(&entry.dtype).expect("validated at open");
        let bytes = &self.data[entry.offset as usize..(entry.offset + entry.bytes) as usize];
        let values: Vec<T> = match dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::read_le(c)))
                .collect(),
        };
        DenseArray::from_vec(values, &entry.shape)
    }
}
