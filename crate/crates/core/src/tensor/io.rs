//! Tensor files: `<name>.bin` holds the values as flat little-endian floats,
//! `<name>.json` holds `{"shape": [...], "dtype": "f32" | "f64"}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DType, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.bin")),
        dir.join(format!("{name}.json")),
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn to_bytes<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensor.len() * T::BYTES);
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn save_tensor<T: Scalar>(
    dir: &Path,
    name: &str,
    tensor: &Tensor<T>,
) -> Result<(), TensorIoError> {
    let (bin, json) = paths(dir, name);
    fs::write(&bin, to_bytes(tensor)).map_err(io_err(&bin))?;
    let sidecar = Sidecar {
        shape: tensor.shape().to_vec(),
        dtype: T::DTYPE,
    };
    let text = serde_json::to_string(&sidecar).expect("sidecar serializes");
    fs::write(&json, text).map_err(io_err(&json))
}

pub fn load_tensor<T: Scalar>(dir: &Path, name: &str) -> Result<Tensor<T>, TensorIoError> {
    let (bin, json) = paths(dir, name);
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|source| TensorIoError::Json {
        path: json.clone(),
        source,
    })?;
    if sidecar.dtype != T::DTYPE {
        return Err(TensorIoError::Format {
            path: json,
            message: format!("stored dtype {:?}, requested {:?}", sidecar.dtype, T::DTYPE),
        });
    }
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let count: usize = sidecar.shape.iter().product();
    if bytes.len() != count * T::BYTES {
        return Err(TensorIoError::Format {
            path: bin,
            message: format!(
                "expected {} bytes for shape {:?}, found {}",
                count * T::BYTES,
                sidecar.shape,
                bytes.len()
            ),
        });
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok(Tensor::new(sidecar.shape, data).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| (i as f32 * 0.1).sin() / 3.0);
        save_tensor(dir.path(), "w", &t).unwrap();
        let back: Tensor<f32> = load_tensor(dir.path(), "w").unwrap();
        assert_eq!(back, t);
        let sidecar = fs::read_to_string(dir.path().join("w.json")).unwrap();
        assert_eq!(sidecar, r#"{"shape":[2,3],"dtype":"f32"}"#);
        assert_eq!(fs::read(dir.path().join("w.bin")).unwrap().len(), 24);
    }

    #[test]
    fn rejects_dtype_and_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_tensor(dir.path(), "w", &Tensor::<f64>::zeros(&[4])).unwrap();
        assert!(matches!(
            load_tensor::<f32>(dir.path(), "w"),
            Err(TensorIoError::Format { .. })
        ));
        fs::write(dir.path().join("w.bin"), [0u8; 8]).unwrap();
        assert!(matches!(
            load_tensor::<f64>(dir.path(), "w"),
            Err(TensorIoError::Format { .. })
        ));
        assert!(matches!(
            load_tensor::<f64>(dir.path(), "missing"),
            Err(TensorIoError::Io { .. })
        ));
    }
}
