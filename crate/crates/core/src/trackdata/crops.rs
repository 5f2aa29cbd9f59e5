use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::numerics::{load_tensor, Tensor};

use super::DataError;

/// Resolves a face's `feature_ref` to its backbone input tensor.
pub trait CropSource: Sync {
    fn load(&self, feature_ref: &str) -> Result<Tensor<f32>, DataError>;
}

/// Crops stored as raw tensor files under a root directory.
///
/// A reference `file.mntt#k` selects entry `k` along the leading axis of a
/// stacked file; a bare `file.mntt` is the whole tensor.
pub struct TensorDirSource {
    root: PathBuf,
    cache: Mutex<HashMap<PathBuf, Arc<Tensor<f32>>>>,
}

impl TensorDirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        TensorDirSource {
            root: root.into(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn file(&self, path: &Path) -> Result<Arc<Tensor<f32>>, DataError> {
        if let Some(t) = self.cache.lock().expect("crop cache poisoned").get(path) {
            return Ok(t.clone());
        }
        let t = Arc::new(load_tensor::<f32>(path).map_err(|e| DataError::Feature {
            reference: path.display().to_string(),
            reason: e.to_string(),
        })?);
        self.cache
            .lock()
            .expect("crop cache poisoned")
            .insert(path.to_path_buf(), t.clone());
        Ok(t)
    }
}

impl CropSource for TensorDirSource {
    fn load(&self, feature_ref: &str) -> Result<Tensor<f32>, DataError> {
        let (file, index) = match feature_ref.rsplit_once('#') {
            Some((f, k)) => {
                let k: usize = k.parse().map_err(|_| DataError::Feature {
                    reference: feature_ref.into(),
                    reason: "index after '#' is not an integer".into(),
                })?;
                (f, Some(k))
            }
            None => (feature_ref, None),
        };
        let t = self.file(&self.root.join(file))?;
        match index {
            None => Ok((*t).clone()),
            Some(k) => {
                let row = t.select(&[k]).map_err(|e| DataError::Feature {
                    reference: feature_ref.into(),
                    reason: e.to_string(),
                })?;
                let shape = t.shape()[1..].to_vec();
                Ok(row.reshape(&shape).expect("row has the trailing shape"))
            }
        }
    }
}

/// In-memory crops keyed by reference.
#[derive(Default)]
pub struct MemoryCrops {
    pub crops: HashMap<String, Tensor<f32>>,
}

impl CropSource for MemoryCrops {
    fn load(&self, feature_ref: &str) -> Result<Tensor<f32>, DataError> {
        self.crops.get(feature_ref).cloned().ok_or_else(|| DataError::Feature {
            reference: feature_ref.into(),
            reason: "unknown reference".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{save_tensor, Precision};

    #[test]
    fn resolves_stacked_rows() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_f64(&[2, 1, 2, 2], &[0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        save_tensor(&dir.path().join("v.mntt"), &t, Precision::F32).unwrap();
        let src = TensorDirSource::new(dir.path());
        let row = src.load("v.mntt#1").unwrap();
        assert_eq!(row.shape(), &[1, 2, 2]);
        assert_eq!(row.data(), &[4., 5., 6., 7.]);
        assert_eq!(src.load("v.mntt").unwrap(), t);
        assert!(src.load("v.mntt#2").is_err());
        assert!(src.load("missing.mntt#0").is_err());
        assert!(src.load("v.mntt#x").is_err());
    }
}
