//! Parameter bundles on disk: one tensor file per entry plus `manifest.json`.

use std::fs;
use std::path::Path;

use dsl_autodiff::io::{read_tensor, write_tensor};
use dsl_autodiff::Real;
use serde::{Deserialize, Serialize};

use crate::detector::ParamSet;
use crate::error::{io_err, CoreError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub role: String,
    pub global_step: usize,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn dtype_name<T: Real>() -> &'static str {
    if T::BYTES == 4 {
        "f32"
    } else {
        "f64"
    }
}

pub fn save_params<T: Real>(
    dir: impl AsRef<Path>,
    params: &ParamSet<T>,
    role: &str,
    global_step: usize,
    extra: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = format!("{name}.dslt");
        write_tensor(dir.join(&file), t)?;
        tensors.push(ManifestEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
            dtype: dtype_name::<T>().into(),
        });
    }
    let manifest = Manifest {
        role: role.into(),
        global_step,
        tensors,
        extra,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable")).map_err(io_err(&path))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Parse {
        path,
        message: e.to_string(),
    })
}

pub fn load_params<T: Real>(dir: impl AsRef<Path>) -> Result<(ParamSet<T>, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut params = ParamSet::new();
    for (i, e) in manifest.tensors.iter().enumerate() {
        let t = read_tensor::<T>(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(CoreError::Record {
                record: format!("tensors[{i}]"),
                message: format!("{} has shape {:?}, manifest says {:?}", e.file, t.shape(), e.shape),
            });
        }
        params.insert(e.name.clone(), t);
    }
    Ok((params, manifest))
}
