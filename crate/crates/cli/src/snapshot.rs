//! Model snapshots: the spec text, the init seed, and every parameter
//! tensor, as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use actnet_core::models::{Model, ModelSpec};
use actnet_core::{Error, Result, Scalar, Tensor};

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    spec_text: String,
    seed: u64,
    params: Vec<ParamEntry>,
}

pub fn save_model<S: Scalar>(model: &Model<S>, seed: u64, path: &Path) -> Result<()> {
    let snap = Snapshot {
        spec_text: model.spec.to_text(),
        seed,
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&snap)
        .map_err(|e| Error::Data(format!("snapshot serialization failed: {e}")))?;
    std::fs::write(path, json)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<(Model<S>, u64)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let snap: Snapshot = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: malformed snapshot: {e}", path.display())))?;
    let spec = ModelSpec::parse(&snap.spec_text)?;
    let mut model: Model<S> = Model::build(&spec, snap.seed)?;
    for entry in &snap.params {
        let pid = model.params.by_name(&entry.name).ok_or_else(|| {
            Error::Data(format!("snapshot parameter {} not in rebuilt model", entry.name))
        })?;
        let tensor = Tensor::new(
            &entry.shape,
            entry.data.iter().map(|&v| S::from_f64(v)).collect(),
        )?;
        if tensor.shape() != model.params.value(pid).shape() {
            return Err(Error::Data(format!(
                "snapshot parameter {} has shape {:?}, model expects {:?}",
                entry.name,
                tensor.shape(),
                model.params.value(pid).shape()
            )));
        }
        *model.params.value_mut(pid) = tensor;
    }
    Ok((model, snap.seed))
}
