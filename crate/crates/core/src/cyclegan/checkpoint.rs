//! Checkpoint directories: `manifest.json` plus one tensor container per
//! parameter, running statistic and Adam moment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{HarmonizationModel, ModelConfig};
use crate::error::{ensure, Error, Result};
use crate::ndtensor::{load_tensor, save_tensor, AdamState, DType, Tensor};
use crate::nets::Network;

pub const CHECKPOINT_FORMAT: &str = "harmonize-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkEntry {
    pub name: String,
    pub adam_step: u64,
    pub state: Vec<TensorEntry>,
    pub adam_m: Vec<TensorEntry>,
    pub adam_v: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub model_hash: String,
    pub config: ModelConfig,
    pub networks: Vec<NetworkEntry>,
}

fn write_all(dir: &Path, sub: &str, items: &[(String, &Tensor)]) -> Result<Vec<TensorEntry>> {
    let d = dir.join(sub);
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    items
        .iter()
        .map(|(name, t)| {
            let file = format!("{sub}/{name}.ntn");
            save_tensor(&dir.join(&file), t, DType::F64)?;
            Ok(TensorEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            })
        })
        .collect()
}

pub fn save_checkpoint(model: &HarmonizationModel, dir: &Path) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut networks = Vec::new();
    for (prefix, net, adam) in model.networks() {
        let names = net.param_names();
        let m: Vec<(String, &Tensor)> = names.iter().cloned().zip(&adam.m).collect();
        let v: Vec<(String, &Tensor)> = names.iter().cloned().zip(&adam.v).collect();
        networks.push(NetworkEntry {
            name: prefix.to_string(),
            adam_step: adam.step_count,
            state: write_all(dir, prefix, &net.state())?,
            adam_m: write_all(dir, &format!("{prefix}/adam_m"), &m)?,
            adam_v: write_all(dir, &format!("{prefix}/adam_v"), &v)?,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: model.step,
        model_hash: model.hash(),
        config: model.config.clone(),
        networks,
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_into(
    dir: &Path,
    entries: &[TensorEntry],
    targets: Vec<(String, &mut Tensor)>,
    what: &str,
) -> Result<()> {
    ensure!(
        entries.len() == targets.len(),
        Invalid,
        "{what}: checkpoint has {} tensors, model expects {}",
        entries.len(),
        targets.len()
    );
    for (e, (name, t)) in entries.iter().zip(targets) {
        ensure!(
            e.name == name,
            Invalid,
            "{what}: checkpoint tensor {} where {name} was expected",
            e.name
        );
        let loaded = load_tensor(&dir.join(&e.file))?;
        ensure!(
            loaded.shape() == t.shape(),
            Dimension,
            "{what}.{name}: checkpoint shape {:?}, model shape {:?}",
            loaded.shape(),
            t.shape()
        );
        *t = loaded;
    }
    Ok(())
}

fn load_adam(
    dir: &Path,
    entry: &NetworkEntry,
    adam: &mut AdamState,
    names: &[String],
) -> Result<()> {
    adam.step_count = entry.adam_step;
    let m = names.iter().cloned().zip(adam.m.iter_mut()).collect();
    read_into(dir, &entry.adam_m, m, &format!("{} adam m", entry.name))?;
    let v = names.iter().cloned().zip(adam.v.iter_mut()).collect();
    read_into(dir, &entry.adam_v, v, &format!("{} adam v", entry.name))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_slice(&bytes)?;
    ensure!(
        m.format == CHECKPOINT_FORMAT && m.version == CHECKPOINT_VERSION,
        Config,
        "{} is not a version {CHECKPOINT_VERSION} checkpoint",
        dir.display()
    );
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<HarmonizationModel> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut model = HarmonizationModel::new(manifest.config.clone(), 0)?;
    model.step = manifest.step;
    let find = |n: &str| {
        manifest
            .networks
            .iter()
            .find(|e| e.name == n)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks network {n}")))
    };
    let HarmonizationModel {
        g,
        f,
        d_y,
        d_x,
        adam_g,
        adam_f,
        adam_d_y,
        adam_d_x,
        ..
    } = &mut model;
    let nets: [(&str, &mut dyn Network, &mut AdamState); 4] = [
        ("G", g, adam_g),
        ("F", f, adam_f),
        ("D_Y", d_y, adam_d_y),
        ("D_X", d_x, adam_d_x),
    ];
    for (name, net, adam) in nets {
        let entry = find(name)?;
        let names = net.param_names();
        read_into(dir, &entry.state, net.state_mut(), name)?;
        load_adam(dir, entry, adam, &names)?;
    }
    ensure!(
        model.hash() == manifest.model_hash,
        Invalid,
        "checkpoint {} hash mismatch: files were modified or are incomplete",
        dir.display()
    );
    Ok(model)
}
