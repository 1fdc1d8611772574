//! Model checkpoints: the tensor container plus a manifest documenting the
//! architecture, the vocabulary fingerprint, and the group classification,
//! so a checkpoint is self-describing for routing and freezing. Optimizer
//! moments and opaque training state ride along for exact resume.

use super::{build_model, ArchitectureConfig, GroupRole, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{container_bytes, read_container, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const FORMAT: &str = "fofelm-model";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct GroupMeta {
    name: String,
    role: GroupRole,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimSlotMeta {
    pub group: usize,
    pub tensor: usize,
    pub t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    version: u32,
    architecture: ArchitectureConfig,
    vocab_sha256: String,
    groups: Vec<GroupMeta>,
    #[serde(default)]
    optimizer_slots: Vec<OptimSlotMeta>,
    #[serde(default)]
    training_state: Option<serde_json::Value>,
}

/// Optional payload saved beside the model parameters.
#[derive(Debug, Default)]
pub struct CheckpointExtras {
    /// Adam slots: key, first moment, second moment, per-parameter step.
    pub optimizer_slots: crate::tensor::OptimSlots,
    /// Opaque trainer-owned state (plan, epoch counter, dev history).
    pub training_state: Option<serde_json::Value>,
}

#[derive(Debug)]
pub struct LoadedModel {
    pub model: ModelGraph,
    pub vocab_sha256: String,
    pub optimizer_slots: crate::tensor::OptimSlots,
    pub training_state: Option<serde_json::Value>,
}

pub fn model_checkpoint_bytes(
    model: &ModelGraph,
    vocab_sha256: &str,
    extras: &CheckpointExtras,
) -> Result<Vec<u8>> {
    let groups_meta: Vec<GroupMeta> = model
        .groups()
        .iter()
        .zip(model.roles())
        .map(|(g, r)| GroupMeta {
            name: g.name.clone(),
            role: r.clone(),
            trainable: g.trainable,
        })
        .collect();

    let mut optim_meta = Vec::new();
    let mut optim_tensors: Vec<(String, Vec<Tensor>)> = Vec::new();
    for ((gi, ti), m, v, t) in &extras.optimizer_slots {
        optim_meta.push(OptimSlotMeta {
            group: *gi,
            tensor: *ti,
            t: *t,
        });
        let name = format!("__optim__:{gi}:{ti}");
        let mt = Tensor::from_vec(1, m.len(), m.clone())?;
        let vt = Tensor::from_vec(1, v.len(), v.clone())?;
        optim_tensors.push((name, vec![mt, vt]));
    }

    let meta = ModelMeta {
        format: FORMAT.to_string(),
        version: VERSION,
        architecture: model.config().clone(),
        vocab_sha256: vocab_sha256.to_string(),
        groups: groups_meta,
        optimizer_slots: optim_meta,
        training_state: extras.training_state.clone(),
    };
    let meta_value =
        serde_json::to_value(&meta).map_err(|e| Error::Format(format!("meta: {e}")))?;

    let mut container: Vec<(String, Vec<&Tensor>)> = model
        .groups()
        .iter()
        .map(|g| (g.name.clone(), g.tensors.iter().collect()))
        .collect();
    for (name, tensors) in &optim_tensors {
        container.push((name.clone(), tensors.iter().collect()));
    }
    container_bytes(&meta_value, &container)
}

pub fn save_model(
    path: impl AsRef<Path>,
    model: &ModelGraph,
    vocab_sha256: &str,
    extras: &CheckpointExtras,
) -> Result<()> {
    let bytes = model_checkpoint_bytes(model, vocab_sha256, extras)?;
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let (meta_value, groups) = read_container(path.as_ref())?;
    let meta: ModelMeta = serde_json::from_value(meta_value)
        .map_err(|e| Error::Format(format!("model manifest: {e}")))?;
    if meta.format != FORMAT {
        return Err(Error::Format(format!(
            "unexpected checkpoint format {:?}",
            meta.format
        )));
    }
    if meta.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }

    // Rebuild the skeleton from the recorded architecture, then overwrite
    // every tensor with the stored payload.
    let mut model = build_model(&meta.architecture, 0)?;
    let mut stored: std::collections::BTreeMap<String, Vec<Tensor>> = std::collections::BTreeMap::new();
    let mut optim_groups: std::collections::BTreeMap<String, Vec<Tensor>> = std::collections::BTreeMap::new();
    for (name, tensors) in groups {
        if name.starts_with("__optim__:") {
            optim_groups.insert(name, tensors);
        } else {
            stored.insert(name, tensors);
        }
    }
    for gm in &meta.groups {
        let tensors = stored.remove(&gm.name).ok_or_else(|| {
            Error::Format(format!("checkpoint missing group {:?}", gm.name))
        })?;
        let gi = model.group_index(&gm.name).map_err(|_| {
            Error::Format(format!(
                "checkpoint group {:?} not in architecture {}",
                gm.name,
                meta.architecture.variant.name()
            ))
        })?;
        let group = &mut model.groups_mut()[gi];
        if group.tensors.len() != tensors.len() {
            return Err(Error::Format(format!(
                "group {:?}: tensor count mismatch",
                gm.name
            )));
        }
        for (slot, t) in group.tensors.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "group {:?}: stored shape {:?} vs expected {:?}",
                    gm.name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        group.set_trainable(gm.trainable);
    }
    if !stored.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint has unexpected groups: {:?}",
            stored.keys().collect::<Vec<_>>()
        )));
    }

    let mut optimizer_slots = Vec::new();
    for slot in &meta.optimizer_slots {
        let name = format!("__optim__:{}:{}", slot.group, slot.tensor);
        let tensors = optim_groups
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing optimizer payload {name}")))?;
        if tensors.len() != 2 {
            return Err(Error::Format(format!("optimizer payload {name} malformed")));
        }
        optimizer_slots.push((
            (slot.group, slot.tensor),
            tensors[0].data().to_vec(),
            tensors[1].data().to_vec(),
            slot.t,
        ));
    }

    Ok(LoadedModel {
        model,
        vocab_sha256: meta.vocab_sha256,
        optimizer_slots,
        training_state: meta.training_state,
    })
}
