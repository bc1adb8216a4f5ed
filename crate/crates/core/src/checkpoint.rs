//! Checkpoints in the named-tensor container: weights as f32 tensors and
//! a JSON manifest with the config, step counter, frozen set, prompt map
//! and vocabulary.

use std::path::Path;

use conceptdet_tensor::container::Container;
use conceptdet_tensor::{ParamStore, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Detector, Model};
use crate::nn::Init;
use crate::prompts::{init_optimized_prompts, SuperClassMap};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    /// Tensors that were not trainable in the regime that wrote this file.
    pub frozen: Vec<String>,
    pub training_heads: bool,
    /// Explicit class to prompt-row table of the optimized prompts.
    pub super_class: Option<SuperClassMap>,
    pub vocab: Vocabulary,
}

pub fn to_container(det: &Detector, meta: &CheckpointMeta) -> Result<Container> {
    let mut c = Container::new(serde_json::to_value(meta)?);
    c.push_store("", &det.store);
    Ok(c)
}

pub fn checkpoint_meta(det: &Detector, step: u64, frozen: Vec<String>, train: Option<TrainConfig>) -> CheckpointMeta {
    CheckpointMeta {
        model: det.model.cfg.clone(),
        train,
        step,
        frozen,
        training_heads: det.model.aux.is_some(),
        super_class: det.model.optimized.as_ref().map(|o| o.map.clone()),
        vocab: det.vocab.clone(),
    }
}

/// Rebuilds the layout named by the manifest and fills it. Every stored
/// tensor must be consumed.
pub fn from_container(c: &Container) -> Result<(Detector, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::build(&meta.model, meta.vocab.len(), meta.training_heads, &mut store, &mut rng)?;
    if let Some(map) = &meta.super_class {
        let m = map.entries.first().map_or(0, |e| e.1.len());
        let mut init = Init::new(&mut store, &mut rng);
        let mut o = init_optimized_prompts(&mut init, &map.classes(), m, meta.model.dim)?;
        map.validate(map.rows())?;
        o.map = map.clone();
        model.optimized = Some(o);
    }
    if c.tensors.len() != store.len() {
        return Err(Error::State(format!("checkpoint holds {} tensors, layout expects {}", c.tensors.len(), store.len())));
    }
    c.fill_store("", &mut store)?;
    Ok((Detector { model, store, vocab: meta.vocab.clone() }, meta))
}

pub fn save(det: &Detector, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    to_container(det, meta)?.save(path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Detector, CheckpointMeta)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::State(format!("checkpoint {} not found", path.display())));
    }
    from_container(&Container::load(path)?)
}

/// SHA-256 over name, shape and little-endian bytes of every tensor whose
/// name passes `keep`, in store order.
pub fn tensor_hash<T: Scalar>(store: &ParamStore<T>, keep: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in store.iter() {
        if !keep(name) {
            continue;
        }
        h.update(name.as_bytes());
        h.update([0]);
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        t.data().iter().for_each(|v| v.write_le(&mut buf));
        h.update(&buf);
    }
    hex::encode(h.finalize())
}
