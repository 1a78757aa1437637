//! The full unified model: backbone + heads + codec in one parameter store,
//! with checkpoint plumbing.

use crate::backbone::{Backbone, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::heads::{Adapter, CondProjector, ExitHead, FlowHead, FlowHeadConfig};
use crate::num::ParamStore;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct UnifiedConfig {
    pub model: ModelConfig,
    pub flow: FlowHeadConfig,
    pub codec: CodecConfig,
}


pub struct UnifiedModel {
    pub cfg: UnifiedConfig,
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub projector: CondProjector,
    pub flow: FlowHead,
    pub exit: ExitHead,
    pub codec: Codec,
}

impl UnifiedModel {
    pub fn init<R: Rng>(store: &mut ParamStore<f32>, cfg: UnifiedConfig, rng: &mut R) -> Result<Self> {
        cfg.flow.validate()?;
        let backbone = Backbone::init(store, cfg.model, rng)?;
        let adapter = Adapter::init(store, cfg.codec.z_dim, cfg.model.dim, rng);
        let projector = CondProjector::init(store, cfg.model.dim, cfg.flow.hidden, rng);
        let flow = FlowHead::init(store, cfg.codec.z_dim, cfg.flow, rng);
        let exit = ExitHead::init(store, cfg.model.dim, rng);
        let codec = Codec::init(store, cfg.codec, rng)?;
        Ok(Self { cfg, backbone, adapter, projector, flow, exit, codec })
    }

    fn config_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("kind".into(), "unified".into());
        m.insert("config".into(), serde_json::to_string(&self.cfg).expect("config serializes"));
        m
    }

    pub fn save(&self, store: &ParamStore<f32>, path: &Path) -> Result<()> {
        Checkpoint::from_store(store, self.config_map()).save(path)
    }

    /// Rebuilds the model layout from the stored config and loads weights.
    pub fn load(path: &Path) -> Result<(ParamStore<f32>, Self)> {
        let ck = Checkpoint::load(path)?;
        if ck.kind()? != "unified" {
            return Err(Error::CheckpointMismatch(format!(
                "expected a unified checkpoint, found kind '{}'",
                ck.kind()?
            )));
        }
        let cfg: UnifiedConfig = serde_json::from_str(ck.get("config")?)?;
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let model = Self::init(&mut store, cfg, &mut rng)?;
        ck.load_into(&mut store)?;
        Ok((store, model))
    }
}

/// Codec-only checkpoint helpers.
pub fn save_codec(store: &ParamStore<f32>, codec: &Codec, path: &Path) -> Result<()> {
    let mut cfg = BTreeMap::new();
    cfg.insert("kind".into(), "codec".into());
    cfg.insert("config".into(), serde_json::to_string(&codec.cfg)?);
    let tensors = store
        .ids()
        .filter(|&id| store.name(id).starts_with("codec."))
        .map(|id| (store.name(id).to_string(), store.value(id).clone()))
        .collect();
    Checkpoint { config: cfg, tensors }.save(path)
}

pub fn load_codec(path: &Path) -> Result<(ParamStore<f32>, Codec)> {
    let ck = Checkpoint::load(path)?;
    if ck.kind()? != "codec" {
        return Err(Error::CheckpointMismatch(format!(
            "expected a codec checkpoint, found kind '{}'",
            ck.kind()?
        )));
    }
    let cfg: CodecConfig = serde_json::from_str(ck.get("config")?)?;
    let mut store = ParamStore::new();
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let codec = Codec::init(&mut store, cfg, &mut rng)?;
    ck.load_into(&mut store)?;
    Ok((store, codec))
}

/// Copies codec tensors from a codec-only store into a unified store.
pub fn adopt_codec_weights(dst: &mut ParamStore<f32>, src: &ParamStore<f32>) -> Result<()> {
    for id in src.ids() {
        let name = src.name(id);
        if !name.starts_with("codec.") {
            continue;
        }
        let dst_id = dst
            .id(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("unified model lacks '{name}'")))?;
        if dst.value(dst_id).shape != src.value(id).shape {
            return Err(Error::CheckpointMismatch(format!("codec tensor '{name}' shape differs")));
        }
        *dst.value_mut(dst_id) = src.value(id).clone();
    }
    Ok(())
}
