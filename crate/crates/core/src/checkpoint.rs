//! Backbone and tuned-model checkpoints on top of the tensor container.
//!
//! A backbone checkpoint holds every backbone tensor plus `data.mean` /
//! `data.std`. A model checkpoint adds `prompt.*` and `head.*`, so it can be
//! evaluated without the backbone file it was tuned from.

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{generate, Dataset, Normalizer, TaskSpec};
use crate::error::{Error, Result};
use crate::io::{self, NamedTensors};
use crate::prompt::{PromptConfig, TunedModel};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

fn is_backbone(name: &str) -> bool {
    !(name.starts_with("data.") || name.starts_with("prompt.") || name.starts_with("head."))
}

/// Splits a loaded container into a frozen backbone and its normalizer.
pub fn backbone_from_map(config: &BackboneConfig, named: &BTreeMap<String, Tensor>) -> Result<(Arc<Backbone>, Normalizer)> {
    let normalizer = Normalizer::from_tensors(named)?;
    if normalizer.mean.len() != config.channels {
        return Err(Error::config(
            "backbone.channels",
            format!("checkpoint normalizer has {} channels", normalizer.mean.len()),
        ));
    }
    let parts = named
        .iter()
        .filter(|(k, _)| is_backbone(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok((Arc::new(Backbone::from_tensors(config.clone(), parts)?), normalizer))
}

pub fn load_backbone(path: &Path, config: &BackboneConfig) -> Result<(Arc<Backbone>, Normalizer)> {
    backbone_from_map(config, &io::load_map(path)?)
}

pub fn model_tensors(model: &TunedModel, normalizer: &Normalizer) -> NamedTensors {
    let mut out: NamedTensors = model
        .backbone
        .named_tensors()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    out.extend(normalizer.to_tensors());
    out.extend(model.state_tensors());
    out
}

/// Loads a self-contained model checkpoint; `num_classes` comes from the head.
pub fn load_model(path: &Path, backbone: &BackboneConfig, prompt: &PromptConfig) -> Result<(TunedModel, Normalizer)> {
    let named = io::load_map(path)?;
    let (bb, normalizer) = backbone_from_map(backbone, &named)?;
    let classes = named
        .get("head.bias")
        .map(Tensor::numel)
        .ok_or_else(|| Error::config("checkpoint.head.bias", "missing tensor"))?;
    let mut model = TunedModel::new(bb, prompt.clone(), classes, 0)?;
    model.load_state(&named)?;
    Ok((model, normalizer))
}

/// Generates a task and normalizes every split with the source statistics.
pub fn prepare_task(spec: &TaskSpec, normalizer: &Normalizer) -> Result<Dataset> {
    let d = generate(spec)?;
    Ok(Dataset {
        spec: d.spec,
        train: normalizer.normalize_split(&d.train)?,
        val: normalizer.normalize_split(&d.val)?,
        test: normalizer.normalize_split(&d.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::TransformKind;
    use crate::selftest::{random_backbone, tiny_backbone_config};

    #[test]
    fn model_round_trip() {
        let cfg = tiny_backbone_config();
        let bb = random_backbone(cfg.clone(), 1).unwrap();
        let pc = PromptConfig {
            length: 4,
            transform: TransformKind::Lll,
            ..PromptConfig::default()
        };
        let model = TunedModel::new(bb, pc.clone(), 3, 2).unwrap();
        let norm = Normalizer::identity(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vfpt");
        io::save(&path, &model_tensors(&model, &norm)).unwrap();
        let (back, n2) = load_model(&path, &cfg, &pc).unwrap();
        assert_eq!(n2, norm);
        assert_eq!(back.flat_params(), model.flat_params());
        assert_eq!(back.backbone.checksum(), model.backbone.checksum());
        let wrong = PromptConfig {
            transform: TransformKind::Fft,
            ..pc
        };
        assert!(matches!(load_model(&path, &cfg, &wrong), Err(Error::Config { .. })));
    }
}
