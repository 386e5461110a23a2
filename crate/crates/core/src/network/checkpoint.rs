use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::UNetConfig;
use crate::diffcore::{shape_len, AdamState, ParamSpec, Shape, Tensor};
use crate::error::{Error, Result};
use crate::imgcore::raw32_paths;

const CHECKPOINT_MAGIC: &str = "SIMCK1";

/// Network weights and optimiser moments at the end of `epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: UNetConfig,
    pub specs: Vec<ParamSpec>,
    pub params: Vec<Tensor<f32>>,
    pub adam: Option<AdamState<f32>>,
    /// Caller state carried along (loss history, best loss, run config).
    pub extra: serde_json::Value,
}

/// JSON half of a checkpoint. The payload holds the parameters in order,
/// then Adam `m` and `v` in the same order when `has_adam` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub magic: String,
    pub epoch: usize,
    pub network: UNetConfig,
    pub names: Vec<String>,
    pub shapes: Vec<Shape>,
    pub has_adam: bool,
    #[serde(default)]
    pub adam_t: u64,
    #[serde(default)]
    pub adam_betas: [f64; 2],
    #[serde(default)]
    pub adam_eps: f64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn push(bytes: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, payload_path) = raw32_paths(path);
    if ck.params.len() != ck.specs.len() {
        return Err(Error::shape("checkpoint parameter list does not match its specs"));
    }
    let adam = ck.adam.as_ref();
    let manifest = CheckpointManifest {
        magic: CHECKPOINT_MAGIC.into(),
        epoch: ck.epoch,
        network: ck.config.clone(),
        names: ck.specs.iter().map(|s| s.name.clone()).collect(),
        shapes: ck.specs.iter().map(|s| s.shape).collect(),
        has_adam: adam.is_some(),
        adam_t: adam.map_or(0, |a| a.t),
        adam_betas: adam.map_or([0.0; 2], |a| [a.beta1, a.beta2]),
        adam_eps: adam.map_or(0.0, |a| a.eps),
        extra: ck.extra.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let mut bytes = Vec::new();
    for p in &ck.params {
        push(&mut bytes, &p.data);
    }
    if let Some(a) = adam {
        for m in &a.m {
            push(&mut bytes, m);
        }
        for v in &a.v {
            push(&mut bytes, v);
        }
    }
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let (json_path, payload_path) = raw32_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if m.magic != CHECKPOINT_MAGIC {
        return Err(Error::format(&json_path, format!("bad magic {:?}", m.magic)));
    }
    if m.names.len() != m.shapes.len() {
        return Err(Error::format(&json_path, "names and shapes differ in length"));
    }
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let per_set: usize = m.shapes.iter().map(shape_len).sum();
    let sets = if m.has_adam { 3 } else { 1 };
    if bytes.len() != per_set * sets * 4 {
        return Err(Error::format(
            &payload_path,
            format!("payload is {} bytes, manifest declares {}", bytes.len(), per_set * sets * 4),
        ));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };

    let specs: Vec<ParamSpec> = m
        .names
        .iter()
        .zip(&m.shapes)
        .map(|(n, s)| ParamSpec { name: n.clone(), shape: *s })
        .collect();
    let params = specs
        .iter()
        .map(|s| Tensor { shape: s.shape, data: take(shape_len(&s.shape)) })
        .collect();
    let adam = if m.has_adam {
        let mut state = AdamState::new(&specs);
        state.t = m.adam_t;
        state.beta1 = m.adam_betas[0];
        state.beta2 = m.adam_betas[1];
        state.eps = m.adam_eps;
        for (slot, s) in state.m.iter_mut().zip(&specs) {
            *slot = take(shape_len(&s.shape));
        }
        for (slot, s) in state.v.iter_mut().zip(&specs) {
            *slot = take(shape_len(&s.shape));
        }
        Some(state)
    } else {
        None
    };
    Ok(Checkpoint {
        epoch: m.epoch,
        config: m.network,
        specs,
        params,
        adam,
        extra: m.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::Seed;
    use crate::network::{build_unet, init_params};

    #[test]
    fn round_trip_is_exact() {
        let cfg = UNetConfig {
            in_channels: 2,
            depth: 1,
            base_width: 3,
            convs_per_level: 1,
        };
        let net = build_unet::<f32>(&cfg, 8, 8).unwrap();
        let specs = net.graph.params().to_vec();
        let params = init_params::<f32>(&specs, Seed(3));
        let mut adam = AdamState::new(&specs);
        let grads: Vec<_> = params.iter().map(|p| p.map(|v| v * 0.5 + 0.1)).collect();
        let mut p2 = params.clone();
        adam.step(&mut p2, &grads, 1e-3).unwrap();
        let ck = Checkpoint {
            epoch: 17,
            config: cfg,
            specs,
            params: p2,
            adam: Some(adam),
            extra: serde_json::json!({"best_loss": 0.25}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert!(load_checkpoint(dir.path().join("missing")).is_err());
    }
}
