//! Binary checkpoint: magic, format version, a JSON header, then every parameter and both Adam
//! moment buffers as little-endian floats of the scalar width named in the header.

use super::model::Model;
use super::train::TrainState;
use super::{ExperimentConfig, HarnessError};
use crate::nn::Adam;
use crate::person::ReprLayout;
use crate::scalar::Scalar;
use crate::tryon::TryonConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRYONCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub scalar: String,
    pub config: ExperimentConfig,
    pub network: TryonConfig,
    pub representation: ReprLayout,
    /// (name, start, end) of every parameter tensor.
    pub parameters: Vec<(String, usize, usize)>,
    pub has_flow_head: bool,
    pub adam_step: u64,
    pub state: TrainState,
}

pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: Vec<T>,
    pub adam: Adam<T>,
}

fn width<T: Scalar>() -> usize {
    std::mem::size_of::<T>()
}

fn layout_entries(layout: &crate::nn::ParamLayout) -> Vec<(String, usize, usize)> {
    layout.entries().iter().map(|(n, r)| (n.clone(), r.start, r.end)).collect()
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &ExperimentConfig,
    model: &Model<T>,
    adam: &Adam<T>,
    state: &TrainState,
) -> Result<(), HarnessError> {
    let header = CheckpointHeader {
        scalar: T::NAME.to_string(),
        config: cfg.clone(),
        network: model.net.config.clone(),
        representation: ReprLayout::for_kind(cfg.pose_mode),
        parameters: layout_entries(&model.layout),
        has_flow_head: model.flow_head.is_some(),
        adam_step: adam.step,
        state: state.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n = model.params.len();
    let mut bytes = Vec::with_capacity(8 + 4 + 8 + json.len() + 3 * n * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for buf in [&model.params, &adam.first_moment, &adam.second_moment] {
        assert_eq!(buf.len(), n);
        for v in buf.iter() {
            match width::<T>() {
                4 => bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => bytes.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    // Write then rename so an interrupted save never leaves a truncated checkpoint behind.
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, HarnessError> {
    let bad = |reason: String| HarnessError::Checkpoint { path: path.display().to_string(), reason };
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + json_len).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.scalar != T::NAME {
        return Err(bad(format!("stored as {}, loading as {}", header.scalar, T::NAME)));
    }
    let n = header.parameters.last().map_or(0, |p| p.2);
    let blob = &bytes[20 + json_len..];
    let w = width::<T>();
    if blob.len() != 3 * n * w {
        return Err(bad(format!("expected {} parameter bytes, found {}", 3 * n * w, blob.len())));
    }
    let read = |k: usize| -> Vec<T> {
        blob[k * n * w..(k + 1) * n * w]
            .chunks_exact(w)
            .map(|c| match w {
                4 => T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => T::lit(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect()
    };
    let mut adam = Adam::new(0);
    adam.step = header.adam_step;
    adam.first_moment = read(1);
    adam.second_moment = read(2);
    Ok(Checkpoint { params: read(0), adam, header })
}

impl<T: Scalar> Checkpoint<T> {
    /// Rebuild the model from the stored config and install the stored parameters.
    /// Fails if the rebuilt layout differs from the one recorded in the file.
    pub fn to_model(&self) -> Result<Model<T>, HarnessError> {
        let mut model = Model::<T>::build(&self.header.config)?;
        let rebuilt = layout_entries(&model.layout);
        if rebuilt != self.header.parameters {
            let first = rebuilt
                .iter()
                .zip(&self.header.parameters)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} vs stored {}", a.0, b.0))
                .unwrap_or_else(|| format!("{} vs stored {} tensors", rebuilt.len(), self.header.parameters.len()));
            return Err(HarnessError::LayoutMismatch(format!("parameter layout differs: {first}")));
        }
        if model.net.config != self.header.network {
            return Err(HarnessError::LayoutMismatch("network config differs from the stored one".into()));
        }
        if ReprLayout::for_kind(self.header.config.pose_mode) != self.header.representation {
            return Err(HarnessError::LayoutMismatch("representation layout differs from the stored one".into()));
        }
        model.params.clone_from(&self.params);
        Ok(model)
    }
}

/// Header only, without reading the parameter blob into memory.
pub fn read_header(path: &Path) -> Option<CheckpointHeader> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).ok()?;
    let mut prefix = [0u8; 20];
    f.read_exact(&mut prefix).ok()?;
    if &prefix[..8] != CHECKPOINT_MAGIC {
        return None;
    }
    let len = u64::from_le_bytes(prefix[12..20].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json).ok()?;
    serde_json::from_slice(&json).ok()
}
