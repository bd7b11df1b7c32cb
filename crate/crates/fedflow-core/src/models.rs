//! Model architectures, backbone weight transfer, and the checkpoint format.
//!
//! Two related 1D-CNNs share a backbone (`conv1`, `conv2`, `linear1`):
//! the pretraining network regresses a subflow onto the 24 flow statistics,
//! the retraining network adds deeper linear layers and a softmax head for
//! classification.

use crate::features::FEATURE_COUNT;
use crate::flow::Subflow;
use crate::nn::{LayerKind, LayerSpec, Network, NnError, ParamEntry, Tensor, TensorF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid class count {0}: need at least 2")]
    InvalidClassCount(usize),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which of the two architectures a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchitectureId {
    Pretrain,
    Retrain,
}

impl ArchitectureId {
    fn as_byte(self) -> u8 {
        match self {
            ArchitectureId::Pretrain => 0,
            ArchitectureId::Retrain => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ArchitectureId::Pretrain),
            1 => Some(ArchitectureId::Retrain),
            _ => None,
        }
    }
}

/// Ordered, named, shaped weight arrays: the unit exchanged by federated
/// aggregation and stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub architecture: ArchitectureId,
    pub entries: Vec<ParamEntry<f32>>,
}

impl ModelParams {
    pub fn from_network(architecture: ArchitectureId, network: &Network<f32>) -> Self {
        ModelParams {
            architecture,
            entries: network.entries().to_vec(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<f32>> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Layer widths of both architectures; the defaults fit the desk-scale
/// experiments and stay small enough for the finite-difference oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input_len: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    /// Output width of the shared `linear1` layer.
    pub hidden: usize,
    /// Width of the retrain-only `linear2` layer.
    pub retrain_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input_len: 45,
            conv1_channels: 32,
            conv1_kernel: 5,
            conv2_channels: 64,
            conv2_kernel: 3,
            hidden: 128,
            retrain_hidden: 64,
        }
    }
}

impl ModelDims {
    /// Flattened width after the conv/pool backbone, or `None` when the
    /// input is too short for the conv/pool stack.
    pub fn try_flat_width(&self) -> Option<usize> {
        let after_conv1 = self.input_len.checked_sub(self.conv1_kernel)? + 1;
        let after_pool1 = after_conv1 / 2;
        let after_conv2 = after_pool1.checked_sub(self.conv2_kernel)? + 1;
        let after_pool2 = after_conv2 / 2;
        (after_pool2 > 0).then(|| self.conv2_channels * after_pool2)
    }

    /// Flattened width after the conv/pool backbone.
    pub fn flat_width(&self) -> usize {
        self.try_flat_width()
            .expect("input length fits the conv/pool stack")
    }

    fn backbone(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(
                "conv1",
                LayerKind::Conv1d {
                    in_channels: 2,
                    out_channels: self.conv1_channels,
                    kernel: self.conv1_kernel,
                },
            ),
            LayerSpec::new("relu1", LayerKind::ReLU),
            LayerSpec::new("pool1", LayerKind::MaxPool1d { window: 2 }),
            LayerSpec::new(
                "conv2",
                LayerKind::Conv1d {
                    in_channels: self.conv1_channels,
                    out_channels: self.conv2_channels,
                    kernel: self.conv2_kernel,
                },
            ),
            LayerSpec::new("relu2", LayerKind::ReLU),
            LayerSpec::new("pool2", LayerKind::MaxPool1d { window: 2 }),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new(
                "linear1",
                LayerKind::Linear {
                    inputs: self.flat_width(),
                    outputs: self.hidden,
                },
            ),
            LayerSpec::new("relu3", LayerKind::ReLU),
        ]
    }
}

/// Fills weights uniformly in `±sqrt(6 / (fan_in + fan_out))` and zeroes
/// biases, drawing deterministically from the seed in entry order.
fn initialize(network: &mut Network<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fans: Vec<Option<(usize, usize)>> = network
        .specs()
        .iter()
        .filter_map(|s| match s.kind {
            LayerKind::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => Some(Some((in_channels * kernel, out_channels * kernel))),
            LayerKind::Linear { inputs, outputs } => Some(Some((inputs, outputs))),
            _ => None,
        })
        .collect();
    let mut fan_iter = fans.into_iter();
    for entry in network.entries_mut() {
        if entry.name.ends_with(".weight") {
            let (fan_in, fan_out) = fan_iter.next().flatten().expect("weight entry has fans");
            let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
            for v in entry.tensor.data_mut() {
                *v = (rng.random::<f32>() * 2.0 - 1.0) * bound;
            }
        }
        // Biases stay zero.
    }
}

/// Builds the pretraining regression network: subflow `[2, input_len]` to
/// `num_features` statistics.
pub fn build_pretrain_model(seed: u64, num_features: usize, dims: &ModelDims) -> Network<f32> {
    let mut specs = dims.backbone();
    specs.push(LayerSpec::new(
        "linear2",
        LayerKind::Linear {
            inputs: dims.hidden,
            outputs: num_features,
        },
    ));
    let mut net = Network::new(specs, vec![2, dims.input_len]).expect("pretrain architecture");
    initialize(&mut net, seed);
    net
}

/// Builds the retraining classifier: the shared backbone plus two more
/// linear layers and a softmax over `num_classes`.
pub fn build_retrain_model(
    seed: u64,
    num_classes: usize,
    dims: &ModelDims,
) -> Result<Network<f32>, ModelError> {
    if num_classes < 2 {
        return Err(ModelError::InvalidClassCount(num_classes));
    }
    let mut specs = dims.backbone();
    specs.push(LayerSpec::new(
        "linear2",
        LayerKind::Linear {
            inputs: dims.hidden,
            outputs: dims.retrain_hidden,
        },
    ));
    specs.push(LayerSpec::new("relu4", LayerKind::ReLU));
    specs.push(LayerSpec::new(
        "linear3",
        LayerKind::Linear {
            inputs: dims.retrain_hidden,
            outputs: num_classes,
        },
    ));
    specs.push(LayerSpec::new("softmax", LayerKind::Softmax));
    let mut net = Network::new(specs, vec![2, dims.input_len]).expect("retrain architecture");
    initialize(&mut net, seed);
    Ok(net)
}

/// Copies every source entry whose name and shape both match into the
/// destination (the shared backbone); all other destination entries keep
/// their values. Neither input is modified.
pub fn transfer_backbone(
    source: &ModelParams,
    dest: &ModelParams,
) -> Result<ModelParams, ModelError> {
    if source.architecture != ArchitectureId::Pretrain {
        return Err(ModelError::ArchitectureMismatch(
            "transfer source must be a pretrain parameter set".into(),
        ));
    }
    if dest.architecture != ArchitectureId::Retrain {
        return Err(ModelError::ArchitectureMismatch(
            "transfer destination must be a retrain parameter set".into(),
        ));
    }
    let mut out = dest.clone();
    for entry in &mut out.entries {
        if let Some(src) = source.entry(&entry.name) {
            if src.tensor.shape() == entry.tensor.shape() {
                entry.tensor = src.tensor.clone();
            }
        }
    }
    Ok(out)
}

/// Installs a parameter set into a network of the matching architecture.
pub fn apply_params(network: &mut Network<f32>, params: &ModelParams) -> Result<(), ModelError> {
    if network.entries().len() != params.entries.len() {
        return Err(ModelError::ArchitectureMismatch(format!(
            "network has {} parameter entries, checkpoint has {}",
            network.entries().len(),
            params.entries.len()
        )));
    }
    for (have, want) in network.entries().iter().zip(&params.entries) {
        if have.name != want.name || have.tensor.shape() != want.tensor.shape() {
            return Err(ModelError::ArchitectureMismatch(format!(
                "entry {} {:?} does not match checkpoint entry {} {:?}",
                have.name,
                have.tensor.shape(),
                want.name,
                want.tensor.shape()
            )));
        }
    }
    for (slot, entry) in network.entries_mut().iter_mut().zip(&params.entries) {
        slot.tensor = entry.tensor.clone();
    }
    Ok(())
}

/// Packs a batch of subflows into a `[B, 2, len]` input tensor.
pub fn subflow_batch(subflows: &[&Subflow]) -> TensorF {
    assert!(!subflows.is_empty());
    let len = subflows[0].len();
    let mut data = Vec::with_capacity(subflows.len() * 2 * len);
    for s in subflows {
        debug_assert_eq!(s.len(), len);
        data.extend(s.to_input_channels());
    }
    Tensor::new(vec![subflows.len(), 2, len], data).expect("batch shape")
}

/// Packs flow-statistics targets into a `[B, FEATURE_COUNT]` tensor.
pub fn feature_batch(features: &[&crate::features::FlowFeatures]) -> TensorF {
    let mut data = Vec::with_capacity(features.len() * FEATURE_COUNT);
    for f in features {
        data.extend(f.to_f32());
    }
    Tensor::new(vec![features.len(), FEATURE_COUNT], data).expect("target shape")
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"FSSL1";

/// Serializes parameters: magic, architecture byte, entry count, then per
/// entry the name, rank, dims and little-endian `f32` data.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(params.architecture.as_byte());
    out.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for e in &params.entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.tensor.shape().len() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses checkpoint bytes; rejects bad magic, unknown architecture ids,
/// truncation, and trailing garbage.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let mut r = crate::bytes::ByteReader::new(bytes);
    let fmt = ModelError::Format;
    if r.take(CHECKPOINT_MAGIC.len()).map_err(fmt)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let arch = r.u8().map_err(fmt)?;
    let architecture = ArchitectureId::from_byte(arch)
        .ok_or_else(|| ModelError::Format(format!("unknown architecture id {arch}")))?;
    let count = r.u32().map_err(fmt)? as usize;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name = r.str16().map_err(fmt)?.to_string();
        if !seen.insert(name.clone()) {
            return Err(ModelError::Format(format!("duplicate entry name {name:?}")));
        }
        let rank = r.u8().map_err(fmt)? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u32().map_err(fmt)? as u64;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel.saturating_mul(4) > bytes.len() as u64 {
            return Err(ModelError::Format(format!(
                "entry {name:?} claims {numel} elements, more than the file holds"
            )));
        }
        let mut data = Vec::with_capacity(numel as usize);
        for chunk in r.take(numel as usize * 4).map_err(fmt)?.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        entries.push(ParamEntry {
            name,
            tensor: Tensor::new(shape, data).map_err(|e| ModelError::Format(e.to_string()))?,
        });
    }
    if !r.finished() {
        return Err(ModelError::Format(format!(
            "{} trailing bytes after the last entry",
            r.remaining()
        )));
    }
    Ok(ModelParams {
        architecture,
        entries,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    crate::pipeline::write_atomic(path, &encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    decode_checkpoint(&std::fs::read(path)?)
}
