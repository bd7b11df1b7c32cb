//! Per-flow statistics vector used as the regression target of the
//! unsupervised pretraining stage.

use crate::flow::{Direction, Flow, FlowError};
use crate::sampling::EncodingParams;

/// Number of components in the statistics vector: 3 direction groups
/// (forward, backward, all) x 2 quantities (packet length, inter-arrival
/// time) x 4 statistics (mean, population std, min, max).
pub const FEATURE_COUNT: usize = 24;

/// The 24-component flow statistics vector. Lengths are normalized by
/// `len_scale` and times by `time_scale`; every component is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowFeatures {
    values: [f64; FEATURE_COUNT],
}

impl FlowFeatures {
    pub fn values(&self) -> &[f64; FEATURE_COUNT] {
        &self.values
    }

    pub(crate) fn from_values(values: [f64; FEATURE_COUNT]) -> Self {
        FlowFeatures { values }
    }

    /// The vector as `f32`, the precision used by model targets.
    pub fn to_f32(&self) -> [f32; FEATURE_COUNT] {
        let mut out = [0.0f32; FEATURE_COUNT];
        for (o, v) in out.iter_mut().zip(self.values.iter()) {
            *o = *v as f32;
        }
        out
    }
}

/// (mean, population std, min, max) of a sample; all zeros when empty.
fn stats(values: &[f64]) -> [f64; 4] {
    if values.is_empty() {
        return [0.0; 4];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), min, max]
}

/// Consecutive timestamp gaps within one packet group; empty when the group
/// has fewer than two packets.
fn inter_arrival(times: &[f64]) -> Vec<f64> {
    times.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Computes the 24 flow statistics for a validated, non-empty flow.
///
/// Layout, in order: for each group (forward, backward, all) the length
/// statistics (mean, std, min, max) followed by the inter-arrival statistics
/// (mean, std, min, max). Length statistics are divided by `len_scale` and
/// time statistics by `time_scale` after being computed in raw units.
pub fn compute_features(flow: &Flow, norm: &EncodingParams) -> Result<FlowFeatures, FlowError> {
    if flow.packets.is_empty() {
        return Err(FlowError::EmptyFlow {
            flow_id: flow.flow_id.clone(),
        });
    }
    let mut values = [0.0f64; FEATURE_COUNT];
    let mut cursor = 0;
    for group in [Some(Direction::Forward), Some(Direction::Backward), None] {
        let mut lengths = Vec::new();
        let mut times = Vec::new();
        for p in &flow.packets {
            if group.is_none() || group == Some(p.direction) {
                lengths.push(p.length as f64);
                times.push(p.timestamp);
            }
        }
        for s in stats(&lengths) {
            values[cursor] = s / norm.len_scale;
            cursor += 1;
        }
        for s in stats(&inter_arrival(&times)) {
            values[cursor] = s / norm.time_scale;
            cursor += 1;
        }
    }
    debug_assert_eq!(cursor, FEATURE_COUNT);
    Ok(FlowFeatures { values })
}
