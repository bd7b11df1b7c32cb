//! Subflow extraction: simple (constant-gap) and incremental (growing-gap)
//! packet sampling, plus the numeric encoding fed to the models.

use crate::flow::{Flow, Subflow};
use std::str::FromStr;

/// Packet sampling strategy used to slice flows into subflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMethod {
    /// Constant gap `d` between consecutive sampled packets.
    Simple,
    /// Gap starts at `l0` and grows by `beta` after every `alpha` sampled
    /// packets, so one subflow covers both short- and long-range structure.
    Incremental,
}

impl SamplingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMethod::Simple => "simple",
            SamplingMethod::Incremental => "incremental",
        }
    }
}

impl FromStr for SamplingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple" => Ok(SamplingMethod::Simple),
            "incremental" => Ok(SamplingMethod::Incremental),
            other => Err(format!("unknown sampling method {other:?}")),
        }
    }
}

/// Parameters of the subflow sampling pass structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub method: SamplingMethod,
    /// Number of sampling passes over each flow.
    pub passes: usize,
    /// Packet-index increment of the start position between passes.
    pub start_step: usize,
    /// Packets per subflow.
    pub subflow_len: usize,
    /// Fixed sampling interval for the simple method.
    pub d: usize,
    /// Initial interval for the incremental method.
    pub l0: usize,
    /// Sampled-packet count between interval growth steps.
    pub alpha: usize,
    /// Interval growth increment.
    pub beta: f64,
    /// Flows with fewer packets than this are discarded outright.
    pub min_flow_packets: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            method: SamplingMethod::Simple,
            passes: 100,
            start_step: 13,
            subflow_len: 45,
            d: 22,
            l0: 1,
            alpha: 5,
            beta: 1.6,
            min_flow_packets: 100,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.passes < 1 {
            return Err("sampling passes must be >= 1".into());
        }
        if self.start_step < 1 {
            return Err("sampling start_step must be >= 1".into());
        }
        if self.subflow_len < 2 {
            return Err("sampling subflow_len must be >= 2".into());
        }
        if self.d < 1 || self.l0 < 1 || self.alpha < 1 {
            return Err("sampling intervals d, l0 and alpha must be >= 1".into());
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err("sampling beta must be finite and >= 0".into());
        }
        Ok(())
    }

    /// Total packet-index span of one pass: the sum of all gaps.
    pub fn span(&self) -> usize {
        gap_schedule(self).iter().sum()
    }
}

/// Fixed normalization constants shared by subflow encoding and flow
/// statistics, so values stay comparable across clients without exchanging
/// per-client statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingParams {
    /// Length divisor in bytes (Ethernet MTU by default).
    pub len_scale: f64,
    /// Time divisor in seconds.
    pub time_scale: f64,
}

impl Default for EncodingParams {
    fn default() -> Self {
        EncodingParams {
            len_scale: 1500.0,
            time_scale: 10.0,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(1.0) as usize
}

/// Gaps between consecutive sampled packet indices within one pass;
/// `subflow_len - 1` entries, each >= 1.
///
/// Simple sampling uses the constant interval `d`. Incremental sampling
/// grows the interval: the j-th gap is `l0 + floor(j/alpha) * beta`,
/// rounded half-up.
pub fn gap_schedule(params: &SamplingParams) -> Vec<usize> {
    let n = params.subflow_len - 1;
    match params.method {
        SamplingMethod::Simple => vec![params.d; n],
        SamplingMethod::Incremental => (1..=n)
            .map(|j| round_half_up(params.l0 as f64 + (j / params.alpha) as f64 * params.beta))
            .collect(),
    }
}

/// Extracts every complete subflow from a validated flow.
///
/// Flows shorter than `min_flow_packets` yield nothing. Pass `i` starts at
/// packet index `i * start_step` and follows the gap schedule; a pass whose
/// last index falls beyond the flow is discarded without shifting later
/// passes.
pub fn sample_subflows(
    flow: &Flow,
    params: &SamplingParams,
    encoding: &EncodingParams,
) -> Vec<Subflow> {
    let packet_count = flow.packets.len();
    if packet_count < params.min_flow_packets {
        return Vec::new();
    }
    let gaps = gap_schedule(params);
    let span: usize = gaps.iter().sum();
    let mut subflows = Vec::new();
    let mut indices = Vec::with_capacity(params.subflow_len);
    for pass in 0..params.passes {
        let start = pass * params.start_step;
        if start + span > packet_count - 1 {
            continue;
        }
        indices.clear();
        indices.push(start);
        let mut idx = start;
        for &g in &gaps {
            idx += g;
            indices.push(idx);
        }
        subflows.push(encode_subflow(flow, &indices, encoding));
    }
    subflows
}

/// Encodes the packets at `packet_indices` as a subflow: column 0 is the
/// direction-signed length over `len_scale` clamped to `[-1, 1]`; column 1
/// is the arrival time relative to the first sampled packet over
/// `time_scale`, clamped to `[0, 1]`.
pub fn encode_subflow(flow: &Flow, packet_indices: &[usize], norm: &EncodingParams) -> Subflow {
    debug_assert!(packet_indices.windows(2).all(|w| w[0] < w[1]));
    let t0 = flow.packets[packet_indices[0]].timestamp;
    let mut values = Vec::with_capacity(packet_indices.len() * 2);
    for &i in packet_indices {
        let p = &flow.packets[i];
        let signed_len = p.direction.sign() * p.length as f64 / norm.len_scale;
        let rel_time = (p.timestamp - t0) / norm.time_scale;
        values.push(signed_len.clamp(-1.0, 1.0) as f32);
        values.push(rel_time.clamp(0.0, 1.0) as f32);
    }
    Subflow::new(
        values,
        packet_indices.len(),
        flow.flow_id.clone(),
        flow.label,
    )
}

/// Closed-form subflow count for simple sampling on a flow of `packet_count`
/// packets (ignoring the short-flow filter).
pub fn simple_subflow_count(packet_count: usize, params: &SamplingParams) -> usize {
    let span = (params.subflow_len - 1) * params.d;
    if packet_count == 0 || packet_count - 1 < span {
        return 0;
    }
    params
        .passes
        .min((packet_count - 1 - span) / params.start_step + 1)
}
