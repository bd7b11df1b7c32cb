//! Core domain types: packets, flows, subflows, and dataset partitions.

use crate::features::FlowFeatures;
use thiserror::Error;

/// Inverse resolution of the on-disk timestamp format (9 fractional
/// digits); exactly representable, so quantized values are the correctly
/// rounded grid points.
const TIMESTAMP_SCALE: f64 = 1e9;

/// Rounds a timestamp to the nanosecond grid used by the flow record format.
/// Values too large for the scaled form to stay finite are beyond grid
/// resolution anyway and pass through unchanged.
pub(crate) fn quantize_timestamp(t: f64) -> f64 {
    let scaled = t * TIMESTAMP_SCALE;
    if scaled.is_finite() {
        scaled.round() / TIMESTAMP_SCALE
    } else {
        t
    }
}

/// Direction of a packet relative to the flow initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Sign used when packet length is multiplied by direction: +1 forward,
    /// -1 backward.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// A single observed packet within a flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    /// Seconds since flow start (non-negative once the flow is validated).
    pub timestamp: f64,
    /// Payload+header size in bytes, always >= 1.
    pub length: u32,
    pub direction: Direction,
}

/// A time-ordered sequence of directional packets; the unit carrying a label.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub flow_id: String,
    /// Class index in `[0, num_classes)`, absent for unlabeled traffic.
    pub label: Option<usize>,
    pub packets: Vec<Packet>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlowError {
    #[error("flow {flow_id:?} has no packets")]
    EmptyFlow { flow_id: String },
    #[error("flow {flow_id:?} packet {index} has non-positive length")]
    NonPositiveLength { flow_id: String, index: usize },
    #[error("flow {flow_id:?} packet {index} has a non-finite timestamp")]
    NonFiniteTimestamp { flow_id: String, index: usize },
}

/// Validates a flow: packets are stably sorted by timestamp, timestamps are
/// rebased so the first packet sits at 0, and rebased values are snapped to
/// the nanosecond grid of the record format.
///
/// Idempotent: validating an already-validated flow returns it unchanged.
pub fn validate_flow(mut flow: Flow) -> Result<Flow, FlowError> {
    if flow.packets.is_empty() {
        return Err(FlowError::EmptyFlow {
            flow_id: flow.flow_id,
        });
    }
    for (index, p) in flow.packets.iter().enumerate() {
        if p.length < 1 {
            return Err(FlowError::NonPositiveLength {
                flow_id: flow.flow_id,
                index,
            });
        }
        if !p.timestamp.is_finite() {
            return Err(FlowError::NonFiniteTimestamp {
                flow_id: flow.flow_id,
                index,
            });
        }
    }
    // Stable sort keeps the original order of equal timestamps.
    flow.packets
        .sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).expect("finite"));
    let base = flow.packets[0].timestamp;
    for p in &mut flow.packets {
        p.timestamp = quantize_timestamp(p.timestamp - base);
    }
    Ok(flow)
}

/// A fixed-length sampled slice of a flow, encoded as the model input.
///
/// `values` is row-major `(len x 2)`: column 0 is the normalized signed
/// packet length in `[-1, 1]`, column 1 the normalized relative arrival time
/// in `[0, 1]`, non-decreasing down the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Subflow {
    values: Vec<f32>,
    len: usize,
    pub source_flow_id: String,
    pub label: Option<usize>,
}

impl Subflow {
    pub(crate) fn new(
        values: Vec<f32>,
        len: usize,
        source_flow_id: String,
        label: Option<usize>,
    ) -> Self {
        debug_assert_eq!(values.len(), len * 2);
        Subflow {
            values,
            len,
            source_flow_id,
            label,
        }
    }

    /// Number of sampled packets (rows).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Row `r` as (signed length, relative time).
    pub fn row(&self, r: usize) -> (f32, f32) {
        (self.values[r * 2], self.values[r * 2 + 1])
    }

    /// Row-major `(len x 2)` backing storage.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Channels-first model input of shape `[2, len]`: channel 0 holds the
    /// signed lengths, channel 1 the relative times.
    pub fn to_input_channels(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len * 2);
        for r in 0..self.len {
            out.push(self.values[r * 2]);
        }
        for r in 0..self.len {
            out.push(self.values[r * 2 + 1]);
        }
        out
    }
}

/// Preprocessed data laid out for one experiment: unlabeled pairs on the
/// simulated clients, labeled subflows split into train/test on the server.
#[derive(Debug, Clone)]
pub struct DatasetPartition {
    /// One unlabeled local dataset per client: (model input, regression target).
    pub client_datasets: Vec<Vec<(Subflow, FlowFeatures)>>,
    pub server_train: Vec<(Subflow, usize)>,
    pub server_test: Vec<(Subflow, usize)>,
}

impl DatasetPartition {
    /// Total number of unlabeled examples across all clients.
    pub fn unlabeled_len(&self) -> usize {
        self.client_datasets.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pkt(timestamp: f64, length: u32, direction: Direction) -> Packet {
        Packet {
            timestamp,
            length,
            direction,
        }
    }

    fn flow(timestamps: &[f64]) -> Flow {
        Flow {
            flow_id: "f".into(),
            label: None,
            packets: timestamps
                .iter()
                .map(|&t| pkt(t, 100, Direction::Forward))
                .collect(),
        }
    }

    #[test]
    fn rebases_to_first_timestamp() {
        let validated = validate_flow(flow(&[5.0, 5.1, 5.3])).unwrap();
        let ts: Vec<f64> = validated.packets.iter().map(|p| p.timestamp).collect();
        assert_eq!(ts, vec![0.0, 0.1, 0.3]);
    }

    #[test]
    fn already_based_flow_unchanged() {
        let f = flow(&[0.0, 0.1, 0.3]);
        let validated = validate_flow(f.clone()).unwrap();
        assert_eq!(validated, f);
    }

    #[test]
    fn empty_flow_rejected() {
        let err = validate_flow(flow(&[])).unwrap_err();
        assert!(matches!(err, FlowError::EmptyFlow { .. }));
    }

    #[test]
    fn zero_length_rejected() {
        let mut f = flow(&[0.0, 0.1]);
        f.packets[1].length = 0;
        let err = validate_flow(f).unwrap_err();
        assert!(matches!(err, FlowError::NonPositiveLength { index: 1, .. }));
    }

    #[test]
    fn nan_timestamp_rejected() {
        let err = validate_flow(flow(&[0.0, f64::NAN])).unwrap_err();
        assert!(matches!(err, FlowError::NonFiniteTimestamp { .. }));
    }

    #[test]
    fn unsorted_packets_are_sorted() {
        let validated = validate_flow(flow(&[3.0, 1.0, 2.0])).unwrap();
        let ts: Vec<f64> = validated.packets.iter().map(|p| p.timestamp).collect();
        assert_eq!(ts, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn equal_timestamps_keep_original_order() {
        let mut f = flow(&[1.0, 1.0, 0.5]);
        f.packets[0].length = 10;
        f.packets[1].length = 20;
        let validated = validate_flow(f).unwrap();
        let lens: Vec<u32> = validated.packets.iter().map(|p| p.length).collect();
        assert_eq!(lens, vec![100, 10, 20]);
    }

    #[test]
    fn subflow_channel_layout() {
        let s = Subflow::new(vec![0.5, 0.0, -0.25, 0.1], 2, "f".into(), Some(1));
        assert_eq!(s.row(0), (0.5, 0.0));
        assert_eq!(s.row(1), (-0.25, 0.1));
        assert_eq!(s.to_input_channels(), vec![0.5, -0.25, 0.0, 0.1]);
    }

    proptest! {
        #[test]
        fn validate_is_idempotent(ts in prop::collection::vec(0.0f64..1e5, 1..50)) {
            let once = validate_flow(flow(&ts)).unwrap();
            let twice = validate_flow(once.clone()).unwrap();
            prop_assert_eq!(once, twice);
        }

        // On the nanosecond grid of the record format, rebasing preserves
        // every inter-arrival gap exactly.
        #[test]
        fn rebase_preserves_gaps_on_grid(ns in prop::collection::vec(0u64..10_000_000_000_000u64, 2..40)) {
            let ts: Vec<f64> = ns.iter().map(|&n| n as f64 * 1e-9).collect();
            let mut sorted = ts.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let validated = validate_flow(flow(&ts)).unwrap();
            for i in 1..sorted.len() {
                let raw_gap = quantize_timestamp(sorted[i] - sorted[i - 1]);
                let new_gap = quantize_timestamp(
                    validated.packets[i].timestamp - validated.packets[i - 1].timestamp,
                );
                prop_assert_eq!(raw_gap, new_gap);
            }
        }

        // Off-grid timestamps may move by at most the quantization step.
        #[test]
        fn rebase_gap_error_bounded(ts in prop::collection::vec(0.0f64..1e6, 2..40)) {
            let mut sorted = ts.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let validated = validate_flow(flow(&ts)).unwrap();
            for i in 1..sorted.len() {
                let raw_gap = sorted[i] - sorted[i - 1];
                let new_gap = validated.packets[i].timestamp - validated.packets[i - 1].timestamp;
                prop_assert!((raw_gap - new_gap).abs() <= 2e-9);
            }
        }
    }
}
