//! Flow record I/O, synthetic traffic generation, and client partitioning.
//!
//! The on-disk flow record format is line-delimited: one UTF-8 JSON object
//! per flow with fields `flow_id` (string), `label` (integer or null) and
//! `packets` (array of `[timestamp_seconds, length_bytes, direction]`
//! triples, direction `1` = forward, `-1` = backward). Timestamps are
//! written with exactly 9 fractional digits.

use crate::flow::{validate_flow, Direction, Flow, Packet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid synthetic profile: {0}")]
    InvalidProfile(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowRecord {
    flow_id: String,
    label: Option<i64>,
    packets: Vec<(f64, i64, i64)>,
}

fn parse_line(line: &str, line_no: usize) -> Result<Flow, IngestError> {
    let parse_err = |message: String| IngestError::Parse {
        line: line_no,
        message,
    };
    let record: FlowRecord =
        serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let mut packets = Vec::with_capacity(record.packets.len());
    for (i, &(timestamp, length, direction)) in record.packets.iter().enumerate() {
        let direction = match direction {
            1 => Direction::Forward,
            -1 => Direction::Backward,
            other => {
                return Err(parse_err(format!(
                    "packet {i}: direction must be 1 or -1, got {other}"
                )))
            }
        };
        if length < 1 || length > u32::MAX as i64 {
            return Err(parse_err(format!(
                "packet {i}: length must be in [1, {}], got {length}",
                u32::MAX
            )));
        }
        packets.push(Packet {
            timestamp,
            length: length as u32,
            direction,
        });
    }
    let label = match record.label {
        None => None,
        Some(l) if l >= 0 => Some(l as usize),
        Some(l) => return Err(parse_err(format!("label must be non-negative, got {l}"))),
    };
    validate_flow(Flow {
        flow_id: record.flow_id,
        label,
        packets,
    })
    .map_err(|e| parse_err(e.to_string()))
}

/// Parses flow records from any reader; flows are validated and returned in
/// input order.
pub fn parse_flow_records<R: BufRead>(reader: R) -> Result<Vec<Flow>, IngestError> {
    let mut flows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        flows.push(parse_line(&line, idx + 1)?);
    }
    Ok(flows)
}

/// Reads a flow record file (see module docs for the format).
pub fn read_flow_records(path: &Path) -> Result<Vec<Flow>, IngestError> {
    let file = std::fs::File::open(path)?;
    parse_flow_records(BufReader::new(file))
}

/// Formats one flow as its single-line record.
pub fn format_flow_record(flow: &Flow) -> String {
    let mut line = String::new();
    let id = serde_json::to_string(&flow.flow_id).expect("string encodes");
    write!(line, "{{\"flow_id\":{id},\"label\":").unwrap();
    match flow.label {
        Some(l) => write!(line, "{l}").unwrap(),
        None => line.push_str("null"),
    }
    line.push_str(",\"packets\":[");
    for (i, p) in flow.packets.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        let sign = match p.direction {
            Direction::Forward => 1,
            Direction::Backward => -1,
        };
        write!(line, "[{:.9},{},{}]", p.timestamp, p.length, sign).unwrap();
    }
    line.push_str("]}");
    line
}

/// Writes flows one record per line; reading the file back reproduces the
/// flows exactly.
pub fn write_flow_records(flows: &[Flow], path: &Path) -> Result<(), IngestError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for flow in flows {
        out.write_all(format_flow_record(flow).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Generator parameters for one synthetic traffic class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticClassProfile {
    pub class_id: usize,
    pub fwd_len_mean: f64,
    pub fwd_len_std: f64,
    pub bwd_len_mean: f64,
    pub bwd_len_std: f64,
    /// Base inter-arrival mean in seconds; alternates with 3x this value
    /// every `burst_period` packets.
    pub iat_mean: f64,
    pub iat_std: f64,
    /// Probability that a packet travels forward.
    pub fwd_ratio: f64,
    pub burst_period: usize,
}

impl SyntheticClassProfile {
    fn validate(&self) -> Result<(), IngestError> {
        let bad = |msg: &str| Err(IngestError::InvalidProfile(format!("class {}: {msg}", self.class_id)));
        if self.fwd_len_mean <= 0.0 || self.bwd_len_mean <= 0.0 || self.iat_mean <= 0.0 {
            return bad("means must be positive");
        }
        if self.fwd_len_std < 0.0 || self.bwd_len_std < 0.0 || self.iat_std < 0.0 {
            return bad("standard deviations must be non-negative");
        }
        if !(self.fwd_ratio > 0.0 && self.fwd_ratio < 1.0) {
            return bad("fwd_ratio must lie strictly between 0 and 1");
        }
        if self.burst_period < 1 {
            return bad("burst_period must be >= 1");
        }
        Ok(())
    }
}

/// Five built-in traffic classes with well-separated length/timing/direction
/// statistics; the desk-scale stand-in for real service categories.
pub fn default_profiles() -> Vec<SyntheticClassProfile> {
    vec![
        // Download-heavy: small forward requests, large backward payloads.
        SyntheticClassProfile {
            class_id: 0,
            fwd_len_mean: 120.0,
            fwd_len_std: 30.0,
            bwd_len_mean: 1_250.0,
            bwd_len_std: 180.0,
            iat_mean: 0.02,
            iat_std: 0.008,
            fwd_ratio: 0.25,
            burst_period: 40,
        },
        // Upload-heavy: the mirror image.
        SyntheticClassProfile {
            class_id: 1,
            fwd_len_mean: 1_300.0,
            fwd_len_std: 150.0,
            bwd_len_mean: 90.0,
            bwd_len_std: 25.0,
            iat_mean: 0.03,
            iat_std: 0.012,
            fwd_ratio: 0.75,
            burst_period: 60,
        },
        // Streaming: dense medium backward packets, short inter-arrivals.
        SyntheticClassProfile {
            class_id: 2,
            fwd_len_mean: 200.0,
            fwd_len_std: 60.0,
            bwd_len_mean: 900.0,
            bwd_len_std: 250.0,
            iat_mean: 0.005,
            iat_std: 0.002,
            fwd_ratio: 0.35,
            burst_period: 25,
        },
        // Interactive: balanced directions, long pauses.
        SyntheticClassProfile {
            class_id: 3,
            fwd_len_mean: 450.0,
            fwd_len_std: 120.0,
            bwd_len_mean: 500.0,
            bwd_len_std: 140.0,
            iat_mean: 0.2,
            iat_std: 0.08,
            fwd_ratio: 0.5,
            burst_period: 15,
        },
        // Browsing: mixed sizes, moderate pacing, long bursts.
        SyntheticClassProfile {
            class_id: 4,
            fwd_len_mean: 700.0,
            fwd_len_std: 200.0,
            bwd_len_mean: 400.0,
            bwd_len_std: 120.0,
            iat_mean: 0.08,
            iat_std: 0.03,
            fwd_ratio: 0.6,
            burst_period: 80,
        },
    ]
}

/// Generates a labeled synthetic dataset, `flows_per_class` flows per
/// profile, deterministically from the seed. Sampled values are clamped to
/// valid ranges (lengths >= 1 byte, inter-arrivals >= 0 s) rather than
/// resampled.
pub fn generate_synthetic_dataset(
    profiles: &[SyntheticClassProfile],
    flows_per_class: usize,
    packets_per_flow_range: (usize, usize),
    seed: u64,
) -> Result<Vec<Flow>, IngestError> {
    if profiles.len() < 2 {
        return Err(IngestError::InvalidProfile(
            "need at least 2 class profiles".into(),
        ));
    }
    let (min_packets, max_packets) = packets_per_flow_range;
    if min_packets < 100 {
        return Err(IngestError::InvalidProfile(
            "packets_per_flow minimum must be >= 100 so flows survive the short-flow filter"
                .into(),
        ));
    }
    if min_packets > max_packets {
        return Err(IngestError::InvalidProfile(
            "packets_per_flow range is inverted".into(),
        ));
    }
    for p in profiles {
        p.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flows = Vec::with_capacity(profiles.len() * flows_per_class);
    for profile in profiles {
        let fwd_len = Normal::new(profile.fwd_len_mean, profile.fwd_len_std)
            .map_err(|e| IngestError::InvalidProfile(e.to_string()))?;
        let bwd_len = Normal::new(profile.bwd_len_mean, profile.bwd_len_std)
            .map_err(|e| IngestError::InvalidProfile(e.to_string()))?;
        for flow_idx in 0..flows_per_class {
            let packet_count = rng.random_range(min_packets..=max_packets);
            let mut packets = Vec::with_capacity(packet_count);
            let mut t = 0.0f64;
            for i in 0..packet_count {
                let forward = rng.random::<f64>() < profile.fwd_ratio;
                let len_draw = if forward {
                    fwd_len.sample(&mut rng)
                } else {
                    bwd_len.sample(&mut rng)
                };
                let length = len_draw.round().max(1.0) as u32;
                // Inter-arrival regime alternates between the base mean and
                // 3x the base mean every burst_period packets.
                let regime_mean = if (i / profile.burst_period) % 2 == 0 {
                    profile.iat_mean
                } else {
                    3.0 * profile.iat_mean
                };
                if i > 0 {
                    let iat = Normal::new(regime_mean, profile.iat_std)
                        .map_err(|e| IngestError::InvalidProfile(e.to_string()))?
                        .sample(&mut rng)
                        .max(0.0);
                    t += iat;
                }
                packets.push(Packet {
                    timestamp: t,
                    length,
                    direction: if forward {
                        Direction::Forward
                    } else {
                        Direction::Backward
                    },
                });
            }
            let flow = validate_flow(Flow {
                flow_id: format!("syn-{}-{}", profile.class_id, flow_idx),
                label: Some(profile.class_id),
                packets,
            })
            .expect("generated flow is non-empty and positive-length");
            flows.push(flow);
        }
    }
    Ok(flows)
}

/// Splits examples across `k` clients: a seeded random permutation chunked
/// into nearly equal parts (sizes differ by at most one, larger parts
/// first). The union of the outputs is the input; parts are disjoint.
pub fn partition_to_clients<T>(mut examples: Vec<T>, k: usize, seed: u64) -> Vec<Vec<T>> {
    assert!(k >= 1, "client count must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
    let n = examples.len();
    let base = n / k;
    let remainder = n % k;
    let mut parts = Vec::with_capacity(k);
    let mut rest = examples;
    for client in 0..k {
        let take = base + usize::from(client < remainder);
        let tail = rest.split_off(take.min(rest.len()));
        parts.push(rest);
        rest = tail;
    }
    parts
}
