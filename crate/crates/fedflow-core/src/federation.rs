//! Federated pretraining: client selection, local unsupervised updates,
//! FedAvg aggregation over communication rounds, and the server-side
//! supervised retraining that follows.

use crate::features::FlowFeatures;
use crate::flow::Subflow;
use crate::models::{
    apply_params, build_retrain_model, feature_batch, subflow_batch, transfer_backbone,
    ArchitectureId, ModelDims, ModelError, ModelParams,
};
use crate::nn::{
    adam_step, cross_entropy, cross_entropy_grad, mse, mse_grad, AdamHyper, AdamState, Network,
    NnError,
};
use rand::SeedableRng;
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("client {0} has an empty dataset")]
    EmptyClientDataset(usize),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("labeled training set needs at least 2 distinct labels")]
    DegenerateLabels,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Knobs of the federated pretraining loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationConfig {
    /// Total number of clients K.
    pub clients: usize,
    /// Participation fraction C in [0, 1].
    pub participation: f64,
    /// Communication rounds R.
    pub rounds: usize,
    /// Local passes over each client's data per round.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop early once the global loss plateaus (relative improvement below
    /// 1e-4 over 5 rounds).
    pub early_stop: bool,
    pub adam: AdamHyper,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 100,
            participation: 0.8,
            rounds: 100,
            local_epochs: 1,
            batch_size: 64,
            seed: 0,
            early_stop: false,
            adam: AdamHyper::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        if self.clients < 1 {
            return Err(FederationError::InvalidConfig("clients must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.participation) {
            return Err(FederationError::InvalidConfig(
                "participation must lie in [0, 1]".into(),
            ));
        }
        if self.rounds < 1 {
            return Err(FederationError::InvalidConfig("rounds must be >= 1".into()));
        }
        if self.local_epochs < 1 {
            return Err(FederationError::InvalidConfig(
                "local_epochs must be >= 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(FederationError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Log entry for one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    /// Selected client ids, ascending.
    pub selected: Vec<usize>,
    /// Final local loss of each selected client, aligned with `selected`.
    pub client_losses: Vec<f64>,
    /// Example-weighted mean of the client losses.
    pub global_loss: f64,
    pub wall_ms: f64,
}

fn mix_round_seed(seed: u64, round: usize) -> u64 {
    let mut z = seed ^ (round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Selects `max(floor(C*K), 1)` distinct clients for a round, uniformly
/// without replacement from a generator seeded by (seed, round). Returns
/// ascending ids.
pub fn select_clients(clients: usize, participation: f64, round: usize, seed: u64) -> Vec<usize> {
    let m = ((participation * clients as f64).floor() as usize).max(1).min(clients);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_round_seed(seed, round));
    let mut ids = rand::seq::index::sample(&mut rng, clients, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Runs `epochs` passes of minibatch Adam on the MSE regression task,
/// mutating `net` in place; returns the example-weighted mean loss of the
/// final epoch. Batches follow the dataset order.
fn train_mse_epochs(
    net: &mut Network<f32>,
    data: &[(Subflow, FlowFeatures)],
    epochs: usize,
    batch_size: usize,
    state: &mut AdamState<f32>,
) -> Result<f64, FederationError> {
    let depth = net.train_depth();
    let mut last_epoch_loss = 0.0;
    for epoch in 0..epochs {
        let mut loss_sum = 0.0f64;
        let mut examples = 0usize;
        for batch in data.chunks(batch_size) {
            let subflows: Vec<&Subflow> = batch.iter().map(|(s, _)| s).collect();
            let features: Vec<&FlowFeatures> = batch.iter().map(|(_, f)| f).collect();
            let input = subflow_batch(&subflows);
            let target = feature_batch(&features);
            let (output, cache) = net.forward_cached(&input, depth)?;
            let loss = mse(&output, &target)?;
            let grads = net.backward(&cache, &mse_grad(&output, &target)?, depth)?;
            adam_step(state, net.entries_mut(), &grads)?;
            loss_sum += loss as f64 * batch.len() as f64;
            examples += batch.len();
        }
        if epoch == epochs - 1 {
            last_epoch_loss = loss_sum / examples.max(1) as f64;
        }
    }
    Ok(last_epoch_loss)
}

/// One client's local unsupervised update: clones the global parameters,
/// trains `local_epochs` epochs of minibatch Adam on MSE with a fresh
/// optimizer state, and returns the new parameters, the local example count
/// and the final-epoch mean loss. The global parameters are not modified.
pub fn client_update(
    template: &Network<f32>,
    global: &ModelParams,
    client_id: usize,
    local_data: &[(Subflow, FlowFeatures)],
    config: &FederationConfig,
) -> Result<(ModelParams, usize, f64), FederationError> {
    if local_data.is_empty() {
        return Err(FederationError::EmptyClientDataset(client_id));
    }
    let mut net = template.clone();
    apply_params(&mut net, global)?;
    let mut state = AdamState::new(net.entries(), config.adam);
    let loss = train_mse_epochs(
        &mut net,
        local_data,
        config.local_epochs,
        config.batch_size,
        &mut state,
    )?;
    Ok((
        ModelParams::from_network(global.architecture, &net),
        local_data.len(),
        loss,
    ))
}

/// Replaces the global parameters with the example-count-weighted mean of
/// the client updates, reduced in input (ascending client id) order with
/// `f64` accumulators.
pub fn fedavg_aggregate(updates: &[(ModelParams, usize)]) -> Result<ModelParams, FederationError> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| FederationError::InvalidConfig("no updates to aggregate".into()))?;
    for (p, _) in updates {
        if p.architecture != first.architecture || p.entries.len() != first.entries.len() {
            return Err(FederationError::ArchitectureMismatch(
                "updates come from different architectures".into(),
            ));
        }
        for (a, b) in p.entries.iter().zip(&first.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(FederationError::ArchitectureMismatch(format!(
                    "entry {} differs between updates",
                    a.name
                )));
            }
        }
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FederationError::InvalidConfig(
            "aggregation weights sum to zero".into(),
        ));
    }
    let mut out = first.clone();
    for (entry_idx, entry) in out.entries.iter_mut().enumerate() {
        let mut acc = vec![0.0f64; entry.tensor.numel()];
        for (params, n) in updates {
            let w = *n as f64 / total as f64;
            for (a, v) in acc.iter_mut().zip(params.entries[entry_idx].tensor.data()) {
                *a += w * *v as f64;
            }
        }
        for (slot, a) in entry.tensor.data_mut().iter_mut().zip(&acc) {
            *slot = *a as f32;
        }
    }
    Ok(out)
}

/// Executes the federated pretraining loop: for each round, select clients,
/// run their local updates (in parallel), aggregate with FedAvg, and log a
/// round record. Returns the final global parameters and the full log.
pub fn run_pretraining(
    initial: &Network<f32>,
    clients: &[Vec<(Subflow, FlowFeatures)>],
    config: &FederationConfig,
) -> Result<(ModelParams, Vec<RoundRecord>), FederationError> {
    config.validate()?;
    if clients.len() != config.clients {
        return Err(FederationError::InvalidConfig(format!(
            "{} client datasets for K={}",
            clients.len(),
            config.clients
        )));
    }
    let mut global = ModelParams::from_network(ArchitectureId::Pretrain, initial);
    let mut records: Vec<RoundRecord> = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let start = Instant::now();
        let selected = select_clients(config.clients, config.participation, round, config.seed);
        let results: Vec<Result<(ModelParams, usize, f64), FederationError>> = selected
            .par_iter()
            .map(|&id| client_update(initial, &global, id, &clients[id], config))
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut client_losses = Vec::with_capacity(results.len());
        for r in results {
            let (params, n, loss) = r?;
            updates.push((params, n));
            client_losses.push(loss);
        }
        global = fedavg_aggregate(&updates)?;
        let total: usize = updates.iter().map(|(_, n)| n).sum();
        let global_loss = client_losses
            .iter()
            .zip(&updates)
            .map(|(l, (_, n))| l * *n as f64 / total as f64)
            .sum();
        log::info!(
            "round {round}/{}: {} clients, mean loss {global_loss:.6}",
            config.rounds,
            selected.len()
        );
        records.push(RoundRecord {
            round,
            selected,
            client_losses,
            global_loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if config.early_stop && plateaued(&records) {
            log::info!("round {round}: loss plateaued, stopping early");
            break;
        }
    }
    Ok((global, records))
}

/// Relative improvement below 1e-4 over the last 5 rounds.
fn plateaued(records: &[RoundRecord]) -> bool {
    if records.len() < 6 {
        return false;
    }
    let now = records[records.len() - 1].global_loss;
    let then = records[records.len() - 6].global_loss;
    then.abs() > 0.0 && (then - now) / then.abs() < 1e-4
}

/// Centralized counterpart of the pretraining stage: trains one model on the
/// pooled data with the same round structure (optimizer state resets every
/// `local_epochs` epochs), so a single-client federation and centralized
/// training coincide exactly.
pub fn centralized_pretrain(
    initial: &Network<f32>,
    data: &[(Subflow, FlowFeatures)],
    config: &FederationConfig,
) -> Result<(ModelParams, Vec<RoundRecord>), FederationError> {
    config.validate()?;
    if data.is_empty() {
        return Err(FederationError::EmptyClientDataset(0));
    }
    let mut net = initial.clone();
    let mut records = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let start = Instant::now();
        let mut state = AdamState::new(net.entries(), config.adam);
        let loss = train_mse_epochs(
            &mut net,
            data,
            config.local_epochs,
            config.batch_size,
            &mut state,
        )?;
        log::info!("centralized epoch block {round}/{}: loss {loss:.6}", config.rounds);
        records.push(RoundRecord {
            round,
            selected: vec![0],
            client_losses: vec![loss],
            global_loss: loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if config.early_stop && plateaued(&records) {
            break;
        }
    }
    Ok((ModelParams::from_network(ArchitectureId::Pretrain, &net), records))
}

/// Builds the retraining classifier, copies the pretrained backbone into it,
/// and fine-tunes on the server's labeled subflows with minibatch Adam under
/// cross-entropy. Returns the final classifier parameters.
#[allow(clippy::too_many_arguments)]
pub fn retrain_server(
    pretrain_params: &ModelParams,
    server_train: &[(Subflow, usize)],
    epochs: usize,
    num_classes: usize,
    dims: &ModelDims,
    seed: u64,
    batch_size: usize,
    adam: AdamHyper,
) -> Result<ModelParams, FederationError> {
    if server_train.is_empty() {
        return Err(FederationError::InvalidConfig(
            "server training set is empty".into(),
        ));
    }
    let mut distinct = std::collections::BTreeSet::new();
    for (_, label) in server_train {
        if *label >= num_classes {
            return Err(FederationError::LabelOutOfRange {
                label: *label,
                num_classes,
            });
        }
        distinct.insert(*label);
    }
    if distinct.len() < 2 {
        return Err(FederationError::DegenerateLabels);
    }
    let mut net = build_retrain_model(seed, num_classes, dims)?;
    let fresh = ModelParams::from_network(ArchitectureId::Retrain, &net);
    apply_params(&mut net, &transfer_backbone(pretrain_params, &fresh)?)?;
    let mut state = AdamState::new(net.entries(), adam);
    let depth = net.train_depth();
    for epoch in 0..epochs {
        let mut loss_sum = 0.0f64;
        let mut examples = 0usize;
        for batch in server_train.chunks(batch_size) {
            let subflows: Vec<&Subflow> = batch.iter().map(|(s, _)| s).collect();
            let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
            let input = subflow_batch(&subflows);
            let (logits, cache) = net.forward_cached(&input, depth)?;
            let loss = cross_entropy(&logits, &labels)?;
            let grads = net.backward(&cache, &cross_entropy_grad(&logits, &labels)?, depth)?;
            adam_step(&mut state, net.entries_mut(), &grads)?;
            loss_sum += loss as f64 * batch.len() as f64;
            examples += batch.len();
        }
        if epoch % 10 == 9 {
            log::info!(
                "retrain epoch {}/{epochs}: loss {:.6}",
                epoch + 1,
                loss_sum / examples.max(1) as f64
            );
        }
    }
    Ok(ModelParams::from_network(ArchitectureId::Retrain, &net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{compute_features, FEATURE_COUNT};
    use crate::flow::{validate_flow, Direction, Flow, Packet};
    use crate::models::build_pretrain_model;
    use crate::sampling::{sample_subflows, EncodingParams, SamplingParams};

    fn small_dims() -> ModelDims {
        ModelDims {
            input_len: 45,
            conv1_channels: 4,
            conv1_kernel: 5,
            conv2_channels: 6,
            conv2_kernel: 3,
            hidden: 16,
            retrain_hidden: 8,
        }
    }

    fn tiny_config(clients: usize, rounds: usize) -> FederationConfig {
        FederationConfig {
            clients,
            participation: 1.0,
            rounds,
            local_epochs: 1,
            batch_size: 8,
            seed: 3,
            early_stop: false,
            adam: AdamHyper::default(),
        }
    }

    fn synthetic_pairs(count: usize, seed: u64) -> Vec<(Subflow, FlowFeatures)> {
        let flows = crate::ingest::generate_synthetic_dataset(
            &crate::ingest::default_profiles()[..3],
            3,
            (1_100, 1_300),
            seed,
        )
        .unwrap();
        let params = SamplingParams {
            passes: 10,
            ..SamplingParams::default()
        };
        let norm = EncodingParams::default();
        let mut out = Vec::new();
        for flow in &flows {
            let features = compute_features(flow, &norm).unwrap();
            for s in sample_subflows(flow, &params, &norm) {
                out.push((s, features.clone()));
                if out.len() == count {
                    return out;
                }
            }
        }
        out
    }

    #[test]
    fn selection_counts_follow_the_max_clause() {
        assert_eq!(select_clients(100, 0.8, 1, 0).len(), 80);
        assert_eq!(select_clients(3, 0.1, 1, 0).len(), 1);
        assert_eq!(select_clients(10, 1.0, 1, 0), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn selection_is_deterministic_per_round() {
        let a = select_clients(50, 0.5, 7, 123);
        let b = select_clients(50, 0.5, 7, 123);
        assert_eq!(a, b);
        let c = select_clients(50, 0.5, 8, 123);
        assert_ne!(a, c);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "ascending distinct ids");
    }

    #[test]
    fn selection_covers_every_client() {
        let mut seen = vec![false; 10];
        for round in 1..=1_000 {
            for id in select_clients(10, 0.5, round, 99) {
                seen[id] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "{seen:?}");
    }

    #[test]
    fn zero_lr_client_update_returns_global_params() {
        let dims = small_dims();
        let net = build_pretrain_model(1, FEATURE_COUNT, &dims);
        let global = ModelParams::from_network(ArchitectureId::Pretrain, &net);
        let data = synthetic_pairs(20, 5);
        let config = FederationConfig {
            adam: AdamHyper { lr: 0.0, ..AdamHyper::default() },
            ..tiny_config(1, 1)
        };
        let (updated, n, _) = client_update(&net, &global, 0, &data, &config).unwrap();
        assert_eq!(n, 20);
        assert_eq!(updated, global);
    }

    #[test]
    fn empty_client_dataset_is_an_error() {
        let dims = small_dims();
        let net = build_pretrain_model(1, FEATURE_COUNT, &dims);
        let global = ModelParams::from_network(ArchitectureId::Pretrain, &net);
        assert!(matches!(
            client_update(&net, &global, 4, &[], &tiny_config(1, 1)),
            Err(FederationError::EmptyClientDataset(4))
        ));
    }

    #[test]
    fn perfect_fit_is_a_stationary_point() {
        // Target equals the model output: gradients are zero, so Adam stays put.
        let dims = small_dims();
        let net = build_pretrain_model(2, FEATURE_COUNT, &dims);
        let global = ModelParams::from_network(ArchitectureId::Pretrain, &net);
        let (subflow, _) = synthetic_pairs(1, 6).pop().unwrap();
        let out = net.forward(&subflow_batch(&[&subflow])).unwrap();
        let mut values = [0.0f64; FEATURE_COUNT];
        for (v, o) in values.iter_mut().zip(out.data()) {
            *v = *o as f64;
        }
        let target = FlowFeatures::from_values(values);
        let data = vec![(subflow, target)];
        let (updated, _, loss) = client_update(&net, &global, 0, &data, &tiny_config(1, 1)).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
        for (a, b) in updated.entries.iter().zip(&global.entries) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((x - y).abs() < 1e-7, "{} moved", a.name);
            }
        }
    }

    #[test]
    fn training_descends_on_most_seeds() {
        let dims = small_dims();
        let mut decreased = 0;
        for seed in 0..20 {
            let net = build_pretrain_model(seed, FEATURE_COUNT, &dims);
            let global = ModelParams::from_network(ArchitectureId::Pretrain, &net);
            let data = synthetic_pairs(64, seed + 100);
            let config = FederationConfig {
                adam: AdamHyper { lr: 1e-4, ..AdamHyper::default() },
                ..tiny_config(1, 1)
            };
            let before = dataset_loss(&net, &data);
            let (updated, _, _) = client_update(&net, &global, 0, &data, &config).unwrap();
            let mut after_net = net.clone();
            apply_params(&mut after_net, &updated).unwrap();
            let after = dataset_loss(&after_net, &data);
            if after < before {
                decreased += 1;
            }
        }
        assert!(decreased >= 18, "loss decreased on only {decreased}/20 seeds");
    }

    fn dataset_loss(net: &Network<f32>, data: &[(Subflow, FlowFeatures)]) -> f64 {
        let subflows: Vec<&Subflow> = data.iter().map(|(s, _)| s).collect();
        let features: Vec<&FlowFeatures> = data.iter().map(|(_, f)| f).collect();
        let out = net
            .forward_range(0, net.train_depth(), subflow_batch(&subflows))
            .unwrap();
        mse(&out, &feature_batch(&features)).unwrap() as f64
    }

    #[test]
    fn single_update_aggregates_to_itself_bitwise() {
        let dims = small_dims();
        let net = build_pretrain_model(5, FEATURE_COUNT, &dims);
        let params = ModelParams::from_network(ArchitectureId::Pretrain, &net);
        let out = fedavg_aggregate(&[(params.clone(), 17)]).unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn opposite_updates_cancel() {
        let dims = small_dims();
        let net = build_pretrain_model(5, FEATURE_COUNT, &dims);
        let a = ModelParams::from_network(ArchitectureId::Pretrain, &net);
        let mut b = a.clone();
        for e in &mut b.entries {
            for v in e.tensor.data_mut() {
                *v = -*v;
            }
        }
        let out = fedavg_aggregate(&[(a, 3), (b, 3)]).unwrap();
        for e in &out.entries {
            assert!(e.tensor.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn weighted_mean_hand_example() {
        let dims = small_dims();
        let net = build_pretrain_model(5, FEATURE_COUNT, &dims);
        let mut a = ModelParams::from_network(ArchitectureId::Pretrain, &net);
        let mut b = a.clone();
        for e in &mut a.entries {
            for v in e.tensor.data_mut() {
                *v = 1.0;
            }
        }
        for e in &mut b.entries {
            for v in e.tensor.data_mut() {
                *v = 4.0;
            }
        }
        let out = fedavg_aggregate(&[(a, 1), (b, 3)]).unwrap();
        for e in &out.entries {
            for &v in e.tensor.data() {
                assert_eq!(v, 3.25);
            }
        }
    }

    #[test]
    fn all_equal_params_are_a_fixed_point() {
        let dims = small_dims();
        let net = build_pretrain_model(6, FEATURE_COUNT, &dims);
        let params = ModelParams::from_network(ArchitectureId::Pretrain, &net);
        let out = fedavg_aggregate(&[
            (params.clone(), 10),
            (params.clone(), 1),
            (params.clone(), 999),
        ])
        .unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn aggregate_stays_in_the_convex_envelope() {
        let dims = small_dims();
        let nets: Vec<_> = (0..4)
            .map(|s| build_pretrain_model(s, FEATURE_COUNT, &dims))
            .collect();
        let updates: Vec<(ModelParams, usize)> = nets
            .iter()
            .zip([1usize, 2, 3, 4])
            .map(|(n, w)| (ModelParams::from_network(ArchitectureId::Pretrain, n), w))
            .collect();
        let out = fedavg_aggregate(&updates).unwrap();
        for (entry_idx, e) in out.entries.iter().enumerate() {
            for (i, &v) in e.tensor.data().iter().enumerate() {
                let mut lo = f32::INFINITY;
                let mut hi = f32::NEG_INFINITY;
                for (p, _) in &updates {
                    let x = p.entries[entry_idx].tensor.data()[i];
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn round_count_and_determinism() {
        let dims = small_dims();
        let net = build_pretrain_model(9, FEATURE_COUNT, &dims);
        let data = synthetic_pairs(60, 8);
        let clients = crate::ingest::partition_to_clients(data, 3, 4);
        let config = FederationConfig {
            participation: 0.7,
            ..tiny_config(3, 4)
        };
        let (params_a, records_a) = run_pretraining(&net, &clients, &config).unwrap();
        let (params_b, records_b) = run_pretraining(&net, &clients, &config).unwrap();
        assert_eq!(records_a.len(), 4);
        assert_eq!(params_a, params_b);
        let strip =
            |r: &[RoundRecord]| -> Vec<(usize, Vec<usize>, Vec<f64>)> {
                r.iter().map(|x| (x.round, x.selected.clone(), x.client_losses.clone())).collect()
            };
        assert_eq!(strip(&records_a), strip(&records_b));
        // floor(0.7 * 3) = 2 clients per round.
        assert!(records_a.iter().all(|r| r.selected.len() == 2));
    }

    #[test]
    fn early_stop_halts_on_a_loss_plateau() {
        // With lr = 0 the loss never improves, so the plateau detector fires
        // at the first round with a 5-round-old reference.
        let dims = small_dims();
        let net = build_pretrain_model(15, FEATURE_COUNT, &dims);
        let data = synthetic_pairs(40, 16);
        let clients = crate::ingest::partition_to_clients(data, 2, 17);
        let config = FederationConfig {
            rounds: 10,
            early_stop: true,
            adam: AdamHyper { lr: 0.0, ..AdamHyper::default() },
            ..tiny_config(2, 10)
        };
        let (_, records) = run_pretraining(&net, &clients, &config).unwrap();
        assert_eq!(records.len(), 6, "plateau should stop the loop early");
        let full = FederationConfig { early_stop: false, ..config };
        let (_, records) = run_pretraining(&net, &clients, &full).unwrap();
        assert_eq!(records.len(), 10);
    }

    #[test]
    fn clients_never_mutate_the_global_params() {
        let dims = small_dims();
        let net = build_pretrain_model(11, FEATURE_COUNT, &dims);
        let global = ModelParams::from_network(ArchitectureId::Pretrain, &net);
        let snapshot = global.clone();
        let data = synthetic_pairs(30, 12);
        let _ = client_update(&net, &global, 0, &data, &tiny_config(1, 1)).unwrap();
        assert_eq!(global, snapshot);
    }

    #[test]
    fn single_client_federation_equals_centralized_training() {
        let dims = small_dims();
        let net = build_pretrain_model(13, FEATURE_COUNT, &dims);
        let data = synthetic_pairs(50, 14);
        let config = FederationConfig {
            rounds: 3,
            local_epochs: 2,
            ..tiny_config(1, 3)
        };
        let (fed, _) = run_pretraining(&net, std::slice::from_ref(&data), &config).unwrap();
        let (central, _) = centralized_pretrain(&net, &data, &config).unwrap();
        for (a, b) in fed.entries.iter().zip(&central.entries) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((x - y).abs() < 1e-6, "{} diverged", a.name);
            }
        }
    }

    #[test]
    fn retrain_reaches_perfect_accuracy_on_separable_toy_data() {
        let dims = small_dims();
        // Two clearly separated classes: all-forward large packets vs
        // all-backward small packets.
        let mut train = Vec::new();
        for class in 0..2usize {
            for i in 0..8 {
                let packets: Vec<Packet> = (0..150)
                    .map(|j| Packet {
                        timestamp: j as f64 * 0.01,
                        length: if class == 0 { 1_200 + i * 10 } else { 80 + i * 5 } as u32,
                        direction: if class == 0 {
                            Direction::Forward
                        } else {
                            Direction::Backward
                        },
                    })
                    .collect();
                let flow = validate_flow(Flow {
                    flow_id: format!("toy-{class}-{i}"),
                    label: Some(class),
                    packets,
                })
                .unwrap();
                let params = SamplingParams {
                    passes: 2,
                    min_flow_packets: 100,
                    start_step: 13,
                    d: 2,
                    ..SamplingParams::default()
                };
                for s in sample_subflows(&flow, &params, &EncodingParams::default()) {
                    train.push((s, class));
                }
            }
        }
        assert!(!train.is_empty());
        let pretrain = ModelParams::from_network(
            ArchitectureId::Pretrain,
            &build_pretrain_model(1, FEATURE_COUNT, &dims),
        );
        let classifier = retrain_server(
            &pretrain,
            &train,
            200,
            2,
            &dims,
            17,
            16,
            AdamHyper::default(),
        )
        .unwrap();
        let mut net = build_retrain_model(0, 2, &dims).unwrap();
        apply_params(&mut net, &classifier).unwrap();
        let subflows: Vec<&Subflow> = train.iter().map(|(s, _)| s).collect();
        let out = net.forward(&subflow_batch(&subflows)).unwrap();
        let mut correct = 0;
        for (i, (_, label)) in train.iter().enumerate() {
            let row = &out.data()[i * 2..(i + 1) * 2];
            let pred = if row[0] >= row[1] { 0 } else { 1 };
            correct += usize::from(pred == *label);
        }
        assert_eq!(correct, train.len(), "training accuracy must reach 1.0");
    }

    #[test]
    fn zero_epoch_retraining_is_the_transferred_initialization() {
        let dims = small_dims();
        let pretrain = ModelParams::from_network(
            ArchitectureId::Pretrain,
            &build_pretrain_model(21, FEATURE_COUNT, &dims),
        );
        let data = synthetic_pairs(10, 22);
        let train: Vec<(Subflow, usize)> = data
            .iter()
            .enumerate()
            .map(|(i, (s, _))| (s.clone(), i % 2))
            .collect();
        let got = retrain_server(&pretrain, &train, 0, 2, &dims, 23, 8, AdamHyper::default())
            .unwrap();
        let fresh = ModelParams::from_network(
            ArchitectureId::Retrain,
            &build_retrain_model(23, 2, &dims).unwrap(),
        );
        let expected = transfer_backbone(&pretrain, &fresh).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn identical_labels_are_degenerate() {
        let dims = small_dims();
        let pretrain = ModelParams::from_network(
            ArchitectureId::Pretrain,
            &build_pretrain_model(31, FEATURE_COUNT, &dims),
        );
        let data = synthetic_pairs(6, 32);
        let train: Vec<(Subflow, usize)> =
            data.iter().map(|(s, _)| (s.clone(), 1)).collect();
        assert!(matches!(
            retrain_server(&pretrain, &train, 1, 3, &dims, 1, 4, AdamHyper::default()),
            Err(FederationError::DegenerateLabels)
        ));
    }
}
