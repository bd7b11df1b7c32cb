//! Pipeline orchestration: staged execution (datagen, preprocess, pretrain,
//! retrain, evaluate), the centralized baseline, mode comparison, and all
//! on-disk artifacts.
//!
//! Every stage reads its inputs from the previous stage's artifacts and
//! writes its own atomically, so the staged CLI commands compose to exactly
//! the same bytes as a full `run`.

use crate::cache;
use crate::config::{DatasetSource, ExperimentConfig, Mode};
use crate::derive_seed;
use crate::features::{compute_features, FlowFeatures, FEATURE_COUNT};
use crate::federation::{
    centralized_pretrain, retrain_server, run_pretraining, FederationConfig, RoundRecord,
};
use crate::flow::{DatasetPartition, Flow, Subflow};
use crate::ingest;
use crate::metrics::{evaluate_flow_level, evaluate_model, Metrics};
use crate::models::{
    apply_params, build_pretrain_model, build_retrain_model, load_checkpoint, save_checkpoint,
    ArchitectureId, ModelParams,
};
use crate::nn::AdamHyper;
use crate::sampling::{sample_subflows, SamplingMethod};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// An error labeled with the pipeline stage it escaped from.
#[derive(Debug, Error)]
#[error("{stage} stage: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    source: Box<dyn std::error::Error + Send + Sync + 'static>,
}

/// Wraps any stage error with its stage label; instantiated per call site
/// so one stage can label several error types.
fn perr<E: std::error::Error + Send + Sync + 'static>(
    stage: &'static str,
) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: Box::new(e),
    }
}

/// Writes a file via a temporary sibling and an atomic rename, creating
/// parent directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Locations of every artifact under one output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: &Path) -> Self {
        ArtifactPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn labeled_flows(&self) -> PathBuf {
        self.root.join("flows_labeled.jsonl")
    }

    pub fn unlabeled_flows(&self) -> PathBuf {
        self.root.join("flows_unlabeled.jsonl")
    }

    fn method_dir(&self, method: SamplingMethod) -> PathBuf {
        self.root.join(method.as_str())
    }

    pub fn clients_cache(&self, method: SamplingMethod) -> PathBuf {
        self.method_dir(method).join("clients.cache")
    }

    pub fn train_cache(&self, method: SamplingMethod) -> PathBuf {
        self.method_dir(method).join("server_train.cache")
    }

    pub fn test_cache(&self, method: SamplingMethod) -> PathBuf {
        self.method_dir(method).join("server_test.cache")
    }

    fn mode_dir(&self, method: SamplingMethod, mode: Mode) -> PathBuf {
        self.method_dir(method).join(mode.as_str())
    }

    pub fn pretrain_checkpoint(&self, method: SamplingMethod, mode: Mode) -> PathBuf {
        self.mode_dir(method, mode).join("pretrain.fssl")
    }

    pub fn retrain_checkpoint(&self, method: SamplingMethod, mode: Mode) -> PathBuf {
        self.mode_dir(method, mode).join("retrain.fssl")
    }

    pub fn rounds_log(&self, method: SamplingMethod, mode: Mode) -> PathBuf {
        self.mode_dir(method, mode).join("rounds.jsonl")
    }

    pub fn metrics_report(&self, method: SamplingMethod, mode: Mode) -> PathBuf {
        self.mode_dir(method, mode).join("metrics.txt")
    }

    pub fn comparison_report(&self) -> PathBuf {
        self.root.join("comparison.txt")
    }
}

/// Generates (or locates) the labeled and unlabeled flow record files.
///
/// Synthetic sources are drawn from the built-in class profiles and written
/// under the output directory; file sources are used where they are.
pub fn stage_datagen(config: &ExperimentConfig) -> Result<(PathBuf, PathBuf), PipelineError> {
    let paths = ArtifactPaths::new(&config.out_dir);
    match config.dataset.source {
        DatasetSource::Files => {
            let labeled = config.dataset.labeled_path.clone().expect("validated");
            let unlabeled = config.dataset.unlabeled_path.clone().expect("validated");
            Ok((labeled, unlabeled))
        }
        DatasetSource::Synthetic => {
            let profiles =
                ingest::default_profiles()[..config.dataset.classes].to_vec();
            let range = (config.dataset.packets_min, config.dataset.packets_max);
            let labeled = ingest::generate_synthetic_dataset(
                &profiles,
                config.dataset.labeled_flows_per_class,
                range,
                derive_seed(config.seed, "datagen/labeled"),
            )
            .map_err(perr("datagen"))?;
            let mut unlabeled = ingest::generate_synthetic_dataset(
                &profiles,
                config.dataset.unlabeled_flows_per_class,
                range,
                derive_seed(config.seed, "datagen/unlabeled"),
            )
            .map_err(perr("datagen"))?;
            // The client-side dataset is unlabeled by construction.
            for flow in &mut unlabeled {
                flow.label = None;
                flow.flow_id = format!("u-{}", flow.flow_id);
            }
            log::info!(
                "datagen: {} labeled flows, {} unlabeled flows",
                labeled.len(),
                unlabeled.len()
            );
            std::fs::create_dir_all(&config.out_dir).map_err(perr("datagen"))?;
            write_flows_atomic(&labeled, &paths.labeled_flows()).map_err(perr("datagen"))?;
            write_flows_atomic(&unlabeled, &paths.unlabeled_flows()).map_err(perr("datagen"))?;
            Ok((paths.labeled_flows(), paths.unlabeled_flows()))
        }
    }
}

fn write_flows_atomic(flows: &[Flow], path: &Path) -> Result<(), ingest::IngestError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    ingest::write_flow_records(flows, &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Splits labeled flows into train/test sets by source flow, stratified per
/// class, so subflows of one flow never cross the split.
fn split_labeled_flows(
    flows: &[Flow],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&Flow>, Vec<&Flow>), String> {
    let mut by_class: BTreeMap<usize, Vec<&Flow>> = BTreeMap::new();
    for flow in flows {
        let label = flow
            .label
            .ok_or_else(|| format!("labeled flow {:?} has no label", flow.flow_id))?;
        by_class.entry(label).or_default().push(flow);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut members) in by_class {
        members.shuffle(&mut rng);
        let n = members.len();
        let take = if n < 2 {
            n
        } else {
            (((fraction * n as f64).round() as usize).max(1)).min(n - 1)
        };
        for (i, flow) in members.into_iter().enumerate() {
            if i < take {
                train.push(flow);
            } else {
                test.push(flow);
            }
        }
    }
    Ok((train, test))
}

/// Runs the preprocessing stage for one sampling method: subflow sampling,
/// feature extraction, the client partition, and the server train/test
/// split, all written to the binary caches. Returns the partition.
pub fn stage_preprocess(
    config: &ExperimentConfig,
    method: SamplingMethod,
) -> Result<DatasetPartition, PipelineError> {
    let paths = ArtifactPaths::new(&config.out_dir);
    let (labeled_path, unlabeled_path) = match config.dataset.source {
        DatasetSource::Files => (
            config.dataset.labeled_path.clone().expect("validated"),
            config.dataset.unlabeled_path.clone().expect("validated"),
        ),
        DatasetSource::Synthetic => (paths.labeled_flows(), paths.unlabeled_flows()),
    };
    let labeled = ingest::read_flow_records(&labeled_path).map_err(perr("preprocess"))?;
    let unlabeled = ingest::read_flow_records(&unlabeled_path).map_err(perr("preprocess"))?;
    let sampling = crate::sampling::SamplingParams {
        method,
        ..config.sampling
    };

    // Client side: (subflow, flow statistics) pairs from unlabeled flows.
    let mut pairs: Vec<(Subflow, FlowFeatures)> = Vec::new();
    for flow in &unlabeled {
        let subflows = sample_subflows(flow, &sampling, &config.encoding);
        if subflows.is_empty() {
            continue;
        }
        let features = compute_features(flow, &config.encoding).map_err(perr("preprocess"))?;
        for s in subflows {
            pairs.push((s, features.clone()));
        }
    }
    let client_datasets = ingest::partition_to_clients(
        pairs,
        config.federation.clients,
        derive_seed(config.seed, "partition"),
    );

    // Server side: labeled subflows split train/test by source flow.
    let (train_flows, test_flows) = split_labeled_flows(
        &labeled,
        config.retrain.train_fraction,
        derive_seed(config.seed, "server-split"),
    )
    .map_err(|m| PipelineError {
        stage: "preprocess",
        source: m.into(),
    })?;
    let collect = |flows: &[&Flow]| -> Vec<(Subflow, usize)> {
        let mut out = Vec::new();
        for flow in flows {
            let label = flow.label.expect("labeled flow");
            for s in sample_subflows(flow, &sampling, &config.encoding) {
                out.push((s, label));
            }
        }
        out
    };
    let partition = DatasetPartition {
        client_datasets,
        server_train: collect(&train_flows),
        server_test: collect(&test_flows),
    };
    log::info!(
        "preprocess[{}]: {} unlabeled subflows over {} clients, {} train / {} test labeled subflows",
        method.as_str(),
        partition.unlabeled_len(),
        partition.client_datasets.len(),
        partition.server_train.len(),
        partition.server_test.len()
    );

    let len = config.sampling.subflow_len;
    write_atomic(
        &paths.clients_cache(method),
        &cache::encode_client_datasets(&partition.client_datasets, len),
    )
    .map_err(perr("preprocess"))?;
    write_atomic(
        &paths.train_cache(method),
        &cache::encode_labeled_set(&partition.server_train, len),
    )
    .map_err(perr("preprocess"))?;
    write_atomic(
        &paths.test_cache(method),
        &cache::encode_labeled_set(&partition.server_test, len),
    )
    .map_err(perr("preprocess"))?;
    Ok(partition)
}

fn federation_config(config: &ExperimentConfig) -> FederationConfig {
    FederationConfig {
        clients: config.federation.clients,
        participation: config.federation.participation,
        rounds: config.federation.rounds,
        local_epochs: config.federation.local_epochs,
        batch_size: config.federation.batch_size,
        seed: derive_seed(config.seed, "select"),
        early_stop: config.federation.early_stop,
        adam: AdamHyper {
            lr: config.federation.lr,
            ..AdamHyper::default()
        },
    }
}

fn rounds_log_lines(records: &[RoundRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = serde_json::json!({
            "round": r.round,
            "selected": r.selected,
            "client_losses": r.client_losses,
            "global_loss": r.global_loss,
            "wall_ms": r.wall_ms,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// Stage 2: federated (or centralized) unsupervised pretraining from the
/// cached client datasets. Writes the round log and the pretrain checkpoint.
pub fn stage_pretrain(
    config: &ExperimentConfig,
    method: SamplingMethod,
) -> Result<(ModelParams, Vec<RoundRecord>), PipelineError> {
    let paths = ArtifactPaths::new(&config.out_dir);
    let clients = cache::decode_client_datasets(
        &std::fs::read(paths.clients_cache(method)).map_err(perr("pretrain"))?,
    )
    .map_err(perr("pretrain"))?;
    let initial = build_pretrain_model(
        derive_seed(config.seed, "pretrain-init"),
        FEATURE_COUNT,
        &config.dims(),
    );
    let fed = federation_config(config);
    let (params, records) = match config.mode {
        Mode::Fssl => run_pretraining(&initial, &clients, &fed).map_err(perr("pretrain"))?,
        Mode::Centralized => {
            let pooled: Vec<(Subflow, FlowFeatures)> =
                clients.into_iter().flatten().collect();
            centralized_pretrain(&initial, &pooled, &fed).map_err(perr("pretrain"))?
        }
    };
    write_atomic(
        &paths.rounds_log(method, config.mode),
        rounds_log_lines(&records).as_bytes(),
    )
    .map_err(perr("pretrain"))?;
    save_checkpoint(&params, &paths.pretrain_checkpoint(method, config.mode)).map_err(perr("pretrain"))?;
    Ok((params, records))
}

/// Stage 3: supervised retraining on the server's labeled training split.
/// Reads the pretrain checkpoint, writes the classifier checkpoint.
pub fn stage_retrain(
    config: &ExperimentConfig,
    method: SamplingMethod,
) -> Result<ModelParams, PipelineError> {
    let paths = ArtifactPaths::new(&config.out_dir);
    let pretrain =
        load_checkpoint(&paths.pretrain_checkpoint(method, config.mode)).map_err(perr("retrain"))?;
    if pretrain.architecture != ArchitectureId::Pretrain {
        return Err(PipelineError {
            stage: "retrain",
            source: "checkpoint is not a pretrain parameter set".into(),
        });
    }
    let train =
        cache::decode_labeled_set(&std::fs::read(paths.train_cache(method)).map_err(perr("retrain"))?)
            .map_err(perr("retrain"))?;
    let classifier = retrain_server(
        &pretrain,
        &train,
        config.retrain.epochs,
        config.dataset.classes,
        &config.dims(),
        derive_seed(config.seed, "retrain-init"),
        config.retrain.batch_size,
        AdamHyper {
            lr: config.retrain.lr,
            ..AdamHyper::default()
        },
    )
    .map_err(perr("retrain"))?;
    save_checkpoint(&classifier, &paths.retrain_checkpoint(method, config.mode))
        .map_err(perr("retrain"))?;
    Ok(classifier)
}

/// Result of one full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub metrics: Metrics,
    pub flow_metrics: Metrics,
    pub records: Vec<RoundRecord>,
    pub report_path: PathBuf,
}

/// Stage 4: evaluates the classifier checkpoint on the held-out labeled
/// subflows and writes the metrics report.
pub fn stage_evaluate(
    config: &ExperimentConfig,
    method: SamplingMethod,
) -> Result<(Metrics, Metrics, PathBuf), PipelineError> {
    let paths = ArtifactPaths::new(&config.out_dir);
    let params =
        load_checkpoint(&paths.retrain_checkpoint(method, config.mode)).map_err(perr("evaluate"))?;
    let test = cache::decode_labeled_set(
        &std::fs::read(paths.test_cache(method)).map_err(perr("evaluate"))?,
    )
    .map_err(perr("evaluate"))?;
    let mut net = build_retrain_model(0, config.dataset.classes, &config.dims()).map_err(perr("evaluate"))?;
    apply_params(&mut net, &params).map_err(perr("evaluate"))?;
    let metrics = evaluate_model(&net, &test, config.dataset.classes).map_err(perr("evaluate"))?;
    let flow_metrics = evaluate_flow_level(&net, &test, config.dataset.classes).map_err(perr("evaluate"))?;
    let report = render_metrics_report(config, method, &metrics, &flow_metrics);
    let report_path = paths.metrics_report(method, config.mode);
    write_atomic(&report_path, report.as_bytes()).map_err(perr("evaluate"))?;
    log::info!(
        "evaluate[{}/{}]: accuracy {:.4} over {} subflows",
        method.as_str(),
        config.mode.as_str(),
        metrics.accuracy,
        metrics.total()
    );
    Ok((metrics, flow_metrics, report_path))
}

/// Runs the full pipeline for the configured sampling method and mode:
/// datagen, preprocess, pretrain, retrain, evaluate.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutcome, PipelineError> {
    config.validate().map_err(perr("config"))?;
    let method = config.sampling.method;
    stage_datagen(config)?;
    stage_preprocess(config, method)?;
    let (_, records) = stage_pretrain(config, method)?;
    stage_retrain(config, method)?;
    let (metrics, flow_metrics, report_path) = stage_evaluate(config, method)?;
    Ok(PipelineOutcome {
        metrics,
        flow_metrics,
        records,
        report_path,
    })
}

/// One (sampling method, mode) cell of a comparison run.
#[derive(Debug, Clone)]
pub struct ComparisonBlock {
    pub method: SamplingMethod,
    pub mode: Mode,
    pub metrics: Metrics,
}

/// Results of running both training modes over the configured sampling
/// methods with shared preprocessing artifacts.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub blocks: Vec<ComparisonBlock>,
    /// `(method, centralized accuracy - fssl accuracy)` in percentage points.
    pub gaps: Vec<(SamplingMethod, f64)>,
    pub report_path: PathBuf,
}

impl ComparisonReport {
    pub fn block(&self, method: SamplingMethod, mode: Mode) -> Option<&ComparisonBlock> {
        self.blocks
            .iter()
            .find(|b| b.method == method && b.mode == mode)
    }
}

/// Runs both modes (and every configured sampling method) with identical
/// preprocessing, then reports per-block metrics and the centralized-minus-
/// federated accuracy gap.
pub fn compare_modes(config: &ExperimentConfig) -> Result<ComparisonReport, PipelineError> {
    config.validate().map_err(perr("config"))?;
    stage_datagen(config)?;
    let mut blocks = Vec::new();
    let mut gaps = Vec::new();
    for &method in &config.compare_methods {
        stage_preprocess(config, method)?;
        let mut accuracy = BTreeMap::new();
        for mode in [Mode::Fssl, Mode::Centralized] {
            let mut mode_config = config.clone();
            mode_config.mode = mode;
            mode_config.sampling.method = method;
            stage_pretrain(&mode_config, method)?;
            stage_retrain(&mode_config, method)?;
            let (metrics, _, _) = stage_evaluate(&mode_config, method)?;
            accuracy.insert(mode.as_str(), metrics.accuracy);
            blocks.push(ComparisonBlock {
                method,
                mode,
                metrics,
            });
        }
        gaps.push((
            method,
            (accuracy["centralized"] - accuracy["fssl"]) * 100.0,
        ));
    }
    let paths = ArtifactPaths::new(&config.out_dir);
    let report_path = paths.comparison_report();
    let report = render_comparison_report(config, &blocks, &gaps);
    write_atomic(&report_path, report.as_bytes()).map_err(perr("report"))?;
    Ok(ComparisonReport {
        blocks,
        gaps,
        report_path,
    })
}

fn write_metrics_body(out: &mut String, metrics: &Metrics) {
    writeln!(out, "accuracy: {:.6}", metrics.accuracy).unwrap();
    writeln!(
        out,
        "macro: precision {:.6}  recall {:.6}  f1 {:.6}",
        metrics.macro_avg.precision, metrics.macro_avg.recall, metrics.macro_avg.f1
    )
    .unwrap();
    writeln!(out).unwrap();
    writeln!(out, "class  precision  recall     f1         support").unwrap();
    for (c, m) in metrics.per_class.iter().enumerate() {
        let support: usize = metrics.confusion[c].iter().sum();
        writeln!(
            out,
            "{c:<6} {:<10.6} {:<10.6} {:<10.6} {support}",
            m.precision, m.recall, m.f1
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "confusion matrix (rows = true, columns = predicted):").unwrap();
    let n = metrics.confusion.len();
    write!(out, "{:>8}", "").unwrap();
    for c in 0..n {
        write!(out, "{c:>8}").unwrap();
    }
    writeln!(out).unwrap();
    for (r, row) in metrics.confusion.iter().enumerate() {
        write!(out, "{r:>8}").unwrap();
        for v in row {
            write!(out, "{v:>8}").unwrap();
        }
        writeln!(out).unwrap();
    }
}

/// Renders the deterministic per-run metrics report.
pub fn render_metrics_report(
    config: &ExperimentConfig,
    method: SamplingMethod,
    metrics: &Metrics,
    flow_metrics: &Metrics,
) -> String {
    let mut out = String::new();
    writeln!(out, "fedflow metrics report").unwrap();
    writeln!(out, "======================").unwrap();
    writeln!(out).unwrap();
    writeln!(out, "mode: {}", config.mode.as_str()).unwrap();
    writeln!(out, "sampling: {}", method.as_str()).unwrap();
    writeln!(out, "seed: {}", config.seed).unwrap();
    writeln!(out).unwrap();
    write_metrics_body(&mut out, metrics);
    writeln!(out).unwrap();
    writeln!(
        out,
        "flow-level (majority vote over {} flows): accuracy {:.6}, macro f1 {:.6}",
        flow_metrics.total(),
        flow_metrics.accuracy,
        flow_metrics.macro_avg.f1
    )
    .unwrap();
    writeln!(out).unwrap();
    writeln!(out, "config:").unwrap();
    for line in config_echo_lines(config) {
        writeln!(out, "  {line}").unwrap();
    }
    out
}

/// Config echo without the output-directory line, so reports are
/// byte-identical wherever the artifacts land.
fn config_echo_lines(config: &ExperimentConfig) -> Vec<String> {
    config
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("out_dir"))
        .map(str::to_string)
        .collect()
}

fn render_comparison_report(
    config: &ExperimentConfig,
    blocks: &[ComparisonBlock],
    gaps: &[(SamplingMethod, f64)],
) -> String {
    let mut out = String::new();
    writeln!(out, "fedflow mode comparison").unwrap();
    writeln!(out, "=======================").unwrap();
    writeln!(out).unwrap();
    writeln!(out, "seed: {}", config.seed).unwrap();
    writeln!(out).unwrap();
    for (method, gap) in gaps {
        let get = |mode: Mode| {
            blocks
                .iter()
                .find(|b| b.method == *method && b.mode == mode)
                .map(|b| b.metrics.accuracy)
                .unwrap_or(f64::NAN)
        };
        writeln!(out, "[{}]", method.as_str()).unwrap();
        writeln!(out, "  fssl accuracy:        {:.6}", get(Mode::Fssl)).unwrap();
        writeln!(out, "  centralized accuracy: {:.6}", get(Mode::Centralized)).unwrap();
        writeln!(out, "  gap (centralized - fssl): {gap:.4} points").unwrap();
        writeln!(out).unwrap();
    }
    for block in blocks {
        writeln!(
            out,
            "--- {} / {} ---",
            block.method.as_str(),
            block.mode.as_str()
        )
        .unwrap();
        write_metrics_body(&mut out, &block.metrics);
        writeln!(out).unwrap();
    }
    writeln!(out, "config:").unwrap();
    for line in config_echo_lines(config) {
        writeln!(out, "  {line}").unwrap();
    }
    out
}
