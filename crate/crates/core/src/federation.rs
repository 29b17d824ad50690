//! Round-synchronous federation: server and client state machines for
//! federated averaging, meta-federated learning, and partial meta-federated
//! learning, plus the fine-tune/evaluate phase shared by every scheme.
//!
//! One round is distribute -> local update -> report -> aggregate. Clients
//! never see each other's data; only [`ClientReport`] crosses the boundary.
//! Reports are aggregated in ascending client-id order regardless of arrival
//! order, so results are bit-exact under permutation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    gradient_step_tracked, meta_gradient, AutodiffError, MetaMode, Tape,
};
use crate::data::{self, DataError, TaskDataset};
use crate::metrics::{youden_optimal, EvalReport, MetricsError, ScoredLabels};
use crate::model::{
    apply_masked_update, forward_loss, loss_graph, predict_proba, ModelError, ModelSpec,
    ParamVector, PartitionMask,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("client {0} has an empty dataset")]
    EmptyDataset(usize),
    #[error("client {0}: local_epochs and batches_per_epoch must be positive")]
    BadClientConfig(usize),
    #[error("no client reports")]
    NoReports,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("pmfl server has no partition mask")]
    MissingMask,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    FedAvg,
    MetaFl,
    Pmfl,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::FedAvg => "fedavg",
            Scheme::MetaFl => "metafl",
            Scheme::Pmfl => "pmfl",
        })
    }
}

/// Per-client training state. The parameter vector persists across rounds;
/// under PMFL only its shared region is overwritten at distribution time.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub spec: ModelSpec,
    pub dataset: TaskDataset,
    pub params: ParamVector,
    /// Learning rate of the local/inner update (also the FedAvg local rate).
    pub inner_rate: f64,
    /// FedAvg: passes over the local data per round. Meta schemes: inner
    /// gradient steps per round, one batch each.
    pub local_epochs: usize,
    /// Derived so all clients run the same number of batches per epoch.
    pub batch_size: usize,
    batches_per_epoch: usize,
    query_same_batch: bool,
    rng: ChaCha8Rng,
}

impl ClientState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        spec: ModelSpec,
        dataset: TaskDataset,
        params: ParamVector,
        inner_rate: f64,
        local_epochs: usize,
        batches_per_epoch: usize,
        rng_seed: u64,
    ) -> Result<Self, FederationError> {
        if dataset.is_empty() {
            return Err(FederationError::EmptyDataset(id));
        }
        if local_epochs == 0 || batches_per_epoch == 0 {
            return Err(FederationError::BadClientConfig(id));
        }
        let batches = batches_per_epoch.min(dataset.len());
        let batch_size = dataset.len().div_ceil(batches);
        Ok(Self {
            id,
            spec,
            dataset,
            params,
            inner_rate,
            local_epochs,
            batch_size,
            batches_per_epoch: batches,
            query_same_batch: false,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    /// Evaluate the meta query loss on the last inner batch instead of a
    /// held-out one (ablation mode).
    pub fn with_same_batch_query(mut self) -> Self {
        self.query_same_batch = true;
        self
    }

    fn shuffled_chunks(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut self.rng);
        chunk_into(&order, self.batches_per_epoch)
    }
}

/// Split `indices` into exactly `parts` nearly-equal chunks (first chunks get
/// the remainder). `parts` must not exceed `indices.len()`.
fn chunk_into(indices: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let q = indices.len() / parts;
    let r = indices.len() % parts;
    let mut chunks = Vec::with_capacity(parts);
    let mut off = 0;
    for i in 0..parts {
        let size = q + usize::from(i < r);
        chunks.push(indices[off..off + size].to_vec());
        off += size;
    }
    chunks
}

/// Server-side state for one training scheme.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub params: ParamVector,
    pub outer_rate: f64,
    /// Required for PMFL; ignored by the other schemes.
    pub mask: Option<PartitionMask>,
    pub round: u64,
    pub scheme: Scheme,
    /// Whether meta clients should record the inner step for an exact
    /// second-order meta-gradient.
    pub meta_mode: MetaMode,
}

impl ServerState {
    pub fn new(scheme: Scheme, params: ParamVector, outer_rate: f64) -> Self {
        Self {
            params,
            outer_rate,
            mask: None,
            round: 0,
            scheme,
            meta_mode: MetaMode::Exact,
        }
    }

    pub fn with_mask(mut self, mask: PartitionMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_meta_mode(mut self, mode: MetaMode) -> Self {
        self.meta_mode = mode;
        self
    }
}

/// What a client sends back: its whole parameter vector (FedAvg) or its
/// meta-gradient contribution (MetaFL/PMFL). The loss scalar rides along for
/// logging in every scheme.
#[derive(Clone, Debug, PartialEq)]
pub enum ReportPayload {
    Params(ParamVector),
    MetaGrad(ParamVector),
}

#[derive(Clone, Debug)]
pub struct ClientReport {
    pub id: usize,
    pub sample_count: usize,
    pub final_loss: f64,
    pub payload: ReportPayload,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientLoss {
    pub id: usize,
    pub loss: f64,
}

/// One JSON-lines record per completed round.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub scheme: Scheme,
    pub client_losses: Vec<ClientLoss>,
    pub mean_loss: f64,
    pub wall_ms: f64,
    pub warnings: Vec<String>,
}

pub fn append_round_log<W: Write>(writer: &mut W, log: &RoundLog) -> std::io::Result<()> {
    serde_json::to_writer(&mut *writer, log)?;
    writeln!(writer)
}

/// FedAvg local update: `local_epochs` passes of mini-batch SGD over the
/// client's shuffled data starting from `start`. The report carries the final
/// parameters and the final epoch's mean batch loss.
pub fn local_sgd_update(
    client: &mut ClientState,
    start: &ParamVector,
) -> Result<ClientReport, FederationError> {
    if client.dataset.is_empty() {
        return Err(FederationError::EmptyDataset(client.id));
    }
    let mut theta = start.clone();
    let mut final_epoch_mean = 0.0;
    for _ in 0..client.local_epochs {
        let chunks = client.shuffled_chunks();
        let mut epoch_loss = 0.0;
        for chunk in &chunks {
            let batch = client.dataset.batch(chunk);
            let tape = Tape::new();
            let (loss, leaves) = forward_loss(&tape, &client.spec, &theta, &batch)?;
            epoch_loss += loss.value();
            let grad = tape.grad(loss, &leaves);
            theta.step(&grad, client.inner_rate);
        }
        final_epoch_mean = epoch_loss / chunks.len() as f64;
    }
    client.params = theta.clone();
    Ok(ClientReport {
        id: client.id,
        sample_count: client.dataset.len(),
        final_loss: final_epoch_mean,
        payload: ReportPayload::Params(theta),
    })
}

/// Weighted-average aggregation: `theta <- sum_k (n_k / n) * theta_k`,
/// summed in ascending client-id order.
pub fn fedavg_aggregate(
    reports: &[ClientReport],
    server: &mut ServerState,
) -> Result<(), FederationError> {
    if server.scheme != Scheme::FedAvg {
        return Err(FederationError::Protocol(format!(
            "fedavg_aggregate called for scheme {}",
            server.scheme
        )));
    }
    if reports.is_empty() {
        return Err(FederationError::NoReports);
    }
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.id);

    let total: usize = sorted.iter().map(|r| r.sample_count).sum();
    if total == 0 {
        return Err(FederationError::Protocol("total sample count is zero".into()));
    }
    let dim = server.params.len();
    let mut merged = vec![0.0f64; dim];
    for report in &sorted {
        let ReportPayload::Params(theta) = &report.payload else {
            return Err(FederationError::Protocol(format!(
                "client {} sent a gradient payload to fedavg",
                report.id
            )));
        };
        if theta.len() != dim {
            return Err(FederationError::Protocol(format!(
                "client {} sent {} parameters, server has {}",
                report.id,
                theta.len(),
                dim
            )));
        }
        let weight = report.sample_count as f64 / total as f64;
        for (m, t) in merged.iter_mut().zip(theta.iter()) {
            *m += weight * t;
        }
    }
    server.params = ParamVector::from_vec(merged);
    server.round += 1;
    Ok(())
}

/// Meta client update: adapt from `start` with `local_epochs` inner gradient
/// steps (one fresh batch each), evaluate the loss on a held-out query batch,
/// and report the meta-gradient of that loss w.r.t. `start`.
///
/// The meta-gradient is exact (second order) only when `track_for_exact` is
/// set and there is a single inner step; otherwise it falls back to the
/// first-order approximation, returning a warning when exactness had been
/// requested.
pub fn meta_inner_update(
    client: &mut ClientState,
    start: &ParamVector,
    track_for_exact: bool,
) -> Result<(ClientReport, Option<String>), FederationError> {
    if client.dataset.is_empty() {
        return Err(FederationError::EmptyDataset(client.id));
    }
    let chunks = client.shuffled_chunks();
    let heldout = !client.query_same_batch && chunks.len() > 1;
    let support: &[Vec<usize>] = if heldout {
        &chunks[..chunks.len() - 1]
    } else {
        &chunks
    };
    let steps = client.local_epochs;
    let query_chunk = if heldout {
        chunks.last().expect("nonempty")
    } else {
        &support[(steps - 1) % support.len()]
    };

    let exact = track_for_exact && steps == 1;
    let warning = (track_for_exact && !exact).then(|| {
        format!(
            "client {}: exact meta-gradient needs a single inner step, got {}; using first-order",
            client.id, steps
        )
    });

    let (payload, final_loss, adapted_values) = if exact {
        let tape = Tape::new();
        let theta = tape.leaves(start.as_slice());
        let support_batch = client.dataset.batch(&support[0]);
        let inner_loss = loss_graph(&tape, &client.spec, &theta, &support_batch)?;
        let adapted = gradient_step_tracked(&tape, inner_loss, &theta, client.inner_rate);
        let query_batch = client.dataset.batch(query_chunk);
        let outer_loss = loss_graph(&tape, &client.spec, &adapted.vars, &query_batch)?;
        let grad = meta_gradient(&tape, outer_loss, &theta, &adapted, MetaMode::Exact)?;
        (grad, outer_loss.value(), adapted.values())
    } else {
        let mut theta = start.clone();
        for step in 0..steps {
            let batch = client.dataset.batch(&support[step % support.len()]);
            let tape = Tape::new();
            let (loss, leaves) = forward_loss(&tape, &client.spec, &theta, &batch)?;
            let grad = tape.grad(loss, &leaves);
            theta.step(&grad, client.inner_rate);
        }
        let query_batch = client.dataset.batch(query_chunk);
        let tape = Tape::new();
        let (loss, leaves) = forward_loss(&tape, &client.spec, &theta, &query_batch)?;
        let grad = tape.grad(loss, &leaves);
        (grad, loss.value(), theta.as_slice().to_vec())
    };

    client.params = ParamVector::from_vec(adapted_values);
    Ok((
        ClientReport {
            id: client.id,
            sample_count: client.dataset.len(),
            final_loss,
            payload: ReportPayload::MetaGrad(ParamVector::from_vec(payload)),
        },
        warning,
    ))
}

/// Meta server update: average the payload gradients (ascending client id,
/// unweighted 1/K) and step the server parameters. MetaFL updates the whole
/// vector; PMFL applies the step through the partition mask, leaving the
/// local region bit-identical.
pub fn meta_server_update(
    reports: &[ClientReport],
    server: &mut ServerState,
) -> Result<(), FederationError> {
    if !matches!(server.scheme, Scheme::MetaFl | Scheme::Pmfl) {
        return Err(FederationError::Protocol(format!(
            "meta_server_update called for scheme {}",
            server.scheme
        )));
    }
    if reports.is_empty() {
        return Err(FederationError::NoReports);
    }
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.id);

    let dim = server.params.len();
    let mut mean = vec![0.0f64; dim];
    for report in &sorted {
        let ReportPayload::MetaGrad(grad) = &report.payload else {
            return Err(FederationError::Protocol(format!(
                "client {} sent a parameter payload to a meta scheme",
                report.id
            )));
        };
        if grad.len() != dim {
            return Err(FederationError::Protocol(format!(
                "client {} sent {} gradient entries, server has {}",
                report.id,
                grad.len(),
                dim
            )));
        }
        for (m, g) in mean.iter_mut().zip(grad.iter()) {
            *m += g;
        }
    }
    let k = sorted.len() as f64;
    for m in &mut mean {
        *m /= k;
    }

    match server.scheme {
        Scheme::MetaFl => server.params.step(&mean, server.outer_rate),
        Scheme::Pmfl => {
            let mask = server.mask.as_ref().ok_or(FederationError::MissingMask)?;
            server.params = apply_masked_update(
                &server.params,
                &ParamVector::from_vec(mean),
                server.outer_rate,
                mask,
            )?;
        }
        Scheme::FedAvg => unreachable!(),
    }
    server.round += 1;
    Ok(())
}

/// One full communication round: distribute, update every client (ascending
/// id), aggregate per the server's scheme, log.
///
/// FedAvg and MetaFL distribute the full parameter vector; PMFL distributes
/// only the shared region, each client keeping its persistent local region.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
) -> Result<RoundLog, FederationError> {
    if clients.is_empty() {
        return Err(FederationError::NoReports);
    }
    let started = Instant::now();
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].id);

    let mut reports = Vec::with_capacity(clients.len());
    let mut warnings = Vec::new();
    match server.scheme {
        Scheme::FedAvg => {
            for &i in &order {
                reports.push(local_sgd_update(&mut clients[i], &server.params)?);
            }
            fedavg_aggregate(&reports, server)?;
        }
        Scheme::MetaFl => {
            let track = server.meta_mode == MetaMode::Exact;
            for &i in &order {
                let (report, warning) =
                    meta_inner_update(&mut clients[i], &server.params, track)?;
                reports.push(report);
                warnings.extend(warning);
            }
            meta_server_update(&reports, server)?;
        }
        Scheme::Pmfl => {
            let mask = server.mask.clone().ok_or(FederationError::MissingMask)?;
            let track = server.meta_mode == MetaMode::Exact;
            for &i in &order {
                let start = mask.combine(&server.params, &clients[i].params)?;
                let (report, warning) = meta_inner_update(&mut clients[i], &start, track)?;
                reports.push(report);
                warnings.extend(warning);
            }
            meta_server_update(&reports, server)?;
        }
    }

    let client_losses: Vec<ClientLoss> = reports
        .iter()
        .map(|r| ClientLoss {
            id: r.id,
            loss: r.final_loss,
        })
        .collect();
    let mean_loss =
        client_losses.iter().map(|c| c.loss).sum::<f64>() / client_losses.len() as f64;
    Ok(RoundLog {
        round: server.round,
        scheme: server.scheme,
        client_losses,
        mean_loss,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        warnings,
    })
}

/// Settings for the post-pretraining phase on the server task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

const FT_SPLIT: u64 = 0x6674_7370; // fine-tune split stream
const FT_SHUFFLE: u64 = 0x6674_7368; // fine-tune shuffle stream

/// Fine-tune the full parameter vector (no mask) on the training split of the
/// server task and evaluate on the held-out split after every epoch.
///
/// With `epochs == 0` the single returned report evaluates the raw
/// pretrained model.
pub fn finetune_and_test(
    pretrained: &ParamVector,
    spec: &ModelSpec,
    server_task: &TaskDataset,
    cfg: &FinetuneConfig,
) -> Result<Vec<EvalReport>, FederationError> {
    let (train, test) = data::split(server_task, cfg.train_fraction, seed::mix(cfg.seed, FT_SPLIT))?;
    let evaluate = |theta: &ParamVector| -> Result<EvalReport, FederationError> {
        let scores = test
            .features
            .iter()
            .map(|row| predict_proba(spec, theta, row))
            .collect::<Result<Vec<_>, _>>()?;
        let scored = ScoredLabels::new(scores, test.labels.clone())?;
        Ok(youden_optimal(&scored)?)
    };

    if cfg.epochs == 0 {
        return Ok(vec![evaluate(pretrained)?]);
    }
    let mut theta = pretrained.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, FT_SHUFFLE));
    let mut reports = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut current: Vec<usize> = (0..train.len()).collect();
        current.shuffle(&mut rng);
        for chunk in current.chunks(cfg.batch_size.max(1)) {
            let batch = train.batch(chunk);
            let tape = Tape::new();
            let (loss, leaves) = forward_loss(&tape, spec, &theta, &batch)?;
            let grad = tape.grad(loss, &leaves);
            theta.step(&grad, cfg.learning_rate);
        }
        reports.push(evaluate(&theta)?);
    }
    Ok(reports)
}

/// On-disk snapshot of a pretraining run: one JSON header line (model spec,
/// scheme, round, mask length), then the parameter vector in its binary form,
/// then the packed mask bitmap when present.
#[derive(Clone, Debug)]
pub struct TrainingCheckpoint {
    pub spec: ModelSpec,
    pub scheme: Scheme,
    pub round: u64,
    pub params: ParamVector,
    pub mask: Option<PartitionMask>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    scheme: Scheme,
    round: u64,
    mask_len: Option<usize>,
}

pub fn save_checkpoint(path: &Path, checkpoint: &TrainingCheckpoint) -> std::io::Result<()> {
    let header = CheckpointHeader {
        spec: checkpoint.spec.clone(),
        scheme: checkpoint.scheme,
        round: checkpoint.round,
        mask_len: checkpoint.mask.as_ref().map(PartitionMask::len),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend(checkpoint.params.to_bytes());
    if let Some(mask) = &checkpoint.mask {
        bytes.extend(mask.to_bitmap());
    }
    std::fs::write(path, bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainingCheckpoint, FederationError> {
    let bytes = std::fs::read(path).map_err(DataError::Io)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FederationError::Protocol("checkpoint has no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| FederationError::Protocol(format!("bad checkpoint header: {e}")))?;
    let body = &bytes[newline + 1..];
    if body.len() < 4 {
        return Err(FederationError::Protocol("checkpoint truncated".into()));
    }
    let n = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
    let param_end = 4 + 8 * n;
    if body.len() < param_end {
        return Err(FederationError::Protocol("checkpoint truncated".into()));
    }
    let params = ParamVector::from_bytes(&body[..param_end])?;
    let mask = match header.mask_len {
        Some(len) => Some(PartitionMask::from_bitmap(&body[param_end..], len)?),
        None => {
            if body.len() != param_end {
                return Err(FederationError::Protocol(
                    "trailing bytes after parameters".into(),
                ));
            }
            None
        }
    };
    Ok(TrainingCheckpoint {
        spec: header.spec,
        scheme: header.scheme,
        round: header.round,
        params,
        mask,
    })
}
