//! Configuration layer and multi-seed experiment runner: pretrain with each
//! selected scheme, fine-tune on the reserved server task, and aggregate the
//! per-epoch evaluation reports into a comparison table.
//!
//! Everything is derived from the per-repeat seed through fixed stream tags,
//! so a run is reproducible byte-for-byte from its emitted `config.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::MetaMode;
use crate::data::{
    self, build_silos, generate_task_family, DataError, ExtractionOrder, TaskDataset,
    TaskFamilySpec,
};
use crate::federation::{
    finetune_and_test, run_round, ClientState, FederationError, FinetuneConfig, RoundLog, Scheme,
    ServerState,
};
use crate::metrics::EvalReport;
use crate::model::{init_params, Activation, ModelSpec, PartitionMask};
use crate::seed;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// Process exit code: 1 for config/data problems, 2 for output IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Io(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeChoice {
    Direct,
    FedAvg,
    MetaFl,
    Pmfl,
}

impl SchemeChoice {
    pub fn name(self) -> &'static str {
        match self {
            SchemeChoice::Direct => "direct",
            SchemeChoice::FedAvg => "fedavg",
            SchemeChoice::MetaFl => "metafl",
            SchemeChoice::Pmfl => "pmfl",
        }
    }

    fn scheme(self) -> Option<Scheme> {
        match self {
            SchemeChoice::Direct => None,
            SchemeChoice::FedAvg => Some(Scheme::FedAvg),
            SchemeChoice::MetaFl => Some(Scheme::MetaFl),
            SchemeChoice::Pmfl => Some(Scheme::Pmfl),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskLayout {
    /// First ceil(fraction * H) units of every hidden layer.
    #[default]
    Units,
    /// First ceil(fraction * N) entries of the flat vector.
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetaModeChoice {
    /// Exact second order when there is a single inner step, else first order.
    #[default]
    Auto,
    Exact,
    FirstOrder,
}

impl MetaModeChoice {
    fn resolve(self, local_epochs: usize) -> MetaMode {
        match self {
            MetaModeChoice::Exact => MetaMode::Exact,
            MetaModeChoice::FirstOrder => MetaMode::FirstOrder,
            MetaModeChoice::Auto => {
                if local_epochs <= 1 {
                    MetaMode::Exact
                } else {
                    MetaMode::FirstOrder
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Meta query loss on a batch held out from the inner steps.
    #[default]
    Heldout,
    SameBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TestTaskSelector {
    /// The last silo is the server task.
    #[default]
    Last,
    Index(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![16]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_layers: default_hidden(),
            activation: default_activation(),
        }
    }
}

/// Where the task datasets come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic family; its seed is re-derived per repeat.
    Synthetic { family: TaskFamilySpec },
    /// One CSV file per task.
    CsvTasks {
        paths: Vec<PathBuf>,
        feature_columns: Vec<String>,
        label_column: String,
    },
    /// A multi-label table carved into silos.
    Table {
        path: PathBuf,
        feature_columns: Vec<String>,
        label_columns: Vec<String>,
        #[serde(default)]
        extraction_order: ExtractionOrder,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schemes: Vec<SchemeChoice>,
    #[serde(default = "default_k_pretrain")]
    pub k_pretrain: usize,
    /// Server pretraining rounds.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Client/inner learning rate; also the fine-tune rate.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Server learning rate for the meta schemes.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// FedAvg: local passes per round. Meta schemes: inner steps per round.
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    /// Every client runs this many batches per epoch (batch sizes differ).
    #[serde(default = "default_batches_per_epoch")]
    pub batches_per_epoch: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_finetune_batch")]
    pub finetune_batch: usize,
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
    #[serde(default)]
    pub mask_layout: MaskLayout,
    #[serde(default)]
    pub meta_mode: MetaModeChoice,
    #[serde(default)]
    pub query_mode: QueryMode,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Fraction of the pretraining clients sampled each round (full
    /// participation by default).
    #[serde(default = "default_participation")]
    pub participation: f64,
    /// Explicit per-repeat seeds; derived from `seed` when absent.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub test_task: TestTaskSelector,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_k_pretrain() -> usize {
    5
}
fn default_rounds() -> usize {
    10
}
fn default_alpha() -> f64 {
    1e-3
}
fn default_beta() -> f64 {
    1e-2
}
fn default_local_epochs() -> usize {
    1
}
fn default_batches_per_epoch() -> usize {
    32
}
fn default_finetune_epochs() -> usize {
    10
}
fn default_finetune_batch() -> usize {
    64
}
fn default_mask_fraction() -> f64 {
    0.5
}
fn default_repeats() -> usize {
    5
}
fn default_seed() -> u64 {
    7
}
fn default_participation() -> f64 {
    1.0
}

// Stream tags for per-repeat seed derivation.
const TAG_REPEAT: u64 = 0x72657065;
const TAG_DATA: u64 = 0x64617461;
const TAG_SELECT: u64 = 0x73656c65;
const TAG_INIT: u64 = 0x696e6974;
const TAG_CLIENT_INIT: u64 = 0x63696e69;
const TAG_CLIENT_RNG: u64 = 0x63726e67;
const TAG_CLIENT_SPLIT: u64 = 0x6373706c;
const TAG_FINETUNE: u64 = 0x66747365;
const TAG_SAMPLE: u64 = 0x73616d70;

impl ExperimentConfig {
    /// Validate and materialize every default, including per-repeat seeds.
    /// The returned config serializes to a complete, reproducible record.
    pub fn resolved(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = self.clone();
        if cfg.schemes.is_empty() {
            return Err(ExperimentError::Config("scheme set is empty".into()));
        }
        let mut seen = Vec::new();
        for s in &cfg.schemes {
            if seen.contains(s) {
                return Err(ExperimentError::Config(format!(
                    "scheme {} listed twice",
                    s.name()
                )));
            }
            seen.push(*s);
        }
        if cfg.repeats == 0 {
            return Err(ExperimentError::Config("repeats must be positive".into()));
        }
        if cfg.k_pretrain == 0 {
            return Err(ExperimentError::Config("k_pretrain must be positive".into()));
        }
        if cfg.local_epochs == 0 || cfg.batches_per_epoch == 0 {
            return Err(ExperimentError::Config(
                "local_epochs and batches_per_epoch must be positive".into(),
            ));
        }
        if !(cfg.mask_fraction > 0.0 && cfg.mask_fraction <= 1.0) {
            return Err(ExperimentError::Config(format!(
                "mask_fraction {} outside (0, 1]",
                cfg.mask_fraction
            )));
        }
        if !(cfg.participation > 0.0 && cfg.participation <= 1.0) {
            return Err(ExperimentError::Config(format!(
                "participation {} outside (0, 1]",
                cfg.participation
            )));
        }
        match &cfg.seeds {
            Some(seeds) if seeds.len() != cfg.repeats => {
                return Err(ExperimentError::Config(format!(
                    "{} seeds for {} repeats",
                    seeds.len(),
                    cfg.repeats
                )));
            }
            Some(_) => {}
            None => {
                cfg.seeds = Some(
                    (0..cfg.repeats)
                        .map(|r| seed::mix2(cfg.seed, TAG_REPEAT, r as u64))
                        .collect(),
                );
            }
        }
        Ok(cfg)
    }

    /// Replace the seed material with the `PMFL_SEED` override, when set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), ExperimentError> {
        if let Some(raw) = value {
            let parsed: u64 = raw.trim().parse().map_err(|_| {
                ExperimentError::Config(format!("PMFL_SEED {raw:?} is not a u64"))
            })?;
            self.seed = parsed;
            self.seeds = None;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub scheme: String,
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation over repeats; absent for a single repeat.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub scheme: String,
    pub seed: u64,
    pub auc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaggedRoundLog {
    pub repeat: usize,
    pub seed: u64,
    pub scheme: String,
    #[serde(flatten)]
    pub log: RoundLog,
}

/// Aggregated outcome of one experiment: Table-style mean/std summary rows
/// plus the raw per-epoch AUC traces and pretraining round logs.
#[derive(Clone, Debug, Default)]
pub struct ComparisonTable {
    pub rows: Vec<SummaryRow>,
    pub curves: Vec<CurvePoint>,
    pub round_logs: Vec<TaggedRoundLog>,
}

impl ComparisonTable {
    pub fn mean(&self, scheme: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && r.metric == metric)
            .map(|r| r.mean)
    }

    /// Mean AUC across repeats at one fine-tune epoch (1-based).
    pub fn mean_auc_at_epoch(&self, scheme: &str, epoch: usize) -> Option<f64> {
        let values: Vec<f64> = self
            .curves
            .iter()
            .filter(|c| c.scheme == scheme && c.epoch == epoch)
            .map(|c| c.auc)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// One pretraining column to run: a scheme (None = direct) and its client
/// count, under a row label.
struct RunSpec {
    label: String,
    choice: SchemeChoice,
    clients: usize,
}

/// Run the configured scheme comparison.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ComparisonTable, ExperimentError> {
    let cfg = config.resolved()?;
    let specs: Vec<RunSpec> = cfg
        .schemes
        .iter()
        .map(|&choice| RunSpec {
            label: choice.name().to_string(),
            choice,
            clients: cfg.k_pretrain,
        })
        .collect();
    execute(&cfg, &specs)
}

/// Table-3-style ablation: one PMFL column per client count plus a direct
/// baseline.
pub fn run_client_count_ablation(
    config: &ExperimentConfig,
    counts: &[usize],
) -> Result<ComparisonTable, ExperimentError> {
    if counts.is_empty() {
        return Err(ExperimentError::Config("no client counts given".into()));
    }
    if counts.contains(&0) {
        return Err(ExperimentError::Config("client counts must be positive".into()));
    }
    let cfg = config.resolved()?;
    let mut specs = vec![RunSpec {
        label: "direct".into(),
        choice: SchemeChoice::Direct,
        clients: 0,
    }];
    for &c in counts {
        specs.push(RunSpec {
            label: format!("pmfl_k{c}"),
            choice: SchemeChoice::Pmfl,
            clients: c,
        });
    }
    execute(&cfg, &specs)
}

/// Build or load the task silos for one repeat.
fn assemble_tasks(
    cfg: &ExperimentConfig,
    repeat_seed: u64,
    max_clients: usize,
) -> Result<Vec<TaskDataset>, ExperimentError> {
    let tasks = match &cfg.data {
        DataSource::Synthetic { family } => {
            let mut family = family.clone();
            family.seed = seed::mix(repeat_seed, TAG_DATA);
            generate_task_family(&family, max_clients + 1)?
        }
        DataSource::CsvTasks {
            paths,
            feature_columns,
            label_column,
        } => paths
            .iter()
            .map(|p| data::load_csv(p, feature_columns, label_column))
            .collect::<Result<Vec<_>, _>>()?,
        DataSource::Table {
            path,
            feature_columns,
            label_columns,
            extraction_order,
        } => {
            let table = data::load_table(path, feature_columns, label_columns)?;
            build_silos(&table, label_columns, *extraction_order)?
        }
    };
    if tasks.len() < 2 {
        return Err(ExperimentError::Config(
            "need at least two silos (training + server task)".into(),
        ));
    }
    let dim = tasks[0].dim();
    for t in &tasks {
        if t.dim() != dim || t.is_empty() {
            return Err(ExperimentError::Config(format!(
                "silo {:?} is empty or has inconsistent dimension",
                t.task_id
            )));
        }
    }
    if max_clients + 1 > tasks.len() {
        return Err(ExperimentError::Config(format!(
            "{} clients requested but only {} silos besides the server task",
            max_clients,
            tasks.len() - 1
        )));
    }
    Ok(tasks)
}

/// Deterministic, seed-driven choice of training silos from the pool.
fn select_training_silos(pool: &[usize], k: usize, repeat_seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut shuffled = pool.to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed::mix(repeat_seed, TAG_SELECT));
    shuffled.shuffle(&mut rng);
    let mut chosen: Vec<usize> = shuffled.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

fn pretrain(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    spec: &ModelSpec,
    initial: &crate::model::ParamVector,
    training: &[(usize, TaskDataset)],
    repeat_seed: u64,
) -> Result<(crate::model::ParamVector, Vec<RoundLog>), ExperimentError> {
    let mut server = ServerState::new(scheme, initial.clone(), cfg.beta)
        .with_meta_mode(cfg.meta_mode.resolve(cfg.local_epochs));
    if scheme == Scheme::Pmfl {
        let mask = match cfg.mask_layout {
            MaskLayout::Units => PartitionMask::by_units(spec, cfg.mask_fraction),
            MaskLayout::Flat => PartitionMask::flat(spec.param_count(), cfg.mask_fraction),
        }
        .map_err(FederationError::Model)?;
        server = server.with_mask(mask);
    }

    let mut clients = Vec::with_capacity(training.len());
    for (silo_idx, dataset) in training {
        let mut client = ClientState::new(
            silo_idx + 1,
            spec.clone(),
            dataset.clone(),
            init_params(spec, seed::mix2(repeat_seed, TAG_CLIENT_INIT, *silo_idx as u64)),
            cfg.alpha,
            cfg.local_epochs,
            cfg.batches_per_epoch,
            seed::mix2(repeat_seed, TAG_CLIENT_RNG, *silo_idx as u64),
        )
        .map_err(ExperimentError::Federation)?;
        if cfg.query_mode == QueryMode::SameBatch {
            client = client.with_same_batch_query();
        }
        clients.push(client);
    }

    let k = clients.len();
    let sampled = ((cfg.participation * k as f64).round() as usize).clamp(1, k);
    let mut sampler = (sampled < k).then(|| {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(seed::mix(repeat_seed, TAG_SAMPLE))
    });

    let mut logs = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        match &mut sampler {
            None => logs.push(run_round(&mut server, &mut clients)?),
            Some(rng) => {
                use rand::seq::SliceRandom;
                let mut ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
                ids.shuffle(rng);
                let chosen = &ids[..sampled];
                // Move this round's participants to the front of the roster.
                clients.sort_by_key(|c| (usize::from(!chosen.contains(&c.id)), c.id));
                logs.push(run_round(&mut server, &mut clients[..sampled])?);
            }
        }
    }
    Ok((server.params, logs))
}

fn execute(cfg: &ExperimentConfig, specs: &[RunSpec]) -> Result<ComparisonTable, ExperimentError> {
    let seeds = cfg.seeds.clone().expect("resolved");
    let max_clients = specs.iter().map(|s| s.clients).max().unwrap_or(0).max(1);

    // finals[spec][repeat] = final-epoch report; traces for curves.
    let mut finals: Vec<Vec<EvalReport>> = vec![Vec::new(); specs.len()];
    let mut curves = Vec::new();
    let mut round_logs = Vec::new();

    for (repeat, &repeat_seed) in seeds.iter().enumerate() {
        let tasks = assemble_tasks(cfg, repeat_seed, max_clients)?;
        let test_idx = match cfg.test_task {
            TestTaskSelector::Last => tasks.len() - 1,
            TestTaskSelector::Index(i) => {
                if i >= tasks.len() {
                    return Err(ExperimentError::Config(format!(
                        "test task index {i} out of range for {} silos",
                        tasks.len()
                    )));
                }
                i
            }
        };
        let pool: Vec<usize> = (0..tasks.len()).filter(|&i| i != test_idx).collect();
        let server_task = &tasks[test_idx];

        let spec = ModelSpec::new(
            tasks[0].dim(),
            cfg.model.hidden_layers.clone(),
            cfg.model.activation,
        );
        spec.validate().map_err(FederationError::Model)?;
        let initial = init_params(&spec, seed::mix(repeat_seed, TAG_INIT));
        let finetune_cfg = FinetuneConfig {
            train_fraction: 0.9,
            epochs: cfg.finetune_epochs,
            batch_size: cfg.finetune_batch,
            learning_rate: cfg.alpha,
            seed: seed::mix(repeat_seed, TAG_FINETUNE),
        };

        for (si, run_spec) in specs.iter().enumerate() {
            let pretrained = match run_spec.choice.scheme() {
                None => initial.clone(),
                Some(scheme) => {
                    let chosen = select_training_silos(&pool, run_spec.clients, repeat_seed);
                    // Clients train on the 90% split of their silo.
                    let mut training = Vec::with_capacity(chosen.len());
                    for idx in chosen {
                        let (train, _) = data::split(
                            &tasks[idx],
                            0.9,
                            seed::mix2(repeat_seed, TAG_CLIENT_SPLIT, idx as u64),
                        )?;
                        training.push((idx, train));
                    }
                    let (params, logs) =
                        pretrain(cfg, scheme, &spec, &initial, &training, repeat_seed)?;
                    round_logs.extend(logs.into_iter().map(|log| TaggedRoundLog {
                        repeat,
                        seed: repeat_seed,
                        scheme: run_spec.label.clone(),
                        log,
                    }));
                    params
                }
            };

            let reports = finetune_and_test(&pretrained, &spec, server_task, &finetune_cfg)?;
            for (e, report) in reports.iter().enumerate() {
                curves.push(CurvePoint {
                    // Epoch 0 only appears in the zero-epoch degenerate case.
                    epoch: if cfg.finetune_epochs == 0 { 0 } else { e + 1 },
                    scheme: run_spec.label.clone(),
                    seed: repeat_seed,
                    auc: report.auc,
                });
            }
            finals[si].push(reports.last().expect("at least one report").clone());
        }
    }

    let mut rows = Vec::new();
    for (si, run_spec) in specs.iter().enumerate() {
        let reports = &finals[si];
        for (metric, extract) in [
            ("auc", (|r: &EvalReport| r.auc) as fn(&EvalReport) -> f64),
            ("precision", |r| r.precision),
            ("recall", |r| r.recall),
            ("f1", |r| r.f1),
        ] {
            let values: Vec<f64> = reports.iter().map(extract).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let std = (values.len() >= 2).then(|| {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / values.len() as f64)
                    .sqrt()
            });
            rows.push(SummaryRow {
                scheme: run_spec.label.clone(),
                metric: metric.to_string(),
                mean,
                std,
            });
        }
    }

    Ok(ComparisonTable {
        rows,
        curves,
        round_logs,
    })
}

/// Write `summary.csv`, `curves.csv`, `config.json`, and `rounds.jsonl` into
/// `out_dir`. Returns the paths written. Reruns with the same table and
/// config produce byte-identical files.
pub fn emit_outputs(
    table: &ComparisonTable,
    resolved_config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(out_dir)?;

    let summary_path = out_dir.join("summary.csv");
    let mut summary = String::from("scheme,metric,mean,std\n");
    for row in &table.rows {
        let std = row.std.map(|s| s.to_string()).unwrap_or_default();
        summary.push_str(&format!("{},{},{},{}\n", row.scheme, row.metric, row.mean, std));
    }
    std::fs::write(&summary_path, summary)?;

    let curves_path = out_dir.join("curves.csv");
    let mut curves = String::from("epoch,scheme,seed,auc\n");
    for point in &table.curves {
        curves.push_str(&format!(
            "{},{},{},{}\n",
            point.epoch, point.scheme, point.seed, point.auc
        ));
    }
    std::fs::write(&curves_path, curves)?;

    let config_path = out_dir.join("config.json");
    let mut config_json = serde_json::to_string_pretty(resolved_config)
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    config_json.push('\n');
    std::fs::write(&config_path, config_json)?;

    let rounds_path = out_dir.join("rounds.jsonl");
    let mut rounds = Vec::new();
    for log in &table.round_logs {
        serde_json::to_writer(&mut rounds, log)
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        rounds.push(b'\n');
    }
    std::fs::write(&rounds_path, rounds)?;

    Ok(vec![summary_path, curves_path, config_path, rounds_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(schemes: Vec<SchemeChoice>) -> ExperimentConfig {
        ExperimentConfig {
            schemes,
            k_pretrain: 2,
            rounds: 2,
            alpha: 0.05,
            beta: 0.1,
            local_epochs: 1,
            batches_per_epoch: 4,
            finetune_epochs: 3,
            finetune_batch: 16,
            mask_fraction: 0.5,
            mask_layout: MaskLayout::Units,
            meta_mode: MetaModeChoice::Auto,
            query_mode: QueryMode::Heldout,
            repeats: 2,
            participation: 1.0,
            seeds: None,
            seed: 5,
            data: DataSource::Synthetic {
                family: TaskFamilySpec {
                    dim: 4,
                    base_direction: None,
                    heterogeneity: 0.5,
                    label_noise: 0.05,
                    samples_per_task: 80,
                    seed: 0,
                },
            },
            test_task: TestTaskSelector::Last,
            model: ModelConfig {
                hidden_layers: vec![4],
                activation: Activation::Tanh,
            },
        }
    }

    fn all_schemes() -> Vec<SchemeChoice> {
        vec![
            SchemeChoice::Direct,
            SchemeChoice::FedAvg,
            SchemeChoice::MetaFl,
            SchemeChoice::Pmfl,
        ]
    }

    #[test]
    fn empty_scheme_set_is_rejected_before_running() {
        let cfg = small_config(vec![]);
        assert!(matches!(
            run_experiment(&cfg),
            Err(ExperimentError::Config(_))
        ));
    }

    #[test]
    fn duplicate_schemes_are_rejected() {
        let cfg = small_config(vec![SchemeChoice::Direct, SchemeChoice::Direct]);
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn curve_rows_count_schemes_by_repeats_by_epochs() {
        let cfg = small_config(all_schemes());
        let table = run_experiment(&cfg).unwrap();
        assert_eq!(table.curves.len(), 4 * 2 * 3);
        // And four metrics per scheme in the summary.
        assert_eq!(table.rows.len(), 4 * 4);
    }

    #[test]
    fn direct_on_separable_family_reaches_high_auc() {
        let mut cfg = small_config(vec![SchemeChoice::Direct]);
        cfg.repeats = 1;
        cfg.alpha = 0.5;
        cfg.finetune_epochs = 30;
        cfg.finetune_batch = 16;
        cfg.data = DataSource::Synthetic {
            family: TaskFamilySpec {
                dim: 2,
                base_direction: None,
                heterogeneity: 0.3,
                label_noise: 0.0,
                samples_per_task: 200,
                seed: 0,
            },
        };
        let table = run_experiment(&cfg).unwrap();
        assert!(table.mean("direct", "auc").unwrap() >= 0.99);
    }

    #[test]
    fn single_repeat_reports_no_std() {
        let mut cfg = small_config(vec![SchemeChoice::Direct]);
        cfg.repeats = 1;
        let table = run_experiment(&cfg).unwrap();
        assert!(table.rows.iter().all(|r| r.std.is_none()));
    }

    #[test]
    fn scheme_isolation() {
        // Dropping schemes must not change the numbers of the ones that stay.
        let full = run_experiment(&small_config(all_schemes())).unwrap();
        let partial = run_experiment(&small_config(vec![
            SchemeChoice::Direct,
            SchemeChoice::Pmfl,
        ]))
        .unwrap();
        for scheme in ["direct", "pmfl"] {
            for metric in ["auc", "precision", "recall", "f1"] {
                let a = full.mean(scheme, metric).unwrap();
                let b = partial.mean(scheme, metric).unwrap();
                assert_eq!(a.to_bits(), b.to_bits(), "{scheme}/{metric}");
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small_config(vec![SchemeChoice::MetaFl]);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let bits = |t: &ComparisonTable| {
            t.curves
                .iter()
                .map(|c| (c.epoch, c.scheme.clone(), c.seed, c.auc.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn ablation_shapes_match_table_3() {
        let mut cfg = small_config(vec![SchemeChoice::Pmfl]);
        cfg.k_pretrain = 2;
        let table = run_client_count_ablation(&cfg, &[2, 3]).unwrap();
        let schemes: Vec<&str> = {
            let mut s: Vec<&str> = table.rows.iter().map(|r| r.scheme.as_str()).collect();
            s.dedup();
            s
        };
        assert_eq!(schemes, vec!["direct", "pmfl_k2", "pmfl_k3"]);
        // len(counts) + 1 row groups, 4 metrics each.
        assert_eq!(table.rows.len(), 3 * 4);
    }

    #[test]
    fn ablation_with_single_count_matches_run_experiment() {
        let cfg = small_config(vec![SchemeChoice::Pmfl]);
        let plain = run_experiment(&cfg).unwrap();
        let ablate = run_client_count_ablation(&cfg, &[2]).unwrap();
        let a = plain.mean("pmfl", "auc").unwrap();
        let b = ablate.mean("pmfl_k2", "auc").unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn resolved_config_carries_materialized_seeds() {
        let cfg = small_config(vec![SchemeChoice::Direct]).resolved().unwrap();
        let seeds = cfg.seeds.clone().unwrap();
        assert_eq!(seeds.len(), cfg.repeats);
        // Resolving again is a fixed point.
        assert_eq!(cfg.resolved().unwrap().seeds.unwrap(), seeds);
    }

    #[test]
    fn seed_override_replaces_seed_material() {
        let mut cfg = small_config(vec![SchemeChoice::Direct]);
        cfg.seeds = Some(vec![1, 2]);
        cfg.apply_seed_override(Some("99")).unwrap();
        assert_eq!(cfg.seed, 99);
        assert!(cfg.seeds.is_none());
        assert!(cfg.apply_seed_override(Some("not-a-number")).is_err());
    }

    #[test]
    fn partial_participation_samples_per_round() {
        let mut cfg = small_config(vec![SchemeChoice::MetaFl]);
        cfg.participation = 0.5;
        cfg.rounds = 4;
        cfg.repeats = 1;
        let table = run_experiment(&cfg).unwrap();
        // One client sampled out of two, every round.
        assert!(table
            .round_logs
            .iter()
            .all(|entry| entry.log.client_losses.len() == 1));
        // Over four rounds both clients should appear.
        let ids: std::collections::HashSet<usize> = table
            .round_logs
            .iter()
            .flat_map(|e| e.log.client_losses.iter().map(|c| c.id))
            .collect();
        assert!(ids.len() > 1);
        // Deterministic.
        let again = run_experiment(&cfg).unwrap();
        let seq = |t: &ComparisonTable| {
            t.round_logs
                .iter()
                .flat_map(|e| e.log.client_losses.iter().map(|c| c.id))
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(&table), seq(&again));

        cfg.participation = 0.0;
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn emitted_files_are_byte_identical_across_runs() {
        let cfg = small_config(vec![SchemeChoice::Direct, SchemeChoice::FedAvg]);
        let resolved = cfg.resolved().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        emit_outputs(&run_experiment(&cfg).unwrap(), &resolved, &out_a).unwrap();
        emit_outputs(&run_experiment(&cfg).unwrap(), &resolved, &out_b).unwrap();
        for file in ["summary.csv", "curves.csv", "config.json"] {
            let a = std::fs::read(out_a.join(file)).unwrap();
            let b = std::fs::read(out_b.join(file)).unwrap();
            assert_eq!(a, b, "{file}");
        }
    }

    #[test]
    fn config_json_round_trips() {
        let resolved = small_config(all_schemes()).resolved().unwrap();
        let json = serde_json::to_string_pretty(&resolved).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.seeds, resolved.seeds);
        assert_eq!(back.schemes, resolved.schemes);
    }
}
