//! Task datasets: synthetic heterogeneous families, silo partitioning of a
//! multi-label table, CSV loading, and stratified splits.
//!
//! The synthetic generator realizes "task distance" as angular dispersion of
//! linear decision boundaries: task k labels follow `sign(w_k . x)` where
//! `w_k` sits at a random angle of scale `heterogeneity` (radians) around a
//! base direction. Zero dispersion makes every task identical; larger values
//! spread the boundaries apart.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TaskBatch;
use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("label {value:?} at line {line} is not binary")]
    NonBinaryLabel { line: u64, value: String },
    #[error("dataset is empty")]
    Empty,
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("cannot build silo for column {column:?}: {reason}")]
    Partition { column: String, reason: String },
    #[error("cannot split: {0}")]
    Split(String),
    #[error("invalid task family: {0}")]
    InvalidFamily(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Csv,
}

/// Labeled binary-classification samples for one client.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub task_id: String,
    pub provenance: Provenance,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// (negatives, positives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.len() - pos, pos)
    }

    pub fn batch(&self, indices: &[usize]) -> TaskBatch {
        TaskBatch::gather(&self.features, &self.labels, indices)
    }
}

/// Feature rows with several named binary label columns; one silo is carved
/// out per requested column.
#[derive(Clone, Debug)]
pub struct MultiLabelTable {
    pub features: Vec<Vec<f64>>,
    pub columns: Vec<LabelColumn>,
}

#[derive(Clone, Debug)]
pub struct LabelColumn {
    pub name: String,
    pub values: Vec<u8>,
}

impl MultiLabelTable {
    pub fn rows(&self) -> usize {
        self.features.len()
    }

    pub fn column(&self, name: &str) -> Option<&LabelColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn positive_count(&self, name: &str) -> Option<usize> {
        self.column(name)
            .map(|c| c.values.iter().filter(|&&v| v == 1).count())
    }
}

/// Generator settings for one family of related tasks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskFamilySpec {
    pub dim: usize,
    /// Direction the per-task boundaries disperse around; defaults to the
    /// first axis. Normalized before use.
    #[serde(default)]
    pub base_direction: Option<Vec<f64>>,
    /// Angular dispersion of per-task decision boundaries, radians, >= 0.
    pub heterogeneity: f64,
    /// Probability of flipping each label, in [0, 0.5).
    #[serde(default)]
    pub label_noise: f64,
    pub samples_per_task: usize,
    pub seed: u64,
}

impl TaskFamilySpec {
    fn validate(&self) -> Result<Vec<f64>, DataError> {
        if self.dim < 2 {
            return Err(DataError::InvalidFamily("dim must be at least 2".into()));
        }
        if self.heterogeneity < 0.0 || !self.heterogeneity.is_finite() {
            return Err(DataError::InvalidFamily(format!(
                "heterogeneity {} must be finite and >= 0",
                self.heterogeneity
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(DataError::InvalidFamily(format!(
                "label_noise {} must be in [0, 0.5)",
                self.label_noise
            )));
        }
        if self.samples_per_task == 0 {
            return Err(DataError::InvalidFamily(
                "samples_per_task must be positive".into(),
            ));
        }
        let mut base = match &self.base_direction {
            Some(v) => {
                if v.len() != self.dim {
                    return Err(DataError::InvalidFamily(format!(
                        "base_direction has {} entries, dim is {}",
                        v.len(),
                        self.dim
                    )));
                }
                v.clone()
            }
            None => {
                let mut e0 = vec![0.0; self.dim];
                e0[0] = 1.0;
                e0
            }
        };
        let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(DataError::InvalidFamily("base_direction is zero".into()));
        }
        for x in &mut base {
            *x /= norm;
        }
        Ok(base)
    }
}

const TASK_STREAM: u64 = 0x7461736b; // per-task RNG streams

/// The boundary direction of task `k` under `spec`, unit length.
pub fn task_direction(spec: &TaskFamilySpec, k: usize) -> Result<Vec<f64>, DataError> {
    let base = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix2(spec.seed, TASK_STREAM, k as u64));
    Ok(sample_direction(&mut rng, &base, spec.heterogeneity))
}

fn sample_direction(rng: &mut ChaCha8Rng, base: &[f64], dispersion: f64) -> Vec<f64> {
    let dim = base.len();
    // Orthonormal partner of the base direction, sampled uniformly.
    let ortho = loop {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let along: f64 = raw.iter().zip(base).map(|(r, b)| r * b).sum();
        let mut residual: Vec<f64> = raw.iter().zip(base).map(|(r, b)| r - along * b).collect();
        let norm = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for x in &mut residual {
                *x /= norm;
            }
            break residual;
        }
    };
    let angle: f64 = Normal::new(0.0, dispersion)
        .map(|d| d.sample(rng))
        .unwrap_or(0.0);
    let (sin, cos) = angle.sin_cos();
    base.iter()
        .zip(&ortho)
        .map(|(b, o)| cos * b + sin * o)
        .collect()
}

/// Generate `k` tasks. Task streams are independent, so the first tasks of
/// two families that share a seed are identical regardless of `k`.
pub fn generate_task_family(spec: &TaskFamilySpec, k: usize) -> Result<Vec<TaskDataset>, DataError> {
    if k == 0 {
        return Err(DataError::InvalidFamily("need at least one task".into()));
    }
    let base = spec.validate()?;
    let mut tasks = Vec::with_capacity(k);
    for task in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::mix2(spec.seed, TASK_STREAM, task as u64));
        let w = sample_direction(&mut rng, &base, spec.heterogeneity);
        let mut features = Vec::with_capacity(spec.samples_per_task);
        let mut labels = Vec::with_capacity(spec.samples_per_task);
        for _ in 0..spec.samples_per_task {
            let row: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let margin: f64 = w.iter().zip(&row).map(|(wi, xi)| wi * xi).sum();
            let mut label = u8::from(margin >= 0.0);
            // Draw the flip uniformly even when noise is 0 to keep the
            // stream layout independent of the noise setting.
            let flip: f64 = rng.random_range(0.0..1.0);
            if flip < spec.label_noise {
                label = 1 - label;
            }
            features.push(row);
            labels.push(label);
        }
        tasks.push(TaskDataset {
            features,
            labels,
            task_id: format!("task{task}"),
            provenance: Provenance::Synthetic,
        });
    }
    Ok(tasks)
}

/// Which label column gets to extract its silo first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionOrder {
    /// Default: start from the column with the fewest positives.
    #[default]
    LeastPositivesFirst,
    MostPositivesFirst,
}

/// Carve pairwise-disjoint, exactly 1:1 class-balanced silos out of the
/// table, one per requested column.
///
/// Columns are processed in ascending (default) or descending order of their
/// full-table positive count. Each silo takes every still-unassigned positive
/// row of its column, then an equal number of still-unassigned rows that are
/// negative in that column, both in ascending row order. Silos are returned
/// in processing order.
pub fn build_silos(
    table: &MultiLabelTable,
    silo_labels: &[String],
    order: ExtractionOrder,
) -> Result<Vec<TaskDataset>, DataError> {
    let mut requested = Vec::with_capacity(silo_labels.len());
    for name in silo_labels {
        let count = table
            .positive_count(name)
            .ok_or_else(|| DataError::MissingColumn(name.clone()))?;
        requested.push((name.clone(), count));
    }
    match order {
        ExtractionOrder::LeastPositivesFirst => requested.sort_by_key(|(_, c)| *c),
        ExtractionOrder::MostPositivesFirst => requested.sort_by_key(|(_, c)| usize::MAX - *c),
    }

    let mut assigned = vec![false; table.rows()];
    let mut silos = Vec::with_capacity(requested.len());
    for (name, _) in &requested {
        let column = table.column(name).expect("validated above");
        let positives: Vec<usize> = (0..table.rows())
            .filter(|&r| !assigned[r] && column.values[r] == 1)
            .collect();
        if positives.is_empty() {
            return Err(DataError::Partition {
                column: name.clone(),
                reason: "no unassigned positive rows left".into(),
            });
        }
        let negatives: Vec<usize> = (0..table.rows())
            .filter(|&r| !assigned[r] && column.values[r] == 0)
            .take(positives.len())
            .collect();
        if negatives.len() < positives.len() {
            return Err(DataError::Partition {
                column: name.clone(),
                reason: format!(
                    "need {} unassigned negative rows, only {} left",
                    positives.len(),
                    negatives.len()
                ),
            });
        }
        let mut features = Vec::with_capacity(2 * positives.len());
        let mut labels = Vec::with_capacity(2 * positives.len());
        for &r in positives.iter().chain(&negatives) {
            assigned[r] = true;
            features.push(table.features[r].clone());
            labels.push(column.values[r]);
        }
        silos.push(TaskDataset {
            features,
            labels,
            task_id: name.clone(),
            provenance: Provenance::Csv,
        });
    }
    Ok(silos)
}

/// Load a labeled-feature CSV: header row required, features real-valued,
/// label in {0, 1}. Row order is preserved as on disk.
pub fn load_csv(
    path: &Path,
    feature_columns: &[String],
    label_column: &str,
) -> Result<TaskDataset, DataError> {
    let file = std::fs::File::open(path)?;
    let table = read_table(file, feature_columns, &[label_column.to_string()])?;
    let labels = table.columns.into_iter().next().expect("one label column");
    if table.features.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(TaskDataset {
        features: table.features,
        labels: labels.values,
        task_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
        provenance: Provenance::Csv,
    })
}

/// Load a multi-label table from CSV, for silo construction.
pub fn load_table(
    path: &Path,
    feature_columns: &[String],
    label_columns: &[String],
) -> Result<MultiLabelTable, DataError> {
    let file = std::fs::File::open(path)?;
    let table = read_table(file, feature_columns, label_columns)?;
    if table.features.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(table)
}

fn read_table<R: Read>(
    reader: R,
    feature_columns: &[String],
    label_columns: &[String],
) -> Result<MultiLabelTable, DataError> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(DataError::Empty);
    }
    let find = |name: &String| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.clone()))
    };
    let feature_idx: Vec<usize> = feature_columns.iter().map(find).collect::<Result<_, _>>()?;
    let label_idx: Vec<usize> = label_columns.iter().map(find).collect::<Result<_, _>>()?;

    let mut features = Vec::new();
    let mut labels: Vec<Vec<u8>> = vec![Vec::new(); label_idx.len()];
    for record in csv.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, csv::Position::line),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        let mut row = Vec::with_capacity(feature_idx.len());
        for &i in &feature_idx {
            let field = record.get(i).ok_or_else(|| DataError::Parse {
                line,
                msg: format!("row has no field {i}"),
            })?;
            row.push(field.trim().parse::<f64>().map_err(|e| DataError::Parse {
                line,
                msg: format!("{field:?}: {e}"),
            })?);
        }
        for (col, &i) in label_idx.iter().enumerate() {
            let field = record.get(i).ok_or_else(|| DataError::Parse {
                line,
                msg: format!("row has no field {i}"),
            })?;
            let value = match field.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(DataError::NonBinaryLabel {
                        line,
                        value: other.to_string(),
                    })
                }
            };
            labels[col].push(value);
        }
        features.push(row);
    }

    Ok(MultiLabelTable {
        features,
        columns: label_columns
            .iter()
            .zip(labels)
            .map(|(name, values)| LabelColumn {
                name: name.clone(),
                values,
            })
            .collect(),
    })
}

/// Write a dataset as CSV with columns `f0..f{d-1},label`.
pub fn write_csv(dataset: &TaskDataset, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| DataError::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    let dim = dataset.dim();
    let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    writer
        .write_record(&header)
        .map_err(|e| DataError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    for (row, &label) in dataset.features.iter().zip(&dataset.labels) {
        let mut record: Vec<String> = row.iter().map(f64::to_string).collect();
        record.push(label.to_string());
        writer
            .write_record(&record)
            .map_err(|e| DataError::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
    }
    writer.flush()?;
    Ok(())
}

/// Stratified train/test split: each class is shuffled (seeded) and split so
/// both classes appear in both parts whenever their counts permit. Output
/// indices are re-sorted, so row order stays deterministic.
pub fn split(
    dataset: &TaskDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(TaskDataset, TaskDataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "train_fraction {train_fraction} outside (0, 1)"
        )));
    }
    let (neg, pos) = dataset.class_counts();
    if neg < 2 || pos < 2 {
        return Err(DataError::Split(format!(
            "need at least 2 samples per class, got {neg} negatives / {pos} positives"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let take = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train_idx.extend_from_slice(&members[..take]);
        test_idx.extend_from_slice(&members[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let gather = |idx: &[usize], part: &str| TaskDataset {
        features: idx.iter().map(|&i| dataset.features[i].clone()).collect(),
        labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
        task_id: format!("{}:{part}", dataset.task_id),
        provenance: dataset.provenance,
    };
    Ok((gather(&train_idx, "train"), gather(&test_idx, "test")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family(heterogeneity: f64, noise: f64, seed: u64) -> TaskFamilySpec {
        TaskFamilySpec {
            dim: 4,
            base_direction: None,
            heterogeneity,
            label_noise: noise,
            samples_per_task: 200,
            seed,
        }
    }

    #[test]
    fn zero_dispersion_gives_identical_directions() {
        let spec = family(0.0, 0.0, 3);
        for k in 0..5 {
            let w = task_direction(&spec, k).unwrap();
            assert_eq!(w, vec![1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn family_is_bit_reproducible() {
        let spec = family(0.8, 0.1, 44);
        let a = generate_task_family(&spec, 3).unwrap();
        let b = generate_task_family(&spec, 3).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.labels, tb.labels);
            for (ra, rb) in ta.features.iter().zip(&tb.features) {
                for (x, y) in ra.iter().zip(rb) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn task_streams_are_independent_of_family_size() {
        let spec = family(0.8, 0.1, 44);
        let small = generate_task_family(&spec, 2).unwrap();
        let large = generate_task_family(&spec, 5).unwrap();
        assert_eq!(small[1].labels, large[1].labels);
        assert_eq!(small[1].features, large[1].features);
    }

    #[test]
    fn rejects_bad_family_settings() {
        assert!(generate_task_family(&family(-0.1, 0.0, 1), 2).is_err());
        assert!(generate_task_family(&family(1.0, 0.5, 1), 2).is_err());
        assert!(generate_task_family(&family(1.0, 0.6, 1), 2).is_err());
        let mut narrow = family(1.0, 0.0, 1);
        narrow.dim = 1;
        assert!(generate_task_family(&narrow, 2).is_err());
    }

    #[test]
    fn dispersion_statistics_match_monte_carlo_oracle() {
        // d = 2, dispersion pi/2: the generator's pairwise |cos angle(w_i, w_j)|
        // should match a direct simulation of |cos(phi_i - phi_j)| with
        // phi ~ N(0, (pi/2)^2).
        let delta = std::f64::consts::FRAC_PI_2;
        let mut spec = family(delta, 0.0, 7);
        spec.dim = 2;
        spec.samples_per_task = 1;

        let draws = 10_000;
        let mut generated = 0.0;
        for pair in 0..draws {
            let mut s = spec.clone();
            s.seed = seed::mix(1234, pair);
            let wi = task_direction(&s, 0).unwrap();
            let wj = task_direction(&s, 1).unwrap();
            let cos: f64 = wi.iter().zip(&wj).map(|(a, b)| a * b).sum();
            generated += cos.abs();
        }
        generated /= draws as f64;

        // Independent oracle simulation.
        let mut rng = ChaCha8Rng::seed_from_u64(987654);
        let normal = Normal::new(0.0, delta).unwrap();
        let mut oracle = 0.0;
        for _ in 0..draws {
            let phi_i: f64 = normal.sample(&mut rng);
            let phi_j: f64 = normal.sample(&mut rng);
            oracle += (phi_i - phi_j).cos().abs();
        }
        oracle /= draws as f64;

        // |cos| is in [0, 1]; 10k draws put the MC standard error near
        // 0.004, so 0.02 is a comfortable 5-sigma band.
        assert!(
            (generated - oracle).abs() < 0.02,
            "generated {generated} vs oracle {oracle}"
        );
    }

    #[test]
    fn noiseless_task_is_linearly_separable() {
        let spec = family(0.5, 0.0, 10);
        let task = &generate_task_family(&spec, 1).unwrap()[0];

        // Plain perceptron probe, independent of the model module.
        let mut w = vec![0.0f64; spec.dim];
        for _ in 0..50 {
            for (row, &label) in task.features.iter().zip(&task.labels) {
                let pred: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
                let y = if label == 1 { 1.0 } else { -1.0 };
                if pred * y <= 0.0 {
                    for (wi, xi) in w.iter_mut().zip(row) {
                        *wi += y * xi;
                    }
                }
            }
        }
        let correct = task
            .features
            .iter()
            .zip(&task.labels)
            .filter(|(row, &label)| {
                let pred: f64 = w.iter().zip(*row).map(|(a, b)| a * b).sum();
                (pred >= 0.0) == (label == 1)
            })
            .count();
        assert!(correct as f64 / task.len() as f64 >= 0.95);
    }

    #[test]
    fn task_distance_grows_with_dispersion() {
        // Mean pairwise angle over many families should be monotone in the
        // dispersion knob.
        let mut means = Vec::new();
        for (i, delta) in [0.1, 0.5, 1.2].into_iter().enumerate() {
            let mut total = 0.0;
            let families = 300;
            for f in 0..families {
                let mut spec = family(delta, 0.0, seed::mix(50 + i as u64, f));
                spec.samples_per_task = 1;
                let wi = task_direction(&spec, 0).unwrap();
                let wj = task_direction(&spec, 1).unwrap();
                let cos: f64 = wi.iter().zip(&wj).map(|(a, b)| a * b).sum();
                total += cos.clamp(-1.0, 1.0).acos();
            }
            means.push(total / families as f64);
        }
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    }

    fn toy_table() -> MultiLabelTable {
        // 12 rows, two label columns. "rare" has 2 positives, "common" has 4.
        let features: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, -(i as f64)]).collect();
        let rare = vec![0, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0];
        let common = vec![1, 0, 1, 0, 1, 0, 1, 0, 0, 0, 0, 0];
        MultiLabelTable {
            features,
            columns: vec![
                LabelColumn {
                    name: "rare".into(),
                    values: rare,
                },
                LabelColumn {
                    name: "common".into(),
                    values: common,
                },
            ],
        }
    }

    #[test]
    fn silos_are_balanced_and_least_first() {
        let table = toy_table();
        let silos = build_silos(
            &table,
            &["common".into(), "rare".into()],
            ExtractionOrder::LeastPositivesFirst,
        )
        .unwrap();
        assert_eq!(silos[0].task_id, "rare");
        assert_eq!(silos[1].task_id, "common");
        for silo in &silos {
            let (neg, pos) = silo.class_counts();
            assert_eq!(neg, pos);
            assert_eq!(silo.len(), 2 * pos);
        }
        // rare claims rows 1, 7 as positives and 0, 2 as negatives; of
        // common's positives only rows 4 and 6 are then left unassigned.
        assert_eq!(silos[0].len(), 4);
        assert_eq!(silos[1].len(), 4);
    }

    #[test]
    fn silos_are_pairwise_disjoint() {
        let table = toy_table();
        let silos = build_silos(
            &table,
            &["rare".into(), "common".into()],
            ExtractionOrder::LeastPositivesFirst,
        )
        .unwrap();
        // Feature rows are unique in the toy table, so row identity is
        // testable through them.
        let key = |row: &Vec<f64>| format!("{row:?}");
        let a: std::collections::HashSet<String> = silos[0].features.iter().map(key).collect();
        let b: std::collections::HashSet<String> = silos[1].features.iter().map(key).collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn silo_failure_names_the_column() {
        let table = MultiLabelTable {
            features: vec![vec![0.0], vec![1.0], vec![2.0]],
            columns: vec![LabelColumn {
                name: "dense".into(),
                values: vec![1, 1, 0],
            }],
        };
        let err = build_silos(
            &table,
            &["dense".into()],
            ExtractionOrder::LeastPositivesFirst,
        )
        .unwrap_err();
        match err {
            DataError::Partition { column, .. } => assert_eq!(column, "dense"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn extraction_order_is_selectable() {
        // Non-overlapping positives so both orders succeed.
        let features: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        let table = MultiLabelTable {
            features,
            columns: vec![
                LabelColumn {
                    name: "rare".into(),
                    values: vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0],
                },
                LabelColumn {
                    name: "common".into(),
                    values: vec![1, 0, 1, 0, 1, 0, 1, 0, 0, 0, 0, 0],
                },
            ],
        };
        let names = ["rare".to_string(), "common".to_string()];
        let most = build_silos(&table, &names, ExtractionOrder::MostPositivesFirst).unwrap();
        assert_eq!(most[0].task_id, "common");
        let least = build_silos(&table, &names, ExtractionOrder::LeastPositivesFirst).unwrap();
        assert_eq!(least[0].task_id, "rare");
    }

    #[test]
    fn csv_hand_fixture_loads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        std::fs::write(&path, "a,b,label\n1.5,-2.0,1\n0.25,3.5,0\n-1.0,0.125,1\n").unwrap();
        let ds = load_csv(&path, &["a".into(), "b".into()], "label").unwrap();
        assert_eq!(
            ds.features,
            vec![vec![1.5, -2.0], vec![0.25, 3.5], vec![-1.0, 0.125]]
        );
        assert_eq!(ds.labels, vec![1, 0, 1]);
    }

    #[test]
    fn csv_round_trip() {
        let spec = family(0.7, 0.1, 5);
        let task = &generate_task_family(&spec, 1).unwrap()[0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.csv");
        write_csv(task, &path).unwrap();
        let cols: Vec<String> = (0..spec.dim).map(|i| format!("f{i}")).collect();
        let back = load_csv(&path, &cols, "label").unwrap();
        assert_eq!(back.labels, task.labels);
        for (a, b) in back.features.iter().zip(&task.features) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(load_csv(&path, &["a".into()], "label").is_err());
    }

    #[test]
    fn csv_reports_parse_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,label\n1.0,1\nnope,0\n").unwrap();
        let err = load_csv(&path, &["a".into()], "label").unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn csv_rejects_non_binary_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad_label.csv");
        std::fs::write(&path, "a,label\n1.0,2\n").unwrap();
        let err = load_csv(&path, &["a".into()], "label").unwrap_err();
        assert!(matches!(err, DataError::NonBinaryLabel { .. }));
    }

    #[test]
    fn split_is_exactly_stratified() {
        let features: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let ds = TaskDataset {
            features,
            labels,
            task_id: "t".into(),
            provenance: Provenance::Synthetic,
        };
        let (train, test) = split(&ds, 0.9, 17).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(test.len(), 10);
        assert_eq!(train.class_counts(), (45, 45));
        assert_eq!(test.class_counts(), (5, 5));
    }

    #[test]
    fn split_partitions_the_multiset() {
        let spec = family(0.4, 0.05, 23);
        let ds = &generate_task_family(&spec, 1).unwrap()[0];
        let (train, test) = split(ds, 0.8, 3).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        let mut all: Vec<String> = train
            .features
            .iter()
            .chain(&test.features)
            .map(|r| format!("{r:?}"))
            .collect();
        let mut original: Vec<String> = ds.features.iter().map(|r| format!("{r:?}")).collect();
        all.sort();
        original.sort();
        assert_eq!(all, original);
    }

    #[test]
    fn split_seeds_change_membership_not_counts() {
        let spec = family(0.4, 0.05, 29);
        let ds = &generate_task_family(&spec, 1).unwrap()[0];
        let (a_train, a_test) = split(ds, 0.9, 1).unwrap();
        let (b_train, b_test) = split(ds, 0.9, 2).unwrap();
        assert_eq!(a_train.class_counts(), b_train.class_counts());
        assert_eq!(a_test.class_counts(), b_test.class_counts());
        assert_ne!(a_test.features, b_test.features);
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let ds = TaskDataset {
            features: vec![vec![0.0], vec![1.0], vec![2.0]],
            labels: vec![1, 0, 0],
            task_id: "t".into(),
            provenance: Provenance::Synthetic,
        };
        assert!(matches!(split(&ds, 0.9, 0), Err(DataError::Split(_))));
    }
}
