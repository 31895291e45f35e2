//! Dataset representation, synthetic generation, IDX ingestion, Dirichlet
//! Non-IID partitioning, and the per-client labeled/unlabeled split.
//!
//! Partitioning draws one Dirichlet proportion vector per class and allocates
//! that class's samples to clients by largest-remainder rounding, then splits
//! each client 70/10/20 into train/val/test with the same per-class rule.
//! The training split is further divided into a labeled and an unlabeled part
//! from a two-dimensional Dirichlet draw; the ground truth of unlabeled
//! samples is retained but only reachable through a metrics-only accessor.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, dirichlet, rng_from_seed, shuffle, standard_normal};
use std::io::{Read, Write};
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Train/val/test proportions, in that order.
const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

/// Attempts before the degenerate-client fallback kicks in.
const MAX_PARTITION_ATTEMPTS: u64 = 10;

/// A flat labeled dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Domain(
                "dataset must contain at least one row".into(),
            ));
        }
        if features.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::Domain("class_count must be >= 2".into()));
        }
        let dim = features[0].len();
        for (i, row) in features.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has {} features, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite feature in row {i}")));
            }
        }
        if let Some((i, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Domain(format!(
                "label {label} at row {i} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.features[index]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
}

/// Parameters of the Non-IID partition.
#[derive(Debug, Clone)]
pub struct PartitionSpec {
    pub client_count: usize,
    pub alpha: f64,
    pub label_split_alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.client_count < 2 {
            return Err(Error::Config("client_count must be >= 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.label_split_alpha > 0.0 && self.label_split_alpha.is_finite()) {
            return Err(Error::Config("label_split_alpha must be positive".into()));
        }
        Ok(())
    }
}

/// One client's sample indices into the source dataset, pre labeled split.
#[derive(Debug, Clone, Default)]
pub struct ClientPartition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A feature vector with its label.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A client's materialized dataset after the labeled/unlabeled split.
///
/// Ground-truth labels of unlabeled samples are stored but deliberately not
/// exposed through any accessor the training path uses; metrics code reads
/// them through [`ClientDataset::hidden_labels_for_metrics`]. A canary test
/// asserts the training modules never name that accessor.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    labeled: Vec<LabeledExample>,
    unlabeled: Vec<Vec<f64>>,
    hidden_truth: Vec<usize>,
    val: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
    labeled_ratio: f64,
    class_count: usize,
}

impl ClientDataset {
    pub fn from_parts(
        labeled: Vec<LabeledExample>,
        unlabeled: Vec<Vec<f64>>,
        hidden_truth: Vec<usize>,
        val: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
        class_count: usize,
    ) -> Result<Self> {
        if unlabeled.len() != hidden_truth.len() {
            return Err(Error::Consistency(format!(
                "{} unlabeled rows vs {} hidden labels",
                unlabeled.len(),
                hidden_truth.len()
            )));
        }
        let total = labeled.len() + unlabeled.len();
        let labeled_ratio = if total == 0 {
            0.0
        } else {
            labeled.len() as f64 / total as f64
        };
        Ok(ClientDataset {
            labeled,
            unlabeled,
            hidden_truth,
            val,
            test,
            labeled_ratio,
            class_count,
        })
    }

    pub fn labeled(&self) -> &[LabeledExample] {
        &self.labeled
    }

    pub fn unlabeled_features(&self) -> &[Vec<f64>] {
        &self.unlabeled
    }

    pub fn val(&self) -> &[LabeledExample] {
        &self.val
    }

    pub fn test(&self) -> &[LabeledExample] {
        &self.test
    }

    /// `mu_k`: labeled count over total training count.
    pub fn labeled_ratio(&self) -> f64 {
        self.labeled_ratio
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn train_len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Ground truth of the unlabeled samples. Evaluation-only: the federation
    /// and protocol modules must never call this.
    pub fn hidden_labels_for_metrics(&self) -> &[usize] {
        &self.hidden_truth
    }

    /// Per-class counts over the full training split (labeled + unlabeled,
    /// using hidden truth); used for partition reporting.
    pub fn train_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for ex in &self.labeled {
            counts[ex.label] += 1;
        }
        for &label in &self.hidden_truth {
            counts[label] += 1;
        }
        counts
    }
}

/// Isotropic Gaussian blobs, one mean per class on a fixed 2-D lattice with
/// spacing 4.
pub fn generate_synthetic(
    class_count: usize,
    per_class: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(Error::Domain("class_count must be >= 2".into()));
    }
    if per_class < 1 {
        return Err(Error::Domain("per_class must be >= 1".into()));
    }
    if !(cluster_spread >= 0.0 && cluster_spread.is_finite()) {
        return Err(Error::Domain("cluster_spread must be non-negative".into()));
    }
    let side = (class_count as f64).sqrt().ceil() as usize;
    let mut rng = rng_from_seed(seed);
    let mut features = Vec::with_capacity(class_count * per_class);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for class in 0..class_count {
        let mean_x = 4.0 * (class % side) as f64;
        let mean_y = 4.0 * (class / side) as f64;
        for _ in 0..per_class {
            let x = mean_x + cluster_spread * standard_normal(&mut rng);
            let y = mean_y + cluster_spread * standard_normal(&mut rng);
            features.push(vec![x, y]);
            labels.push(class);
        }
    }
    Dataset::new(features, labels, class_count)
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::Format(format!("{path}: truncated file")))
}

fn read_u32_be(reader: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(reader, &mut buf, path)?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`; the class
/// count is inferred as `max label + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images_name = images_path.display().to_string();
    let labels_name = labels_path.display().to_string();

    let mut images = std::fs::File::open(images_path).map_err(|e| Error::io(&images_name, e))?;
    let magic = read_u32_be(&mut images, &images_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{images_name}: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&mut images, &images_name)? as usize;
    let rows = read_u32_be(&mut images, &images_name)? as usize;
    let cols = read_u32_be(&mut images, &images_name)? as usize;
    let dim = rows * cols;
    let mut pixel_buf = vec![0u8; count * dim];
    read_exact(&mut images, &mut pixel_buf, &images_name)?;

    let mut labels_file =
        std::fs::File::open(labels_path).map_err(|e| Error::io(&labels_name, e))?;
    let magic = read_u32_be(&mut labels_file, &labels_name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{labels_name}: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32_be(&mut labels_file, &labels_name)? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images vs {label_count} labels"
        )));
    }
    let mut label_buf = vec![0u8; label_count];
    read_exact(&mut labels_file, &mut label_buf, &labels_name)?;

    let features: Vec<Vec<f64>> = pixel_buf
        .chunks_exact(dim)
        .map(|chunk| chunk.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = label_buf.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(features, labels, class_count)
}

/// Writes a dataset as an IDX image/label pair (one row of `feature_dim`
/// columns per sample, pixels quantized to `round(v * 255)`).
pub fn save_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let images_name = images_path.display().to_string();
    let labels_name = labels_path.display().to_string();

    let mut images = std::fs::File::create(images_path).map_err(|e| Error::io(&images_name, e))?;
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    header.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    header.extend_from_slice(&1u32.to_be_bytes());
    header.extend_from_slice(&(dataset.feature_dim() as u32).to_be_bytes());
    images
        .write_all(&header)
        .map_err(|e| Error::io(&images_name, e))?;
    let mut pixels = Vec::with_capacity(dataset.len() * dataset.feature_dim());
    for i in 0..dataset.len() {
        for &v in dataset.row(i) {
            pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    images
        .write_all(&pixels)
        .map_err(|e| Error::io(&images_name, e))?;

    let mut labels_file =
        std::fs::File::create(labels_path).map_err(|e| Error::io(&labels_name, e))?;
    let mut header = Vec::with_capacity(8);
    header.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    header.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    labels_file
        .write_all(&header)
        .map_err(|e| Error::io(&labels_name, e))?;
    let labels: Vec<u8> = (0..dataset.len()).map(|i| dataset.label(i) as u8).collect();
    labels_file
        .write_all(&labels)
        .map_err(|e| Error::io(&labels_name, e))?;
    Ok(())
}

/// Largest-remainder allocation of `total` items over `proportions`.
/// Leftovers go to the largest fractional remainders, ties to the lowest
/// index.
pub(crate) fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|&p| (total as f64 * p.max(0.0)).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    // Defensive trim for pathological proportion sums.
    while assigned > total {
        let idx = counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(i, _)| i)
            .expect("nonempty proportions");
        counts[idx] -= 1;
        assigned -= 1;
    }
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = total as f64 * proportions[a] - (total as f64 * proportions[a]).floor();
        let rb = total as f64 * proportions[b] - (total as f64 * proportions[b]).floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut leftover = total - assigned;
    for idx in order {
        if leftover == 0 {
            break;
        }
        counts[idx] += 1;
        leftover -= 1;
    }
    counts
}

/// Dirichlet Non-IID partition into per-client train/val/test index sets.
///
/// Proportions are drawn per class from `Dir_K(alpha)`; a partition that
/// leaves any client with an empty train, val, or test split is re-rolled up
/// to [`MAX_PARTITION_ATTEMPTS`] times, after which donor clients top up the
/// empty splits with one sample per class.
pub fn dirichlet_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientPartition>> {
    spec.validate()?;
    let class_rows = group_by_class(data)?;

    let mut last = None;
    for attempt in 0..=MAX_PARTITION_ATTEMPTS {
        let parts = partition_attempt(data, spec, &class_rows, attempt);
        if parts
            .iter()
            .all(|p| !p.train.is_empty() && !p.val.is_empty() && !p.test.is_empty())
        {
            return Ok(parts);
        }
        last = Some(parts);
    }
    let parts = last.expect("at least one attempt ran");
    top_up_degenerate(data, parts)
}

fn group_by_class(data: &Dataset) -> Result<Vec<Vec<usize>>> {
    let mut class_rows: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for i in 0..data.len() {
        class_rows[data.label(i)].push(i);
    }
    if let Some(class) = class_rows.iter().position(|rows| rows.is_empty()) {
        return Err(Error::Partition(format!("class {class} has no samples")));
    }
    Ok(class_rows)
}

fn partition_attempt(
    data: &Dataset,
    spec: &PartitionSpec,
    class_rows: &[Vec<usize>],
    attempt: u64,
) -> Vec<ClientPartition> {
    let k = spec.client_count;
    let mut rng = rng_from_seed(derive_seed(spec.seed, &[attempt]));
    // Per client, per class: assigned row indices.
    let mut assigned: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); class_rows.len()]; k];

    for (class, rows) in class_rows.iter().enumerate() {
        let proportions = dirichlet(&mut rng, spec.alpha, k);
        let counts = largest_remainder(rows.len(), &proportions);
        let mut pool = rows.clone();
        shuffle(&mut rng, &mut pool);
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            assigned[client][class].extend_from_slice(&pool[cursor..cursor + count]);
            cursor += count;
        }
    }

    assigned
        .into_iter()
        .map(|per_class| split_train_val_test(data, per_class))
        .collect()
}

/// 70/10/20 split applied class by class so the three splits share the
/// client's label distribution up to rounding.
fn split_train_val_test(_data: &Dataset, per_class: Vec<Vec<usize>>) -> ClientPartition {
    let mut part = ClientPartition::default();
    for rows in per_class {
        let counts = largest_remainder(rows.len(), &SPLIT_FRACTIONS);
        let (train_n, val_n) = (counts[0], counts[1]);
        part.train.extend_from_slice(&rows[..train_n]);
        part.val.extend_from_slice(&rows[train_n..train_n + val_n]);
        part.test.extend_from_slice(&rows[train_n + val_n..]);
    }
    part
}

/// Moves one training sample per class from the largest holder of that class
/// into each empty split of each degenerate client.
fn top_up_degenerate(
    data: &Dataset,
    mut parts: Vec<ClientPartition>,
) -> Result<Vec<ClientPartition>> {
    let class_count = data.class_count();
    for client in 0..parts.len() {
        for split in 0..3 {
            let is_empty = match split {
                0 => parts[client].train.is_empty(),
                1 => parts[client].val.is_empty(),
                _ => parts[client].test.is_empty(),
            };
            if !is_empty {
                continue;
            }
            for class in 0..class_count {
                let donor = (0..parts.len())
                    .filter(|&d| d != client)
                    .map(|d| {
                        let count = parts[d]
                            .train
                            .iter()
                            .filter(|&&row| data.label(row) == class)
                            .count();
                        (d, count)
                    })
                    .filter(|&(_, count)| count >= 2)
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
                let Some((donor, _)) = donor else { continue };
                let pos = parts[donor]
                    .train
                    .iter()
                    .position(|&row| data.label(row) == class)
                    .expect("donor has samples of this class");
                let row = parts[donor].train.remove(pos);
                match split {
                    0 => parts[client].train.push(row),
                    1 => parts[client].val.push(row),
                    _ => parts[client].test.push(row),
                }
            }
        }
    }
    for (id, part) in parts.iter().enumerate() {
        if part.train.is_empty() || part.val.is_empty() || part.test.is_empty() {
            return Err(Error::Partition(format!(
                "client {id} still has an empty split after donor top-up"
            )));
        }
    }
    Ok(parts)
}

/// Labeled/unlabeled counts for a train split of size `total` with draw
/// `(p_s, p_u)`.
pub(crate) fn split_counts(total: usize, p_labeled: f64, p_unlabeled: f64) -> (usize, usize) {
    let counts = largest_remainder(total, &[p_labeled, p_unlabeled]);
    (counts[0], counts[1])
}

/// Splits one client's training rows into labeled and unlabeled parts with a
/// `Dir_2(label_split_alpha)` draw, and materializes the client dataset.
pub fn split_labeled(
    data: &Dataset,
    partition: &ClientPartition,
    label_split_alpha: f64,
    seed: u64,
) -> Result<ClientDataset> {
    if partition.train.is_empty() {
        return Err(Error::Partition("client training split is empty".into()));
    }
    let mut rng = rng_from_seed(seed);
    let p = dirichlet(&mut rng, label_split_alpha, 2);
    let (labeled_n, _) = split_counts(partition.train.len(), p[0], p[1]);

    let mut order = partition.train.clone();
    shuffle(&mut rng, &mut order);

    let example = |row: usize| LabeledExample {
        features: data.row(row).to_vec(),
        label: data.label(row),
    };

    let labeled: Vec<LabeledExample> = order[..labeled_n].iter().map(|&r| example(r)).collect();
    let unlabeled: Vec<Vec<f64>> = order[labeled_n..]
        .iter()
        .map(|&r| data.row(r).to_vec())
        .collect();
    let hidden: Vec<usize> = order[labeled_n..].iter().map(|&r| data.label(r)).collect();
    let val: Vec<LabeledExample> = partition.val.iter().map(|&r| example(r)).collect();
    let test: Vec<LabeledExample> = partition.test.iter().map(|&r| example(r)).collect();

    let client =
        ClientDataset::from_parts(labeled, unlabeled, hidden, val, test, data.class_count())?;
    // mu_k must equal the integer ratio exactly.
    debug_assert_eq!(
        client.labeled_ratio(),
        labeled_n as f64 / partition.train.len() as f64
    );
    Ok(client)
}
