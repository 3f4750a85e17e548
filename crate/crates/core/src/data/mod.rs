//! Datasets: a flat feature matrix with integer labels.

mod idx;
mod synth;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GimError, Result};
use crate::tensor::Tensor;

pub use idx::{load_mnist_dir, load_mnist_idx, read_idx_images, read_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{noise_dataset, synth_gaussian_scene, NoiseKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if features.shape().len() != 2 {
            return Err(GimError::Shape(format!("{name}: features must be a matrix")));
        }
        if features.rows() != labels.len() {
            return Err(GimError::Shape(format!(
                "{name}: {} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(GimError::Contract(format!("{name}: num_classes must be positive")));
        }
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(GimError::Contract(format!(
                "{name}: label {y} at row {i} is outside 0..{num_classes}"
            )));
        }
        if !features.is_finite() {
            return Err(GimError::NonFinite(format!("{name} features")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            name,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let features = self.features.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.num_classes, name)
    }

    /// The first `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }

    /// Writes `f0,...,f{p-1},label` rows with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| GimError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let header: Vec<String> = (0..self.feature_dim()).map(|j| format!("f{j}")).collect();
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "{},label", header.join(","))?;
            for (row, y) in self.features.row_iter().zip(&self.labels) {
                for v in row {
                    write!(w, "{v},")?;
                }
                writeln!(w, "{y}")?;
            }
            w.flush()
        };
        write().map_err(|e| GimError::io(path, e))
    }
}

/// Which classes are trained on and which are held out as OOD.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub in_class_ids: Vec<usize>,
    pub out_class_ids: Vec<usize>,
    pub train_fraction: f64,
    pub seed: u64,
}

/// Output of [`holdout_split`]. `train` and `test_in` are relabeled densely
/// over the in-distribution classes (in ascending id order); `test_out` is
/// relabeled densely over the held-out classes.
#[derive(Clone, Debug)]
pub struct HoldoutSplit {
    pub train: Dataset,
    pub test_in: Dataset,
    pub test_out: Dataset,
    /// `in_classes[k]` is the original id of new label `k`.
    pub in_classes: Vec<usize>,
    pub out_classes: Vec<usize>,
}

pub fn holdout_split(data: &Dataset, spec: &SplitSpec) -> Result<HoldoutSplit> {
    let ins: BTreeSet<usize> = spec.in_class_ids.iter().copied().collect();
    let outs: BTreeSet<usize> = spec.out_class_ids.iter().copied().collect();
    if ins.is_empty() || outs.is_empty() {
        return Err(GimError::Contract("holdout needs at least one in- and one out-class".into()));
    }
    if let Some(c) = ins.intersection(&outs).next() {
        return Err(GimError::Contract(format!("class {c} is both in- and out-of-distribution")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(GimError::Contract(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let counts = data.class_counts();
    for &c in ins.iter().chain(&outs) {
        if counts.get(c).copied().unwrap_or(0) == 0 {
            return Err(GimError::Contract(format!("class {c} has no rows in {}", data.name())));
        }
    }

    let in_classes: Vec<usize> = ins.iter().copied().collect();
    let out_classes: Vec<usize> = outs.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for &c in &in_classes {
        let mut rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        rows.shuffle(&mut rng);
        let k = ((rows.len() as f64) * spec.train_fraction).round() as usize;
        let (a, b) = rows.split_at(k.min(rows.len()));
        train_idx.extend_from_slice(a);
        test_idx.extend_from_slice(b);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let out_idx: Vec<usize> = (0..data.len()).filter(|&i| outs.contains(&data.labels[i])).collect();
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(GimError::Contract(format!(
            "train_fraction {} leaves an empty partition",
            spec.train_fraction
        )));
    }

    let relabel = |idx: &[usize], classes: &[usize], name: String| -> Result<Dataset> {
        let features = data.features.select_rows(idx)?;
        let labels = idx
            .iter()
            .map(|&i| classes.binary_search(&data.labels[i]).expect("class in set"))
            .collect();
        Dataset::new(features, labels, classes.len(), name)
    };
    Ok(HoldoutSplit {
        train: relabel(&train_idx, &in_classes, format!("{}-train", data.name()))?,
        test_in: relabel(&test_idx, &in_classes, format!("{}-test-in", data.name()))?,
        test_out: relabel(&out_idx, &out_classes, format!("{}-test-out", data.name()))?,
        in_classes,
        out_classes,
    })
}
