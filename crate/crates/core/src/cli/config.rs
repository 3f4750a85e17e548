//! Experiment configuration: a single JSON document. Relative paths are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{holdout_split, load_mnist_idx, noise_dataset, synth_gaussian_scene, Dataset, NoiseKind, SplitSpec};
use crate::error::{GimError, Result};
use crate::losses::{LossKind, DEFAULT_SIGMA_FLOOR};
use crate::trainer::{Optimizer, TrainConfig};
use crate::trunk::TrunkSpec;

pub const DEFAULT_TARGET_TPR: f64 = 0.97;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub trunk: TrunkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ood: OodConfig,
    #[serde(default)]
    pub gridmap: GridConfig,
    pub outputs: OutputsConfig,
    /// Directory of the config file; not part of the document.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// 2-D Gaussian classes; the test set is drawn with `seed + 1`.
    Synthetic {
        means: Vec<[f64; 2]>,
        /// Identity covariances when omitted.
        #[serde(default)]
        covs: Option<Vec<[[f64; 2]; 2]>>,
        n_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    /// A directory holding the four standard IDX files.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrunkConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub loss: LossKind,
    /// Variants trained by `compare`.
    pub losses: Vec<LossKind>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma_floor: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            loss: t.loss,
            losses: vec![LossKind::Ctv, LossKind::Ch, LossKind::Softmax],
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            lambda: t.lambda,
            alpha: t.alpha,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            lambda: self.lambda,
            alpha: self.alpha,
            sigma_floor: self.sigma_floor,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    pub target_tpr: f64,
    pub out: Option<OodSource>,
}

impl Default for OodConfig {
    fn default() -> Self {
        OodConfig {
            target_tpr: DEFAULT_TARGET_TPR,
            out: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OodSource {
    /// Flattened `width × height` noise images.
    Noise {
        noise: NoiseKind,
        n: usize,
        width: usize,
        height: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Extra 2-D Gaussian clusters never seen in training.
    Cluster {
        means: Vec<[f64; 2]>,
        #[serde(default)]
        covs: Option<Vec<[[f64; 2]; 2]>>,
        n_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Hold whole classes of the training set out. Training and in-test
    /// sets become the stratified split of `in_classes`.
    Holdout {
        in_classes: Vec<usize>,
        out_classes: Vec<usize>,
        train_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub resolution: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            x_range: [-6.0, 14.0],
            y_range: [-6.0, 14.0],
            resolution: 200,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    pub dir: PathBuf,
}

/// Training, test, and OOD data built from a config.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Option<Dataset>,
}

fn identity_covs(n: usize) -> Vec<[[f64; 2]; 2]> {
    vec![[[1.0, 0.0], [0.0, 1.0]]; n]
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| GimError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    /// Reads, parses, and validates `path`. Parse errors carry the line and
    /// column of the offending token.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GimError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let cfg = ExperimentConfig::from_json(&text, &base).map_err(|e| match e {
            GimError::Config(msg) => GimError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.validate()
            .map_err(|e| GimError::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config error: "))))?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.outputs.dir)
    }

    pub fn num_classes(&self) -> usize {
        let all = match &self.dataset {
            DatasetConfig::Synthetic { means, .. } => means.len(),
            DatasetConfig::Mnist { .. } => 10,
        };
        match &self.ood.out {
            Some(OodSource::Holdout { in_classes, .. }) => in_classes.len(),
            _ => all,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic { .. } => 2,
            DatasetConfig::Mnist { .. } => 784,
        }
    }

    pub fn trunk_spec(&self) -> TrunkSpec {
        TrunkSpec::new(self.input_dim(), &self.trunk.hidden, self.trunk.output_dim)
    }

    /// Checks every value that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GimError::Config(m));
        if self.trunk.output_dim == 0 || self.trunk.hidden.contains(&0) {
            return err("trunk: layer widths must be positive".into());
        }
        match &self.dataset {
            DatasetConfig::Synthetic { means, covs, n_per_class, test_per_class, .. } => {
                if means.is_empty() || *n_per_class == 0 || *test_per_class == 0 {
                    return err("dataset: synthetic scenes need means and positive sample counts".into());
                }
                if covs.as_ref().is_some_and(|c| c.len() != means.len()) {
                    return err("dataset: covs must list one matrix per mean".into());
                }
            }
            DatasetConfig::Mnist { dir, .. } => {
                for f in MNIST_FILES {
                    let p = self.resolve(dir).join(f);
                    if !p.is_file() {
                        return err(format!("dataset: missing file {}", p.display()));
                    }
                }
            }
        }
        if !(self.ood.target_tpr > 0.0 && self.ood.target_tpr < 1.0) {
            return err(format!("ood: target_tpr must lie in (0, 1), got {}", self.ood.target_tpr));
        }
        if let Some(OodSource::Noise { width, height, .. }) = &self.ood.out {
            if width * height != self.input_dim() {
                return err(format!("ood: {width}×{height} noise does not match {} input features", self.input_dim()));
            }
        }
        if let Some(OodSource::Cluster { .. }) = &self.ood.out {
            if self.input_dim() != 2 {
                return err("ood: cluster out-sets need a 2-D dataset".into());
            }
        }
        let g = &self.gridmap;
        if g.resolution < 2 || !(g.x_range[0] < g.x_range[1]) || !(g.y_range[0] < g.y_range[1]) {
            return err("gridmap: need resolution >= 2 and increasing ranges".into());
        }
        self.train
            .to_train_config()
            .validate(self.num_classes())
            .map_err(|e| GimError::Config(format!("train: {}", e.to_string().trim_start_matches("config error: "))))
    }

    /// Loads or generates every dataset the config names.
    pub fn prepare_data(&self) -> Result<PreparedData> {
        let (mut train, mut test) = match &self.dataset {
            DatasetConfig::Synthetic { means, covs, n_per_class, test_per_class, seed } => {
                let covs = covs.clone().unwrap_or_else(|| identity_covs(means.len()));
                (
                    synth_gaussian_scene(means, &covs, *n_per_class, *seed)?,
                    synth_gaussian_scene(means, &covs, *test_per_class, seed.wrapping_add(1))?,
                )
            }
            DatasetConfig::Mnist { dir, train_limit, test_limit } => {
                let dir = self.resolve(dir);
                let mut train = load_mnist_idx(&dir.join(MNIST_FILES[0]), &dir.join(MNIST_FILES[1]))?;
                let mut test = load_mnist_idx(&dir.join(MNIST_FILES[2]), &dir.join(MNIST_FILES[3]))?;
                if let Some(n) = train_limit {
                    train = train.head(*n)?;
                }
                if let Some(n) = test_limit {
                    test = test.head(*n)?;
                }
                (train, test)
            }
        };
        let ood = match &self.ood.out {
            None => None,
            Some(OodSource::Noise { noise, n, width, height, seed }) => Some(noise_dataset(*noise, *n, *width, *height, *seed)?),
            Some(OodSource::Cluster { means, covs, n_per_class, seed }) => {
                let covs = covs.clone().unwrap_or_else(|| identity_covs(means.len()));
                Some(synth_gaussian_scene(means, &covs, *n_per_class, *seed)?)
            }
            Some(OodSource::Holdout { in_classes, out_classes, train_fraction, seed }) => {
                let split = holdout_split(
                    &train,
                    &SplitSpec {
                        in_class_ids: in_classes.clone(),
                        out_class_ids: out_classes.clone(),
                        train_fraction: *train_fraction,
                        seed: *seed,
                    },
                )?;
                train = split.train;
                test = split.test_in;
                Some(split.test_out)
            }
        };
        Ok(PreparedData { train, test, ood })
    }
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
