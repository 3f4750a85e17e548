//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::PathBuf;

use gim::losses::{ch_loss, ctv_loss, BatchPartition, LossConfig, LossKind};
use gim::tape::Tape;
use gim::trunk::{finite_difference_grad, Activation, TrunkGrads};
use gim::{Dataset, Tensor, TrunkParams, TrunkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

/// Relative error of one gradient entry, or 0 when the entries agree to
/// within the absolute floor.
pub fn entry_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

pub fn max_grad_error(a: &TrunkGrads, b: &TrunkGrads) -> f64 {
    a.tensors()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(&p, &q)| entry_error(p, q)))
        .fold(0.0, f64::max)
}

/// A small random trunk together with a labeled batch.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub params: TrunkParams,
    pub batch: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub cfg: LossConfig,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

impl GradCase {
    /// Up to three layers of width at most 8, output width at most 4, batch
    /// at most 16 and two or three classes, with nonzero random biases.
    pub fn random(seed: u64) -> GradCase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = rng.random_range(1..=3);
        let input = rng.random_range(1..=8);
        let hidden: Vec<usize> = (1..n_layers).map(|_| rng.random_range(1..=8)).collect();
        let out = rng.random_range(1..=4);
        let mut params = TrunkSpec::new(input, &hidden, out).init(rng.random()).unwrap();
        let mut layers = params.layers().to_vec();
        for l in &mut layers {
            let c = l.bias.cols();
            let b = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            l.bias = Tensor::matrix(1, c, b).unwrap();
        }
        params = TrunkParams::new(layers).unwrap();
        let num_classes = rng.random_range(2..=3);
        let n = rng.random_range(num_classes..=16);
        let mut labels: Vec<usize> = (0..num_classes).collect();
        labels.extend((num_classes..n).map(|_| rng.random_range(0..num_classes)));
        let cfg = LossConfig {
            lambda: rng.random_range(0.1..2.0),
            alpha: rng.random_range(1.0..100.0),
            ..LossConfig::default()
        };
        GradCase {
            params,
            batch: gaussian_matrix(&mut rng, n, input),
            labels,
            num_classes,
            cfg,
        }
    }

    /// Smallest |pre-activation| over the rectified layers: a central
    /// difference straddling a kink is meaningless.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let mut x = self.batch.clone();
        for layer in self.params.layers() {
            let mut z = x.matmul(&layer.weights).unwrap().into_data();
            let c = layer.out_dim();
            for row in z.chunks_exact_mut(c) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                    if layer.activation == Activation::Relu {
                        margin = margin.min(v.abs());
                        *v = v.max(0.0);
                    }
                }
            }
            x = Tensor::matrix(x.rows(), c, z).unwrap();
        }
        margin
    }

    pub fn loss(&self, params: &TrunkParams, kind: LossKind) -> gim::Result<(f64, TrunkGrads)> {
        let part = BatchPartition::from_labels(&self.labels, self.num_classes)?;
        let mut tape = Tape::new();
        let fwd = params.forward(&mut tape, &self.batch)?;
        let loss = match kind {
            LossKind::Ctv => ctv_loss(&mut tape, fwd.output, &part, &self.cfg)?,
            LossKind::Ch => ch_loss(&mut tape, fwd.output, &part, &self.cfg)?,
            LossKind::Softmax => unreachable!("gradient cases cover the isolation losses"),
        };
        let value = tape.value(loss).item().unwrap();
        let grads = fwd.grads(&tape.backward(loss)?);
        Ok((value, grads))
    }

    /// Max relative error between backward and central differences.
    pub fn grad_error(&self, kind: LossKind) -> f64 {
        let (_, analytic) = self.loss(&self.params, kind).unwrap();
        let numeric = finite_difference_grad(|p| Ok(self.loss(p, kind)?.0), &self.params, FD_STEP).unwrap();
        max_grad_error(&analytic, &numeric)
    }
}

/// Population covariance trace of `rows`, computed column by column.
pub fn covariance_trace(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let d = rows[0].len();
    (0..d)
        .map(|j| {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            rows.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / n
        })
        .sum()
}

/// Brute-force AUROC over all (in, out) pairs as an exact fraction
/// `(2·wins + ties) / (2·P·N)`.
pub fn auroc_pairs(scores: &[f64], is_in: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if is_in[i] && !is_in[j] {
                pairs += 1;
                twice += if a > b { 2 } else if a == b { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact rational value of the step-interpolated PR area, found by sweeping
/// every distinct score as a threshold and counting from scratch.
pub fn aupr_sweep(scores: &[f64], is_positive: &[bool]) -> (u128, u128) {
    let pos = is_positive.iter().filter(|&&p| p).count() as u128;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut num, mut den) = (0u128, 1u128);
    let mut prev_tp = 0u128;
    for t in thresholds {
        let tp = scores.iter().zip(is_positive).filter(|(&s, &p)| p && s >= t).count() as u128;
        let called = scores.iter().filter(|&&s| s >= t).count() as u128;
        // Δrecall · precision = (tp − prev)/pos · tp/called
        let (n2, d2) = ((tp - prev_tp) * tp, pos * called);
        num = num * d2 + n2 * den;
        den *= d2;
        let g = gcd(num, den).max(1);
        num /= g;
        den /= g;
        prev_tp = tp;
    }
    (num, den)
}

/// Three unit-variance clusters at (0,0), (8,0), (0,8).
pub const SCENE_MEANS: [[f64; 2]; 3] = [[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]];
pub const IDENTITY: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

pub fn scene(n_per_class: usize, seed: u64) -> Dataset {
    gim::data::synth_gaussian_scene(&SCENE_MEANS, &[IDENTITY; 3], n_per_class, seed).unwrap()
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// MNIST location: `GIM_MNIST_DIR` or `data/mnist` under the workspace.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("GIM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"))
}

/// Single identity layer on `d` inputs, so the trunk output is the input.
pub fn identity_trunk(d: usize) -> TrunkParams {
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    TrunkParams::new(vec![gim::trunk::Layer {
        weights: Tensor::matrix(d, d, w).unwrap(),
        bias: Tensor::zeros(1, d),
        activation: Activation::Identity,
    }])
    .unwrap()
}

/// Importance-sampled `∫ exp(log_likelihood)` over the plane, drawing from a
/// Gaussian twice as wide as `g` on each axis.
pub fn mc_normalization(g: &gim::ClassGaussian, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd: Vec<f64> = g.var_diag.iter().map(|v| 2.0 * v.sqrt()).collect();
    let mut total = 0.0;
    let mut z = vec![0.0; g.dim()];
    for _ in 0..samples {
        let mut log_q = 0.0;
        for j in 0..z.len() {
            let e: f64 = StandardNormal.sample(&mut rng);
            z[j] = g.mean[j] + sd[j] * e;
            log_q += -0.5 * e * e - sd[j].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        total += (gim::gaussian::log_likelihood(&z, g) - log_q).exp();
    }
    total / samples as f64
}

/// A random 2-D Gaussian with means in [-10, 10] and deviations in [0.1, 5].
pub fn random_gaussian_2d(rng: &mut ChaCha8Rng) -> gim::ClassGaussian {
    gim::ClassGaussian {
        mean: vec![rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)],
        var_diag: (0..2).map(|_| rng.random_range(0.1f64..5.0).powi(2)).collect(),
        count: 1,
        log_prior: 0.0,
    }
}

/// Every labeled score list of length 2..=`max_len` over the score alphabet
/// {0, 1, 2} that contains both classes. Returns the number visited.
pub fn for_each_score_list(max_len: usize, mut f: impl FnMut(&[f64], &[bool])) -> usize {
    let mut visited = 0;
    let mut scores = Vec::with_capacity(max_len);
    let mut labels = Vec::with_capacity(max_len);
    for n in 2..=max_len {
        for mask in 1..(1u32 << n) - 1 {
            labels.clear();
            labels.extend((0..n).map(|i| mask >> i & 1 == 1));
            for code in 0..3u32.pow(n as u32) {
                scores.clear();
                let mut c = code;
                for _ in 0..n {
                    scores.push(f64::from(c % 3));
                    c /= 3;
                }
                f(&scores, &labels);
                visited += 1;
            }
        }
    }
    visited
}

/// Checks `auroc` and both `aupr` orientations against the brute-force
/// oracles; returns the largest deviation seen.
pub fn metric_oracle_error(scores: &[f64], is_in: &[bool]) -> f64 {
    use gim::metrics::{aupr, auroc, Positive, ScoredSample};
    let samples: Vec<ScoredSample> = scores.iter().zip(is_in).map(|(&s, &l)| ScoredSample::new(s, l)).collect();
    let mut worst = (auroc(&samples).unwrap() - auroc_pairs(scores, is_in)).abs();
    let (n, d) = aupr_sweep(scores, is_in);
    worst = worst.max((aupr(&samples, Positive::In).unwrap() - n as f64 / d as f64).abs());
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    let flipped: Vec<bool> = is_in.iter().map(|l| !l).collect();
    let (n, d) = aupr_sweep(&neg, &flipped);
    worst.max((aupr(&samples, Positive::Out).unwrap() - n as f64 / d as f64).abs())
}
