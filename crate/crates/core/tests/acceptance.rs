//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! MNIST is read from `GIM_MNIST_DIR`, falling back to `data/mnist` in the
//! workspace (see `scripts/fetch_mnist.sh`).

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{
    covariance_trace, for_each_score_list, mc_normalization, metric_oracle_error, mnist_dir, random_gaussian_2d,
    workspace_root, GradCase, REL_TOL,
};
use gim::cli::config::DatasetConfig;
use gim::cli::{cmd_compare, cmd_ood_eval, cmd_train, ExperimentConfig, TrainSummary};
use gim::losses::ctv;
use gim::metrics::{pool, rates_at_threshold, EvalReport};
use gim::{LossKind, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Scratch {
    dir: tempfile::TempDir,
}

impl Scratch {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn config(name: &str, out: &Path) -> Result<ExperimentConfig, String> {
    let path = workspace_root().join("configs").join(name);
    let mut cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    if let DatasetConfig::Mnist { dir, .. } = &mut cfg.dataset {
        let mnist = mnist_dir();
        if !mnist.join("train-images-idx3-ubyte").exists() {
            return Err(format!(
                "MNIST not found in {} (run scripts/fetch_mnist.sh or set GIM_MNIST_DIR)",
                mnist.display()
            ));
        }
        *dir = fs::canonicalize(mnist).map_err(|e| e.to_string())?;
    }
    cfg.outputs.dir = out.to_path_buf();
    Ok(cfg)
}

fn train(cfg: &ExperimentConfig, loss: LossKind, out: &Path) -> Result<TrainSummary, String> {
    let mut cfg = cfg.clone();
    cfg.train.loss = loss;
    cfg.outputs.dir = out.to_path_buf();
    cmd_train(&cfg).map_err(|e| format!("{loss}: {e}"))
}

fn ood_eval(model: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport, String> {
    let mut model = Model::load(model).map_err(|e| e.to_string())?;
    let mut cfg = cfg.clone();
    cfg.outputs.dir = out.to_path_buf();
    cmd_ood_eval(&mut model, &cfg).map_err(|e| e.to_string())
}

fn a1_gradients(_: &Scratch) -> Outcome {
    let (mut accepted, mut skipped, mut worst) = (0, 0, 0.0f64);
    let mut seed = 0u64;
    while accepted < 50 {
        let case = GradCase::random(1_000 + seed);
        seed += 1;
        // Central differences are meaningless across a rectifier kink.
        if case.kink_margin() <= 1e-3 {
            skipped += 1;
            continue;
        }
        accepted += 1;
        worst = worst.max(case.grad_error(LossKind::Ctv)).max(case.grad_error(LossKind::Ch));
    }
    check(
        worst < REL_TOL,
        format!("50 configs ({skipped} near-kink draws skipped), max relative error {worst:.2e} (< 1e-4)"),
    )
}

fn a2_trace(_: &Scratch) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let v = ctv(&Tensor::from_rows(&rows).unwrap(), &mu).map_err(|e| e.to_string())?;
        worst = worst.max((v - covariance_trace(&rows)).abs());
    }
    check(worst <= 1e-10, format!("200 configs, max |ctv - trace| {worst:.2e} (<= 1e-10)"))
}

fn a3_scene(s: &Scratch) -> Outcome {
    let cfg = config("scene.json", &s.path("a3"))?;
    let mut lines = Vec::new();
    let mut gim_ok = false;
    let mut best_gim_auroc = 0.0f64;
    for loss in [LossKind::Ctv, LossKind::Ch] {
        let dir = s.path(&format!("a3-{loss}"));
        let sum = train(&cfg, loss, &dir)?;
        let r = ood_eval(&sum.model_path, &cfg, &dir)?;
        gim_ok |= sum.test_acc >= 0.99 && r.auroc >= 0.99;
        best_gim_auroc = best_gim_auroc.max(r.auroc);
        lines.push(format!("{loss} acc {:.4} auroc {:.4}", sum.test_acc, r.auroc));
    }
    let dir = s.path("a3-softmax");
    let sum = train(&cfg, LossKind::Softmax, &dir)?;
    let soft = ood_eval(&sum.model_path, &cfg, &dir)?;
    lines.push(format!("softmax acc {:.4} auroc {:.4}", sum.test_acc, soft.auroc));
    check(gim_ok && soft.auroc < best_gim_auroc, lines.join("; "))
}

struct MnistRuns {
    ctv_model: PathBuf,
    ch_model: PathBuf,
}

fn a4_mnist(s: &Scratch, runs: &mut Option<MnistRuns>) -> Outcome {
    let cfg = config("mnist.json", &s.path("a4"))?;
    let mut acc = Vec::new();
    let mut models = Vec::new();
    for loss in [LossKind::Ctv, LossKind::Ch, LossKind::Softmax] {
        let sum = train(&cfg, loss, &s.path(&format!("a4-{loss}")))?;
        acc.push(sum.test_acc);
        models.push(sum.model_path);
    }
    *runs = Some(MnistRuns {
        ctv_model: models[0].clone(),
        ch_model: models[1].clone(),
    });
    let ok = acc.iter().all(|&a| a >= 0.96) && acc[..2].iter().all(|&a| acc[2] - a <= 0.015);
    check(
        ok,
        format!(
            "test accuracy ctv {:.4}, ch {:.4}, softmax {:.4} (each >= 0.96, GIM within 1.5pp)",
            acc[0], acc[1], acc[2]
        ),
    )
}

fn a5_holdout(s: &Scratch) -> Outcome {
    let cfg = config("mnist-holdout.json", &s.path("a5"))?;
    let mut reports = Vec::new();
    for loss in [LossKind::Ctv, LossKind::Softmax] {
        let dir = s.path(&format!("a5-{loss}"));
        let sum = train(&cfg, loss, &dir)?;
        reports.push(ood_eval(&sum.model_path, &cfg, &dir)?);
    }
    let (g, b) = (&reports[0], &reports[1]);
    check(
        g.auroc >= 0.85 && g.auroc > b.auroc && g.fpr_at_threshold < b.fpr_at_threshold,
        format!(
            "GIM auroc {:.4} fpr {:.4}; max-softmax auroc {:.4} fpr {:.4}",
            g.auroc, g.fpr_at_threshold, b.auroc, b.fpr_at_threshold
        ),
    )
}

fn a6_noise(s: &Scratch, runs: &Option<MnistRuns>) -> Outcome {
    let runs = runs.as_ref().ok_or("needs the MNIST models from A4")?;
    let mut ok = true;
    let mut lines = Vec::new();
    for (name, file) in [("uniform", "mnist.json"), ("gaussian", "mnist-gaussian-noise.json")] {
        let cfg = config(file, &s.path("a6"))?;
        let r = ood_eval(&runs.ctv_model, &cfg, &s.path(&format!("a6-{name}")))?;
        ok &= r.fpr_at_threshold <= 0.05 && r.auroc >= 0.99;
        lines.push(format!("{name}: fpr {:.4} auroc {:.4}", r.fpr_at_threshold, r.auroc));
        // The ch model is reported for reference only.
        let r = ood_eval(&runs.ch_model, &cfg, &s.path(&format!("a6-{name}-ch")))?;
        lines.push(format!("[ch {name}: fpr {:.4} auroc {:.4}]", r.fpr_at_threshold, r.auroc));
    }
    check(ok, lines.join("; "))
}

fn a7_metrics(_: &Scratch) -> Outcome {
    let mut worst = 0.0f64;
    let n = for_each_score_list(8, |s, l| worst = worst.max(metric_oracle_error(s, l)));
    let s = pool(&[0.9, 0.4], &[0.5, 0.1]);
    let hand = [
        rates_at_threshold(&pool(&[2.0, 3.0], &[0.0, 1.0]), 1.5),
        rates_at_threshold(&s, 0.45),
        rates_at_threshold(&s, -1.0),
    ]
    .map(|r| r.unwrap());
    let hand_ok = hand == [(1.0, 0.0), (0.5, 0.5), (1.0, 1.0)];
    check(
        worst <= 1e-15 && hand_ok,
        format!("{n} labeled lists, max deviation {worst:.1e}; hand-counted rates {}", if hand_ok { "match" } else { "differ" }),
    )
}

fn a8_normalization(_: &Scratch) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let g = random_gaussian_2d(&mut rng);
        worst = worst.max((mc_normalization(&g, 1_000_000, 100 + i) - 1.0).abs());
    }
    check(worst < 0.01, format!("10 Gaussians x 1e6 samples, max |integral - 1| {worst:.4} (< 0.01)"))
}

fn a9_convergence(s: &Scratch) -> Outcome {
    let mut cfg = config("mnist.json", &s.path("a9"))?;
    if let DatasetConfig::Mnist { train_limit, test_limit, .. } = &mut cfg.dataset {
        *train_limit = Some(6_000);
        *test_limit = Some(1_000);
    }
    cfg.train.epochs = 3;
    let mut outputs = Vec::new();
    for run in ["a9-first", "a9-second"] {
        cfg.outputs.dir = s.path(run);
        cmd_compare(&cfg).map_err(|e| e.to_string())?;
        outputs.push(s.path(run));
    }
    let mut files = vec!["convergence.csv".to_string(), "compare.csv".to_string()];
    for loss in ["ctv", "ch", "softmax"] {
        files.push(format!("{loss}_history.csv"));
        files.push(format!("model_{loss}.json"));
    }
    for f in &files {
        let a = fs::read(outputs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(outputs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs between identical runs"));
        }
    }
    let conv = fs::read_to_string(outputs[0].join("convergence.csv")).unwrap();
    let header = conv.lines().next().unwrap_or_default().to_string();
    let curves = ["ctv_test_acc", "ch_test_acc", "softmax_test_acc"].iter().all(|c| header.contains(c));
    check(
        curves && conv.lines().count() == 1 + cfg.train.epochs,
        format!("{} files byte-identical across reruns; {} epochs of ctv/ch/softmax curves", files.len(), cfg.train.epochs),
    )
}

fn main() {
    let scratch = Scratch {
        dir: tempfile::tempdir().expect("scratch directory"),
    };
    let mut mnist_runs = None;
    let mut failed = 0;
    let mut run = |id: &str, name: &str, budget: Duration, f: &mut dyn FnMut(&Scratch) -> Outcome| {
        let start = Instant::now();
        let outcome = f(&scratch);
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > budget => Err(format!("{d}; took {:.0}s, budget {}s", took.as_secs_f64(), budget.as_secs())),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if outcome.is_err() {
            failed += 1;
        }
        println!("{id} {tag} {name}: {detail} [{:.1}s]", took.as_secs_f64());
    };
    let secs = Duration::from_secs;
    run("A1", "gradient fidelity", secs(60), &mut a1_gradients);
    run("A2", "trace identity", secs(10), &mut a2_trace);
    run("A3", "three-cluster scene", secs(120), &mut a3_scene);
    run("A4", "MNIST accuracy parity", secs(1200), &mut |s| a4_mnist(s, &mut mnist_runs));
    run("A5", "MNIST holdout OOD", secs(1200), &mut a5_holdout);
    run("A6", "noise OOD", secs(300), &mut |s| a6_noise(s, &mnist_runs));
    run("A7", "metric oracles", secs(60), &mut a7_metrics);
    run("A8", "likelihood normalization", secs(60), &mut a8_normalization);
    run("A9", "convergence history", secs(1200), &mut a9_convergence);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
