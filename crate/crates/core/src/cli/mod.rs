//! The `gim` command-line tool.
//!
//! Every command reads a JSON experiment config (see [`config`]) and writes
//! its artifacts under the configured output directory. Flags override the
//! config, which overrides built-in defaults.

pub mod config;
pub mod gridmap;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use gridmap::{evaluate_grid, Grid};

use crate::error::{GimError, Result};
use crate::losses::LossKind;
use crate::metrics::{accuracy, EvalReport};
use crate::model::Model;
use crate::trainer::{compare, convergence_csv, train_model, TrainHistory};

#[derive(Debug, Parser)]
#[command(name = "gim", version, about = "Train and evaluate Gaussian isolation machine classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write it with its history.
    Train(TrainArgs),
    /// Score in- and out-of-distribution data with a trained model.
    OodEval(OodEvalArgs),
    /// Export a confidence heat map of a 2-D model.
    Gridmap(GridmapArgs),
    /// Train several losses on identical data and seeds.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub target_tpr: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct OodEvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Supplies the training data (for calibration) and the OOD set.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct GridmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// `min,max`
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    pub x_range: Option<[f64; 2]>,
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    pub y_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

fn parse_range(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected `min,max`, got `{s}`"));
    }
    let a: f64 = parts[0].trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = parts[1].trim().parse().map_err(|e| format!("{e}"))?;
    Ok([a, b])
}

/// Loads the config and applies flag overrides, re-validating the result.
pub fn load_config(path: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(d) = &o.out_dir {
        cfg.outputs.dir = std::env::current_dir().map_err(|e| GimError::io(".", e))?.join(d);
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(l) = o.loss {
        cfg.train.loss = l;
    }
    if let Some(a) = o.alpha {
        cfg.train.alpha = a;
    }
    if let Some(l) = o.lambda {
        cfg.train.lambda = l;
    }
    if let Some(t) = o.target_tpr {
        cfg.ood.target_tpr = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GimError::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| GimError::io(path, e))
}

fn write_history(dir: &Path, prefix: &str, h: &TrainHistory) -> Result<()> {
    write(&dir.join(format!("{prefix}history.csv")), h.to_csv(false))?;
    write(&dir.join(format!("{prefix}timing.csv")), h.timing_csv())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub model_path: PathBuf,
    pub train_acc: f64,
    pub test_acc: f64,
    pub threshold: f64,
}

/// Trains, calibrates at the target TPR, and writes `model.json`,
/// `history.csv`, and `timing.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let data = cfg.prepare_data()?;
    let out = train_model(&cfg.trunk_spec(), &data.train, Some(&data.test), &cfg.train.to_train_config())?;
    let mut model = out.model;
    let cal = model.calibrate(&data.train, cfg.ood.target_tpr)?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let model_path = dir.join("model.json");
    model.save(&model_path)?;
    write_history(&dir, "", &out.history)?;
    let last = out.history.last().expect("at least one epoch");
    Ok(TrainSummary {
        model_path,
        train_acc: last.train_acc,
        test_acc: last.test_acc.expect("test set evaluated"),
        threshold: cal.threshold,
    })
}

/// Recalibrates `model` on the config's training data, scores the test set
/// against the OOD set, and writes `ood_report.json`.
pub fn cmd_ood_eval(model: &mut Model, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let data = cfg.prepare_data()?;
    let ood = data
        .ood
        .ok_or_else(|| GimError::Config("ood-eval needs an `ood.out` section".into()))?;
    let cal = model.calibrate(&data.train, cfg.ood.target_tpr)?;
    let inside = model.classify(data.test.features())?;
    let outside = model.scores(ood.features())?;
    let in_scores: Vec<f64> = inside.iter().map(|&(_, s)| s).collect();
    let mut report = EvalReport::compute(model.detector_name(), &in_scores, &outside, cal.threshold)?;
    report.degenerate_threshold = cal.degenerate;
    if model.num_classes() == data.test.num_classes() {
        let pred: Vec<usize> = inside.iter().map(|&(c, _)| c).collect();
        report.accuracy = Some(accuracy(&pred, data.test.labels())?);
    }
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| GimError::Model(e.to_string()))?;
    write(&dir.join("ood_report.json"), json + "\n")?;
    Ok(report)
}

/// Writes `gridmap.pgm` and `gridmap.csv` into `dir`.
pub fn cmd_gridmap(model: &Model, x_range: [f64; 2], y_range: [f64; 2], resolution: usize, dir: &Path) -> Result<Grid> {
    let grid = evaluate_grid(model, x_range, y_range, resolution)?;
    create_dir(dir)?;
    write(&dir.join("gridmap.pgm"), grid.to_pgm())?;
    write(&dir.join("gridmap.csv"), grid.to_csv())?;
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub loss: LossKind,
    pub params: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub const COMPARE_HEADER: &str = "loss,params,train_acc,test_acc";

impl CompareRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.loss, self.params, self.train_acc, self.test_acc)
    }
}

/// Trains every loss in `train.losses`, writing `model_<loss>.json`,
/// `<loss>_history.csv`, `compare.csv`, and `convergence.csv`.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    let data = cfg.prepare_data()?;
    let results = compare(
        &cfg.trunk_spec(),
        &data.train,
        Some(&data.test),
        &cfg.train.to_train_config(),
        &cfg.train.losses,
    )?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let mut rows = Vec::new();
    let mut table = format!("{COMPARE_HEADER}\n");
    for (loss, outcome) in &results {
        let mut model = outcome.model.clone();
        model.calibrate(&data.train, cfg.ood.target_tpr)?;
        model.save(&dir.join(format!("model_{loss}.json")))?;
        write_history(&dir, &format!("{loss}_"), &outcome.history)?;
        let last = outcome.history.last().expect("at least one epoch");
        let row = CompareRow {
            loss: *loss,
            params: model.trunk().param_count(),
            train_acc: last.train_acc,
            test_acc: last.test_acc.expect("test set evaluated"),
        };
        table.push_str(&row.csv());
        table.push('\n');
        rows.push(row);
    }
    write(&dir.join("compare.csv"), table)?;
    write(&dir.join("convergence.csv"), convergence_csv(&results))?;
    Ok(rows)
}

/// Runs a parsed command line, printing results to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = load_config(&a.config, &a.overrides)?;
            let s = cmd_train(&cfg)?;
            println!(
                "loss={} train_acc={:.4} test_acc={:.4} threshold={} model={}",
                cfg.train.loss,
                s.train_acc,
                s.test_acc,
                s.threshold,
                s.model_path.display()
            );
        }
        Command::OodEval(a) => {
            let cfg = load_config(&a.config, &a.overrides)?;
            let mut model = Model::load(&a.model)?;
            let r = cmd_ood_eval(&mut model, &cfg)?;
            println!("{}\n{}", EvalReport::TABLE_HEADER, r.table_row());
        }
        Command::Gridmap(a) => {
            let cfg = match &a.config {
                Some(p) => Some(load_config(p, &Overrides::default())?),
                None => None,
            };
            let grid_cfg = cfg.as_ref().map(|c| c.gridmap.clone()).unwrap_or_default();
            let dir = match (&a.out_dir, &cfg) {
                (Some(d), _) => d.clone(),
                (None, Some(c)) => c.output_dir(),
                (None, None) => return Err(GimError::Config("gridmap needs --out-dir or --config".into())),
            };
            let model = Model::load(&a.model)?;
            let res = a.resolution.unwrap_or(grid_cfg.resolution);
            let g = cmd_gridmap(
                &model,
                a.x_range.unwrap_or(grid_cfg.x_range),
                a.y_range.unwrap_or(grid_cfg.y_range),
                res,
                &dir,
            )?;
            println!("wrote {r}x{r} {} map to {}", model.detector_name(), dir.display(), r = g.resolution);
        }
        Command::Compare(a) => {
            let cfg = load_config(&a.config, &a.overrides)?;
            println!("{COMPARE_HEADER}");
            for row in cmd_compare(&cfg)? {
                println!("{}", row.csv());
            }
        }
    }
    Ok(())
}
