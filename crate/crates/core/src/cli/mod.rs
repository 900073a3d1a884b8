//! Command-line surface: `train-teacher`, `distill`, `evaluate`, `plot`,
//! `cam`, `make-fixture` and `sweep`.

pub mod config;
pub mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use self::config::{env_overrides, resolve, FlagOverrides, RunConfig};
use crate::data::fixture::{write_fixture, FixtureSpec};
use crate::data::{load_dataset, split_dataset, Image, SplitData};
use crate::error::{Error, Result};
use crate::explain::{grad_cam, write_cam};
use crate::metrics::{evaluate, MetricsReport};
use crate::models::InputSize;
use crate::training::{distill_student, pretrain_teacher, Checkpoint, DistillConfig, Method, RunDir, REPORT};

#[derive(Debug, Parser)]
#[command(name = "kdistill", version, about = "Train teachers, distill students, evaluate and explain them")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Dataset root (overrides the configuration).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
    /// Toy backbones with the toy loss and optimiser profile.
    #[arg(long)]
    pub toy: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Method whose teacher objective to use (self-supervised methods add the contrastive term).
        #[arg(long)]
        method: Option<String>,
    },
    /// Distill a student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate a checkpoint on a split and write a metrics report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path; printed to standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw confusion-matrix and ROC panels for metrics reports.
    Plot {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out_dir: PathBuf,
    },
    /// Grad-CAM heat map and overlay for one image.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class_index: usize,
        #[arg(long, default_value = "cam")]
        out_dir: PathBuf,
    },
    /// Generate a synthetic labelled image corpus.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        noise: Option<f64>,
        /// Random hue shift as a fraction of the gap between class hues.
        #[arg(long)]
        hue_jitter: Option<f64>,
    },
    /// Run the method grid over several seeds and summarise the reports.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated methods; the full grid when absent.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Reuse one teacher for every run instead of training one per seed.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

fn flags(common: &Common, method: Option<&String>, seeds: Option<&Vec<u64>>) -> FlagOverrides {
    FlagOverrides {
        toy: common.toy,
        seed: common.seed,
        seeds: seeds.cloned(),
        method: method.cloned(),
        run_dir: common.run_dir.clone(),
        dataset_root: common.dataset.clone(),
    }
}

fn load_config(common: &Common, method: Option<&String>, seeds: Option<&Vec<u64>>) -> Result<RunConfig> {
    resolve(common.config.as_deref(), env_overrides(std::env::vars()), &flags(common, method, seeds))
}

/// Train, validation and test splits, sized for `input`.
pub struct Splits {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

pub fn load_splits(cfg: &RunConfig, input: InputSize) -> Result<Splits> {
    let ds = load_dataset(&cfg.dataset_root, &cfg.manifest_path())?;
    let (train, val, test) = split_dataset(&ds, &cfg.split)?;
    Ok(Splits {
        train: SplitData::load(train, input, cfg.in_memory)?,
        val: SplitData::load(val, input, cfg.in_memory)?,
        test: SplitData::load(test, input, cfg.in_memory)?,
    })
}

fn class_count(cfg: &RunConfig) -> Result<usize> {
    let ds = load_dataset(&cfg.dataset_root, &cfg.manifest_path())?;
    Ok(ds.class_count())
}

fn prepare_run_dir(cfg: &RunConfig, dir: &Path, force: bool) -> Result<RunDir> {
    let rd = RunDir::create(dir, force)?;
    rd.write_config(&cfg.to_toml()?)?;
    Ok(rd)
}

fn train_teacher_into(cfg: &RunConfig, training: &DistillConfig, splits: &Splits, dir: &Path, force: bool) -> Result<Checkpoint> {
    let spec = cfg.teacher.spec(splits.train.set.class_count())?;
    let rd = prepare_run_dir(cfg, dir, force)?;
    let outcome = pretrain_teacher(training, &spec, &splits.train, &splits.val, Some(&rd))?;
    evaluate(&outcome.best.model()?, &splits.test, cfg.eval_batch_size)?.save(&rd.join(REPORT))?;
    Ok(outcome.best)
}

fn distill_into(cfg: &RunConfig, training: &DistillConfig, teacher: Option<&Checkpoint>, splits: &Splits, dir: &Path, force: bool) -> Result<MetricsReport> {
    let spec = cfg.student.spec(splits.train.set.class_count())?;
    let rd = prepare_run_dir(cfg, dir, force)?;
    let outcome = distill_student(training, &spec, teacher, &splits.train, &splits.val, Some(&rd))?;
    let report = evaluate(&outcome.best.model()?, &splits.test, cfg.eval_batch_size)?;
    report.save(&rd.join(REPORT))?;
    Ok(report)
}

fn shared_input(cfg: &RunConfig, classes: usize) -> Result<InputSize> {
    let t = cfg.teacher.spec(classes)?.input_size;
    let s = cfg.student.spec(classes)?.input_size;
    if t != s {
        return Err(Error::Config(format!("teacher input {t:?} and student input {s:?} must match")));
    }
    Ok(s)
}

pub fn cmd_train_teacher(common: &Common, method: Option<&String>) -> Result<PathBuf> {
    let cfg = load_config(common, method, None)?;
    let classes = class_count(&cfg)?;
    let splits = load_splits(&cfg, cfg.teacher.spec(classes)?.input_size)?;
    train_teacher_into(&cfg, &cfg.training, &splits, &cfg.run_dir, common.force)?;
    Ok(cfg.run_dir)
}

pub fn cmd_distill(common: &Common, teacher: Option<&Path>, method: Option<&String>) -> Result<PathBuf> {
    if let Some(m) = method {
        m.parse::<Method>()?;
    }
    let cfg = load_config(common, method, None)?;
    let teacher = match teacher {
        Some(p) => Some(Checkpoint::load(p)?),
        None if cfg.training.method.terms().needs_teacher() => {
            return Err(Error::Config(format!("method {} needs --teacher", cfg.training.method)))
        }
        None => None,
    };
    let classes = class_count(&cfg)?;
    let splits = load_splits(&cfg, shared_input(&cfg, classes)?)?;
    distill_into(&cfg, &cfg.training, teacher.as_ref(), &splits, &cfg.run_dir, common.force)?;
    Ok(cfg.run_dir)
}

pub fn cmd_evaluate(common: &Common, checkpoint: &Path, split: &str) -> Result<MetricsReport> {
    let cfg = load_config(common, None, None)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let input = model.spec().input_size;
    let data = match split {
        "all" => SplitData::load(load_dataset(&cfg.dataset_root, &cfg.manifest_path())?, input, cfg.in_memory)?,
        "train" | "val" | "test" => {
            let s = load_splits(&cfg, input)?;
            match split {
                "train" => s.train,
                "val" => s.val,
                _ => s.test,
            }
        }
        other => return Err(Error::invalid(format!("unknown split `{other}` (train, val, test, all)"))),
    };
    evaluate(&model, &data, cfg.eval_batch_size)
}

fn report_stem(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    if stem == "report" {
        if let Some(parent) = path.parent().and_then(Path::file_name).and_then(|s| s.to_str()) {
            return parent.to_string();
        }
    }
    stem.to_string()
}

pub fn cmd_plot(reports: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for p in reports {
        let report = MetricsReport::load(p)?;
        let stem = report_stem(p);
        plot::write_plots(&report, out_dir, &stem)?;
        written.push(out_dir.join(format!("{stem}_confusion.png")));
        written.push(out_dir.join(format!("{stem}_roc.png")));
    }
    Ok(written)
}

pub fn cmd_cam(checkpoint: &Path, image: &Path, class_index: usize, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let img = Image::load(image)?;
    let map = grad_cam(&model, &img, class_index)?;
    if map.degenerate {
        log::warn!("activation map is identically zero");
    }
    std::fs::create_dir_all(out_dir)?;
    let heat = out_dir.join("cam_heat.png");
    let over = out_dir.join("cam_overlay.png");
    write_cam(&map, &img, &heat, &over)?;
    Ok((heat, over))
}

pub fn cmd_make_fixture(out: &Path, spec: &FixtureSpec) -> Result<Vec<usize>> {
    write_fixture(out, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub runs: usize,
    pub acc: MeanStd,
    pub bacc: MeanStd,
    pub auc_macro: MeanStd,
    pub map_macro: MeanStd,
}

/// Mean ± std of each metric per method, in first-appearance order.
pub fn summarize(results: &[(Method, u64, MetricsReport)]) -> Vec<SummaryRow> {
    let mut order: Vec<Method> = Vec::new();
    let mut by: BTreeMap<Method, Vec<&MetricsReport>> = BTreeMap::new();
    for (m, _, r) in results {
        if !order.contains(m) {
            order.push(*m);
        }
        by.entry(*m).or_default().push(r);
    }
    order
        .into_iter()
        .map(|m| {
            let rs = &by[&m];
            let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                method: m.name().into(),
                runs: rs.len(),
                acc: col(|r| r.acc),
                bacc: col(|r| r.bacc),
                auc_macro: col(|r| r.auc_macro),
                map_macro: col(|r| r.map_macro),
            }
        })
        .collect()
}

pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let mut s = String::from("| method | runs | ACC | BACC | AUC | mAP |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let f = |m: &MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.method,
            r.runs,
            f(&r.acc),
            f(&r.bacc),
            f(&r.auc_macro),
            f(&r.map_macro)
        ));
    }
    s
}

fn method_slug(m: Method) -> String {
    m.name().to_lowercase().replace('+', "_")
}

pub fn cmd_sweep(common: &Common, seeds: Option<&Vec<u64>>, methods: Option<&Vec<String>>, teacher: Option<&Path>) -> Result<Vec<SummaryRow>> {
    let methods: Vec<Method> = match methods {
        Some(ms) => ms.iter().map(|m| m.parse()).collect::<Result<_>>()?,
        None => Method::GRID.to_vec(),
    };
    let cfg = load_config(common, None, seeds)?;
    let root = cfg.run_dir.clone();
    if root.exists() && std::fs::read_dir(&root)?.next().is_some() && !common.force {
        return Err(Error::RunDirExists(root));
    }
    std::fs::create_dir_all(&root)?;
    let classes = class_count(&cfg)?;
    let splits = load_splits(&cfg, shared_input(&cfg, classes)?)?;
    let shared_teacher = teacher.map(Checkpoint::load).transpose()?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let mut teachers: BTreeMap<bool, Checkpoint> = BTreeMap::new();
        for &m in &methods {
            let training = DistillConfig { seed, method: m, ..cfg.training.clone() };
            let teacher = match (&shared_teacher, m.terms().needs_teacher()) {
                (_, false) => None,
                (Some(t), true) => Some(t.clone()),
                (None, true) => {
                    let ss = m.self_supervised();
                    if !teachers.contains_key(&ss) {
                        let kind = if ss { "contrastive" } else { "plain" };
                        let tcfg = DistillConfig { method: if ss { Method::SsdKd } else { Method::Dkd }, ..training.clone() };
                        let dir = root.join("teachers").join(format!("{kind}-seed{seed}"));
                        teachers.insert(ss, train_teacher_into(&cfg, &tcfg, &splits, &dir, common.force)?);
                    }
                    teachers.get(&ss).cloned()
                }
            };
            let dir = root.join(method_slug(m)).join(format!("seed{seed}"));
            let report = distill_into(&cfg, &training, teacher.as_ref(), &splits, &dir, common.force)?;
            log::info!("{m} seed {seed}: acc {:.4} bacc {:.4}", report.acc, report.bacc);
            results.push((m, seed, report));
        }
    }
    let rows = summarize(&results);
    std::fs::write(root.join("summary.json"), serde_json::to_string_pretty(&rows)?)?;
    std::fs::write(root.join("summary.md"), summary_markdown(&rows))?;
    Ok(rows)
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { common, method } => {
            let dir = cmd_train_teacher(&common, method.as_ref())?;
            println!("{}", dir.display());
        }
        Command::Distill { common, teacher, method } => {
            let dir = cmd_distill(&common, teacher.as_deref(), method.as_ref())?;
            println!("{}", dir.display());
        }
        Command::Evaluate { common, checkpoint, split, out } => {
            let report = cmd_evaluate(&common, &checkpoint, &split)?;
            match out {
                Some(p) => report.save(&p)?,
                None => println!("{}", report.to_json()?),
            }
        }
        Command::Plot { reports, out_dir } => {
            for p in cmd_plot(&reports, &out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Cam { checkpoint, image, class_index, out_dir } => {
            let (heat, over) = cmd_cam(&checkpoint, &image, class_index, &out_dir)?;
            println!("{}\n{}", heat.display(), over.display());
        }
        Command::MakeFixture { out, classes, per_class, size, seed, noise, hue_jitter } => {
            let defaults = FixtureSpec::default();
            let spec = FixtureSpec {
                classes,
                per_class: vec![per_class],
                height: size,
                width: size,
                seed,
                noise: noise.unwrap_or(defaults.noise),
                hue_jitter: hue_jitter.unwrap_or(defaults.hue_jitter),
            };
            let counts = cmd_make_fixture(&out, &spec)?;
            println!("{}: {} images, counts {counts:?}", out.display(), counts.iter().sum::<usize>());
        }
        Command::Sweep { common, seeds, methods, teacher } => {
            let rows = cmd_sweep(&common, seeds.as_ref(), methods.as_ref(), teacher.as_deref())?;
            print!("{}", summary_markdown(&rows));
        }
    }
    Ok(())
}
