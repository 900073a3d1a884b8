//! Layered run configuration: defaults < TOML file < environment < flags.
//!
//! Environment overrides use `KDISTILL__<section>__<key>=<value>`, with the
//! value parsed as a TOML literal (falling back to a string), e.g.
//! `KDISTILL__TRAINING__MAX_EPOCHS=5`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::models::BackboneSpec;
use crate::training::DistillConfig;

pub const ENV_PREFIX: &str = "KDISTILL__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    /// Square input side; registry default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<usize>,
    /// `.safetensors` file with pretrained weights. Without it the backbone
    /// starts from random initialisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

impl ModelSection {
    fn named(name: &str) -> Self {
        Self { name: name.into(), input: None, pretrained: None }
    }

    pub fn spec(&self, classes: usize) -> Result<BackboneSpec> {
        let mut spec = BackboneSpec::registered(&self.name, classes)?;
        if let Some(side) = self.input {
            spec = spec.with_input(side, side);
        }
        spec.pretrained_source = match &self.pretrained {
            Some(p) => Some(p.display().to_string()),
            None => {
                if spec.pretrained_source.is_some() {
                    log::warn!("{}: no pretrained weights configured, starting from random initialisation", spec.name);
                }
                None
            }
        };
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    /// Manifest path, relative to `dataset_root` unless absolute.
    pub manifest: PathBuf,
    pub run_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Toy backbones and toy loss/optimiser profile.
    pub toy: bool,
    /// Decode every image once up front instead of per batch.
    pub in_memory: bool,
    pub eval_batch_size: usize,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub split: SplitSpec,
    pub training: DistillConfig,
}

impl RunConfig {
    pub fn defaults(toy: bool) -> Self {
        let (teacher, student, training) = if toy {
            ("tiny-teacher", "tiny-student", DistillConfig::toy())
        } else {
            ("resnet50", "mobilenetv2", DistillConfig::default())
        };
        Self {
            dataset_root: PathBuf::from("data"),
            manifest: PathBuf::from("manifest.csv"),
            run_dir: PathBuf::from("runs/default"),
            seeds: vec![0],
            toy,
            in_memory: toy,
            eval_batch_size: 64,
            teacher: ModelSection::named(teacher),
            student: ModelSection::named(student),
            split: SplitSpec::default(),
            training,
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.manifest.is_absolute() {
            self.manifest.clone()
        } else {
            self.dataset_root.join(&self.manifest)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Values given on the command line; `None` leaves lower layers in place.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub toy: bool,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub method: Option<String>,
    pub run_dir: Option<PathBuf>,
    pub dataset_root: Option<PathBuf>,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("table");
    }
    cur.insert(last.clone(), value);
}

fn parse_literal(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// `KDISTILL__A__B=v` pairs as an override table.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Table {
    let mut table = Table::new();
    for (k, v) in vars {
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
        let path: Vec<String> = rest.split("__").filter(|s| !s.is_empty()).map(str::to_lowercase).collect();
        if !path.is_empty() {
            set_path(&mut table, &path, parse_literal(&v));
        }
    }
    table
}

fn flag_table(flags: &FlagOverrides) -> Table {
    let mut t = Table::new();
    if flags.toy {
        t.insert("toy".into(), Value::Boolean(true));
    }
    let mut training = Table::new();
    if let Some(s) = flags.seed {
        training.insert("seed".into(), Value::Integer(s as i64));
        t.insert("seeds".into(), Value::Array(vec![Value::Integer(s as i64)]));
    }
    if let Some(ss) = &flags.seeds {
        t.insert("seeds".into(), Value::Array(ss.iter().map(|&s| Value::Integer(s as i64)).collect()));
    }
    if let Some(m) = &flags.method {
        training.insert("method".into(), Value::String(m.clone()));
    }
    if !training.is_empty() {
        t.insert("training".into(), Value::Table(training));
    }
    if let Some(d) = &flags.run_dir {
        t.insert("run_dir".into(), Value::String(d.display().to_string()));
    }
    if let Some(d) = &flags.dataset_root {
        t.insert("dataset_root".into(), Value::String(d.display().to_string()));
    }
    t
}

/// Resolve the configuration from its layers.
pub fn resolve(file: Option<&Path>, env: Table, flags: &FlagOverrides) -> Result<RunConfig> {
    let file_table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Load { path: p.to_path_buf(), reason: e.to_string() })?;
            toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    let flags = flag_table(flags);
    let toy = [&flags, &env, &file_table]
        .iter()
        .find_map(|t| t.get("toy").and_then(Value::as_bool))
        .unwrap_or(false);
    let defaults = toml::to_string(&RunConfig::defaults(toy)).map_err(|e| Error::Config(e.to_string()))?;
    let mut table: Table = toml::from_str(&defaults).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut table, file_table);
    merge(&mut table, env);
    merge(&mut table, flags);
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("seeds must not be empty".into()));
    }
    cfg.training.validate()?;
    Ok(cfg)
}
