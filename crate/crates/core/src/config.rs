//! Experiment configuration files.
//!
//! The format is one `section.key=value` pair per line. Lists are
//! comma-separated, `#` starts a comment and blank lines are ignored.
//!
//! ```text
//! stream.tasks=5
//! trainer.methods=er,kisp
//! trainer.lambda=0.1,1,10
//! run.seeds=0,1,2,3,4
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::datasets::StreamSpec;
use crate::error::{Error, Result};
use crate::trainer::{EvalMode, Method, TrainerConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum StreamSource {
    Synthetic(StreamSpec),
    /// Train and test tensor files split into tasks of consecutive classes.
    Files {
        train: PathBuf,
        test: PathBuf,
        classes_per_task: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stream: StreamSource,
    /// When unset the stream is regenerated from each run seed.
    pub stream_seed: Option<u64>,
    /// Template for every cell; method, lambda, memory and seed are overwritten.
    pub trainer: TrainerConfig,
    pub methods: Vec<Method>,
    pub lambdas: Vec<f64>,
    pub memories: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    canonical: String,
}

const KEYS: &[&str] = &[
    "stream.source",
    "stream.tasks",
    "stream.classes_per_task",
    "stream.d_in",
    "stream.train_per_class",
    "stream.test_per_class",
    "stream.separation",
    "stream.noise",
    "stream.seed",
    "stream.train_path",
    "stream.test_path",
    "model.hidden",
    "model.embedding",
    "trainer.methods",
    "trainer.lambda",
    "trainer.tau",
    "trainer.lr",
    "trainer.batch_size",
    "trainer.replay_batch_size",
    "trainer.iterations",
    "trainer.memory",
    "trainer.eval",
    "run.seeds",
    "run.output",
];

/// Raw key/value pairs, after comment stripping and duplicate checks.
fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut pairs = BTreeMap::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config { line, message: format!("expected key=value, found {content:?}") })?;
        let key = key.trim();
        let value = value.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Config { line, message: format!("unknown key {key:?}") });
        }
        if value.is_empty() {
            return Err(Error::Config { line, message: format!("empty value for {key}") });
        }
        if pairs.insert(key.to_string(), (line, value.to_string())).is_some() {
            return Err(Error::Config { line, message: format!("duplicate key {key}") });
        }
    }
    Ok(pairs)
}

struct Fields(BTreeMap<String, (usize, String)>);

impl Fields {
    fn scalar<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some((line, v)) => {
                v.parse().map_err(|_| Error::Config { line: *line, message: format!("invalid value {v:?} for {key}") })
            }
        }
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.0.get(key) {
            None => Ok(default),
            Some((line, v)) => v
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse()
                        .map_err(|_| Error::Config { line: *line, message: format!("invalid item {item:?} in {key}") })
                })
                .collect(),
        }
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|(_, v)| v.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.0.get(key).map_or(0, |(l, _)| *l)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let fields = Fields(parse_pairs(text)?);
        let defaults = StreamSpec::default();
        let classes_per_task = fields.scalar("stream.classes_per_task", defaults.classes_per_task)?;
        let stream = match fields.text("stream.source").unwrap_or("synthetic") {
            "synthetic" => StreamSource::Synthetic(StreamSpec {
                tasks: fields.scalar("stream.tasks", defaults.tasks)?,
                classes_per_task,
                d_in: fields.scalar("stream.d_in", defaults.d_in)?,
                train_per_class: fields.scalar("stream.train_per_class", defaults.train_per_class)?,
                test_per_class: fields.scalar("stream.test_per_class", defaults.test_per_class)?,
                separation: fields.scalar("stream.separation", defaults.separation)?,
                noise: fields.scalar("stream.noise", defaults.noise)?,
                seed: 0,
            }),
            "files" => {
                let path = |key: &str| {
                    fields.text(key).map(PathBuf::from).ok_or_else(|| Error::Config {
                        line: fields.line("stream.source"),
                        message: format!("{key} is required when stream.source=files"),
                    })
                };
                StreamSource::Files {
                    train: path("stream.train_path")?,
                    test: path("stream.test_path")?,
                    classes_per_task,
                }
            }
            other => {
                return Err(Error::Config {
                    line: fields.line("stream.source"),
                    message: format!("stream.source must be synthetic or files, got {other:?}"),
                })
            }
        };
        let stream_seed = match fields.text("stream.seed") {
            Some(_) => Some(fields.scalar("stream.seed", 0u64)?),
            None => None,
        };

        let base = TrainerConfig::default();
        let eval = match fields.text("trainer.eval").unwrap_or("class") {
            "class" => EvalMode::ClassIncremental,
            "task" => EvalMode::TaskIncremental,
            other => {
                return Err(Error::Config {
                    line: fields.line("trainer.eval"),
                    message: format!("trainer.eval must be class or task, got {other:?}"),
                })
            }
        };
        let trainer = TrainerConfig {
            tau: fields.scalar("trainer.tau", base.tau)?,
            learning_rate: fields.scalar("trainer.lr", base.learning_rate)?,
            batch_size: fields.scalar("trainer.batch_size", base.batch_size)?,
            replay_batch_size: fields.scalar("trainer.replay_batch_size", base.replay_batch_size)?,
            iterations: fields.scalar("trainer.iterations", base.iterations)?,
            hidden: fields.list("model.hidden", base.hidden.clone())?,
            embedding_dim: fields.scalar("model.embedding", base.embedding_dim)?,
            eval,
            ..base.clone()
        };
        let config = RunConfig {
            stream,
            stream_seed,
            methods: fields.list("trainer.methods", vec![Method::Er, Method::Kisp])?,
            lambdas: fields.list("trainer.lambda", vec![base.lambda])?,
            memories: fields.list("trainer.memory", vec![base.memory_capacity])?,
            seeds: fields.list("run.seeds", vec![0])?,
            output: PathBuf::from(fields.text("run.output").unwrap_or("results")),
            trainer,
            canonical: canonical_form(&fields.0),
        };
        config.validate().map_err(|e| Error::Config { line: 0, message: e.to_string() })?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() || self.lambdas.is_empty() || self.memories.is_empty() {
            return Err(Error::InvalidArgument("method, lambda, memory and seed lists must be non-empty".into()));
        }
        if let StreamSource::Synthetic(spec) = &self.stream {
            spec.validate()?;
        }
        for &lambda in &self.lambdas {
            TrainerConfig { lambda, ..self.trainer.clone() }.validate()?;
        }
        Ok(())
    }

    /// Short digest of the parsed settings; formatting and key order do not
    /// affect it.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.join(self.hash())
    }
}

fn canonical_form(pairs: &BTreeMap<String, (usize, String)>) -> String {
    pairs
        .iter()
        .filter(|(k, _)| k.as_str() != "run.output")
        .map(|(k, (_, v))| {
            let items: Vec<&str> = v.split(',').map(str::trim).collect();
            format!("{k}={}\n", items.join(","))
        })
        .collect()
}
