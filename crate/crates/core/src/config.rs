//! Run configuration: a flat `section.key = value` text format.
//!
//! Every run is described by one file. Parsing validates everything up
//! front — unknown keys are rejected, values are range-checked — and
//! the effective config (defaults applied) serializes back to the same
//! format, so the echoed copy in the output directory reproduces the
//! run exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::adam::AdamHyper;
use crate::decoder::{DecoderKind, Norm};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{KgError, Result};
use crate::eval::{RankMode, DEFAULT_EVAL_SEED};
use crate::sampler::SamplerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuntimeMode {
    Local,
    Distributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    InProc,
    Tcp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub mode: RuntimeMode,
    pub workers: usize,
    /// Explicit shard count; unset means `max(1, workers / 2)`.
    pub shards: Option<usize>,
    pub transport: Transport,
    /// Shard server addresses, TCP mode.
    pub endpoints: Vec<String>,
    /// Coordinator address, TCP mode.
    pub coordinator: Option<String>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            mode: RuntimeMode::Local,
            workers: 4,
            shards: None,
            transport: Transport::InProc,
            endpoints: Vec::new(),
            coordinator: None,
        }
    }
}

impl RuntimeConfig {
    pub fn resolved_shards(&self) -> usize {
        self.shards.unwrap_or_else(|| (self.workers / 2).max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    /// Fanout schedule as configured; see [`RunConfig::sampler_config`].
    pub fanout: Vec<usize>,
    pub negatives: usize,
    pub filter_false_negatives: bool,
    pub inverse_edges: bool,
    pub share_relation_tables: bool,
    pub runtime: RuntimeConfig,
    pub eval_ks: Vec<usize>,
    pub eval_mode: RankMode,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            fanout: vec![16, 8, 8, 8],
            negatives: 1,
            filter_false_negatives: true,
            inverse_edges: true,
            share_relation_tables: false,
            runtime: RuntimeConfig::default(),
            eval_ks: vec![1, 3, 10],
            eval_mode: RankMode::Filtered,
            eval_seed: DEFAULT_EVAL_SEED,
        }
    }
}

fn parse_bool(field: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(KgError::config(field, format!("expected boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| KgError::config(field, format!("unparseable value `{v}`")))
}

fn parse_list(field: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|x| parse_num(field, x.trim()))
        .collect()
}

impl RunConfig {
    /// Parses the flat format; `#` starts a comment, keys are
    /// `section.name`, unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(KgError::config(
                    format!("line {}", ln + 1),
                    "expected `key = value`",
                ));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.dir" => self.data_dir = PathBuf::from(v),
            "out.dir" => self.out_dir = PathBuf::from(v),
            "train.lr" => self.train.learning_rate = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.margin" => self.train.margin = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.decoder" => self.train.decoder = DecoderKind::parse(v)?,
            "train.encoder" => self.train.encoder = EncoderKind::parse(v)?,
            "train.norm" => self.train.norm = Norm::parse(v)?,
            "train.early_stop_patience" => {
                self.train.early_stop_patience = Some(parse_num(key, v)?)
            }
            "train.adam_beta1" => self.train.adam.beta1 = parse_num(key, v)?,
            "train.adam_beta2" => self.train.adam.beta2 = parse_num(key, v)?,
            "train.adam_eps" => self.train.adam.eps = parse_num(key, v)?,
            "model.dim" => self.encoder.dim = parse_num(key, v)?,
            "model.hops" => self.encoder.hops = parse_num(key, v)?,
            "model.attention_hidden" => self.encoder.attention_hidden = parse_num(key, v)?,
            "model.use_attributes" => self.encoder.use_attributes = parse_bool(key, v)?,
            "model.leaky_slope" => self.encoder.leaky_slope = parse_num(key, v)?,
            "model.strict_coverage" => self.encoder.strict_coverage = parse_bool(key, v)?,
            "model.share_relation_tables" => self.share_relation_tables = parse_bool(key, v)?,
            "graph.inverse_edges" => self.inverse_edges = parse_bool(key, v)?,
            "sampler.fanout" => self.fanout = parse_list(key, v)?,
            "sampler.negatives" => self.negatives = parse_num(key, v)?,
            "sampler.filter_false_negatives" => {
                self.filter_false_negatives = parse_bool(key, v)?
            }
            "runtime.mode" => {
                self.runtime.mode = match v {
                    "local" => RuntimeMode::Local,
                    "distributed" => RuntimeMode::Distributed,
                    other => {
                        return Err(KgError::config(key, format!("unknown mode `{other}`")))
                    }
                }
            }
            "runtime.workers" => self.runtime.workers = parse_num(key, v)?,
            "runtime.shards" => self.runtime.shards = Some(parse_num(key, v)?),
            "runtime.transport" => {
                self.runtime.transport = match v {
                    "inproc" => Transport::InProc,
                    "tcp" => Transport::Tcp,
                    other => {
                        return Err(KgError::config(key, format!("unknown transport `{other}`")))
                    }
                }
            }
            "runtime.endpoints" => {
                self.runtime.endpoints = v.split(';').map(|s| s.trim().to_string()).collect()
            }
            "runtime.coordinator" => self.runtime.coordinator = Some(v.to_string()),
            "eval.ks" => self.eval_ks = parse_list(key, v)?,
            "eval.mode" => self.eval_mode = RankMode::parse(v)?,
            "eval.seed" => self.eval_seed = parse_num(key, v)?,
            other => {
                return Err(KgError::config(other, "unknown configuration key"));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.validate()?;
        self.sampler_config().validate()?;
        if self.eval_ks.is_empty() {
            return Err(KgError::config("eval.ks", "need at least one k"));
        }
        if self.eval_ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(KgError::config("eval.ks", "ks must be strictly increasing"));
        }
        if self.runtime.workers == 0 {
            return Err(KgError::config("runtime.workers", "need at least one worker"));
        }
        if self.runtime.shards == Some(0) {
            return Err(KgError::config("runtime.shards", "need at least one shard"));
        }
        if self.runtime.mode == RuntimeMode::Distributed
            && self.runtime.transport == Transport::Tcp
            && self.runtime.endpoints.is_empty()
        {
            return Err(KgError::config(
                "runtime.endpoints",
                "tcp transport needs shard endpoints",
            ));
        }
        Ok(())
    }

    /// Sampler configuration with the fanout schedule fitted to the
    /// encoder's hop count.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            fanout_per_hop: self.fanout.clone(),
            negatives_per_positive: self.negatives,
            filter_false_negatives: self.filter_false_negatives,
            seed: self.train.seed,
        }
        .with_hops(self.encoder.hops)
    }

    pub fn hyper(&self) -> AdamHyper {
        self.train.hyper()
    }

    /// Canonical serialization; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        map.insert("data.dir".into(), self.data_dir.display().to_string());
        map.insert("out.dir".into(), self.out_dir.display().to_string());
        map.insert("train.lr".into(), self.train.learning_rate.to_string());
        map.insert(
            "train.batch_size".into(),
            self.train.batch_size.to_string(),
        );
        map.insert("train.margin".into(), self.train.margin.to_string());
        map.insert("train.epochs".into(), self.train.epochs.to_string());
        map.insert("train.seed".into(), self.train.seed.to_string());
        map.insert("train.decoder".into(), self.train.decoder.name().into());
        map.insert("train.encoder".into(), self.train.encoder.name().into());
        map.insert(
            "train.norm".into(),
            match self.train.norm {
                Norm::L1 => "l1".into(),
                Norm::L2 => "l2".into(),
            },
        );
        if let Some(p) = self.train.early_stop_patience {
            map.insert("train.early_stop_patience".into(), p.to_string());
        }
        map.insert("train.adam_beta1".into(), self.train.adam.beta1.to_string());
        map.insert("train.adam_beta2".into(), self.train.adam.beta2.to_string());
        map.insert("train.adam_eps".into(), self.train.adam.eps.to_string());
        map.insert("model.dim".into(), self.encoder.dim.to_string());
        map.insert("model.hops".into(), self.encoder.hops.to_string());
        map.insert(
            "model.attention_hidden".into(),
            self.encoder.attention_hidden.to_string(),
        );
        map.insert(
            "model.use_attributes".into(),
            self.encoder.use_attributes.to_string(),
        );
        map.insert(
            "model.leaky_slope".into(),
            self.encoder.leaky_slope.to_string(),
        );
        map.insert(
            "model.strict_coverage".into(),
            self.encoder.strict_coverage.to_string(),
        );
        map.insert(
            "model.share_relation_tables".into(),
            self.share_relation_tables.to_string(),
        );
        map.insert(
            "graph.inverse_edges".into(),
            self.inverse_edges.to_string(),
        );
        map.insert(
            "sampler.fanout".into(),
            self.fanout
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("sampler.negatives".into(), self.negatives.to_string());
        map.insert(
            "sampler.filter_false_negatives".into(),
            self.filter_false_negatives.to_string(),
        );
        map.insert(
            "runtime.mode".into(),
            match self.runtime.mode {
                RuntimeMode::Local => "local".into(),
                RuntimeMode::Distributed => "distributed".into(),
            },
        );
        map.insert("runtime.workers".into(), self.runtime.workers.to_string());
        if let Some(shards) = self.runtime.shards {
            map.insert("runtime.shards".into(), shards.to_string());
        }
        map.insert(
            "runtime.transport".into(),
            match self.runtime.transport {
                Transport::InProc => "inproc".into(),
                Transport::Tcp => "tcp".into(),
            },
        );
        if !self.runtime.endpoints.is_empty() {
            map.insert("runtime.endpoints".into(), self.runtime.endpoints.join(";"));
        }
        if let Some(c) = &self.runtime.coordinator {
            map.insert("runtime.coordinator".into(), c.clone());
        }
        map.insert(
            "eval.ks".into(),
            self.eval_ks
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("eval.mode".into(), self.eval_mode.name().into());
        map.insert("eval.seed".into(), self.eval_seed.to_string());

        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
