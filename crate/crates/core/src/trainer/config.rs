//! Flat `key = value` run configuration.
//!
//! `protocol` is applied before every other key, so a file or flag naming a
//! protocol sets its window and sampling presets and later keys refine them.

use std::fmt;
use std::str::FromStr;

use crate::attn_adj::ScoreProjection;
use crate::data_io::{ClassMap, Format};
use crate::error::{Error, Result};
use crate::metrics::{ColUnit, Pairing};
use crate::pipeline::ModelConfig;
use crate::sstg::Normalization;
use crate::sstgcn::Activation;

/// Evaluation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Protocol {
    /// 8 observed / 12 predicted frames at 2.5 fps, best-of-20 ADE/FDE.
    #[default]
    Pedestrian,
    /// 15 / 25 frames at 5 fps, best-of-6 RMSE at 1..5 s.
    Vehicle,
    /// 6 / 6 frames at 2 fps, class-weighted ADE/FDE.
    Apollo,
}

impl Protocol {
    pub fn t_obs(self) -> usize {
        match self {
            Self::Pedestrian => 8,
            Self::Vehicle => 15,
            Self::Apollo => 6,
        }
    }

    pub fn t_pred(self) -> usize {
        match self {
            Self::Pedestrian => 12,
            Self::Vehicle => 25,
            Self::Apollo => 6,
        }
    }

    pub fn samples(self) -> usize {
        match self {
            Self::Vehicle => 6,
            Self::Pedestrian | Self::Apollo => 20,
        }
    }

    pub fn fps(self) -> f64 {
        match self {
            Self::Pedestrian => 2.5,
            Self::Vehicle => 5.0,
            Self::Apollo => 2.0,
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pedestrian" => Ok(Self::Pedestrian),
            "vehicle" => Ok(Self::Vehicle),
            "apollo" => Ok(Self::Apollo),
            _ => Err(Error::Config(format!(
                "unknown protocol `{s}` (pedestrian|vehicle|apollo)"
            ))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pedestrian => "pedestrian",
            Self::Vehicle => "vehicle",
            Self::Apollo => "apollo",
        })
    }
}

/// Optimiser and schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Windows per optimiser step.
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Learning rate at the last step as a fraction of `lr`, reached by
    /// cosine annealing; 1 keeps the rate constant.
    pub lr_final_fraction: f64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 30,
            clip_norm: Some(1.0),
            seed: 0,
            lr_final_fraction: 1.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config(
                "betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "lr_final_fraction {} outside (0, 1]",
                self.lr_final_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "clip_norm {c} must be positive (0 disables)"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub samples: usize,
    pub pairing: Pairing,
    pub col_threshold: f64,
    pub col_unit: ColUnit,
    pub fps: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = Protocol::default();
        Self {
            protocol: p,
            samples: p.samples(),
            pairing: Pairing::Joint,
            col_threshold: crate::metrics::COLLISION_THRESHOLD,
            col_unit: ColUnit::Window,
            fps: p.fps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub format: Format,
    /// Kept as written so it can be echoed.
    pub class_map: String,
    pub window_stride: usize,
    /// Leave-one-out split when set: the dataset (file stem) held out.
    pub test_dataset: Option<String>,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: Format::Whitespace4,
            class_map: "1:vehicle,2:vehicle,3:pedestrian,4:bicyclist".into(),
            window_stride: 1,
            test_dataset: None,
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn classes(&self) -> Result<ClassMap> {
        self.class_map.parse()
    }

    pub fn split_protocol(&self) -> crate::data_io::SplitProtocol {
        match &self.test_dataset {
            Some(name) => crate::data_io::SplitProtocol::LeaveOneOut {
                test: name.clone(),
                val_fraction: self.val_fraction,
            },
            None => crate::data_io::SplitProtocol::Fraction {
                test: self.test_fraction,
                val: self.val_fraction,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "protocol",
    "t_obs",
    "t_pred",
    "slots",
    "attention_mode",
    "attention_projection",
    "attention_dk",
    "normalization",
    "sstgcn_layers",
    "no_spatial",
    "no_temporal",
    "activation",
    "heads",
    "layers",
    "embed_dim",
    "ffn_dim",
    "dropout",
    "norm_first",
    "nce_lambda",
    "nce_temperature",
    "collision_radius",
    "nce_samples_per_frame",
    "nce_negatives",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "epochs",
    "clip_norm",
    "seed",
    "lr_final_fraction",
    "eval_every",
    "samples",
    "pairing",
    "col_threshold",
    "col_unit",
    "fps",
    "format",
    "class_map",
    "window_stride",
    "test_dataset",
    "test_fraction",
    "val_fraction",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got `{v}`"
        ))),
    }
}

impl RunConfig {
    pub fn for_protocol(protocol: Protocol) -> Self {
        let mut c = Self::default();
        c.apply_protocol(protocol);
        c
    }

    fn apply_protocol(&mut self, p: Protocol) {
        self.eval.protocol = p;
        self.eval.samples = p.samples();
        self.eval.fps = p.fps();
        self.model.t_obs = p.t_obs();
        self.model.t_pred = p.t_pred();
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "protocol" => self.apply_protocol(v.parse()?),
            "t_obs" => m.t_obs = num(key, v)?,
            "t_pred" => m.t_pred = num(key, v)?,
            "slots" => m.slots = num(key, v)?,
            "attention_mode" => m.attention_mode = v.parse()?,
            "attention_projection" => {
                m.projection = match v {
                    "learned" => ScoreProjection::Learned,
                    "raw" => ScoreProjection::Raw,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected learned or raw, got `{v}`"
                        )))
                    }
                }
            }
            "attention_dk" => m.attention_dk = num(key, v)?,
            "normalization" => {
                m.normalization = match v {
                    "symmetric" => Normalization::Symmetric,
                    "literal" => Normalization::Literal,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected symmetric or literal, got `{v}`"
                        )))
                    }
                }
            }
            "sstgcn_layers" => m.sstgcn.layers = num(key, v)?,
            "no_spatial" => m.sstgcn.no_spatial = flag(key, v)?,
            "no_temporal" => m.sstgcn.no_temporal = flag(key, v)?,
            "activation" => m.sstgcn.activation = v.parse::<Activation>()?,
            "heads" => m.transformer.heads = num(key, v)?,
            "layers" => m.transformer.layers = num(key, v)?,
            "embed_dim" => m.transformer.embed_dim = num(key, v)?,
            "ffn_dim" => m.transformer.ffn_dim = num(key, v)?,
            "dropout" => m.transformer.dropout = num(key, v)?,
            "norm_first" => m.transformer.norm_first = flag(key, v)?,
            "nce_lambda" => m.nce.lambda = num(key, v)?,
            "nce_temperature" => m.nce.temperature = num(key, v)?,
            "collision_radius" => m.nce.collision_radius = num(key, v)?,
            "nce_samples_per_frame" => m.nce.samples_per_frame = num(key, v)?,
            "nce_negatives" => m.nce.negatives_per_agent = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "beta1" => t.beta1 = num(key, v)?,
            "beta2" => t.beta2 = num(key, v)?,
            "eps" => t.eps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "clip_norm" => {
                let c: f64 = num(key, v)?;
                t.clip_norm = (c != 0.0).then_some(c);
            }
            "seed" => t.seed = num(key, v)?,
            "lr_final_fraction" => t.lr_final_fraction = num(key, v)?,
            "eval_every" => t.eval_every = num(key, v)?,
            "samples" => self.eval.samples = num(key, v)?,
            "pairing" => {
                self.eval.pairing = match v {
                    "joint" => Pairing::Joint,
                    "independent" => Pairing::Independent,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected joint or independent, got `{v}`"
                        )))
                    }
                }
            }
            "col_threshold" => self.eval.col_threshold = num(key, v)?,
            "col_unit" => {
                self.eval.col_unit = match v {
                    "window" => ColUnit::Window,
                    "pair" => ColUnit::Pair,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected window or pair, got `{v}`"
                        )))
                    }
                }
            }
            "fps" => self.eval.fps = num(key, v)?,
            "format" => self.data.format = v.parse()?,
            "class_map" => {
                v.parse::<ClassMap>()?;
                self.data.class_map = v.to_string();
            }
            "window_stride" => self.data.window_stride = num(key, v)?,
            "test_dataset" => self.data.test_dataset = (!v.is_empty()).then(|| v.to_string()),
            "test_fraction" => self.data.test_fraction = num(key, v)?,
            "val_fraction" => self.data.val_fraction = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `protocol` (the last one given) first, then the rest in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "protocol") {
            c.apply_protocol(p.parse()?);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "protocol") {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if !(self.eval.fps > 0.0) || !(self.eval.col_threshold >= 0.0) {
            return Err(Error::Config(
                "fps must be positive and col_threshold non-negative".into(),
            ));
        }
        if self.data.window_stride == 0 {
            return Err(Error::Config("window_stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        let d = &self.data;
        let b = |x: bool| x.to_string();
        let values: Vec<String> = vec![
            e.protocol.to_string(),
            m.t_obs.to_string(),
            m.t_pred.to_string(),
            m.slots.to_string(),
            m.attention_mode.to_string(),
            match m.projection {
                ScoreProjection::Learned => "learned",
                ScoreProjection::Raw => "raw",
            }
            .into(),
            m.attention_dk.to_string(),
            match m.normalization {
                Normalization::Symmetric => "symmetric",
                Normalization::Literal => "literal",
            }
            .into(),
            m.sstgcn.layers.to_string(),
            b(m.sstgcn.no_spatial),
            b(m.sstgcn.no_temporal),
            m.sstgcn.activation.as_str().into(),
            m.transformer.heads.to_string(),
            m.transformer.layers.to_string(),
            m.transformer.embed_dim.to_string(),
            m.transformer.ffn_dim.to_string(),
            m.transformer.dropout.to_string(),
            b(m.transformer.norm_first),
            m.nce.lambda.to_string(),
            m.nce.temperature.to_string(),
            m.nce.collision_radius.to_string(),
            m.nce.samples_per_frame.to_string(),
            m.nce.negatives_per_agent.to_string(),
            t.lr.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.eps.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.clip_norm.unwrap_or(0.0).to_string(),
            t.seed.to_string(),
            t.lr_final_fraction.to_string(),
            t.eval_every.to_string(),
            e.samples.to_string(),
            match e.pairing {
                Pairing::Joint => "joint",
                Pairing::Independent => "independent",
            }
            .into(),
            e.col_threshold.to_string(),
            match e.col_unit {
                ColUnit::Window => "window",
                ColUnit::Pair => "pair",
            }
            .into(),
            e.fps.to_string(),
            d.format.to_string(),
            d.class_map.clone(),
            d.window_stride.to_string(),
            d.test_dataset.clone().unwrap_or_default(),
            d.test_fraction.to_string(),
            d.val_fraction.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// The configuration as a file that [`RunConfig::parse`] reads back.
    pub fn to_file(&self) -> String {
        self.pairs()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                i + 1
            ))
        })?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
