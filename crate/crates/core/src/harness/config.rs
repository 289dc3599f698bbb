use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::objectives::{LossWeights, DEFAULT_MASK_RATE, DEFAULT_QUEUE_SIZE, DEFAULT_TEMPERATURE};
use crate::optim::AdamWConfig;
use crate::perturb::{PerturbationConfig, TargetSelector};

/// Settings of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub pretrain_pairs: usize,
    pub vqa_train: usize,
    pub vqa_val: usize,
}

/// Everything one pre-train → fine-tune run depends on.
///
/// The text form is one `key = value` per line (`#` starts a comment); a
/// JSON object with the same dotted keys, or nested objects, is also
/// accepted. Every key has a default and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub ggp: PerturbationConfig,
    pub data: DataConfig,
    pub optim: AdamWConfig,
    pub model: ModelConfig,
    pub momentum: f64,
    pub itc_temperature: f64,
    pub queue_size: usize,
    pub mask_rate: f64,
    pub loss_weights: LossWeights,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            pretrain: PhaseConfig {
                epochs: 30,
                batch: 32,
                lr: 3e-4,
                warmup: 0.05,
            },
            finetune: PhaseConfig {
                epochs: 40,
                batch: 32,
                lr: 3e-5,
                warmup: 0.05,
            },
            ggp: PerturbationConfig::default(),
            data: DataConfig {
                pretrain_pairs: 2000,
                vqa_train: 256,
                vqa_val: 256,
            },
            optim: AdamWConfig::default(),
            model: ModelConfig::default(),
            momentum: 0.995,
            itc_temperature: DEFAULT_TEMPERATURE,
            queue_size: DEFAULT_QUEUE_SIZE,
            mask_rate: DEFAULT_MASK_RATE,
            loss_weights: LossWeights::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

impl ExperimentConfig {
    /// All keys with their current values, in canonical order. Floats use
    /// the shortest representation that parses back to the same bits.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.batch", self.pretrain.batch.to_string()),
            ("pretrain.lr", format!("{:?}", self.pretrain.lr)),
            ("pretrain.warmup", format!("{:?}", self.pretrain.warmup)),
            ("finetune.epochs", self.finetune.epochs.to_string()),
            ("finetune.batch", self.finetune.batch.to_string()),
            ("finetune.lr", format!("{:?}", self.finetune.lr)),
            ("finetune.warmup", format!("{:?}", self.finetune.warmup)),
            ("ggp.delta", format!("{:?}", self.ggp.delta)),
            ("ggp.epsilon", format!("{:?}", self.ggp.epsilon)),
            ("ggp.adaptive", self.ggp.adaptive_magnitude.to_string()),
            ("ggp.fixed_ratio", format!("{:?}", self.ggp.fixed_ratio)),
            ("ggp.target", self.ggp.target.to_spec()),
            ("ggp.pretrain", self.ggp.enabled_pretrain.to_string()),
            ("ggp.finetune", self.ggp.enabled_finetune.to_string()),
            ("data.pretrain_pairs", self.data.pretrain_pairs.to_string()),
            ("data.vqa_train", self.data.vqa_train.to_string()),
            ("data.vqa_val", self.data.vqa_val.to_string()),
            ("optim.beta1", format!("{:?}", self.optim.beta1)),
            ("optim.beta2", format!("{:?}", self.optim.beta2)),
            ("optim.eps", format!("{:?}", self.optim.eps)),
            ("optim.weight_decay", format!("{:?}", self.optim.weight_decay)),
            ("model.width", m.width.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.ffn_mult", m.ffn_mult.to_string()),
            ("model.visual_depth", m.visual_depth.to_string()),
            ("model.text_depth", m.text_depth.to_string()),
            ("model.fusion_depth", m.fusion_depth.to_string()),
            ("model.decoder_depth", m.decoder_depth.to_string()),
            ("model.contrastive_dim", m.contrastive_dim.to_string()),
            ("model.ln_eps", format!("{:?}", m.ln_eps)),
            ("model.momentum", format!("{:?}", self.momentum)),
            ("itc.temperature", format!("{:?}", self.itc_temperature)),
            ("itc.queue_size", self.queue_size.to_string()),
            ("mlm.mask_rate", format!("{:?}", self.mask_rate)),
            ("loss.itc", format!("{:?}", self.loss_weights.itc)),
            ("loss.itm", format!("{:?}", self.loss_weights.itm)),
            ("loss.mlm", format!("{:?}", self.loss_weights.mlm)),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "pretrain.epochs" => self.pretrain.epochs = parse_num(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, v)?,
            "pretrain.warmup" => self.pretrain.warmup = parse_num(key, v)?,
            "finetune.epochs" => self.finetune.epochs = parse_num(key, v)?,
            "finetune.batch" => self.finetune.batch = parse_num(key, v)?,
            "finetune.lr" => self.finetune.lr = parse_num(key, v)?,
            "finetune.warmup" => self.finetune.warmup = parse_num(key, v)?,
            "ggp.delta" => self.ggp.delta = parse_num(key, v)?,
            "ggp.epsilon" => self.ggp.epsilon = parse_num(key, v)?,
            "ggp.adaptive" => self.ggp.adaptive_magnitude = parse_bool(key, v)?,
            "ggp.fixed_ratio" => self.ggp.fixed_ratio = parse_num(key, v)?,
            "ggp.target" => self.ggp.target = TargetSelector::parse(v)?,
            "ggp.pretrain" => self.ggp.enabled_pretrain = parse_bool(key, v)?,
            "ggp.finetune" => self.ggp.enabled_finetune = parse_bool(key, v)?,
            "data.pretrain_pairs" => self.data.pretrain_pairs = parse_num(key, v)?,
            "data.vqa_train" => self.data.vqa_train = parse_num(key, v)?,
            "data.vqa_val" => self.data.vqa_val = parse_num(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse_num(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse_num(key, v)?,
            "optim.eps" => self.optim.eps = parse_num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, v)?,
            "model.width" => self.model.width = parse_num(key, v)?,
            "model.heads" => self.model.heads = parse_num(key, v)?,
            "model.ffn_mult" => self.model.ffn_mult = parse_num(key, v)?,
            "model.visual_depth" => self.model.visual_depth = parse_num(key, v)?,
            "model.text_depth" => self.model.text_depth = parse_num(key, v)?,
            "model.fusion_depth" => self.model.fusion_depth = parse_num(key, v)?,
            "model.decoder_depth" => self.model.decoder_depth = parse_num(key, v)?,
            "model.contrastive_dim" => self.model.contrastive_dim = parse_num(key, v)?,
            "model.ln_eps" => self.model.ln_eps = parse_num(key, v)?,
            "model.momentum" => self.momentum = parse_num(key, v)?,
            "itc.temperature" => self.itc_temperature = parse_num(key, v)?,
            "itc.queue_size" => self.queue_size = parse_num(key, v)?,
            "mlm.mask_rate" => self.mask_rate = parse_num(key, v)?,
            "loss.itc" => self.loss_weights.itc = parse_num(key, v)?,
            "loss.itm" => self.loss_weights.itm = parse_num(key, v)?,
            "loss.mlm" => self.loss_weights.mlm = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if p.epochs == 0 {
                return Err(Error::Config(format!("{name}.epochs must be at least 1")));
            }
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(Error::Config(format!("{name}.lr must be positive")));
            }
            if !(0.0..1.0).contains(&p.warmup) {
                return Err(Error::Config(format!("{name}.warmup must lie in [0, 1)")));
            }
        }
        if self.pretrain.batch < 2 {
            return Err(Error::Config(
                "pretrain.batch must be at least 2 for in-batch negatives".into(),
            ));
        }
        if self.finetune.batch == 0 {
            return Err(Error::Config("finetune.batch must be at least 1".into()));
        }
        if self.data.pretrain_pairs < 2 || self.data.vqa_train == 0 || self.data.vqa_val == 0 {
            return Err(Error::Config("dataset sizes too small".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("model.momentum must lie in [0, 1]".into()));
        }
        if !(self.itc_temperature > 0.0) {
            return Err(Error::Config("itc.temperature must be positive".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config("mlm.mask_rate must lie in (0, 1]".into()));
        }
        let w = &self.loss_weights;
        if [w.itc, w.itm, w.mlm].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        self.optim.validate()?;
        self.ggp.validate()?;
        self.model.validate()
    }

    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Flat JSON object keyed by the dotted names. Numbers that are exactly
    /// representable are emitted as JSON numbers.
    pub fn to_json(&self) -> Value {
        let mut map = serde_json::Map::new();
        for (k, v) in self.entries() {
            let value = if v == "true" || v == "false" {
                Value::Bool(v == "true")
            } else if let Ok(i) = v.parse::<u64>() {
                Value::from(i)
            } else if let Ok(f) = v.parse::<f64>() {
                Value::from(f)
            } else {
                Value::String(v)
            };
            map.insert(k.to_string(), value);
        }
        Value::Object(map)
    }

    /// Parses the flat text form or a JSON object, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        if text.trim_start().starts_with('{') {
            let json: Value = serde_json::from_str(text)?;
            let mut flat = Vec::new();
            flatten("", &json, &mut flat)?;
            for (k, v) in flat {
                cfg.set(&k, &v)?;
            }
        } else {
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap().trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
                cfg.set(k.trim(), v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) -> Result<()> {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out)?;
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Bool(b) => out.push((prefix.to_string(), b.to_string())),
        Value::Number(n) => out.push((prefix.to_string(), n.to_string())),
        _ => return Err(Error::Config(format!("`{prefix}`: unsupported JSON value"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.pretrain.epochs, 30);
        assert_eq!(c.finetune.lr, 3e-5);
        assert_eq!(c.data.pretrain_pairs, 2000);
    }

    #[test]
    fn flat_round_trip() {
        let mut c = ExperimentConfig::default();
        c.seed = 7;
        c.pretrain.lr = 0.1 + 0.2;
        c.ggp.enabled_pretrain = true;
        c.ggp.target = TargetSelector::parse("visual,text").unwrap();
        let back = ExperimentConfig::parse(&c.to_flat_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.pretrain.lr.to_bits(), c.pretrain.lr.to_bits());
    }

    #[test]
    fn json_round_trip_and_nested_form() {
        let mut c = ExperimentConfig::default();
        c.finetune.warmup = 1.0 / 3.0;
        let text = serde_json::to_string(&c.to_json()).unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
        let nested = r#"{"seed": 3, "ggp": {"pretrain": true, "delta": 0.1}}"#;
        let n = ExperimentConfig::parse(nested).unwrap();
        assert_eq!(n.seed, 3);
        assert!(n.ggp.enabled_pretrain);
        assert_eq!(n.ggp.delta, 0.1);
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        assert!(ExperimentConfig::parse("pretrain.epoch = 3").is_err());
        assert!(ExperimentConfig::parse("seed 3").is_err());
        assert!(ExperimentConfig::parse("ggp.adaptive = maybe").is_err());
        assert!(ExperimentConfig::parse(r#"{"nope": 1}"#).is_err());
        assert!(ExperimentConfig::parse("pretrain.lr = 0").is_err());
        assert!(ExperimentConfig::parse("finetune.epochs = 0").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = ExperimentConfig::parse("# run\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn every_key_is_settable() {
        let c = ExperimentConfig::default();
        let mut d = ExperimentConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
    }
}
