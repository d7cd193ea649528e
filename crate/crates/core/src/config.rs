//! TOML run configuration: defaults, file merging, dotted overrides and
//! validation.
//!
//! A file only needs the keys it changes; everything else comes from
//! [`RunConfig::default`]. The resolved configuration is serialized back to
//! TOML as the run's snapshot.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::concepts::{ConceptDataset, Domain, GlyphConfig};
use crate::diffusion::{DiffusionSchedule, LatentCodec, ScheduleKind};
use crate::error::{Error, Result};
use crate::eval::{ContextProbe, ProbeConfig, SAMPLES_PER_CONDITION};
use crate::networks::{CriticArch, PolicyArch};
use crate::numerics::RngStream;
use crate::rewards::{FeatureEncoder, ENCODER_INPUT_GAIN};
use crate::trainer::{TrainConfig, TrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub domain: Domain,
    pub concepts: usize,
    pub contexts: usize,
    /// Dataset seed; the trainer seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub glyph: GlyphConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Identity,
    /// Random orthogonal linear map.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub codec: CodecMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    pub temb_dim: usize,
    pub freeze_embedding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub lookahead_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub features: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Sampling-noise seed; the trainer seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub samples_per_condition: usize,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub policy: PolicyConfig,
    pub critic: CriticConfig,
    pub encoder: EncoderConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                domain: Domain::Mixture2d,
                concepts: 10,
                contexts: 5,
                seed: None,
                glyph: GlyphConfig::default(),
            },
            diffusion: DiffusionConfig {
                timesteps: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
                schedule: ScheduleKind::Linear,
                codec: CodecMode::Identity,
            },
            policy: PolicyConfig {
                hidden: vec![128, 128, 128],
                cond_dim: 16,
                temb_dim: 16,
                freeze_embedding: false,
            },
            critic: CriticConfig {
                hidden: vec![32, 16],
                lookahead_floor: 1.0,
            },
            encoder: EncoderConfig {
                features: 32,
                gain: ENCODER_INPUT_GAIN,
            },
            trainer: TrainConfig::default(),
            eval: EvalConfig {
                seed: None,
                samples_per_condition: SAMPLES_PER_CONDITION,
                probe: ProbeConfig::default(),
            },
        }
    }
}

/// Keys that may be absent from the defaults, with their TOML type.
const OPTIONAL_KEYS: [(&str, &str); 2] = [("data.seed", "integer"), ("eval.seed", "integer")];

impl RunConfig {
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.trainer.seed)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.trainer.seed)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Checks every field; the error names the first failing key.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.concepts == 0 {
            return Err(Error::config("data.concepts", "must be >= 1"));
        }
        if d.contexts == 0 {
            return Err(Error::config("data.contexts", "must be >= 1"));
        }
        if d.domain == Domain::Glyph && !matches!(d.glyph.size, 8 | 16) {
            return Err(Error::config("data.glyph.size", "must be 8 or 16"));
        }
        if !(0.0..1.0).contains(&d.glyph.jitter_intensity) {
            return Err(Error::config("data.glyph.jitter_intensity", "must lie in [0, 1)"));
        }
        let f = &self.diffusion;
        if f.timesteps < 2 {
            return Err(Error::config("diffusion.timesteps", "must be >= 2"));
        }
        if !(f.beta_start > 0.0 && f.beta_start < 1.0) {
            return Err(Error::config("diffusion.beta_start", "must lie in (0, 1)"));
        }
        if !(f.beta_end >= f.beta_start && f.beta_end < 1.0) {
            return Err(Error::config("diffusion.beta_end", "must lie in [beta_start, 1)"));
        }
        let p = &self.policy;
        if p.hidden.contains(&0) {
            return Err(Error::config("policy.hidden", "layer widths must be >= 1"));
        }
        if p.cond_dim == 0 {
            return Err(Error::config("policy.cond_dim", "must be >= 1"));
        }
        if p.temb_dim == 0 || !p.temb_dim.is_multiple_of(2) {
            return Err(Error::config("policy.temb_dim", "must be a positive even number"));
        }
        let c = &self.critic;
        if c.hidden.contains(&0) {
            return Err(Error::config("critic.hidden", "layer widths must be >= 1"));
        }
        if !(c.lookahead_floor > 0.0 && c.lookahead_floor <= 1.0) {
            return Err(Error::config("critic.lookahead_floor", "must lie in (0, 1]"));
        }
        let e = &self.encoder;
        if e.features == 0 {
            return Err(Error::config("encoder.features", "must be >= 1"));
        }
        if !(e.gain > 0.0 && e.gain.is_finite()) {
            return Err(Error::config("encoder.gain", "must be > 0"));
        }
        self.trainer.validate()?;
        if self.eval.samples_per_condition == 0 {
            return Err(Error::config("eval.samples_per_condition", "must be >= 1"));
        }
        let pr = &self.eval.probe;
        if pr.copies == 0 {
            return Err(Error::config("eval.probe.copies", "must be >= 1"));
        }
        if !(pr.noise >= 0.0 && pr.noise.is_finite()) {
            return Err(Error::config("eval.probe.noise", "must be >= 0"));
        }
        if !(pr.lr > 0.0 && pr.lr.is_finite()) {
            return Err(Error::config("eval.probe.lr", "must be > 0"));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<ConceptDataset> {
        ConceptDataset::generate(
            self.data.domain,
            self.data_seed(),
            self.data.concepts,
            self.data.contexts,
            &self.data.glyph,
        )
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let f = &self.diffusion;
        DiffusionSchedule::new(f.timesteps, f.beta_start, f.beta_end, f.schedule)
    }

    pub fn setup(&self) -> Result<TrainSetup> {
        let dataset = self.dataset()?;
        let f = &self.diffusion;
        let schedule = self.schedule()?;
        let dim = dataset.dim();
        let data_seed = self.data_seed();
        let codec = match f.codec {
            CodecMode::Identity => LatentCodec::Identity,
            CodecMode::Orthogonal => LatentCodec::random_orthogonal(dim, &mut RngStream::new(data_seed, "codec")),
        };
        let encoder = FeatureEncoder::with_gain(
            dim,
            self.encoder.features,
            self.encoder.gain,
            &RngStream::new(data_seed, "encoder"),
        );
        let policy_arch = PolicyArch {
            data_dim: dim,
            cond_dim: self.policy.cond_dim,
            temb_dim: self.policy.temb_dim,
            tokens: dataset.n_tokens(),
            hidden: self.policy.hidden.clone(),
        };
        let critic_arch = CriticArch {
            data_dim: dim,
            cond_dim: self.policy.cond_dim,
            temb_dim: self.policy.temb_dim,
            hidden: self.critic.hidden.clone(),
            lookahead_floor: self.critic.lookahead_floor,
        };
        TrainSetup::new(
            schedule,
            dataset,
            codec,
            encoder,
            policy_arch,
            critic_arch,
            self.policy.freeze_embedding,
        )
    }

    pub fn probe(&self, dataset: &ConceptDataset) -> Result<ContextProbe> {
        ContextProbe::train(dataset, &self.eval.probe, &RngStream::new(self.data_seed(), "probe"))
    }
}

/// A `--set key=value` assignment; the value is a TOML literal, or a bare
/// string when it does not parse as one.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(spec, "override key is empty"));
    }
    Ok((key.to_string(), parse_literal(raw.trim())))
}

pub fn parse_literal(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Coerces `value` to the type of `expected`, or names the mismatch.
fn coerce(key: &str, expected: &str, value: Value) -> Result<Value> {
    let got = type_name(&value);
    match (expected, value) {
        ("float", Value::Integer(i)) => Ok(Value::Float(i as f64)),
        // Masks and similar fields accept either a keyword or a list.
        ("string", v @ Value::Array(_)) | ("array", v @ Value::String(_)) => Ok(v),
        (e, v) if e == got => Ok(v),
        (e, _) => Err(Error::config(key, format!("expected {e}, got {got}"))),
    }
}

fn expected_type(defaults: &Table, key: &str) -> Option<&'static str> {
    let mut node = defaults;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match node.get(*p) {
            Some(Value::Table(t)) if i + 1 < parts.len() => node = t,
            Some(v) if i + 1 == parts.len() => return Some(type_name(v)),
            _ => break,
        }
    }
    OPTIONAL_KEYS.iter().find(|(k, _)| *k == key).map(|(_, t)| *t)
}

fn set_path(tree: &mut Table, key: &str, value: Value) {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => unreachable!("type-checked path"),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
}

fn merge(defaults: &Table, tree: &mut Table, file: Table, prefix: &str) -> Result<()> {
    for (k, v) in file {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(sub) if matches!(expected_type(defaults, &key), Some("table")) => {
                merge(defaults, tree, sub, &key)?;
            }
            other => {
                let expected = expected_type(defaults, &key)
                    .ok_or_else(|| Error::config(key.clone(), "unknown configuration key"))?;
                let value = coerce(&key, expected, other)?;
                set_path(tree, &key, value);
            }
        }
    }
    Ok(())
}

/// Resolves an optional config file and overrides on top of the defaults.
pub fn resolve(file_text: Option<&str>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let defaults = Table::try_from(RunConfig::default()).map_err(|e| Error::config("config", e.to_string()))?;
    let mut tree = defaults.clone();
    if let Some(text) = file_text {
        let file: Table = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        merge(&defaults, &mut tree, file, "")?;
    }
    for (key, value) in overrides {
        let expected =
            expected_type(&defaults, key).ok_or_else(|| Error::config(key.clone(), "unknown configuration key"))?;
        if expected == "table" {
            return Err(Error::config(key.clone(), "cannot override a whole table"));
        }
        let value = coerce(key, expected, value.clone())?;
        set_path(&mut tree, key, value);
    }
    let cfg = RunConfig::deserialize(Value::Table(tree)).map_err(|e| Error::config("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
