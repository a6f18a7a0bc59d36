use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::flow::{Coupling, IntegratorConfig};
use crate::mixture::ModeSource;
use crate::nn::{Activation, OptKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mixflow,
    Cfm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mixflow => "mixflow",
            ModelKind::Cfm => "cfm",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixflow" => Ok(ModelKind::Mixflow),
            "cfm" => Ok(ModelKind::Cfm),
            o => Err(Error::invalid(format!("unknown model `{o}` (expected mixflow or cfm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Silu,
            dropout: 0.0,
        }
    }
}

/// Fractions of the total epoch count spent in each period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup: f64,
    pub alternating: f64,
    pub cooldown: f64,
    pub flow_steps_per_base_step: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup: 0.2,
            alternating: 0.6,
            cooldown: 0.2,
            flow_steps_per_base_step: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    /// Iterations per epoch; one per training condition when unset.
    pub iterations_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the base predictors; `lr` when unset.
    pub base_lr: Option<f64>,
    pub optimizer: OptKind,
    pub schedule: ScheduleConfig,
    /// One time per batch when false, one per sample when true.
    pub per_sample_time: bool,
    pub pairing_cap: usize,
    pub temperature_start: f64,
    pub temperature_end: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            iterations_per_epoch: None,
            batch_size: 256,
            lr: 1e-3,
            base_lr: None,
            optimizer: OptKind::Adam,
            schedule: ScheduleConfig::default(),
            per_sample_time: false,
            pairing_cap: crate::ot::DEFAULT_PAIRING_CAP,
            temperature_start: 1.0,
            temperature_end: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    /// Number of mixture modes; one per training condition when unset.
    pub n_modes: Option<usize>,
    pub sigma2: f64,
    pub mode_source: ModeSource,
    pub net: NetConfig,
    /// Output scale of a freshly initialized mode head.
    pub init_scale: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            n_modes: None,
            sigma2: 1e-2,
            mode_source: ModeSource::FreeParameters,
            net: NetConfig {
                activation: Activation::Relu,
                ..NetConfig::default()
            },
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub every: usize,
    /// Generated and reference points per condition.
    pub samples: usize,
    pub subsample_cap: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            every: 1,
            samples: 1000,
            subsample_cap: crate::metrics::DEFAULT_SUBSAMPLE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub trainer: TrainerConfig,
    pub velocity: NetConfig,
    pub base: BaseConfig,
    /// Noise-to-data coupling of the baseline.
    pub coupling: Coupling,
    pub integrator: IntegratorConfig,
    pub validation: ValidationConfig,
    pub checkpoint_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Mixflow,
            seed: 0,
            trainer: TrainerConfig::default(),
            velocity: NetConfig::default(),
            base: BaseConfig::default(),
            coupling: Coupling::Independent,
            integrator: IntegratorConfig::default(),
            validation: ValidationConfig::default(),
            checkpoint_dir: None,
        }
    }
}

fn check_dropout(problems: &mut Vec<String>, key: &str, rate: f64) {
    if !(0.0..1.0).contains(&rate) {
        problems.push(format!("{key} must lie in [0, 1), got {rate}"));
    }
}

fn check_positive(problems: &mut Vec<String>, key: &str, v: f64) {
    if !(v.is_finite() && v > 0.0) {
        problems.push(format!("{key} must be positive and finite, got {v}"));
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `trainer.lr=0.01`. Values parse as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[(S, S)]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for (k, val) in overrides {
            set_dotted(&mut v, k.as_ref(), val.as_ref())?;
        }
        serde_json::from_value(v).map_err(|e| Error::invalid(format!("config override: {e}")))
    }

    /// Every validation problem, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let t = &self.trainer;
        if t.batch_size == 0 {
            p.push("trainer.batch_size must be positive".into());
        }
        if t.batch_size > t.pairing_cap {
            p.push(format!(
                "trainer.batch_size {} exceeds trainer.pairing_cap {}",
                t.batch_size, t.pairing_cap
            ));
        }
        if t.iterations_per_epoch == Some(0) {
            p.push("trainer.iterations_per_epoch must be positive when set".into());
        }
        check_positive(&mut p, "trainer.lr", t.lr);
        if let Some(lr) = t.base_lr {
            check_positive(&mut p, "trainer.base_lr", lr);
        }
        let s = &t.schedule;
        for (k, v) in [
            ("trainer.schedule.warmup", s.warmup),
            ("trainer.schedule.alternating", s.alternating),
            ("trainer.schedule.cooldown", s.cooldown),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                p.push(format!("{k} must be a nonnegative fraction, got {v}"));
            }
        }
        let total = s.warmup + s.alternating + s.cooldown;
        if total.is_finite() && (total - 1.0).abs() > 1e-9 {
            p.push(format!("schedule fractions sum to {total}, not 1"));
        }
        if s.flow_steps_per_base_step == 0 {
            p.push("trainer.schedule.flow_steps_per_base_step must be positive".into());
        }
        check_positive(&mut p, "trainer.temperature_start", t.temperature_start);
        check_positive(&mut p, "trainer.temperature_end", t.temperature_end);
        check_dropout(&mut p, "velocity.dropout", self.velocity.dropout);
        check_dropout(&mut p, "base.net.dropout", self.base.net.dropout);
        check_positive(&mut p, "base.sigma2", self.base.sigma2);
        check_positive(&mut p, "base.init_scale", self.base.init_scale);
        if self.base.n_modes == Some(0) {
            p.push("base.n_modes must be positive when set".into());
        }
        if self.integrator.steps == 0 {
            p.push("integrator.steps must be positive".into());
        }
        if self.validation.every == 0 {
            p.push("validation.every must be positive".into());
        }
        if self.validation.samples < 2 {
            p.push("validation.samples must be at least 2".into());
        }
        if self.validation.subsample_cap < 2 {
            p.push("validation.subsample_cap must be at least 2".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid config:\n  {}", p.join("\n  "))))
        }
    }
}

fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("malformed override key `{key}`")));
    }
    let mut cur = root;
    for (depth, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::invalid(format!("override `{key}`: `{}` is not a section", parts[..depth].join("."))))?;
        let last = depth + 1 == parts.len();
        if !obj.contains_key(*part) {
            return Err(Error::invalid(format!("unknown config key `{key}`")));
        }
        if last {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}
