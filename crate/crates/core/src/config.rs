//! Run configuration: one JSON document, with dotted-path overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lge::LgeConfig;
use crate::scene::SceneSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageMode {
    /// Every stage enhances the same base feature.
    #[default]
    Parallel,
    /// Each stage enhances the previous stage's output.
    Cascaded,
}

impl fmt::Display for StageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageMode::Parallel => "parallel",
            StageMode::Cascaded => "cascaded",
        })
    }
}

impl FromStr for StageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "parallel" => Ok(StageMode::Parallel),
            "cascaded" => Ok(StageMode::Cascaded),
            other => Err(Error::Config(format!("unknown stage mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 42,
            train_scenes: 500,
            eval_scenes: 100,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub head_hidden: usize,
    /// Number of stages `K`.
    pub stages: usize,
    /// Queries per stage `N`.
    pub queries: usize,
    pub mode: StageMode,
    pub pool_kernel: usize,
    pub decoder_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            head_hidden: 32,
            stages: 3,
            queries: 200,
            mode: StageMode::Parallel,
            pool_kernel: 3,
            decoder_radius: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Peak of the one-cycle schedule.
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the box loss against the summed heatmap losses.
    pub box_weight: f64,
    /// First phase length; the second phase starts at this step.
    pub phase1_steps: usize,
    /// Freeze the BEV stem during the second phase.
    pub freeze_backbone_phase2: bool,
    pub log_every: usize,
    /// Fraction of steps spent warming up.
    pub warmup_fraction: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Global gradient-norm clip; zero disables it.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            lr: 1e-4,
            batch_size: 1,
            box_weight: 0.25,
            phase1_steps: 0,
            freeze_backbone_phase2: false,
            log_every: 10,
            warmup_fraction: 0.3,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            grad_clip: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Total query budget at test time; `None` uses `K × N`.
    pub test_queries: Option<usize>,
    /// Center-distance thresholds in meters.
    pub thresholds: Vec<f64>,
    /// Threshold used for stage hit rates and attribution.
    pub attribution_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_queries: None,
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            attribution_threshold: 2.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub lge: LgeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        let c: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `lge.variant`. Values are parsed as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Config> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let o = o.strip_prefix("--").unwrap_or(o);
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut v, key, parse_value(raw))?;
        }
        let c: Config = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data.scene.validate()?;
        let m = &self.model;
        if m.channels == 0 || m.channels % 4 != 0 {
            return bad(format!("model.channels={} must be a positive multiple of 4", m.channels));
        }
        if self.lge.heads == 0 || m.channels % self.lge.heads != 0 {
            return bad(format!("lge.heads={} must divide model.channels={}", self.lge.heads, m.channels));
        }
        if self.lge.iterations == 0 {
            return bad("lge.iterations must be at least 1".into());
        }
        if m.stages == 0 || m.queries == 0 || m.head_hidden == 0 {
            return bad("model.stages, model.queries and model.head_hidden must be positive".into());
        }
        if m.pool_kernel % 2 == 0 {
            return bad(format!("model.pool_kernel={} must be odd", m.pool_kernel));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.batch_size == 0 || t.log_every == 0 {
            return bad("train.lr, train.batch_size and train.log_every must be positive".into());
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) || !(0.0..1.0).contains(&t.rms_decay) {
            return bad("train.warmup_fraction and train.rms_decay must lie in [0, 1)".into());
        }
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|d| !(*d > 0.0)) {
            return bad("eval.thresholds must be non-empty and positive".into());
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lge::LgeVariant;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(Config::from_json("{}").unwrap(), c);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = Config::default()
            .with_overrides(&[
                "--lge.variant=B",
                "lge.iterations=2",
                "--model.mode=cascaded",
                "--data.scene.grid.extents=[16,16]",
                "--eval.test_queries=1200",
            ])
            .unwrap();
        assert_eq!(c.lge.variant, LgeVariant::B);
        assert_eq!(c.lge.iterations, 2);
        assert_eq!(c.model.mode, StageMode::Cascaded);
        assert_eq!(c.data.scene.grid.extents, [16, 16]);
        assert_eq!(c.eval.test_queries, Some(1200));
    }

    #[test]
    fn bad_overrides_rejected() {
        let c = Config::default();
        assert!(c.with_overrides(&["--lge.variant=Q"]).is_err());
        assert!(c.with_overrides(&["--lge.colour=1"]).is_err());
        assert!(c.with_overrides(&["--lge.iterations=0"]).is_err());
        assert!(c.with_overrides(&["--model.channels=30"]).is_err());
        assert!(c.with_overrides(&["lge.variant"]).is_err());
        assert!(Config::from_json(r#"{"modle": {}}"#).is_err());
    }
}
