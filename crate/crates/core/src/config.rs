//! Scenario configuration (TOML) with full defaults and strict validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::JamParams;
use crate::navigation::FusionParams;
use crate::rl::{LearnerParams, RewardWeights};
use crate::vehicle::BehaviourParams;
use crate::world::{GridMapParams, MapCounts};

fn d_seed() -> u64 {
    42
}
fn d_vehicles() -> usize {
    300
}
fn d_steps() -> u64 {
    20_000
}
fn d_one() -> usize {
    1
}
fn d_interval() -> u64 {
    100
}
fn d_superposition() -> u32 {
    100
}
fn d_true() -> bool {
    true
}
fn d_out() -> PathBuf {
    PathBuf::from("out")
}
fn d_turn_cooldown() -> u32 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Steps after an accepted learned turn during which further turns are refused.
    #[serde(default = "d_turn_cooldown")]
    pub turn_cooldown: u32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            turn_cooldown: d_turn_cooldown(),
        }
    }
}

impl From<&FusionConfig> for FusionParams {
    fn from(c: &FusionConfig) -> Self {
        FusionParams {
            turn_cooldown: c.turn_cooldown,
        }
    }
}

fn d_pre_vehicles() -> usize {
    4
}
fn d_pre_steps() -> u64 {
    50_000
}
fn d_top_k() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainParams {
    #[serde(default = "d_pre_vehicles")]
    pub vehicles: usize,
    #[serde(default = "d_pre_steps")]
    pub steps: u64,
    /// Number of best models written.
    #[serde(default = "d_top_k")]
    pub top_k: usize,
}

impl Default for PretrainParams {
    fn default() -> Self {
        PretrainParams {
            vehicles: d_pre_vehicles(),
            steps: d_pre_steps(),
            top_k: d_top_k(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_vehicles")]
    pub vehicles: usize,
    #[serde(default = "d_steps")]
    pub steps: u64,
    /// Threads of the decision and learning phases; results do not depend on it.
    #[serde(default = "d_one")]
    pub workers: usize,
    #[serde(default = "d_interval")]
    pub sampling_interval: u64,
    /// Percentage of decision points at which the learned navigator is consulted.
    #[serde(default = "d_superposition")]
    pub superposition: u32,
    #[serde(default = "d_true")]
    pub learner_enabled: bool,
    /// Append the destination-direction one-hot to the learner state.
    #[serde(default)]
    pub state_with_td: bool,
    #[serde(default = "d_out")]
    pub out: PathBuf,
    /// Models assigned to vehicles uniformly at random; empty = fresh networks.
    #[serde(default)]
    pub pretrained_models: Vec<PathBuf>,
    /// Write every vehicle's final model.
    #[serde(default)]
    pub save_models: bool,
    /// Write vehicle positions at each sampling step.
    #[serde(default)]
    pub trajectories: bool,
    #[serde(default)]
    pub map: GridMapParams,
    #[serde(default)]
    pub behaviour: BehaviourParams,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub reward: RewardWeights,
    #[serde(default)]
    pub learner: LearnerParams,
    #[serde(default)]
    pub jam: JamParams,
    #[serde(default)]
    pub pretrain: PretrainParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialise")
    }
}

fn range(key: &str, value: impl ToString, bound: &str) -> Error {
    Error::Range {
        key: key.into(),
        value: value.to_string(),
        bound: bound.into(),
    }
}

/// No setting accepts a negative integer; reject them with the key path
/// before typed parsing turns them into an opaque type error.
fn reject_negative(prefix: &str, table: &toml::Table) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Integer(i) if *i < 0 => return Err(range(&key, i, "must be >= 0")),
            toml::Value::Table(t) => reject_negative(&key, t)?,
            _ => {}
        }
    }
    Ok(())
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
    reject_negative("", &table)?;
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<ScenarioConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Reads a stand-alone map parameter file (the keys of the `[map]` section).
pub fn load_map_params(path: &std::path::Path) -> Result<GridMapParams> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
    reject_negative("map", &table)?;
    let params: GridMapParams = toml::from_str(&text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
    params.validate()?;
    Ok(params)
}

impl ScenarioConfig {
    /// Checks every bound that does not need the generated map.
    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        self.behaviour.validate()?;
        self.reward.validate()?;
        self.learner.validate()?;
        self.jam.validate()?;
        if self.vehicles == 0 {
            return Err(range("vehicles", 0, "must be >= 1"));
        }
        if self.steps == 0 {
            return Err(range("steps", 0, "must be >= 1"));
        }
        if self.workers == 0 {
            return Err(range("workers", 0, "must be >= 1"));
        }
        if self.sampling_interval == 0 {
            return Err(range("sampling_interval", 0, "must be >= 1"));
        }
        if self.superposition > 100 {
            return Err(range("superposition", self.superposition, "must be in [0, 100]"));
        }
        if self.pretrain.vehicles == 0 {
            return Err(range("pretrain.vehicles", 0, "must be >= 1"));
        }
        if self.pretrain.steps == 0 {
            return Err(range("pretrain.steps", 0, "must be >= 1"));
        }
        if self.pretrain.top_k == 0 {
            return Err(range("pretrain.top_k", 0, "must be >= 1"));
        }
        for p in &self.pretrained_models {
            if !p.is_file() {
                return Err(Error::ModelLoad(format!("model file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Checks the vehicle count against the capacity of the generated map.
    pub fn check_capacity(&self, counts: &MapCounts) -> Result<()> {
        if self.vehicles > counts.capacity {
            return Err(Error::Config(format!(
                "{} vehicles exceed the map capacity of {} vehicles",
                self.vehicles, counts.capacity
            )));
        }
        Ok(())
    }
}

/// Run manifest: the fully resolved configuration plus derived quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub counts: MapCounts,
    pub capacity: usize,
    /// `vehicles / capacity`.
    pub occupancy: f64,
    /// Occupancy in percent, two decimals.
    pub occupancy_percent: String,
}

impl Manifest {
    pub fn new(cfg: &ScenarioConfig, counts: &MapCounts) -> Self {
        let occupancy = cfg.vehicles as f64 / counts.capacity as f64;
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            counts: counts.clone(),
            capacity: counts.capacity,
            occupancy,
            occupancy_percent: format!("{:.2}", occupancy * 100.0),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.vehicles, 300);
        assert_eq!(cfg.learner.hidden, 32);
        assert_eq!(cfg.jam.window, 200);
        let map = crate::world::generate_map(&cfg.map).unwrap();
        let json: serde_json::Value = serde_json::from_str(&Manifest::new(&cfg, map.counts()).to_json()).unwrap();
        for key in [
            "seed",
            "steps",
            "superposition",
            "map",
            "behaviour",
            "reward",
            "learner",
            "jam",
            "pretrain",
        ] {
            assert!(json["config"].get(key).is_some(), "manifest lacks {key}");
        }
        assert_eq!(json["config"]["learner"]["gamma"], 0.9);
    }

    #[test]
    fn negative_count_is_range_error() {
        let err = parse_config("vehicles = -1").unwrap_err();
        assert!(
            matches!(err, Error::Range { ref key, .. } if key == "vehicles"),
            "{err}"
        );
        let err = parse_config("[map]\nsegment_len = -3").unwrap_err();
        assert!(matches!(err, Error::Range { ref key, .. } if key == "map.segment_len"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("vehcles = 10").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("vehcles"), "{err}");
        assert!(parse_config("[learner]\ngama = 0.5")
            .unwrap_err()
            .to_string()
            .contains("gama"));
    }

    #[test]
    fn bounds() {
        assert!(parse_config("superposition = 101").is_err());
        assert!(parse_config("steps = 0").is_err());
        assert!(parse_config("[map]\njunction_size = 4").is_err());
        assert!(parse_config("pretrained_models = [\"/nonexistent/model.json\"]")
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn capacity_check() {
        let cfg = parse_config("vehicles = 5000").unwrap();
        let map = crate::world::generate_map(&cfg.map).unwrap();
        let err = cfg.check_capacity(map.counts()).unwrap_err();
        assert!(err.to_string().contains("2016"));
    }

    #[test]
    fn occupancy_of_reference_population() {
        let cfg = ScenarioConfig::default();
        let map = crate::world::generate_map(&cfg.map).unwrap();
        let m = Manifest::new(&cfg, map.counts());
        assert_eq!(m.capacity, 2016);
        assert_eq!(m.occupancy_percent, "14.88");
    }
}
