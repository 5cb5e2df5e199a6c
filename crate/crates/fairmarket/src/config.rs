//! Scenario configuration: one TOML file describing the community, noise,
//! shaping, training, and critic settings, with CLI `--set key=value`
//! overrides. Unknown keys are rejected; every default is visible through
//! `print-config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auction::PriceBand;
use crate::environment::{EmpiricalProfiles, Environment, Tariffs};
use crate::error::{Error, Result};
use crate::fairness::{
    CriticBackend, DeterministicCritic, RampSchedule, RemoteCritic, ShapingConfig,
    CRITIC_TIMEOUT_ENV, CRITIC_URL_ENV, DEFAULT_CRITIC_TIMEOUT,
};
use crate::learner::TrainConfig;
use crate::profiles::{self, HouseholdSpec, NoiseConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketSection {
    pub alpha: f64,
    pub p_sunny: f64,
    pub days: u32,
    pub learned_consumers: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_profiles: Option<PathBuf>,
    pub band: PriceBand,
    pub tariffs: Tariffs,
}

impl Default for MarketSection {
    fn default() -> Self {
        MarketSection {
            alpha: 0.37,
            p_sunny: 0.7,
            days: 30,
            learned_consumers: false,
            template_file: None,
            empirical_profiles: None,
            band: PriceBand::default(),
            tariffs: Tariffs::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingSection {
    pub beta_grid: f64,
    pub beta_price: f64,
    pub beta_peer: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_ramp: Option<RampSchedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub price_ramp: Option<RampSchedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer_ramp: Option<RampSchedule>,
}

impl Default for ShapingSection {
    fn default() -> Self {
        ShapingSection {
            beta_grid: 10.0,
            beta_price: 10.0,
            beta_peer: 10.0,
            grid_ramp: None,
            price_ramp: None,
            peer_ramp: None,
        }
    }
}

impl ShapingSection {
    /// Resolve to a concrete shaping config; unset ramps take the default
    /// fractions of the training run length.
    pub fn resolve(&self, total_episodes: u64) -> ShapingConfig {
        let defaults = ShapingConfig::defaults_for(total_episodes);
        ShapingConfig {
            beta_grid: self.beta_grid,
            beta_price: self.beta_price,
            beta_peer: self.beta_peer,
            grid: self.grid_ramp.unwrap_or(defaults.grid),
            price: self.price_ramp.unwrap_or(defaults.price),
            peer: self.peer_ramp.unwrap_or(defaults.peer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CriticChoice {
    #[default]
    Deterministic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSection {
    pub backend: CriticChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for CriticSection {
    fn default() -> Self {
        CriticSection {
            backend: CriticChoice::Deterministic,
            endpoint: None,
            timeout_ms: DEFAULT_CRITIC_TIMEOUT.as_millis() as u64,
            retries: 0,
        }
    }
}

/// Everything a run consumes, in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Master seed; all per-agent and per-episode streams derive from it.
    pub seed: u64,
    pub market: MarketSection,
    pub noise: NoiseConfig,
    pub agents: Vec<HouseholdSpec>,
    pub shaping: ShapingSection,
    pub train: TrainConfig,
    pub critic: CriticSection,
}

impl Default for ScenarioConfig {
    /// The pilot-community scenario: three PV prosumers (one with a battery)
    /// and two consumers.
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            market: MarketSection::default(),
            noise: NoiseConfig::default(),
            agents: default_agents(),
            shaping: ShapingSection::default(),
            train: TrainConfig::default(),
            critic: CriticSection::default(),
        }
    }
}

fn default_agents() -> Vec<HouseholdSpec> {
    vec![
        HouseholdSpec::prosumer("P1", 0.6, 4.0).with_battery(8.0, 3.0, 3.0),
        HouseholdSpec::prosumer("P2", 0.8, 3.0).with_battery(6.0, 2.5, 2.5),
        HouseholdSpec::prosumer("P3", 0.8, 2.5),
        HouseholdSpec::consumer("C1", 2.0),
        HouseholdSpec::consumer("C2", 1.8),
    ]
}

impl ScenarioConfig {
    /// Load from a TOML file, then apply `--set key=value` overrides
    /// (flag > file > default). The file is merged over the serialized
    /// defaults: tables merge key-wise, arrays and scalars replace.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ScenarioConfig> {
        let mut value = toml::Value::try_from(ScenarioConfig::default())
            .map_err(|e| Error::Config(format!("default config serialization: {e}")))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            let file_table: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))?;
            merge_toml(&mut value, toml::Value::Table(file_table));
        }
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let config: ScenarioConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.build_environment()?;
        self.train.validate()?;
        self.shaping.resolve(self.train.total_episodes).validate()?;
        if self.critic.backend == CriticChoice::Remote
            && self.critic.endpoint.is_none()
            && std::env::var(CRITIC_URL_ENV).is_err()
        {
            return Err(Error::Config(format!(
                "remote critic selected but no endpoint given (set critic.endpoint or {CRITIC_URL_ENV})"
            )));
        }
        Ok(())
    }

    /// Effective config as TOML; reloading this text reproduces the config.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Evaluation environment over the configured horizon.
    pub fn build_environment(&self) -> Result<Environment> {
        self.environment_with_days(self.market.days)
    }

    /// Training environment: one-day episodes with freshly sampled weather.
    pub fn training_environment(&self) -> Result<Environment> {
        self.environment_with_days(1)
    }

    pub fn environment_with_days(&self, days: u32) -> Result<Environment> {
        let mut builder = Environment::builder(self.agents.clone())
            .alpha(self.market.alpha)
            .p_sunny(self.market.p_sunny)
            .days(days)
            .band(self.market.band)
            .tariffs(self.market.tariffs)
            .noise(self.noise)
            .learned_consumers(self.market.learned_consumers);
        if let Some(template_file) = &self.market.template_file {
            let (load, pv) = profiles::load_templates_csv(template_file)?;
            builder = builder.templates(load, pv);
        }
        if let Some(empirical) = &self.market.empirical_profiles {
            builder = builder.empirical(EmpiricalProfiles::from_csv(empirical)?);
        }
        builder.build()
    }

    pub fn shaping_config(&self) -> ShapingConfig {
        self.shaping.resolve(self.train.total_episodes)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Construct the configured critic. Environment variables override the
    /// file: a set `FAIRMARKET_CRITIC_URL` switches on the remote backend.
    pub fn critic(&self, env: &Environment) -> Box<dyn CriticBackend> {
        let names: Vec<String> = env.specs().iter().map(|s| s.name.clone()).collect();
        if let Some(remote) = RemoteCritic::from_env(*env.band(), names.clone()) {
            return Box::new(remote);
        }
        match self.critic.backend {
            CriticChoice::Deterministic => Box::new(DeterministicCritic::new(*env.band())),
            CriticChoice::Remote => {
                let endpoint = self
                    .critic
                    .endpoint
                    .clone()
                    .expect("validated: remote backend has an endpoint");
                let timeout = std::env::var(CRITIC_TIMEOUT_ENV)
                    .ok()
                    .and_then(|ms| ms.trim().parse::<u64>().ok())
                    .map(std::time::Duration::from_millis)
                    .unwrap_or(std::time::Duration::from_millis(self.critic.timeout_ms));
                Box::new(RemoteCritic::new(
                    endpoint,
                    timeout,
                    self.critic.retries,
                    *env.band(),
                    names,
                ))
            }
        }
    }
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(base_table), toml::Value::Table(overlay_table)) => {
            for (key, value) in overlay_table {
                match base_table.get_mut(&key) {
                    Some(slot) if slot.is_table() && value.is_table() => merge_toml(slot, value),
                    _ => {
                        base_table.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Apply one dotted-path override onto the raw TOML tree. Array elements are
/// addressed as `agents.0.peak_pv_kw`.
fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = parse_override_value(raw);
    let mut current = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if let Ok(index) = part.parse::<usize>() {
            let toml::Value::Array(items) = current else {
                return Err(Error::Config(format!(
                    "override `{key}`: `{part}` indexes a non-array"
                )));
            };
            if index >= items.len() {
                return Err(Error::Config(format!(
                    "override `{key}`: index {index} out of range"
                )));
            }
            if last {
                items[index] = parsed;
                return Ok(());
            }
            current = &mut items[index];
        } else {
            let toml::Value::Table(table) = current else {
                return Err(Error::Config(format!(
                    "override `{key}`: `{part}` indexes a non-table"
                )));
            };
            if last {
                table.insert(part.to_string(), parsed);
                return Ok(());
            }
            current = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}
