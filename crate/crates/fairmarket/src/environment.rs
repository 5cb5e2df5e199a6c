//! Partially observable multi-agent market environment.
//!
//! One `Environment` describes the community (households, tariffs, price
//! band, weather regime); an `EpisodeState` carries the evolving simulator
//! state. Each slot: storage decisions apply, orders are built under
//! forecast-based feasibility bounds, the CDA clears, realized imbalances
//! settle against the grid, and raw economic rewards are paid.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{self, round_kwh, AgentId, Order, PriceBand, Side, SlotLedger};
use crate::error::{Error, Result};
use crate::profiles::{
    self, forecast, realize_load, realize_pv, HouseholdSpec, NoiseConfig, ProfileTemplate, Role,
    WeatherDay, HOURS_PER_DAY,
};
use crate::rng::{derive_rng, stream};

/// Quantity menu: fractions of the feasibility bound.
pub const QTY_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Storage menu: fractions of the clamped charge/discharge maximum.
pub const STORAGE_FRACTIONS: [f64; 3] = [0.25, 0.5, 1.0];
/// Observation vector length.
pub const OBS_LEN: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StorageOp {
    #[default]
    Idle,
    Charge,
    Discharge,
}

impl StorageOp {
    pub fn from_index(idx: usize) -> Option<StorageOp> {
        match idx {
            0 => Some(StorageOp::Idle),
            1 => Some(StorageOp::Charge),
            2 => Some(StorageOp::Discharge),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            StorageOp::Idle => 0,
            StorageOp::Charge => 1,
            StorageOp::Discharge => 2,
        }
    }
}

/// Factored discrete decision for one agent and slot. Consumers use only the
/// bid-quantity component; their bid price is pinned to the retail tariff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Action {
    pub ask_price_idx: usize,
    pub ask_qty_idx: usize,
    pub bid_price_idx: usize,
    pub bid_qty_idx: usize,
    pub storage_op: StorageOp,
    pub storage_frac_idx: usize,
}

impl Action {
    /// All-idle action: zero quantities, no storage movement.
    pub fn idle() -> Action {
        Action::default()
    }

    pub fn validate(&self, band: &PriceBand) -> Result<()> {
        let levels = band.levels();
        if self.ask_price_idx >= levels || self.bid_price_idx >= levels {
            return Err(Error::Invariant(format!(
                "price index out of range (menu has {levels} levels)"
            )));
        }
        if self.ask_qty_idx >= QTY_FRACTIONS.len() || self.bid_qty_idx >= QTY_FRACTIONS.len() {
            return Err(Error::Invariant("quantity index out of range".into()));
        }
        if self.storage_frac_idx >= STORAGE_FRACTIONS.len() {
            return Err(Error::Invariant("storage fraction index out of range".into()));
        }
        Ok(())
    }
}

/// Per-agent local observation, already normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_LEN]);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tariffs {
    pub retail_cents: f64,
    pub feed_in_cents: f64,
}

impl Default for Tariffs {
    fn default() -> Self {
        Tariffs {
            retail_cents: 30.0,
            feed_in_cents: 10.0,
        }
    }
}

/// Hourly series replacing template-based realization for selected agents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmpiricalProfiles {
    /// Agent name -> hourly (load_kwh, pv_kwh) records.
    pub series: BTreeMap<String, Vec<(f64, f64)>>,
}

impl EmpiricalProfiles {
    /// Load hourly profiles from CSV with columns
    /// `timestamp,household,load_kwh,pv_kwh`; rows must be time-sorted per
    /// household (the `ingest` command emits this format).
    pub fn from_csv(path: &std::path::Path) -> Result<EmpiricalProfiles> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("empirical CSV missing column `{name}`")))
        };
        let (household_col, load_col, pv_col) =
            (col("household")?, col("load_kwh")?, col("pv_kwh")?);
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let parse = |idx: usize, label: &str| -> Result<f64> {
                let field = &record[idx];
                let value: f64 = field.trim().parse().map_err(|_| {
                    Error::Data(format!("empirical CSV row {}: bad {label} `{field}`", i + 2))
                })?;
                if value < 0.0 || !value.is_finite() {
                    return Err(Error::Data(format!(
                        "empirical CSV row {}: negative {label}",
                        i + 2
                    )));
                }
                Ok(value)
            };
            series
                .entry(record[household_col].to_string())
                .or_default()
                .push((parse(load_col, "load_kwh")?, parse(pv_col, "pv_kwh")?));
        }
        if series.is_empty() {
            return Err(Error::Data("empirical CSV holds no data rows".into()));
        }
        Ok(EmpiricalProfiles { series })
    }
}

/// Immutable description of the market community.
#[derive(Debug, Clone)]
pub struct Environment {
    specs: Vec<HouseholdSpec>,
    load_template: ProfileTemplate,
    pv_template: ProfileTemplate,
    tariffs: Tariffs,
    band: PriceBand,
    alpha: f64,
    p_sunny: f64,
    days: u32,
    noise: NoiseConfig,
    learned_consumers: bool,
    empirical: Option<EmpiricalProfiles>,
}

pub struct EnvironmentBuilder {
    env: Environment,
}

impl EnvironmentBuilder {
    pub fn templates(mut self, load: ProfileTemplate, pv: ProfileTemplate) -> Self {
        self.env.load_template = load;
        self.env.pv_template = pv;
        self
    }

    pub fn tariffs(mut self, tariffs: Tariffs) -> Self {
        self.env.tariffs = tariffs;
        self
    }

    pub fn band(mut self, band: PriceBand) -> Self {
        self.env.band = band;
        self
    }

    pub fn alpha(mut self, alpha: f64) -> Self {
        self.env.alpha = alpha;
        self
    }

    pub fn p_sunny(mut self, p: f64) -> Self {
        self.env.p_sunny = p;
        self
    }

    pub fn days(mut self, days: u32) -> Self {
        self.env.days = days;
        self
    }

    pub fn noise(mut self, noise: NoiseConfig) -> Self {
        self.env.noise = noise;
        self
    }

    pub fn learned_consumers(mut self, on: bool) -> Self {
        self.env.learned_consumers = on;
        self
    }

    pub fn empirical(mut self, profiles: EmpiricalProfiles) -> Self {
        self.env.empirical = Some(profiles);
        self
    }

    pub fn build(self) -> Result<Environment> {
        self.env.validate()?;
        Ok(self.env)
    }
}

impl Environment {
    pub fn builder(specs: Vec<HouseholdSpec>) -> EnvironmentBuilder {
        EnvironmentBuilder {
            env: Environment {
                specs,
                load_template: ProfileTemplate::default_load(),
                pv_template: ProfileTemplate::default_pv(),
                tariffs: Tariffs::default(),
                band: PriceBand::default(),
                alpha: 0.37,
                p_sunny: 0.7,
                days: 1,
                noise: NoiseConfig::default(),
                learned_consumers: false,
                empirical: None,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::Config("horizon must span at least one day".into()));
        }
        if !self.specs.iter().any(|s| s.role == Role::Prosumer) {
            return Err(Error::Config("at least one prosumer is required".into()));
        }
        let mut names: Vec<&str> = self.specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.specs.len() {
            return Err(Error::Config("agent names must be unique".into()));
        }
        for spec in &self.specs {
            spec.validate()?;
        }
        self.band.validate()?;
        self.noise.validate()?;
        profiles::intensity(true, self.alpha)?;
        if !(0.0..=1.0).contains(&self.p_sunny) {
            return Err(Error::Config(format!(
                "p_sunny must lie in [0, 1], got {}",
                self.p_sunny
            )));
        }
        if self.tariffs.feed_in_cents > self.tariffs.retail_cents {
            return Err(Error::Config(
                "feed-in tariff must not exceed the retail tariff".into(),
            ));
        }
        // Consumer bids are pinned to the retail tariff, so it must sit on the
        // discrete price grid; the feed-in tariff must undercut every peer
        // price so settlement refunds can never turn a cost negative.
        let retail = self.tariffs.retail_cents;
        if retail.fract() != 0.0 || !self.band.contains(retail as u32) {
            return Err(Error::Config(format!(
                "retail tariff must be an integer price inside the band [{}, {}]",
                self.band.min_cents, self.band.max_cents
            )));
        }
        if self.tariffs.feed_in_cents > self.band.min_cents as f64 {
            return Err(Error::Config(
                "feed-in tariff must not exceed the price-band minimum".into(),
            ));
        }
        if let Some(empirical) = &self.empirical {
            for name in empirical.series.keys() {
                if !self.specs.iter().any(|s| &s.name == name) {
                    return Err(Error::Config(format!(
                        "empirical profile references unknown agent `{name}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn specs(&self) -> &[HouseholdSpec] {
        &self.specs
    }

    pub fn agent_name(&self, agent: AgentId) -> &str {
        &self.specs[agent.0 as usize].name
    }

    pub fn num_agents(&self) -> usize {
        self.specs.len()
    }

    pub fn prosumer_indices(&self) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == Role::Prosumer)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn band(&self) -> &PriceBand {
        &self.band
    }

    pub fn tariffs(&self) -> &Tariffs {
        &self.tariffs
    }

    pub fn days(&self) -> u32 {
        self.days
    }

    pub fn horizon_slots(&self) -> u64 {
        self.days as u64 * HOURS_PER_DAY as u64
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    pub fn learned_consumers(&self) -> bool {
        self.learned_consumers
    }

    /// Copy of this environment with household peaks scaled; used by the
    /// sensitivity counterfactuals.
    pub fn scaled(&self, pv_scale: f64, load_scale: f64) -> Result<Environment> {
        let mut env = self.clone();
        for spec in &mut env.specs {
            spec.peak_pv_kw *= pv_scale;
            spec.peak_load_kw *= load_scale;
        }
        env.validate()?;
        Ok(env)
    }

    /// Start a fresh episode: slot 0, weather for day 0, storage at half
    /// capacity, first slot realized.
    pub fn reset(&self, seed: u64) -> EpisodeState {
        let n = self.specs.len();
        let mut state = EpisodeState {
            slot: 0,
            weather: WeatherDay {
                sunny: true,
                intensity: 1.0,
            },
            loads_kwh: vec![0.0; n],
            pvs_kwh: vec![0.0; n],
            load_forecast_kwh: vec![0.0; n],
            pv_forecast_kwh: vec![0.0; n],
            soc_kwh: self
                .specs
                .iter()
                .map(|s| {
                    if s.has_storage {
                        0.5 * s.batt_capacity_kwh
                    } else {
                        0.0
                    }
                })
                .collect(),
            done: false,
            weather_rng: derive_rng(seed, &[stream::WEATHER]),
            load_rng: derive_rng(seed, &[stream::LOAD]),
            pv_rng: derive_rng(seed, &[stream::PV]),
            forecast_rng: derive_rng(seed, &[stream::FORECAST]),
        };
        state.weather = self.sample_day_weather(&mut state);
        self.realize_slot(&mut state);
        state
    }

    fn sample_day_weather(&self, state: &mut EpisodeState) -> WeatherDay {
        let sunny = profiles::sample_weather(self.p_sunny, &mut state.weather_rng)
            .expect("p_sunny validated at construction");
        WeatherDay::new(sunny, self.alpha).expect("alpha validated at construction")
    }

    /// Realize true loads/PV and the one-step-ahead forecasts for the current
    /// slot. Forecasts are drawn once per slot; `observe` and the feasibility
    /// projection both see the same values.
    fn realize_slot(&self, state: &mut EpisodeState) {
        let hour = state.hour();
        let slot = state.slot as usize;
        for (i, spec) in self.specs.iter().enumerate() {
            let empirical = self
                .empirical
                .as_ref()
                .and_then(|e| e.series.get(&spec.name))
                .and_then(|series| {
                    if series.is_empty() {
                        None
                    } else {
                        Some(series[slot % series.len()])
                    }
                });
            if let Some((load, pv)) = empirical {
                state.loads_kwh[i] = load;
                state.pvs_kwh[i] = if spec.pv_owner { pv } else { 0.0 };
            } else {
                state.loads_kwh[i] = realize_load(
                    spec,
                    &self.load_template,
                    hour,
                    &self.noise,
                    &mut state.load_rng,
                );
                state.pvs_kwh[i] = realize_pv(
                    spec,
                    &self.pv_template,
                    hour,
                    state.weather.intensity,
                    &self.noise,
                    &mut state.pv_rng,
                );
            }
            state.load_forecast_kwh[i] =
                forecast(state.loads_kwh[i], &self.noise, &mut state.forecast_rng);
            state.pv_forecast_kwh[i] =
                forecast(state.pvs_kwh[i], &self.noise, &mut state.forecast_rng);
        }
    }

    /// Local observation for one agent: own forecasts, own SOC, and the
    /// public time/weather signals. The order book is never exposed.
    pub fn observe(&self, state: &EpisodeState, agent_idx: usize) -> Observation {
        let spec = &self.specs[agent_idx];
        let lhat = state.load_forecast_kwh[agent_idx];
        let ghat = state.pv_forecast_kwh[agent_idx];
        let soc = if spec.has_storage {
            state.soc_kwh[agent_idx]
        } else {
            0.0
        };
        let load_peak = spec.peak_load_kw.max(1.0);
        let pv_peak = spec.peak_pv_kw.max(1.0);
        let net_peak = spec.peak_load_kw.max(spec.peak_pv_kw).max(1.0);
        let soc_norm = if spec.has_storage && spec.batt_capacity_kwh > 0.0 {
            soc / spec.batt_capacity_kwh
        } else {
            0.0
        };
        let day_denom = self.days.saturating_sub(1).max(1) as f64;
        Observation([
            (lhat - ghat) / net_peak,
            lhat / load_peak,
            ghat / pv_peak,
            soc_norm,
            state.hour() as f64 / 23.0,
            state.weather.intensity,
            state.day() as f64 / day_denom,
        ])
    }

    /// Advance one slot. `actions` must hold one entry per agent in roster
    /// order; consumer entries are ignored unless learned consumers are on.
    pub fn step(&self, state: &mut EpisodeState, actions: &[Action]) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::Invariant("step called on a finished episode".into()));
        }
        let n = self.specs.len();
        if actions.len() != n {
            return Err(Error::Invariant(format!(
                "expected {n} actions, got {}",
                actions.len()
            )));
        }
        for action in actions {
            action.validate(&self.band)?;
        }

        // Storage first, so the net position is well-defined within the slot.
        let mut q_ch = vec![0.0; n];
        let mut q_dis = vec![0.0; n];
        for (i, spec) in self.specs.iter().enumerate() {
            let action = &actions[i];
            let fraction = STORAGE_FRACTIONS[action.storage_frac_idx];
            let requested = match action.storage_op {
                StorageOp::Idle => 0.0,
                StorageOp::Charge => fraction * max_charge_kwh(state.soc_kwh[i], spec),
                StorageOp::Discharge => fraction * max_discharge_kwh(state.soc_kwh[i], spec),
            };
            let (soc, ch, dis) =
                apply_storage(action.storage_op, requested, state.soc_kwh[i], spec);
            state.soc_kwh[i] = soc;
            q_ch[i] = ch;
            q_dis[i] = dis;
        }

        // Order submission: prosumer asks then bids in agent order, then
        // consumer bids at the retail tariff.
        let mut seq: u32 = 0;
        let mut asks: Vec<Order> = Vec::new();
        let mut bids: Vec<Order> = Vec::new();
        for (i, spec) in self.specs.iter().enumerate() {
            if spec.role != Role::Prosumer {
                continue;
            }
            let action = &actions[i];
            let lhat = state.load_forecast_kwh[i];
            let ghat = state.pv_forecast_kwh[i];
            let ask_qty = round_kwh(
                QTY_FRACTIONS[action.ask_qty_idx] * feasible_ask_max(lhat, ghat, spec.q_sell_max_kwh),
            );
            if ask_qty > 0.0 {
                asks.push(Order {
                    agent: AgentId(i as u32),
                    side: Side::Ask,
                    price_cents: self.band.min_cents + action.ask_price_idx as u32,
                    quantity_kwh: ask_qty,
                    seq,
                });
                seq += 1;
            }
            let bid_qty = round_kwh(
                QTY_FRACTIONS[action.bid_qty_idx] * feasible_bid_max(lhat, ghat, spec.q_buy_max_kwh),
            );
            if bid_qty > 0.0 {
                bids.push(Order {
                    agent: AgentId(i as u32),
                    side: Side::Bid,
                    price_cents: self.band.min_cents + action.bid_price_idx as u32,
                    quantity_kwh: bid_qty,
                    seq,
                });
                seq += 1;
            }
        }
        for (i, spec) in self.specs.iter().enumerate() {
            if spec.role != Role::Consumer {
                continue;
            }
            let bound = feasible_bid_max(state.load_forecast_kwh[i], 0.0, spec.q_buy_max_kwh);
            let fraction = if self.learned_consumers {
                QTY_FRACTIONS[actions[i].bid_qty_idx]
            } else {
                1.0
            };
            let qty = round_kwh(fraction * bound);
            if qty > 0.0 {
                bids.push(Order {
                    agent: AgentId(i as u32),
                    side: Side::Bid,
                    price_cents: self.tariffs.retail_cents as u32,
                    quantity_kwh: qty,
                    seq,
                });
                seq += 1;
            }
        }

        let outcome = auction::clear(&asks, &bids);

        // Grid settlement of each agent's realized residual imbalance. True
        // values, not forecasts: forecast error settles at grid tariffs.
        let mut grid_import: BTreeMap<AgentId, f64> = BTreeMap::new();
        let mut grid_export: BTreeMap<AgentId, f64> = BTreeMap::new();
        for (i, spec) in self.specs.iter().enumerate() {
            let id = AgentId(i as u32);
            let realized_net = net_position(
                state.loads_kwh[i],
                state.pvs_kwh[i],
                q_dis[i],
                q_ch[i],
                spec.has_storage,
            );
            let peer_net: f64 = outcome
                .trades
                .iter()
                .map(|t| {
                    if t.buyer == id {
                        t.quantity_kwh
                    } else if t.seller == id {
                        -t.quantity_kwh
                    } else {
                        0.0
                    }
                })
                .sum();
            let residual = realized_net - peer_net;
            if residual > 1e-12 {
                grid_import.insert(id, residual);
            } else if residual < -1e-12 {
                grid_export.insert(id, -residual);
            }
        }

        // Raw economic rewards including grid flows at tariffs.
        let mut profit_cents = vec![0.0; n];
        let mut cost_cents = vec![0.0; n];
        for trade in &outcome.trades {
            let cash = trade.price_cents as f64 * trade.quantity_kwh;
            let seller = trade.seller.0 as usize;
            let buyer = trade.buyer.0 as usize;
            match self.specs[seller].role {
                Role::Prosumer => profit_cents[seller] += cash,
                Role::Consumer => cost_cents[seller] -= cash,
            }
            match self.specs[buyer].role {
                Role::Prosumer => profit_cents[buyer] -= cash,
                Role::Consumer => cost_cents[buyer] += cash,
            }
        }
        for (&id, &qty) in &grid_import {
            let i = id.0 as usize;
            let cash = self.tariffs.retail_cents * qty;
            match self.specs[i].role {
                Role::Prosumer => profit_cents[i] -= cash,
                Role::Consumer => cost_cents[i] += cash,
            }
        }
        for (&id, &qty) in &grid_export {
            let i = id.0 as usize;
            let cash = self.tariffs.feed_in_cents * qty;
            match self.specs[i].role {
                Role::Prosumer => profit_cents[i] += cash,
                Role::Consumer => cost_cents[i] -= cash,
            }
        }
        for (i, spec) in self.specs.iter().enumerate() {
            if spec.role == Role::Consumer && cost_cents[i] < 0.0 {
                if cost_cents[i] < -1e-6 {
                    return Err(Error::Invariant(format!(
                        "negative consumer cost {} for agent {}",
                        cost_cents[i], spec.name
                    )));
                }
                cost_cents[i] = 0.0;
            }
        }

        let mut submitted_ask_kwh: BTreeMap<AgentId, f64> = BTreeMap::new();
        for order in &asks {
            *submitted_ask_kwh.entry(order.agent).or_default() += order.quantity_kwh;
        }
        let mut submitted_bid_kwh: BTreeMap<AgentId, f64> = BTreeMap::new();
        for order in &bids {
            *submitted_bid_kwh.entry(order.agent).or_default() += order.quantity_kwh;
        }
        let ledger = SlotLedger {
            slot: state.slot,
            trades: outcome.trades,
            grid_import_kwh: grid_import,
            grid_export_kwh: grid_export,
            submitted_ask_kwh,
            submitted_bid_kwh,
            retail_tariff_cents: self.tariffs.retail_cents,
            feed_in_tariff_cents: self.tariffs.feed_in_cents,
        };
        ledger.validate_basic()?;

        // Advance the clock; a new day resamples weather.
        state.slot += 1;
        if state.slot >= self.horizon_slots() {
            state.done = true;
        } else {
            if state.hour() == 0 {
                state.weather = self.sample_day_weather(state);
            }
            self.realize_slot(state);
        }

        Ok(StepOutcome {
            ledger,
            rewards: RawRewards {
                profit_cents,
                cost_cents,
            },
            storage_charge_kwh: q_ch,
            storage_discharge_kwh: q_dis,
            done: state.done,
        })
    }
}

/// Evolving state of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub slot: u64,
    pub weather: WeatherDay,
    pub loads_kwh: Vec<f64>,
    pub pvs_kwh: Vec<f64>,
    pub load_forecast_kwh: Vec<f64>,
    pub pv_forecast_kwh: Vec<f64>,
    pub soc_kwh: Vec<f64>,
    pub done: bool,
    weather_rng: ChaCha8Rng,
    load_rng: ChaCha8Rng,
    pv_rng: ChaCha8Rng,
    forecast_rng: ChaCha8Rng,
}

impl EpisodeState {
    pub fn hour(&self) -> usize {
        (self.slot % HOURS_PER_DAY as u64) as usize
    }

    pub fn day(&self) -> u32 {
        (self.slot / HOURS_PER_DAY as u64) as u32
    }
}

/// Per-slot raw economic rewards, indexed by agent. Prosumers earn `profit`
/// (may be negative); consumers accrue `cost` (never negative).
#[derive(Debug, Clone, PartialEq)]
pub struct RawRewards {
    pub profit_cents: Vec<f64>,
    pub cost_cents: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub ledger: SlotLedger,
    pub rewards: RawRewards,
    pub storage_charge_kwh: Vec<f64>,
    pub storage_discharge_kwh: Vec<f64>,
    pub done: bool,
}

/// Maximum sellable quantity: `min(q_sell_max, max(0, pv_forecast - load_forecast))`.
pub fn feasible_ask_max(load_forecast: f64, pv_forecast: f64, q_sell_max: f64) -> f64 {
    (pv_forecast - load_forecast).max(0.0).min(q_sell_max)
}

/// Maximum purchasable quantity: `min(q_buy_max, max(0, load_forecast - pv_forecast))`.
pub fn feasible_bid_max(load_forecast: f64, pv_forecast: f64, q_buy_max: f64) -> f64 {
    (load_forecast - pv_forecast).max(0.0).min(q_buy_max)
}

/// Clamped maximum charge energy for one slot: power limit and the headroom
/// that keeps the SOC projection from truncating.
pub fn max_charge_kwh(soc: f64, spec: &HouseholdSpec) -> f64 {
    if !spec.has_storage {
        return 0.0;
    }
    spec.batt_p_ch_max_kw
        .min((spec.batt_capacity_kwh - soc).max(0.0) / spec.eta_c)
}

/// Clamped maximum discharge energy for one slot.
pub fn max_discharge_kwh(soc: f64, spec: &HouseholdSpec) -> f64 {
    if !spec.has_storage {
        return 0.0;
    }
    spec.batt_p_dis_max_kw.min(spec.eta_d * soc.max(0.0))
}

/// Apply a storage request. The request is clamped so power limits hold and
/// the SOC projection never truncates, then the SOC updates with charge and
/// discharge efficiencies. Non-storage agents are coerced to idle.
pub fn apply_storage(
    op: StorageOp,
    requested_kwh: f64,
    soc: f64,
    spec: &HouseholdSpec,
) -> (f64, f64, f64) {
    if !spec.has_storage {
        return (soc, 0.0, 0.0);
    }
    match op {
        StorageOp::Idle => (soc, 0.0, 0.0),
        StorageOp::Charge => {
            let q = requested_kwh.max(0.0).min(max_charge_kwh(soc, spec));
            let new_soc = (soc + spec.eta_c * q).clamp(0.0, spec.batt_capacity_kwh);
            (new_soc, q, 0.0)
        }
        StorageOp::Discharge => {
            let q = requested_kwh.max(0.0).min(max_discharge_kwh(soc, spec));
            let new_soc = (soc - q / spec.eta_d).clamp(0.0, spec.batt_capacity_kwh);
            (new_soc, 0.0, q)
        }
    }
}

/// Storage-adjusted net demand brought to market (negative means surplus).
pub fn net_position(load: f64, pv: f64, q_dis: f64, q_ch: f64, has_storage: bool) -> f64 {
    let s = if has_storage { 1.0 } else { 0.0 };
    load - pv - s * q_dis + s * q_ch
}

/// Episode returns: prosumers sum profits, consumers the negated cost sum.
pub fn episode_return(
    slots: &[RawRewards],
    specs: &[HouseholdSpec],
    expected_slots: u64,
) -> Result<Vec<f64>> {
    if slots.len() as u64 != expected_slots {
        return Err(Error::Invariant(format!(
            "expected {expected_slots} slot rewards, got {}",
            slots.len()
        )));
    }
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, spec)| match spec.role {
            Role::Prosumer => slots.iter().map(|r| r.profit_cents[i]).sum(),
            Role::Consumer => -slots.iter().map(|r| r.cost_cents[i]).sum::<f64>(),
        })
        .collect())
}
