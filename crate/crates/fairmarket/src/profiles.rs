//! Weather, household load/PV realization, and one-step-ahead forecasts.
//!
//! True series come from unit-peak 24-hour templates scaled by household
//! peaks, a daily weather intensity, and multiplicative log-normal noise.
//! Forecasts multiply the true value by unbiased Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HOURS_PER_DAY: usize = 24;

/// Daily weather: a sunny/cloudy flag and the derived PV intensity factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherDay {
    pub sunny: bool,
    pub intensity: f64,
}

impl WeatherDay {
    pub fn new(sunny: bool, alpha: f64) -> Result<Self> {
        Ok(WeatherDay {
            sunny,
            intensity: intensity(sunny, alpha)?,
        })
    }
}

/// PV intensity factor for a daily weather flag: `alpha + (1 - alpha) * flag`.
pub fn intensity(sunny: bool, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "weather intensity alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(alpha + (1.0 - alpha) * if sunny { 1.0 } else { 0.0 })
}

/// Draw the daily sunny flag.
pub fn sample_weather<R: Rng + ?Sized>(p_sunny: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&p_sunny) {
        return Err(Error::Config(format!(
            "p_sunny must lie in [0, 1], got {p_sunny}"
        )));
    }
    Ok(rng.random::<f64>() < p_sunny)
}

/// A unit-peak 24-hour profile: non-negative samples with max exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTemplate {
    values: [f64; HOURS_PER_DAY],
}

impl ProfileTemplate {
    pub fn new(values: [f64; HOURS_PER_DAY]) -> Result<Self> {
        let mut max = f64::NEG_INFINITY;
        for (h, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "template value at hour {h} must be finite and >= 0, got {v}"
                )));
            }
            max = max.max(v);
        }
        if (max - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "template must have unit peak, max is {max}"
            )));
        }
        Ok(ProfileTemplate { values })
    }

    pub fn value(&self, hour: usize) -> f64 {
        self.values[hour]
    }

    pub fn values(&self) -> &[f64; HOURS_PER_DAY] {
        &self.values
    }

    /// Default residential load shape: overnight floor 0.25, morning shoulder
    /// 0.55 at 07:00 peaking near 09:00, a mid-afternoon dip, and the evening
    /// maximum 1.0 at 19:00.
    pub fn default_load() -> Self {
        ProfileTemplate {
            values: [
                0.25, 0.25, 0.25, 0.25, 0.26, 0.30, // 00-05
                0.42, 0.55, 0.62, 0.66, 0.64, 0.62, // 06-11
                0.63, 0.61, 0.58, 0.60, 0.66, 0.78, // 12-17
                0.92, 1.00, 0.88, 0.66, 0.45, 0.32, // 18-23
            ],
        }
    }

    /// Default PV shape: `sin(pi * (h - 6) / 12)^1.5` inside 06:00-18:00,
    /// zero elsewhere, unit peak at noon.
    pub fn default_pv() -> Self {
        let mut values = [0.0; HOURS_PER_DAY];
        for (h, v) in values.iter_mut().enumerate() {
            if (6..=18).contains(&h) {
                let s = (std::f64::consts::PI * (h as f64 - 6.0) / 12.0).sin();
                *v = s.max(0.0).powf(1.5);
            }
        }
        // Guard against powf drift at the peak; the invariant requires max == 1.
        values[12] = 1.0;
        ProfileTemplate { values }
    }
}

/// Parse a template override file: CSV with header `hour,phi_load,phi_pv`
/// and exactly one row per hour 0..23.
pub fn load_templates_csv(path: &std::path::Path) -> Result<(ProfileTemplate, ProfileTemplate)> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut load = [f64::NAN; HOURS_PER_DAY];
    let mut pv = [f64::NAN; HOURS_PER_DAY];
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("template row {}: {e}", i + 2)))?;
        if record.len() != 3 {
            return Err(Error::Data(format!(
                "template row {}: expected 3 columns, got {}",
                i + 2,
                record.len()
            )));
        }
        let parse = |field: &str, name: &str| -> Result<f64> {
            field.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!("template row {}: bad {name} `{field}`", i + 2))
            })
        };
        let hour = parse(&record[0], "hour")? as usize;
        if hour >= HOURS_PER_DAY {
            return Err(Error::Data(format!(
                "template row {}: hour out of range",
                i + 2
            )));
        }
        if !load[hour].is_nan() {
            return Err(Error::Data(format!(
                "template row {}: duplicate hour {hour}",
                i + 2
            )));
        }
        load[hour] = parse(&record[1], "phi_load")?;
        pv[hour] = parse(&record[2], "phi_pv")?;
    }
    if load.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("template file must cover all 24 hours".into()));
    }
    Ok((ProfileTemplate::new(load)?, ProfileTemplate::new(pv)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prosumer,
    Consumer,
}

/// Static parameters of one household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HouseholdSpec {
    pub name: String,
    pub role: Role,
    pub peak_load_kw: f64,
    pub peak_pv_kw: f64,
    pub pv_owner: bool,
    pub has_storage: bool,
    pub batt_capacity_kwh: f64,
    pub batt_p_ch_max_kw: f64,
    pub batt_p_dis_max_kw: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub q_sell_max_kwh: f64,
    pub q_buy_max_kwh: f64,
}

impl Default for HouseholdSpec {
    fn default() -> Self {
        HouseholdSpec::consumer("", 0.0)
    }
}

impl HouseholdSpec {
    /// A pure consumer: load only, no PV, no storage.
    pub fn consumer(name: &str, peak_load_kw: f64) -> Self {
        HouseholdSpec {
            name: name.to_string(),
            role: Role::Consumer,
            peak_load_kw,
            peak_pv_kw: 0.0,
            pv_owner: false,
            has_storage: false,
            batt_capacity_kwh: 0.0,
            batt_p_ch_max_kw: 0.0,
            batt_p_dis_max_kw: 0.0,
            eta_c: 1.0,
            eta_d: 1.0,
            q_sell_max_kwh: 0.0,
            q_buy_max_kwh: 50.0,
        }
    }

    /// A PV prosumer without storage.
    pub fn prosumer(name: &str, peak_load_kw: f64, peak_pv_kw: f64) -> Self {
        HouseholdSpec {
            name: name.to_string(),
            role: Role::Prosumer,
            peak_load_kw,
            peak_pv_kw,
            pv_owner: true,
            has_storage: false,
            batt_capacity_kwh: 0.0,
            batt_p_ch_max_kw: 0.0,
            batt_p_dis_max_kw: 0.0,
            eta_c: 0.95,
            eta_d: 0.95,
            q_sell_max_kwh: 50.0,
            q_buy_max_kwh: 50.0,
        }
    }

    pub fn with_battery(mut self, capacity_kwh: f64, p_ch_kw: f64, p_dis_kw: f64) -> Self {
        self.has_storage = true;
        self.batt_capacity_kwh = capacity_kwh;
        self.batt_p_ch_max_kw = p_ch_kw;
        self.batt_p_dis_max_kw = p_dis_kw;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("agent `{}`: {msg}", self.name)));
        if self.name.is_empty() || self.name == "GRID" {
            return fail("name must be non-empty and not the reserved `GRID`".into());
        }
        if self.role == Role::Consumer && (self.pv_owner || self.has_storage) {
            return fail("consumers cannot own PV or storage".into());
        }
        if self.has_storage && self.batt_capacity_kwh <= 0.0 {
            return fail("storage requires positive capacity".into());
        }
        if !(self.eta_c > 0.0 && self.eta_c <= 1.0) || !(self.eta_d > 0.0 && self.eta_d <= 1.0) {
            return fail(format!(
                "efficiencies must lie in (0, 1], got eta_c={} eta_d={}",
                self.eta_c, self.eta_d
            ));
        }
        for (label, v) in [
            ("peak_load_kw", self.peak_load_kw),
            ("peak_pv_kw", self.peak_pv_kw),
            ("batt_capacity_kwh", self.batt_capacity_kwh),
            ("batt_p_ch_max_kw", self.batt_p_ch_max_kw),
            ("batt_p_dis_max_kw", self.batt_p_dis_max_kw),
            ("q_sell_max_kwh", self.q_sell_max_kwh),
            ("q_buy_max_kwh", self.q_buy_max_kwh),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{label} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Multiplicative noise settings. Sigmas are relative standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub load_sigma: f64,
    pub pv_sigma: f64,
    pub forecast_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            enabled: true,
            load_sigma: 0.05,
            pv_sigma: 0.05,
            forecast_sigma: 0.05,
        }
    }
}

impl NoiseConfig {
    pub const OFF: NoiseConfig = NoiseConfig {
        enabled: false,
        load_sigma: 0.0,
        pv_sigma: 0.0,
        forecast_sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (label, v) in [
            ("load_sigma", self.load_sigma),
            ("pv_sigma", self.pv_sigma),
            ("forecast_sigma", self.forecast_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "noise {label} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Log-normal multiplier with mean exactly 1 and the given relative s.d.
/// In log space: sigma_ln^2 = ln(1 + s^2), mu = -sigma_ln^2 / 2.
fn lognormal_factor<R: Rng + ?Sized>(rel_sd: f64, rng: &mut R) -> f64 {
    if rel_sd <= 0.0 {
        return 1.0;
    }
    let sigma_ln_sq = (1.0 + rel_sd * rel_sd).ln();
    let dist = LogNormal::new(-sigma_ln_sq / 2.0, sigma_ln_sq.sqrt())
        .expect("lognormal parameters are finite by construction");
    dist.sample(rng)
}

/// True hourly load in kWh: `peak_load * phi_load(hour) * eta`.
pub fn realize_load<R: Rng + ?Sized>(
    spec: &HouseholdSpec,
    template: &ProfileTemplate,
    hour: usize,
    noise: &NoiseConfig,
    rng: &mut R,
) -> f64 {
    let eta = if noise.enabled {
        lognormal_factor(noise.load_sigma, rng)
    } else {
        1.0
    };
    spec.peak_load_kw * template.value(hour) * eta
}

/// True hourly PV output in kWh: `o * peak_pv * kappa * phi_pv(hour) * eta`.
pub fn realize_pv<R: Rng + ?Sized>(
    spec: &HouseholdSpec,
    template: &ProfileTemplate,
    hour: usize,
    kappa: f64,
    noise: &NoiseConfig,
    rng: &mut R,
) -> f64 {
    if !spec.pv_owner {
        // Still consume one draw? No: non-owners have no PV stream at all.
        return 0.0;
    }
    let eta = if noise.enabled {
        lognormal_factor(noise.pv_sigma, rng)
    } else {
        1.0
    };
    spec.peak_pv_kw * kappa * template.value(hour) * eta
}

/// One-step-ahead forecast: `max(0, true * eps)` with `eps ~ N(1, sigma^2)`.
pub fn forecast<R: Rng + ?Sized>(true_value: f64, noise: &NoiseConfig, rng: &mut R) -> f64 {
    if !noise.enabled || noise.forecast_sigma <= 0.0 {
        return true_value;
    }
    let dist = Normal::new(1.0, noise.forecast_sigma)
        .expect("forecast sigma validated as finite and >= 0");
    (true_value * dist.sample(rng)).max(0.0)
}
