//! Fairness scoring of post-slot ledgers and reward shaping.
//!
//! Three slot-level scores in [0, 1]: FTG (peer-served share of demand),
//! FBS (Jain index over sellers' peer-sold quantities), FPP (executed-price
//! clustering around the median). Scores come from a pluggable critic; the
//! deterministic backend is the reference, a remote HTTP backend can stand
//! in and falls back to it on any failure so training never stalls.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::auction::{AgentId, PriceBand, SlotLedger};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessScores {
    pub ftg: f64,
    pub fbs: f64,
    pub fpp: f64,
}

impl FairnessScores {
    pub fn clamped(ftg: f64, fbs: f64, fpp: f64) -> FairnessScores {
        let clamp = |x: f64| if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 };
        FairnessScores {
            ftg: clamp(ftg),
            fbs: clamp(fbs),
            fpp: clamp(fpp),
        }
    }
}

/// Fairness-to-grid: peer-purchased energy over all demand served,
/// 1 when nothing was grid-imported (vacuously 1 on an empty slot).
pub fn ftg(ledger: &SlotLedger) -> f64 {
    let peer = ledger.peer_kwh();
    let grid = ledger.grid_import_total();
    let denom = peer + grid;
    if denom <= 0.0 {
        1.0
    } else {
        peer / denom
    }
}

/// Fairness-between-sellers: Jain's index over peer-sold quantities of the
/// prosumers that submitted a nonzero ask this slot. Vacuously 1 with at
/// most one active seller or when nothing sold.
pub fn fbs(ledger: &SlotLedger) -> f64 {
    let active: Vec<AgentId> = ledger
        .submitted_ask_kwh
        .iter()
        .filter(|(_, &q)| q > 0.0)
        .map(|(&a, _)| a)
        .collect();
    if active.len() <= 1 {
        return 1.0;
    }
    let sold: Vec<f64> = active.iter().map(|&a| ledger.peer_sold_by(a)).collect();
    let total: f64 = sold.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let sq: f64 = sold.iter().map(|q| q * q).sum();
    total * total / (active.len() as f64 * sq)
}

/// Fairness-of-pricing: one minus the mean absolute deviation of executed
/// peer prices from their median, scaled by the band half-width. Vacuously 1
/// with fewer than two trades.
pub fn fpp(ledger: &SlotLedger, band: &PriceBand) -> f64 {
    let mut prices: Vec<f64> = ledger
        .trades
        .iter()
        .map(|t| t.price_cents as f64)
        .collect();
    if prices.len() <= 1 {
        return 1.0;
    }
    prices.sort_by(f64::total_cmp);
    let mid = prices.len() / 2;
    let median = if prices.len() % 2 == 0 {
        (prices[mid - 1] + prices[mid]) / 2.0
    } else {
        prices[mid]
    };
    let mad = prices.iter().map(|p| (p - median).abs()).sum::<f64>() / prices.len() as f64;
    1.0 - (mad / band.half_width()).min(1.0)
}

/// Piecewise-linear coefficient schedule over training episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSchedule {
    pub e_start: u64,
    pub e_full: u64,
}

impl RampSchedule {
    pub fn new(e_start: u64, e_full: u64) -> Result<RampSchedule> {
        let schedule = RampSchedule { e_start, e_full };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.e_start >= self.e_full {
            return Err(Error::Config(format!(
                "ramp schedule requires e_start < e_full, got ({}, {})",
                self.e_start, self.e_full
            )));
        }
        Ok(())
    }
}

/// Ramp coefficient: 0 before `e_start`, linear in between, 1 from `e_full`.
pub fn ramp(episode: u64, schedule: &RampSchedule) -> f64 {
    if episode < schedule.e_start {
        0.0
    } else if episode >= schedule.e_full {
        1.0
    } else {
        (episode - schedule.e_start) as f64 / (schedule.e_full - schedule.e_start) as f64
    }
}

/// Reward-shaping scales and ramp schedules, fully resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    /// Cents of bonus per unit score.
    pub beta_grid: f64,
    pub beta_price: f64,
    pub beta_peer: f64,
    pub grid: RampSchedule,
    pub price: RampSchedule,
    pub peer: RampSchedule,
}

impl ShapingConfig {
    /// Default schedules for a training run of `total_episodes`: grid and
    /// price ramp over [0.02E, 0.30E], peer over [0.30E, 0.80E].
    pub fn defaults_for(total_episodes: u64) -> ShapingConfig {
        let e = total_episodes as f64;
        let at = |frac: f64| (frac * e).round() as u64;
        ShapingConfig {
            beta_grid: 10.0,
            beta_price: 10.0,
            beta_peer: 10.0,
            grid: RampSchedule {
                e_start: at(0.02),
                e_full: at(0.30).max(at(0.02) + 1),
            },
            price: RampSchedule {
                e_start: at(0.02),
                e_full: at(0.30).max(at(0.02) + 1),
            },
            peer: RampSchedule {
                e_start: at(0.30),
                e_full: at(0.80).max(at(0.30) + 1),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (label, beta) in [
            ("beta_grid", self.beta_grid),
            ("beta_price", self.beta_price),
            ("beta_peer", self.beta_peer),
        ] {
            if !beta.is_finite() || beta < 0.0 {
                return Err(Error::Config(format!(
                    "{label} must be finite and >= 0, got {beta}"
                )));
            }
        }
        self.grid.validate()?;
        self.price.validate()?;
        self.peer.validate()
    }

    /// Episode coefficients in (grid, price, peer) order.
    pub fn lambdas(&self, episode: u64) -> [f64; 3] {
        [
            ramp(episode, &self.grid),
            ramp(episode, &self.price),
            ramp(episode, &self.peer),
        ]
    }

    /// Shaping disabled entirely (all coefficients permanently zero via betas).
    pub fn off() -> ShapingConfig {
        ShapingConfig {
            beta_grid: 0.0,
            beta_price: 0.0,
            beta_peer: 0.0,
            ..ShapingConfig::defaults_for(1)
        }
    }
}

/// Slot-level shaped reward for one prosumer.
///
/// `lambdas` are the (grid, price, peer) ramp coefficients; the peer term is
/// weighted by the seller's share of this slot's peer-sold volume (zero when
/// nothing sold).
pub fn shape(
    profit_cents: f64,
    scores: &FairnessScores,
    lambdas: [f64; 3],
    config: &ShapingConfig,
    q_sold_kwh: f64,
    q_sold_total_kwh: f64,
) -> f64 {
    let share = if q_sold_total_kwh > 0.0 {
        q_sold_kwh / q_sold_total_kwh
    } else {
        0.0
    };
    profit_cents
        + lambdas[0] * config.beta_grid * scores.ftg
        + lambdas[1] * config.beta_price * scores.fpp
        + lambdas[2] * config.beta_peer * scores.fbs * share
}

/// Source of fairness scores for a slot ledger. Implementations must be
/// total: they always return scores in [0, 1] and never block indefinitely.
pub trait CriticBackend: Send + Sync {
    fn score(&self, ledger: &SlotLedger) -> FairnessScores;
    fn name(&self) -> &'static str;
}

/// Reference backend: the metric formulas above, composed.
#[derive(Debug, Clone)]
pub struct DeterministicCritic {
    band: PriceBand,
}

impl DeterministicCritic {
    pub fn new(band: PriceBand) -> DeterministicCritic {
        DeterministicCritic { band }
    }
}

impl CriticBackend for DeterministicCritic {
    fn score(&self, ledger: &SlotLedger) -> FairnessScores {
        FairnessScores::clamped(ftg(ledger), fbs(ledger), fpp(ledger, &self.band))
    }

    fn name(&self) -> &'static str {
        "deterministic"
    }
}

/// Environment variable naming the remote critic endpoint.
pub const CRITIC_URL_ENV: &str = "FAIRMARKET_CRITIC_URL";
/// Environment variable for the request timeout in milliseconds.
pub const CRITIC_TIMEOUT_ENV: &str = "FAIRMARKET_CRITIC_TIMEOUT_MS";
pub const DEFAULT_CRITIC_TIMEOUT: Duration = Duration::from_millis(2000);

#[derive(Debug, Deserialize)]
struct CriticReply {
    ftg: f64,
    fbs: f64,
    fpp: f64,
}

/// HTTP critic speaking the ledger-summary wire contract. Any transport
/// error, timeout, or unparseable reply falls back to the deterministic
/// critic; training never aborts on critic failure.
pub struct RemoteCritic {
    endpoint: String,
    agent: ureq::Agent,
    retries: u32,
    fallback: DeterministicCritic,
    agent_names: Vec<String>,
}

impl RemoteCritic {
    pub fn new(
        endpoint: String,
        timeout: Duration,
        retries: u32,
        band: PriceBand,
        agent_names: Vec<String>,
    ) -> RemoteCritic {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        RemoteCritic {
            endpoint,
            agent,
            retries,
            fallback: DeterministicCritic::new(band),
            agent_names,
        }
    }

    /// Backend from `FAIRMARKET_CRITIC_URL` / `FAIRMARKET_CRITIC_TIMEOUT_MS`,
    /// or `None` when no endpoint is configured.
    pub fn from_env(band: PriceBand, agent_names: Vec<String>) -> Option<RemoteCritic> {
        let endpoint = std::env::var(CRITIC_URL_ENV).ok()?;
        if endpoint.trim().is_empty() {
            return None;
        }
        let timeout = std::env::var(CRITIC_TIMEOUT_ENV)
            .ok()
            .and_then(|ms| ms.trim().parse::<u64>().ok())
            .map(Duration::from_millis)
            .unwrap_or(DEFAULT_CRITIC_TIMEOUT);
        Some(RemoteCritic::new(endpoint, timeout, 0, band, agent_names))
    }

    /// Ledger summary sent over the wire: aggregates only, no policy internals.
    pub fn payload(&self, ledger: &SlotLedger) -> serde_json::Value {
        let mut seller_kwh = serde_json::Map::new();
        for (&agent, &submitted) in &ledger.submitted_ask_kwh {
            if submitted > 0.0 {
                let name = self
                    .agent_names
                    .get(agent.0 as usize)
                    .cloned()
                    .unwrap_or_else(|| format!("agent{}", agent.0));
                seller_kwh.insert(name, serde_json::json!(ledger.peer_sold_by(agent)));
            }
        }
        let prices: Vec<f64> = ledger
            .trades
            .iter()
            .map(|t| t.price_cents as f64)
            .collect();
        serde_json::json!({
            "slot": ledger.slot,
            "peer_kwh": ledger.peer_kwh(),
            "grid_import_kwh": ledger.grid_import_total(),
            "grid_export_kwh": ledger.grid_export_total(),
            "seller_kwh": seller_kwh,
            "trade_prices_cents": prices,
        })
    }

    fn remote_score(&self, ledger: &SlotLedger) -> std::result::Result<FairnessScores, String> {
        let payload = self.payload(ledger);
        let mut last_error = String::new();
        for _attempt in 0..=self.retries {
            let reply: std::result::Result<CriticReply, ureq::Error> = self
                .agent
                .post(&self.endpoint)
                .send_json(&payload)
                .and_then(|mut response| response.body_mut().read_json());
            match reply {
                Ok(reply) => {
                    if !(reply.ftg.is_finite() && reply.fbs.is_finite() && reply.fpp.is_finite()) {
                        return Err("non-finite score in reply".into());
                    }
                    return Ok(FairnessScores::clamped(reply.ftg, reply.fbs, reply.fpp));
                }
                Err(err) => last_error = err.to_string(),
            }
        }
        Err(last_error)
    }
}

impl CriticBackend for RemoteCritic {
    fn score(&self, ledger: &SlotLedger) -> FairnessScores {
        match self.remote_score(ledger) {
            Ok(scores) => scores,
            Err(reason) => {
                log::warn!(
                    "remote critic failed for slot {} ({reason}); using deterministic fallback",
                    ledger.slot
                );
                self.fallback.score(ledger)
            }
        }
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::Trade;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn ledger_with(
        trades: Vec<(u32, u32, u32, f64)>,
        imports: Vec<(u32, f64)>,
        asks: Vec<(u32, f64)>,
    ) -> SlotLedger {
        SlotLedger {
            slot: 0,
            trades: trades
                .into_iter()
                .map(|(s, b, p, q)| Trade {
                    seller: AgentId(s),
                    buyer: AgentId(b),
                    price_cents: p,
                    quantity_kwh: q,
                })
                .collect(),
            grid_import_kwh: imports.into_iter().map(|(a, q)| (AgentId(a), q)).collect(),
            grid_export_kwh: BTreeMap::new(),
            submitted_ask_kwh: asks.into_iter().map(|(a, q)| (AgentId(a), q)).collect(),
            submitted_bid_kwh: BTreeMap::new(),
            retail_tariff_cents: 30.0,
            feed_in_tariff_cents: 10.0,
        }
    }

    #[test]
    fn ftg_boundaries() {
        let all_peer = ledger_with(vec![(0, 9, 15, 6.0)], vec![], vec![(0, 6.0)]);
        assert_eq!(ftg(&all_peer), 1.0);
        let all_grid = ledger_with(vec![], vec![(9, 5.0)], vec![]);
        assert_eq!(ftg(&all_grid), 0.0);
        let mixed = ledger_with(vec![(0, 9, 15, 3.0)], vec![(9, 1.0)], vec![(0, 3.0)]);
        assert_eq!(ftg(&mixed), 0.75);
        let empty = ledger_with(vec![], vec![], vec![]);
        assert_eq!(ftg(&empty), 1.0);
    }

    #[test]
    fn fbs_boundaries() {
        let even = ledger_with(
            vec![(0, 9, 15, 2.0), (1, 9, 15, 2.0), (2, 9, 15, 2.0)],
            vec![],
            vec![(0, 2.0), (1, 2.0), (2, 2.0)],
        );
        assert!((fbs(&even) - 1.0).abs() < 1e-12);
        // One active seller sold everything, the other nothing.
        let skewed = ledger_with(vec![(0, 9, 15, 4.0)], vec![], vec![(0, 4.0), (1, 3.0)]);
        assert!((fbs(&skewed) - 0.5).abs() < 1e-12);
        let no_sellers = ledger_with(vec![], vec![(9, 2.0)], vec![]);
        assert_eq!(fbs(&no_sellers), 1.0);
        let one_seller = ledger_with(vec![(0, 9, 15, 4.0)], vec![], vec![(0, 4.0)]);
        assert_eq!(fbs(&one_seller), 1.0);
    }

    #[test]
    fn fpp_boundaries() {
        let band = PriceBand::default();
        let tight = ledger_with(
            vec![(0, 9, 15, 1.0), (1, 9, 15, 1.0), (2, 9, 15, 1.0)],
            vec![],
            vec![],
        );
        assert_eq!(fpp(&tight, &band), 1.0);
        let single = ledger_with(vec![(0, 9, 22, 1.0)], vec![], vec![]);
        assert_eq!(fpp(&single, &band), 1.0);
        let spread = ledger_with(vec![(0, 9, 10, 1.0), (1, 9, 30, 1.0)], vec![], vec![]);
        assert_eq!(fpp(&spread, &band), 0.0);
    }

    #[test]
    fn ramp_breakpoints() {
        let schedule = RampSchedule::new(200, 3000).unwrap();
        assert_eq!(ramp(100, &schedule), 0.0);
        assert_eq!(ramp(200, &schedule), 0.0);
        assert_eq!(ramp(1600, &schedule), 0.5);
        assert_eq!(ramp(3000, &schedule), 1.0);
        assert_eq!(ramp(9000, &schedule), 1.0);
        assert!(RampSchedule::new(5, 5).is_err());
    }

    #[test]
    fn ramp_monotone_and_continuous() {
        let schedule = RampSchedule::new(40, 640).unwrap();
        let mut prev = 0.0;
        for e in 0..700 {
            let lambda = ramp(e, &schedule);
            assert!((0.0..=1.0).contains(&lambda));
            assert!(lambda >= prev);
            if e > 0 {
                assert!(lambda - prev <= 1.0 / 600.0 + 1e-12);
            }
            prev = lambda;
        }
    }

    #[test]
    fn default_schedules_match_fractions() {
        let shaping = ShapingConfig::defaults_for(10_000);
        assert_eq!(shaping.grid, RampSchedule { e_start: 200, e_full: 3000 });
        assert_eq!(shaping.peer, RampSchedule { e_start: 3000, e_full: 8000 });
        assert_eq!(shaping.lambdas(200), [0.0, 0.0, 0.0]);
        assert_eq!(shaping.lambdas(3000), [1.0, 1.0, 0.0]);
        assert_eq!(shaping.lambdas(8000), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_reduces_to_profit_when_inactive() {
        let config = ShapingConfig::defaults_for(100);
        let scores = FairnessScores {
            ftg: 0.7,
            fbs: 0.9,
            fpp: 0.8,
        };
        let reward = shape(3.25, &scores, [0.0, 0.0, 0.0], &config, 1.0, 2.0);
        assert_eq!(reward, 3.25);
    }

    #[test]
    fn shape_numeric_example() {
        let config = ShapingConfig {
            beta_grid: 1.0,
            beta_price: 1.0,
            beta_peer: 1.0,
            ..ShapingConfig::defaults_for(100)
        };
        let scores = FairnessScores {
            ftg: 0.8,
            fbs: 1.0,
            fpp: 0.9,
        };
        let reward = shape(2.0, &scores, [1.0, 1.0, 1.0], &config, 1.0, 2.0);
        assert!((reward - 4.2).abs() < 1e-12);
        // Zero total sold: the peer term contributes nothing.
        let reward = shape(2.0, &scores, [1.0, 1.0, 1.0], &config, 0.0, 0.0);
        assert!((reward - (2.0 + 0.8 + 0.9)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_critic_composes() {
        let critic = DeterministicCritic::new(PriceBand::default());
        let ledger = ledger_with(vec![(0, 9, 15, 3.0)], vec![(9, 1.0)], vec![(0, 3.0)]);
        let scores = critic.score(&ledger);
        assert_eq!(scores.ftg, 0.75);
        assert_eq!(scores.fbs, 1.0);
        assert_eq!(scores.fpp, 1.0);
    }

    fn stub_server(response: &'static str, delay: Duration) -> String {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut buf = [0u8; 4096];
                let _ = stream.read(&mut buf);
                std::thread::sleep(delay);
                let body = response.as_bytes();
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(body);
            }
        });
        format!("http://{addr}/score")
    }

    #[test]
    fn remote_critic_parses_and_clamps() {
        let names = vec!["P1".to_string()];
        let band = PriceBand::default();
        let ledger = ledger_with(vec![(0, 9, 15, 3.0)], vec![(9, 1.0)], vec![(0, 3.0)]);

        let url = stub_server(r#"{"ftg":0.8,"fbs":0.9,"fpp":1.0}"#, Duration::ZERO);
        let critic = RemoteCritic::new(url, Duration::from_secs(2), 0, band, names.clone());
        let scores = critic.score(&ledger);
        assert_eq!((scores.ftg, scores.fbs, scores.fpp), (0.8, 0.9, 1.0));

        let url = stub_server(r#"{"ftg":1.7,"fbs":-0.4,"fpp":0.5}"#, Duration::ZERO);
        let critic = RemoteCritic::new(url, Duration::from_secs(2), 0, band, names.clone());
        let scores = critic.score(&ledger);
        assert_eq!((scores.ftg, scores.fbs, scores.fpp), (1.0, 0.0, 0.5));
    }

    #[test]
    fn remote_critic_falls_back_on_garbage_and_timeout() {
        let names = vec!["P1".to_string()];
        let band = PriceBand::default();
        let ledger = ledger_with(vec![(0, 9, 15, 3.0)], vec![(9, 1.0)], vec![(0, 3.0)]);
        let expected = DeterministicCritic::new(band).score(&ledger);

        let url = stub_server(r#"{"verdict":"fine"}"#, Duration::ZERO);
        let critic = RemoteCritic::new(url, Duration::from_secs(2), 0, band, names.clone());
        assert_eq!(critic.score(&ledger), expected);

        let url = stub_server(r#"{"ftg":0.5,"fbs":0.5,"fpp":0.5}"#, Duration::from_millis(400));
        let critic = RemoteCritic::new(url, Duration::from_millis(50), 0, band, names.clone());
        assert_eq!(critic.score(&ledger), expected);

        // Nothing listening at all.
        let critic = RemoteCritic::new(
            "http://127.0.0.1:9/score".to_string(),
            Duration::from_millis(100),
            0,
            band,
            names,
        );
        assert_eq!(critic.score(&ledger), expected);
    }

    #[test]
    fn wire_payload_shape() {
        let names = vec!["P1".to_string(), "P2".to_string()];
        let critic = RemoteCritic::new(
            "http://unused/".into(),
            Duration::from_millis(10),
            0,
            PriceBand::default(),
            names,
        );
        let ledger = ledger_with(
            vec![(0, 9, 15, 3.0)],
            vec![(9, 1.0)],
            vec![(0, 3.0), (1, 2.0)],
        );
        let payload = critic.payload(&ledger);
        assert_eq!(payload["slot"], 0);
        assert_eq!(payload["peer_kwh"], 3.0);
        assert_eq!(payload["grid_import_kwh"], 1.0);
        assert_eq!(payload["seller_kwh"]["P1"], 3.0);
        assert_eq!(payload["seller_kwh"]["P2"], 0.0);
        assert_eq!(payload["trade_prices_cents"][0], 15.0);
    }

    fn arb_ledger() -> impl Strategy<Value = SlotLedger> {
        let trade = (0u32..4, 4u32..8, 10u32..=30, 1u32..5000).prop_map(|(s, b, p, q)| Trade {
            seller: AgentId(s),
            buyer: AgentId(b),
            price_cents: p,
            quantity_kwh: q as f64 * 1e-3,
        });
        (
            prop::collection::vec(trade, 0..6),
            prop::collection::btree_map(4u32..8, 0u32..5000, 0..4),
            prop::collection::btree_map(0u32..4, 0u32..5000, 0..4),
        )
            .prop_map(|(trades, imports, asks)| {
                let mut submitted_ask_kwh: BTreeMap<AgentId, f64> = asks
                    .into_iter()
                    .map(|(a, q)| (AgentId(a), q as f64 * 1e-3))
                    .collect();
                // Sellers must have submitted at least what they sold.
                for t in &trades {
                    let entry = submitted_ask_kwh.entry(t.seller).or_default();
                    *entry = entry.max(t.quantity_kwh);
                }
                SlotLedger {
                    slot: 0,
                    trades,
                    grid_import_kwh: imports
                        .into_iter()
                        .map(|(a, q)| (AgentId(a), q as f64 * 1e-3))
                        .collect(),
                    grid_export_kwh: BTreeMap::new(),
                    submitted_ask_kwh,
                    submitted_bid_kwh: BTreeMap::new(),
                    retail_tariff_cents: 30.0,
                    feed_in_tariff_cents: 10.0,
                }
            })
    }

    proptest! {
        #[test]
        fn scores_always_in_unit_interval(ledger in arb_ledger()) {
            let band = PriceBand::default();
            for score in [ftg(&ledger), fbs(&ledger), fpp(&ledger, &band)] {
                prop_assert!((0.0..=1.0).contains(&score), "score {score}");
            }
        }

        #[test]
        fn ftg_and_fbs_scale_invariant(ledger in arb_ledger(), c in 1u32..50) {
            let c = c as f64 / 7.0;
            let mut scaled = ledger.clone();
            for t in &mut scaled.trades { t.quantity_kwh *= c; }
            for q in scaled.grid_import_kwh.values_mut() { *q *= c; }
            for q in scaled.grid_export_kwh.values_mut() { *q *= c; }
            for q in scaled.submitted_ask_kwh.values_mut() { *q *= c; }
            prop_assert!((ftg(&ledger) - ftg(&scaled)).abs() < 1e-9);
            prop_assert!((fbs(&ledger) - fbs(&scaled)).abs() < 1e-9);
            // Price-preserving quantity scaling leaves FPP untouched.
            let band = PriceBand::default();
            prop_assert!((fpp(&ledger, &band) - fpp(&scaled, &band)).abs() < 1e-12);
        }

        #[test]
        fn shape_monotone_in_scores(
            pi in -100.0f64..100.0,
            base in 0.0f64..1.0,
            bump in 0.0f64..0.5,
            share in 0.0f64..1.0,
        ) {
            let config = ShapingConfig::defaults_for(100);
            let lambdas = [1.0, 1.0, 1.0];
            let low = FairnessScores { ftg: base * 0.5, fbs: base * 0.5, fpp: base * 0.5 };
            let high = FairnessScores {
                ftg: (low.ftg + bump).min(1.0),
                fbs: (low.fbs + bump).min(1.0),
                fpp: (low.fpp + bump).min(1.0),
            };
            let r_low = shape(pi, &low, lambdas, &config, share, 1.0);
            let r_high = shape(pi, &high, lambdas, &config, share, 1.0);
            prop_assert!(r_high >= r_low - 1e-12);
        }
    }
}
