//! Post-hoc market-quality, fairness, and economics analytics over ledgers,
//! plus the fixed-policy sensitivity counterfactuals.

use std::io::Write;

use serde::Serialize;

use crate::auction::{AgentId, SlotLedger};
use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::learner::{evaluate, EvalRun, PolicyNet};
use crate::profiles::{HouseholdSpec, Role};

/// Jain's fairness index `(sum x)^2 / (n * sum x^2)`, 1 when all mass is 0.
pub fn jfi(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 1.0;
    }
    let total: f64 = xs.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let sq: f64 = xs.iter().map(|x| x * x).sum();
    total * total / (xs.len() as f64 * sq)
}

/// Shannon entropy of the positive shares normalized by `ln(k)`, with `k`
/// the number of positive entries; 0 when at most one share is positive.
pub fn seller_entropy(shares: &[f64]) -> f64 {
    let positive: Vec<f64> = shares.iter().copied().filter(|&s| s > 0.0).collect();
    if positive.len() <= 1 {
        return 0.0;
    }
    let total: f64 = positive.iter().sum();
    let entropy: f64 = positive
        .iter()
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    entropy / (positive.len() as f64).ln()
}

/// Max minus min executed peer price in a slot; 0 with fewer than 2 trades.
pub fn price_spread(ledger: &SlotLedger) -> f64 {
    if ledger.trades.len() < 2 {
        return 0.0;
    }
    let prices = ledger.trades.iter().map(|t| t.price_cents as f64);
    let max = prices.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = prices.fold(f64::INFINITY, f64::min);
    max - min
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergySplit {
    pub peer_kwh: f64,
    pub grid_kwh: f64,
    /// `peer / (peer + grid)`; `None` when nothing flowed at all.
    pub peer_share: Option<f64>,
}

/// Total peer and grid energies across slots. Grid counts imports plus
/// exports (the aggregate "via the grid" convention).
pub fn energy_split(ledgers: &[SlotLedger]) -> EnergySplit {
    let peer_kwh: f64 = ledgers.iter().map(|l| l.peer_kwh()).sum();
    let grid_kwh: f64 = ledgers
        .iter()
        .map(|l| l.grid_import_total() + l.grid_export_total())
        .sum();
    let denom = peer_kwh + grid_kwh;
    EnergySplit {
        peer_kwh,
        grid_kwh,
        peer_share: if denom > 0.0 {
            Some(peer_kwh / denom)
        } else {
            None
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentEconomics {
    pub name: String,
    pub role: Role,
    pub peer_revenue_cents: f64,
    pub peer_cost_cents: f64,
    pub grid_revenue_cents: f64,
    pub grid_cost_cents: f64,
    /// Revenues minus costs; positive for earners, negative for payers.
    pub net_cents: f64,
    pub peer_bought_kwh: f64,
    pub grid_bought_kwh: f64,
    /// Average cost per kWh bought (consumers), when anything was bought.
    pub avg_cost_cents_per_kwh: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridEconomics {
    pub revenue_cents: f64,
    pub cost_cents: f64,
    pub net_cents: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EconomicsReport {
    pub agents: Vec<AgentEconomics>,
    pub grid: GridEconomics,
}

/// Cash flows per agent plus the grid book; a closed economy that sums to
/// zero across all parties.
pub fn economics(ledgers: &[SlotLedger], specs: &[HouseholdSpec]) -> EconomicsReport {
    let mut agents: Vec<AgentEconomics> = specs
        .iter()
        .map(|s| AgentEconomics {
            name: s.name.clone(),
            role: s.role,
            peer_revenue_cents: 0.0,
            peer_cost_cents: 0.0,
            grid_revenue_cents: 0.0,
            grid_cost_cents: 0.0,
            net_cents: 0.0,
            peer_bought_kwh: 0.0,
            grid_bought_kwh: 0.0,
            avg_cost_cents_per_kwh: None,
        })
        .collect();
    let mut grid = GridEconomics {
        revenue_cents: 0.0,
        cost_cents: 0.0,
        net_cents: 0.0,
    };
    for ledger in ledgers {
        for trade in &ledger.trades {
            let cash = trade.price_cents as f64 * trade.quantity_kwh;
            agents[trade.seller.0 as usize].peer_revenue_cents += cash;
            agents[trade.buyer.0 as usize].peer_cost_cents += cash;
            agents[trade.buyer.0 as usize].peer_bought_kwh += trade.quantity_kwh;
        }
        for (&agent, &qty) in &ledger.grid_import_kwh {
            let cash = ledger.retail_tariff_cents * qty;
            agents[agent.0 as usize].grid_cost_cents += cash;
            agents[agent.0 as usize].grid_bought_kwh += qty;
            grid.revenue_cents += cash;
        }
        for (&agent, &qty) in &ledger.grid_export_kwh {
            let cash = ledger.feed_in_tariff_cents * qty;
            agents[agent.0 as usize].grid_revenue_cents += cash;
            grid.cost_cents += cash;
        }
    }
    for agent in &mut agents {
        agent.net_cents = agent.peer_revenue_cents + agent.grid_revenue_cents
            - agent.peer_cost_cents
            - agent.grid_cost_cents;
        let bought = agent.peer_bought_kwh + agent.grid_bought_kwh;
        if bought > 0.0 {
            agent.avg_cost_cents_per_kwh =
                Some((agent.peer_cost_cents + agent.grid_cost_cents) / bought);
        }
    }
    grid.net_cents = grid.revenue_cents - grid.cost_cents;
    EconomicsReport { agents, grid }
}

/// Per-slot market-quality row for the plot-ready CSV.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HourlyRow {
    pub hour: u64,
    pub spread_cents: f64,
    pub entropy: f64,
    pub jfi: f64,
    pub peer_kwh: f64,
    pub grid_kwh: f64,
}

/// JFI over the peer-sold quantities of this slot's active sellers
/// (prosumers that submitted a nonzero ask); vacuously 1 when quiet.
pub fn slot_jfi(ledger: &SlotLedger) -> f64 {
    let sold: Vec<f64> = ledger
        .submitted_ask_kwh
        .iter()
        .filter(|(_, &q)| q > 0.0)
        .map(|(&a, _)| ledger.peer_sold_by(a))
        .collect();
    if sold.len() <= 1 {
        return 1.0;
    }
    jfi(&sold)
}

/// Entropy of this slot's seller volume shares.
pub fn slot_entropy(ledger: &SlotLedger) -> f64 {
    let sellers: Vec<AgentId> = {
        let mut s: Vec<AgentId> = ledger.trades.iter().map(|t| t.seller).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let shares: Vec<f64> = sellers.iter().map(|&a| ledger.peer_sold_by(a)).collect();
    seller_entropy(&shares)
}

pub fn hourly_rows(ledgers: &[SlotLedger]) -> Vec<HourlyRow> {
    ledgers
        .iter()
        .map(|ledger| HourlyRow {
            hour: ledger.slot,
            spread_cents: price_spread(ledger),
            entropy: slot_entropy(ledger),
            jfi: slot_jfi(ledger),
            peer_kwh: ledger.peer_kwh(),
            grid_kwh: ledger.grid_import_total() + ledger.grid_export_total(),
        })
        .collect()
}

/// Full post-run report: split, per-slot quality rows, and economics.
#[derive(Debug, Clone, Serialize)]
pub struct MarketReport {
    pub slots: u64,
    pub split: EnergySplit,
    pub economics: EconomicsReport,
    pub hourly: Vec<HourlyRow>,
    pub mean_entropy_trading_slots: f64,
    pub min_jfi_trading_slots: f64,
    /// Conventions baked into the numbers above.
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportMetadata {
    pub entropy_base: &'static str,
    pub entropy_normalization: &'static str,
    pub grid_kwh_convention: &'static str,
}

pub fn market_report(ledgers: &[SlotLedger], specs: &[HouseholdSpec]) -> MarketReport {
    let hourly = hourly_rows(ledgers);
    let trading: Vec<&HourlyRow> = hourly.iter().filter(|r| r.peer_kwh > 0.0).collect();
    let mean_entropy = if trading.is_empty() {
        0.0
    } else {
        trading.iter().map(|r| r.entropy).sum::<f64>() / trading.len() as f64
    };
    let min_jfi = trading
        .iter()
        .map(|r| r.jfi)
        .fold(f64::INFINITY, f64::min)
        .min(1.0);
    MarketReport {
        slots: ledgers.len() as u64,
        split: energy_split(ledgers),
        economics: economics(ledgers, specs),
        hourly,
        mean_entropy_trading_slots: mean_entropy,
        min_jfi_trading_slots: min_jfi,
        metadata: ReportMetadata {
            entropy_base: "natural log",
            entropy_normalization: "ln(k) over active sellers with positive volume",
            grid_kwh_convention: "imports plus exports",
        },
    }
}

pub fn write_report_json(report: &MarketReport, out: &mut impl Write) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
    out.write_all(json.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_hourly_csv(report: &MarketReport, out: &mut impl Write) -> Result<()> {
    writeln!(out, "hour,spread_cents,entropy,jfi,peer_kwh,grid_kwh")?;
    for row in &report.hourly {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.hour, row.spread_cents, row.entropy, row.jfi, row.peer_kwh, row.grid_kwh
        )?;
    }
    Ok(())
}

/// The six radar axes compared across sensitivity counterfactuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityAxes {
    pub peer_trades_kwh: f64,
    pub grid_trades_kwh: f64,
    pub consumer_cost_cents: f64,
    pub prosumer_profit_cents: f64,
    pub avg_trading_entropy: f64,
    pub grid_net_cents: f64,
}

impl SensitivityAxes {
    pub fn from_run(run: &EvalRun, specs: &[HouseholdSpec]) -> SensitivityAxes {
        let split = energy_split(&run.ledgers);
        let econ = economics(&run.ledgers, specs);
        let report = market_report(&run.ledgers, specs);
        let consumer_cost: f64 = econ
            .agents
            .iter()
            .filter(|a| a.role == Role::Consumer)
            .map(|a| a.peer_cost_cents + a.grid_cost_cents - a.peer_revenue_cents - a.grid_revenue_cents)
            .sum();
        let prosumer_profit: f64 = econ
            .agents
            .iter()
            .filter(|a| a.role == Role::Prosumer)
            .map(|a| a.net_cents)
            .sum();
        SensitivityAxes {
            peer_trades_kwh: split.peer_kwh,
            grid_trades_kwh: split.grid_kwh,
            consumer_cost_cents: consumer_cost,
            prosumer_profit_cents: prosumer_profit,
            avg_trading_entropy: report.mean_entropy_trading_slots,
            grid_net_cents: econ.grid.net_cents,
        }
    }

    pub fn names() -> [&'static str; 6] {
        [
            "peer_trades_kwh",
            "grid_trades_kwh",
            "consumer_cost_cents",
            "prosumer_profit_cents",
            "avg_trading_entropy",
            "grid_net_cents",
        ]
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.peer_trades_kwh,
            self.grid_trades_kwh,
            self.consumer_cost_cents,
            self.prosumer_profit_cents,
            self.avg_trading_entropy,
            self.grid_net_cents,
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityReport {
    pub pv_scale: f64,
    pub load_scale: f64,
    pub baseline: SensitivityAxes,
    pub counterfactual: SensitivityAxes,
    /// Counterfactual over baseline per axis; `None` where the baseline is 0.
    pub ratios: Vec<Option<f64>>,
    pub grid_import_kwh_baseline: f64,
    pub grid_import_kwh_counterfactual: f64,
}

/// Rerun the evaluation with scaled peaks and frozen (argmax) policies.
pub fn sensitivity(
    env: &Environment,
    prosumers: &[usize],
    nets: &[PolicyNet],
    seed: u64,
    pv_scale: f64,
    load_scale: f64,
) -> Result<SensitivityReport> {
    let baseline_run = evaluate(env, prosumers, nets, seed)?;
    let scaled_env = env.scaled(pv_scale, load_scale)?;
    let counter_run = evaluate(&scaled_env, prosumers, nets, seed)?;
    let baseline = SensitivityAxes::from_run(&baseline_run, env.specs());
    let counterfactual = SensitivityAxes::from_run(&counter_run, scaled_env.specs());
    let ratios = baseline
        .values()
        .iter()
        .zip(counterfactual.values())
        .map(|(&b, c)| if b.abs() > 1e-12 { Some(c / b) } else { None })
        .collect();
    let import_total = |run: &EvalRun| -> f64 {
        run.ledgers.iter().map(|l| l.grid_import_total()).sum()
    };
    Ok(SensitivityReport {
        pv_scale,
        load_scale,
        baseline,
        counterfactual,
        ratios,
        grid_import_kwh_baseline: import_total(&baseline_run),
        grid_import_kwh_counterfactual: import_total(&counter_run),
    })
}

/// 6-row CSV of radar-axis deltas for one counterfactual.
pub fn write_delta_csv(report: &SensitivityReport, out: &mut impl Write) -> Result<()> {
    writeln!(out, "axis,baseline,counterfactual,ratio")?;
    let base = report.baseline.values();
    let counter = report.counterfactual.values();
    for (i, name) in SensitivityAxes::names().iter().enumerate() {
        match report.ratios[i] {
            Some(r) => writeln!(out, "{name},{:.6},{:.6},{:.6}", base[i], counter[i], r)?,
            None => writeln!(out, "{name},{:.6},{:.6},", base[i], counter[i])?,
        }
    }
    Ok(())
}
