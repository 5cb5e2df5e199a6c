//! Continuous double auction for one trading slot plus grid settlement.
//!
//! Clearing greedily matches the current highest-price bid with the current
//! lowest-price ask while `p_buy >= p_sell`, executing the minimum remaining
//! quantity at the ask's price. Ties break by arrival sequence. Agents never
//! trade with themselves.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compact agent handle; display names live in the scenario roster.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct AgentId(pub u32);

/// Quantities are kept on a 1e-6 kWh grid so conservation checks stay exact.
pub const QTY_RESOLUTION_KWH: f64 = 1e-6;

/// Snap a quantity to the 1e-6 kWh grid.
pub fn round_kwh(q: f64) -> f64 {
    (q / QTY_RESOLUTION_KWH).round() * QTY_RESOLUTION_KWH
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Ask,
    Bid,
}

/// Inclusive price band; the discrete price grid is every integer cent in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceBand {
    pub min_cents: u32,
    pub max_cents: u32,
}

impl Default for PriceBand {
    fn default() -> Self {
        PriceBand {
            min_cents: 10,
            max_cents: 30,
        }
    }
}

impl PriceBand {
    pub fn validate(&self) -> Result<()> {
        if self.min_cents >= self.max_cents {
            return Err(Error::Config(format!(
                "price band must satisfy min < max, got [{}, {}]",
                self.min_cents, self.max_cents
            )));
        }
        Ok(())
    }

    pub fn contains(&self, price_cents: u32) -> bool {
        (self.min_cents..=self.max_cents).contains(&price_cents)
    }

    pub fn levels(&self) -> usize {
        (self.max_cents - self.min_cents + 1) as usize
    }

    pub fn half_width(&self) -> f64 {
        (self.max_cents - self.min_cents) as f64 / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub agent: AgentId,
    pub side: Side,
    pub price_cents: u32,
    pub quantity_kwh: f64,
    pub seq: u32,
}

impl Order {
    pub fn validate(&self, band: &PriceBand) -> Result<()> {
        if !band.contains(self.price_cents) {
            return Err(Error::Invariant(format!(
                "order price {} outside band [{}, {}]",
                self.price_cents, band.min_cents, band.max_cents
            )));
        }
        if !(self.quantity_kwh > 0.0) || !self.quantity_kwh.is_finite() {
            return Err(Error::Invariant(format!(
                "order quantity must be positive, got {}",
                self.quantity_kwh
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub seller: AgentId,
    pub buyer: AgentId,
    pub price_cents: u32,
    pub quantity_kwh: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClearOutcome {
    pub trades: Vec<Trade>,
    pub residual_asks: Vec<Order>,
    pub residual_bids: Vec<Order>,
}

/// Clear one slot's book. Empty inputs yield empty outputs.
pub fn clear(asks: &[Order], bids: &[Order]) -> ClearOutcome {
    let mut asks: Vec<Order> = asks.to_vec();
    let mut bids: Vec<Order> = bids.to_vec();
    // Price-time priority: asks cheapest first, bids dearest first.
    asks.sort_by(|a, b| (a.price_cents, a.seq).cmp(&(b.price_cents, b.seq)));
    bids.sort_by(|a, b| (b.price_cents, a.seq).cmp(&(a.price_cents, b.seq)));

    let mut trades = Vec::new();
    loop {
        let mut pair = None;
        'bids: for (bi, bid) in bids.iter().enumerate() {
            for (ai, ask) in asks.iter().enumerate() {
                if ask.price_cents > bid.price_cents {
                    // Asks are sorted by price; nothing further can execute.
                    break;
                }
                if ask.agent != bid.agent {
                    pair = Some((bi, ai));
                    break 'bids;
                }
            }
        }
        let Some((bi, ai)) = pair else { break };
        let quantity = bids[bi].quantity_kwh.min(asks[ai].quantity_kwh);
        trades.push(Trade {
            seller: asks[ai].agent,
            buyer: bids[bi].agent,
            price_cents: asks[ai].price_cents,
            quantity_kwh: quantity,
        });
        asks[ai].quantity_kwh = round_kwh(asks[ai].quantity_kwh - quantity);
        bids[bi].quantity_kwh = round_kwh(bids[bi].quantity_kwh - quantity);
        if asks[ai].quantity_kwh < QTY_RESOLUTION_KWH / 2.0 {
            asks.remove(ai);
        }
        if bids[bi].quantity_kwh < QTY_RESOLUTION_KWH / 2.0 {
            bids.remove(bi);
        }
    }
    ClearOutcome {
        trades,
        residual_asks: asks,
        residual_bids: bids,
    }
}

/// Settle residual orders against the grid: unmet bids import at the retail
/// tariff, unsold asks export at the feed-in tariff.
pub fn settle_grid(
    residual_asks: &[Order],
    residual_bids: &[Order],
    retail_cents: f64,
    feed_in_cents: f64,
) -> Result<(BTreeMap<AgentId, f64>, BTreeMap<AgentId, f64>)> {
    if feed_in_cents > retail_cents {
        return Err(Error::Config(format!(
            "feed-in tariff {feed_in_cents} above retail {retail_cents} would invert incentives"
        )));
    }
    let mut imports: BTreeMap<AgentId, f64> = BTreeMap::new();
    let mut exports: BTreeMap<AgentId, f64> = BTreeMap::new();
    for bid in residual_bids {
        *imports.entry(bid.agent).or_default() += bid.quantity_kwh;
    }
    for ask in residual_asks {
        *exports.entry(ask.agent).or_default() += ask.quantity_kwh;
    }
    Ok((imports, exports))
}

/// Complete per-slot record of peer trades and grid settlement: the post-slot
/// ledger scored by the fairness critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SlotLedger {
    pub slot: u64,
    pub trades: Vec<Trade>,
    pub grid_import_kwh: BTreeMap<AgentId, f64>,
    pub grid_export_kwh: BTreeMap<AgentId, f64>,
    /// Total ask quantity each agent submitted this slot (zero entries absent).
    pub submitted_ask_kwh: BTreeMap<AgentId, f64>,
    /// Total bid quantity each agent submitted this slot.
    pub submitted_bid_kwh: BTreeMap<AgentId, f64>,
    pub retail_tariff_cents: f64,
    pub feed_in_tariff_cents: f64,
}

impl SlotLedger {
    pub fn peer_kwh(&self) -> f64 {
        self.trades.iter().map(|t| t.quantity_kwh).sum()
    }

    pub fn grid_import_total(&self) -> f64 {
        self.grid_import_kwh.values().sum()
    }

    pub fn grid_export_total(&self) -> f64 {
        self.grid_export_kwh.values().sum()
    }

    pub fn peer_sold_by(&self, agent: AgentId) -> f64 {
        self.trades
            .iter()
            .filter(|t| t.seller == agent)
            .map(|t| t.quantity_kwh)
            .sum()
    }

    pub fn peer_bought_by(&self, agent: AgentId) -> f64 {
        self.trades
            .iter()
            .filter(|t| t.buyer == agent)
            .map(|t| t.quantity_kwh)
            .sum()
    }

    /// Structural checks that hold for every ledger regardless of how the
    /// grid side was settled.
    pub fn validate_basic(&self) -> Result<()> {
        if self.feed_in_tariff_cents > self.retail_tariff_cents {
            return Err(Error::Invariant(format!(
                "slot {}: feed-in tariff above retail",
                self.slot
            )));
        }
        for trade in &self.trades {
            if trade.buyer == trade.seller {
                return Err(Error::Invariant(format!(
                    "slot {}: self-trade by agent {:?}",
                    self.slot, trade.buyer
                )));
            }
            if !(trade.quantity_kwh > 0.0) {
                return Err(Error::Invariant(format!(
                    "slot {}: non-positive trade quantity",
                    self.slot
                )));
            }
        }
        for (label, map) in [
            ("grid import", &self.grid_import_kwh),
            ("grid export", &self.grid_export_kwh),
            ("submitted ask", &self.submitted_ask_kwh),
            ("submitted bid", &self.submitted_bid_kwh),
        ] {
            if map.values().any(|&q| q < 0.0 || !q.is_finite()) {
                return Err(Error::Invariant(format!(
                    "slot {}: negative or non-finite {label} quantity",
                    self.slot
                )));
            }
        }
        Ok(())
    }

    /// Settlement identity for ledgers whose grid side came from auction
    /// residuals: settled buys + grid import equals the submitted bid total,
    /// and settled sells + grid export equals the submitted ask total.
    pub fn validate_settlement(&self) -> Result<()> {
        let mut agents: Vec<AgentId> = self
            .submitted_ask_kwh
            .keys()
            .chain(self.submitted_bid_kwh.keys())
            .copied()
            .collect();
        agents.sort_unstable();
        agents.dedup();
        for agent in agents {
            let bought = self.peer_bought_by(agent);
            let import = self.grid_import_kwh.get(&agent).copied().unwrap_or(0.0);
            let bid = self.submitted_bid_kwh.get(&agent).copied().unwrap_or(0.0);
            if (bought + import - bid).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "slot {}: agent {:?} demand-side mismatch: bought {} + import {} != bid {}",
                    self.slot, agent, bought, import, bid
                )));
            }
            let sold = self.peer_sold_by(agent);
            let export = self.grid_export_kwh.get(&agent).copied().unwrap_or(0.0);
            let ask = self.submitted_ask_kwh.get(&agent).copied().unwrap_or(0.0);
            if (sold + export - ask).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "slot {}: agent {:?} supply-side mismatch: sold {} + export {} != ask {}",
                    self.slot, agent, sold, export, ask
                )));
            }
        }
        Ok(())
    }
}

/// Assemble and validate a ledger from one slot's clearing and settlement.
pub fn build_ledger(
    slot: u64,
    trades: Vec<Trade>,
    grid_import_kwh: BTreeMap<AgentId, f64>,
    grid_export_kwh: BTreeMap<AgentId, f64>,
    submitted_asks: &[Order],
    submitted_bids: &[Order],
    retail_cents: f64,
    feed_in_cents: f64,
) -> Result<SlotLedger> {
    let mut submitted_ask_kwh: BTreeMap<AgentId, f64> = BTreeMap::new();
    for order in submitted_asks {
        *submitted_ask_kwh.entry(order.agent).or_default() += order.quantity_kwh;
    }
    let mut submitted_bid_kwh: BTreeMap<AgentId, f64> = BTreeMap::new();
    for order in submitted_bids {
        *submitted_bid_kwh.entry(order.agent).or_default() += order.quantity_kwh;
    }
    let ledger = SlotLedger {
        slot,
        trades,
        grid_import_kwh,
        grid_export_kwh,
        submitted_ask_kwh,
        submitted_bid_kwh,
        retail_tariff_cents: retail_cents,
        feed_in_tariff_cents: feed_in_cents,
    };
    ledger.validate_basic()?;
    ledger.validate_settlement()?;
    Ok(ledger)
}

/// Export ledgers as CSV: `slot,seller,buyer,price_cents,quantity_kwh`, with
/// grid settlements as rows naming `GRID` on the passive side.
pub fn write_ledgers_csv<W: Write>(
    ledgers: &[SlotLedger],
    names: &dyn Fn(AgentId) -> String,
    out: &mut W,
) -> Result<()> {
    writeln!(out, "slot,seller,buyer,price_cents,quantity_kwh")?;
    for ledger in ledgers {
        for trade in &ledger.trades {
            writeln!(
                out,
                "{},{},{},{},{:.6}",
                ledger.slot,
                names(trade.seller),
                names(trade.buyer),
                trade.price_cents,
                trade.quantity_kwh
            )?;
        }
        for (&agent, &qty) in &ledger.grid_import_kwh {
            if qty > 0.0 {
                writeln!(
                    out,
                    "{},GRID,{},{},{:.6}",
                    ledger.slot,
                    names(agent),
                    ledger.retail_tariff_cents,
                    qty
                )?;
            }
        }
        for (&agent, &qty) in &ledger.grid_export_kwh {
            if qty > 0.0 {
                writeln!(
                    out,
                    "{},{},GRID,{},{:.6}",
                    ledger.slot,
                    names(agent),
                    ledger.feed_in_tariff_cents,
                    qty
                )?;
            }
        }
    }
    Ok(())
}
