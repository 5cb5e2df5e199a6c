//! Peer-to-peer electricity market simulator and multi-agent RL harness.
//!
//! Households trade hourly through a continuous double auction with grid
//! settlement of residual imbalances. Prosumer bidding policies are trained
//! with PPO under fairness-shaped rewards scored from post-slot ledgers by a
//! pluggable critic.

pub mod auction;
pub mod config;
pub mod environment;
pub mod error;
pub mod fairness;
pub mod learner;
pub mod metrics;
pub mod profiles;
pub mod rng;

pub use auction::{AgentId, Order, PriceBand, Side, SlotLedger, Trade};
pub use environment::{Action, Environment, EpisodeState, Observation, StorageOp};
pub use error::{Error, Result};
pub use fairness::{CriticBackend, DeterministicCritic, FairnessScores, RemoteCritic, ShapingConfig};
pub use profiles::{HouseholdSpec, NoiseConfig, ProfileTemplate, Role, WeatherDay};
