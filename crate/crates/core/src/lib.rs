//! Discrete-event simulator for relay-assisted NAT hole punching (DCUtR) in
//! libp2p-style networks, with the measurement-campaign pipeline around it.

pub mod analysis;
pub mod campaign;
pub mod config;
pub mod dcutr;
pub mod nat;
pub mod record;
pub mod relay;
pub mod sim;
pub mod strategy;
pub mod transport;
pub mod world;

pub use campaign::{generate_population, run_campaign, CampaignReport, Population, PopulationSpec};
pub use config::CampaignConfig;
pub use dcutr::{DcutrConfig, HolePunchResult, OutcomeAttempt, OutcomeResult, Strategies};
pub use nat::{Archetype, Endpoint, NatConfig};
pub use record::RawRecord;
pub use sim::{HostId, Latency, SimTime, Topology};
pub use strategy::{birthday_probability, BirthdayPlan, Scenario};
pub use transport::Transport;
pub use world::{PeerId, World};
