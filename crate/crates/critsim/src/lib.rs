//! Closed-loop training and testing engine for highway-driving agents.
//!
//! The pieces, bottom up:
//!
//! - [`scenario`] — traffic environment configurations and the scenario
//!   database format.
//! - [`sim`] — a minimal multi-lane highway microsimulation with IDM/MOBIL
//!   background traffic and a discrete-action ego vehicle.
//! - [`risk`] — surrogate safety measures: time-to-collision, minimum safe
//!   distances, the unified risk index, and risk perception.
//! - [`highd`] — trajectory-recording ingestion: parsing, driver-style
//!   clustering, critical-pair mining, database building.
//! - [`ppo`] — a from-scratch PPO trainer (MLP policy/value networks,
//!   GAE, clipped surrogate objective, Adam).
//! - [`curriculum`] — the closed feedback loop that scores configurations
//!   by criticality and redirects training toward critical ones.
//! - [`llm`] — optional chat-completion client that mutates configurations,
//!   plus a bundled mock server for hermetic tests.
//! - [`cli`] — the `ingest` / `train` / `evaluate` / `report` commands.
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod cli;
pub mod curriculum;
pub mod highd;
pub mod llm;
pub mod ppo;
pub mod risk;
pub mod scenario;
pub mod sim;
