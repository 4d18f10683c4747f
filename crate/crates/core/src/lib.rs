//! Head-to-head attack/defense match engine.
//!
//! Players own realms of units. A unit loses health for every second its
//! service is unreachable and is destroyed outright when an opponent submits
//! its fingerprint. The game server is the source of truth; an optional
//! hash-chained ledger lets peers cross-check it. A Markov bot can play.

pub mod health;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod ledger;
pub mod server;
pub mod daemon;
pub mod bot;
pub mod transcript;
pub mod report;
pub mod sim;
pub mod net;
