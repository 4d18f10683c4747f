//! Wire messages exchanged between player daemons, the game server and UI
//! clients, their canonical encoding, the topic scheme and the pub/sub bus.
//!
//! Every frame is a 4-byte big-endian length followed by the canonical JSON
//! encoding of an [`Envelope`]: no whitespace, object keys sorted. The same
//! canonical bytes are the hashing preimage for ledger blocks.

mod bus;
mod codec;
mod topic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bus::{InProcessBus, Subscription, Transport, TransportError};
pub use codec::{
    canonical_json, decode, decode_payload, encode, encode_frame, read_frame, write_frame,
    DecodeError, FrameReader, MAX_FRAME_LEN,
};
pub use topic::{Channel, Topic, TopicError, TopicFilter};

use crate::metrics::CommandEvent;
use crate::model::{
    GameMode, GamePhase, GameState, Outcome, StatusCode, Timestamp, UnitState,
};

/// One unit line of a status report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub code: StatusCode,
    /// Identity hash of the unit's fingerprint.
    pub id: String,
    pub health: f64,
    pub port: u16,
}

/// Liveness report a player daemon publishes every report interval. The
/// same shape is the payload of a ledger block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub timestamp: Timestamp,
    pub ip: String,
    #[serde(rename = "playerName")]
    pub player_name: String,
    pub cmds: BTreeMap<String, String>,
    pub units: Vec<UnitReport>,
}

impl StatusReport {
    pub fn validate(&self) -> Result<(), String> {
        for (i, u) in self.units.iter().enumerate() {
            if !(u.health.is_finite() && u.health >= 0.0) {
                return Err(format!("units[{i}].health: must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Report-shaped record of a player's realm as the server sees it.
    pub fn from_state(state: &GameState, player: &str, at: Timestamp) -> Option<Self> {
        let p = state.player(player)?;
        Some(StatusReport {
            timestamp: at,
            ip: p.host_address.clone(),
            player_name: p.name.clone(),
            cmds: BTreeMap::new(),
            units: p
                .realm
                .units
                .iter()
                .map(|u| UnitReport {
                    code: u.status_code,
                    id: u.identity_hash(),
                    health: u.health,
                    port: u.port,
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureSubmission {
    pub game_id: String,
    pub attacker: String,
    /// Kept as raw text so malformed claims reach the server and are
    /// rejected there.
    pub claimed_fingerprint: String,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub unit_id: String,
    pub port: u16,
    pub health: f64,
    pub alive: bool,
}

impl From<&UnitState> for UnitScore {
    fn from(u: &UnitState) -> Self {
        UnitScore {
            unit_id: u.unit_id.clone(),
            port: u.port,
            health: u.health,
            alive: u.alive,
        }
    }
}

/// Derived per-player score: no fingerprints, safe to show the opponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreUpdate {
    pub game_id: String,
    pub tick: u64,
    pub player: String,
    pub units: Vec<UnitScore>,
    pub total_health: f64,
    pub alive_units: usize,
    pub clock_remaining_ms: Option<u64>,
}

impl ScoreUpdate {
    pub fn from_state(state: &GameState, player: &str, clock_remaining_ms: Option<u64>) -> Option<Self> {
        let p = state.player(player)?;
        Some(ScoreUpdate {
            game_id: state.game_id.clone(),
            tick: state.tick,
            player: p.name.clone(),
            units: p.realm.units.iter().map(UnitScore::from).collect(),
            total_health: p.realm.total_health(),
            alive_units: p.realm.alive_count(),
            clock_remaining_ms,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameEvent {
    GameCreated {
        players: Vec<String>,
    },
    GameStarted,
    Paused,
    Resumed,
    HealthChanged {
        player: String,
        unit_id: String,
        health: f64,
        alive: bool,
    },
    UnitCaptured {
        attacker: String,
        owner: String,
        unit_id: String,
    },
    UnitReshuffled {
        owner: String,
        old_unit_id: String,
        new_unit_id: String,
    },
    PlayerDefeated {
        player: String,
    },
    ClockPressed {
        player: String,
        next_active: String,
        remaining_ms: u64,
    },
    GameFinished {
        outcome: Outcome,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub game_id: String,
    pub tick: u64,
    pub at: Timestamp,
    pub event: GameEvent,
}

/// What a player learns about their target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpponentInfo {
    pub game_id: String,
    pub player: String,
    pub opponent: String,
    pub ip: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockView {
    pub mode: GameMode,
    pub elapsed_ms: u64,
    pub time_limit_ms: Option<u64>,
    pub remaining_ms: BTreeMap<String, u64>,
    pub active_player: Option<String>,
}

/// Public full-state view used to (re)synchronise UI clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSnapshot {
    pub game_id: String,
    pub mode: GameMode,
    pub phase: GamePhase,
    pub paused: bool,
    pub tick: u64,
    pub outcome: Option<Outcome>,
    pub players: Vec<ScoreUpdate>,
    pub clock: ClockView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedUnit {
    pub unit_id: String,
    pub class_id: String,
    pub port: u16,
    pub fingerprint: String,
    pub vuln_key: String,
    /// Server-side health when the assignment was fetched.
    pub health: f64,
}

impl AssignedUnit {
    /// Same service on the same port, ignoring health.
    pub fn same_service(&self, other: &AssignedUnit) -> bool {
        self.unit_id == other.unit_id
            && self.class_id == other.class_id
            && self.port == other.port
            && self.fingerprint == other.fingerprint
            && self.vuln_key == other.vuln_key
    }
}

/// A player's own realm, handed to their daemon once the game exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealmAssignment {
    pub game_id: String,
    pub player: String,
    pub opponent: String,
    pub report_interval_ms: u64,
    pub units: Vec<AssignedUnit>,
}

impl RealmAssignment {
    pub fn from_state(state: &GameState, player: &str) -> Option<Self> {
        let p = state.player(player)?;
        Some(RealmAssignment {
            game_id: state.game_id.clone(),
            player: p.name.clone(),
            opponent: p.opponent.clone(),
            report_interval_ms: state.config.report_interval.as_millis() as u64,
            units: p
                .realm
                .units
                .iter()
                .map(|u| AssignedUnit {
                    unit_id: u.unit_id.clone(),
                    class_id: u.class_id.clone(),
                    port: u.port,
                    fingerprint: u.fingerprint.to_string(),
                    vuln_key: state
                        .class(&u.class_id)
                        .map(|c| c.vuln_key.clone())
                        .unwrap_or_default(),
                    health: u.health,
                })
                .collect(),
        })
    }
}

/// Payloads carried on topics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Message {
    Status(StatusReport),
    Command(CommandEvent),
    Score(ScoreUpdate),
    Event(EventRecord),
    Opponent(OpponentInfo),
    Snapshot(GameSnapshot),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Request {
    Register {
        game_id: String,
        player: String,
        host: String,
    },
    FetchRealm {
        game_id: String,
        player: String,
        token: String,
    },
    Start {
        game_id: String,
    },
    Pause {
        game_id: String,
    },
    Resume {
        game_id: String,
    },
    ClockPress {
        game_id: String,
        player: String,
    },
    Capture(CaptureSubmission),
    OpponentAddress {
        game_id: String,
        player: String,
    },
    Snapshot {
        game_id: String,
    },
}

impl Request {
    pub fn game_id(&self) -> &str {
        match self {
            Request::Register { game_id, .. }
            | Request::FetchRealm { game_id, .. }
            | Request::Start { game_id }
            | Request::Pause { game_id }
            | Request::Resume { game_id }
            | Request::ClockPress { game_id, .. }
            | Request::OpponentAddress { game_id, .. }
            | Request::Snapshot { game_id } => game_id,
            Request::Capture(sub) => &sub.game_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Registered { token: String },
    Realm(RealmAssignment),
    NotReady,
    Verdict(Verdict),
    Address { ip: String },
    Snapshot(GameSnapshot),
    Rejected { reason: String },
}

/// Top-level frame payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Publish { topic: Topic, message: Message },
    Subscribe { filter: TopicFilter },
    Request { id: u64, request: Request },
    Response { id: u64, response: Response },
}
