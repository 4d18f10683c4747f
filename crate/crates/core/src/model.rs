//! Domain types for players, units, realms and games, plus game creation
//! and randomized unit birth.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("a game needs at least 2 players, got {0}")]
    TooFewPlayers(usize),
    #[error("duplicate player name `{0}`")]
    DuplicatePlayer(String),
    #[error("player names must be nonempty")]
    EmptyPlayerName,
    #[error("class pool is empty")]
    EmptyClassPool,
    #[error("duplicate class id `{0}` in class pool")]
    DuplicateClass(String),
    #[error("class `{class_id}` has port {port}, expected 1024..=65535")]
    InvalidPort { class_id: String, port: u16 },
    #[error("units_per_player must be at least 1")]
    NoUnits,
    #[error("invalid game config: {0}")]
    InvalidConfig(String),
    #[error("unknown player `{0}`")]
    UnknownPlayer(String),
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("unit `{0}` is destroyed")]
    UnitDead(String),
    #[error("malformed fingerprint `{0}`: expected 64 lowercase hex characters")]
    InvalidFingerprint(String),
    #[error("class pool file: {0}")]
    ClassPoolFile(String),
}

/// Milliseconds since the Unix epoch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn now() -> Self {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Timestamp(ms)
    }

    pub fn from_secs(secs: u64) -> Self {
        Timestamp(secs * 1000)
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn plus(self, d: Duration) -> Self {
        Timestamp(self.0 + d.as_millis() as u64)
    }

    pub fn minus(self, d: Duration) -> Self {
        Timestamp(self.0.saturating_sub(d.as_millis() as u64))
    }

    /// Elapsed time from `earlier` to `self`, zero if `earlier` is later.
    pub fn since(self, earlier: Timestamp) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0))
    }
}

/// Source of "now" for servers and daemons.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// Virtual clock moved only by its owner. Clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock(Arc::new(AtomicU64::new(start.0)))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.0, Ordering::SeqCst);
    }

    pub fn advance(&self, d: Duration) -> Timestamp {
        let ms = d.as_millis() as u64;
        Timestamp(self.0.fetch_add(ms, Ordering::SeqCst) + ms)
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.0.load(Ordering::SeqCst))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The secret flag planted in a unit: 32 random bytes, lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fingerprint(String);

impl Fingerprint {
    pub const HEX_LEN: usize = 64;

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let ok = text.len() == Self::HEX_LEN
            && text
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if ok {
            Ok(Fingerprint(text.to_owned()))
        } else {
            Err(ModelError::InvalidFingerprint(text.to_owned()))
        }
    }

    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Fingerprint(hex::encode(bytes))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Public identity of the unit holding this flag. Reports and ledger
    /// blocks carry this instead of the flag itself.
    pub fn identity_hash(&self) -> String {
        hex::encode(Sha256::digest(self.0.as_bytes()))
    }
}

impl TryFrom<String> for Fingerprint {
    type Error = ModelError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Fingerprint::parse(&value)
    }
}

impl From<Fingerprint> for String {
    fn from(fp: Fingerprint) -> Self {
        fp.0
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Liveness status as reported by a player daemon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum StatusCode {
    Up,
    Down,
}

impl StatusCode {
    pub fn code(self) -> u16 {
        match self {
            StatusCode::Up => 200,
            StatusCode::Down => 400,
        }
    }
}

impl TryFrom<u16> for StatusCode {
    type Error = String;
    fn try_from(value: u16) -> Result<Self, Self::Error> {
        match value {
            200 => Ok(StatusCode::Up),
            400 => Ok(StatusCode::Down),
            other => Err(format!("status code must be 200 or 400, got {other}")),
        }
    }
}

impl From<StatusCode> for u16 {
    fn from(code: StatusCode) -> Self {
        code.code()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitClass {
    pub class_id: String,
    pub name: String,
    #[serde(rename = "port")]
    pub service_port: u16,
    pub vuln_key: String,
    #[serde(default)]
    pub description: String,
}

/// The pool units are drawn from at birth and on reshuffle.
///
/// On disk this is a TOML file with one `[[class]]` table per class:
///
/// ```toml
/// [[class]]
/// class_id = "node-rce"
/// name = "Node application server"
/// port = 3001
/// vuln_key = "qs-exec"
/// description = "system call from direct program parameters"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPool {
    #[serde(rename = "class")]
    pub classes: Vec<UnitClass>,
}

impl ClassPool {
    /// The three trial units: a node app server, a web-goat style form and a
    /// ping-field injection, on ports 3001..=3003.
    pub fn trial() -> Self {
        let class = |id: &str, name: &str, port, key: &str, desc: &str| UnitClass {
            class_id: id.into(),
            name: name.into(),
            service_port: port,
            vuln_key: key.into(),
            description: desc.into(),
        };
        ClassPool {
            classes: vec![
                class(
                    "node-rce",
                    "Node application server",
                    3001,
                    "qs-exec",
                    "system call from direct program parameters; RCE by query string",
                ),
                class(
                    "goat-form",
                    "Web goat form service",
                    3002,
                    "form-inject",
                    "form POST is not filtered; command injection",
                ),
                class(
                    "dvwa-ping",
                    "Ping field web application",
                    3003,
                    "ping-inject",
                    "IP ping service field is not filtered; command injection",
                ),
            ],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let pool: ClassPool =
            toml::from_str(text).map_err(|e| ModelError::ClassPoolFile(e.to_string()))?;
        pool.validate()?;
        Ok(pool)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::ClassPoolFile(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("class pool serializes")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        validate_pool(&self.classes)
    }

    pub fn get(&self, class_id: &str) -> Option<&UnitClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

fn validate_pool(classes: &[UnitClass]) -> Result<(), ModelError> {
    if classes.is_empty() {
        return Err(ModelError::EmptyClassPool);
    }
    let mut seen = HashSet::new();
    for c in classes {
        if !seen.insert(c.class_id.as_str()) {
            return Err(ModelError::DuplicateClass(c.class_id.clone()));
        }
        if c.service_port < 1024 {
            return Err(ModelError::InvalidPort {
                class_id: c.class_id.clone(),
                port: c.service_port,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitState {
    pub unit_id: String,
    pub owner: String,
    pub class_id: String,
    pub port: u16,
    pub health: f64,
    pub fingerprint: Fingerprint,
    pub status_code: StatusCode,
    pub alive: bool,
}

impl UnitState {
    pub fn identity_hash(&self) -> String {
        self.fingerprint.identity_hash()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realm {
    pub owner: String,
    pub units: Vec<UnitState>,
}

impl Realm {
    pub fn total_health(&self) -> f64 {
        self.units.iter().map(|u| u.health).sum()
    }

    pub fn alive_count(&self) -> usize {
        self.units.iter().filter(|u| u.alive).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Player {
    pub name: String,
    pub realm: Realm,
    pub opponent: String,
    pub host_address: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameMode {
    Objective,
    Time,
    Speed,
}

impl FromStr for GameMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "objective" => Ok(GameMode::Objective),
            "time" => Ok(GameMode::Time),
            "speed" => Ok(GameMode::Speed),
            other => Err(ModelError::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for GameMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GameMode::Objective => "objective",
            GameMode::Time => "time",
            GameMode::Speed => "speed",
        })
    }
}

/// Ordering used to rank players when a time-mode match expires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Sum of unit health, then number of living units, then draw.
    #[default]
    HealthThenAlive,
    /// Sum of unit health only.
    HealthOnly,
    /// Living units first, then sum of health.
    AliveThenHealth,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
            match d {
                Some(d) => s.serialize_some(&(d.as_millis() as u64)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
            Ok(Option::<u64>::deserialize(d)?.map(Duration::from_millis))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    pub mode: GameMode,
    pub default_health: f64,
    /// Health lost per second while a unit is down.
    pub damage_constant: f64,
    #[serde(with = "duration_ms", rename = "report_interval_ms")]
    pub report_interval: Duration,
    #[serde(with = "duration_ms", rename = "time_limit_ms")]
    pub time_limit: Duration,
    #[serde(with = "duration_ms", rename = "clock_budget_ms")]
    pub clock_budget: Duration,
    #[serde(with = "duration_ms::option", rename = "reshuffle_interval_ms")]
    pub reshuffle_interval: Option<Duration>,
    pub rng_seed: u64,
    /// Fraction of a realm that must be destroyed before its owner is
    /// defeated in objective mode. 1.0 is last-hacker-alive.
    pub defeat_threshold: f64,
    pub tie_break: TieBreak,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            mode: GameMode::Objective,
            default_health: 100.0,
            damage_constant: 1.0,
            report_interval: Duration::from_secs(1),
            time_limit: Duration::from_secs(300),
            clock_budget: Duration::from_secs(300),
            reshuffle_interval: None,
            rng_seed: 0,
            defeat_threshold: 1.0,
            tie_break: TieBreak::default(),
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_owned()));
        if !(self.default_health.is_finite() && self.default_health >= 1.0) {
            return bad("default_health must be finite and >= 1");
        }
        if !(self.damage_constant.is_finite() && self.damage_constant > 0.0) {
            return bad("damage_constant must be finite and > 0");
        }
        if self.report_interval.is_zero() {
            return bad("report_interval must be > 0");
        }
        if self.mode == GameMode::Time && self.time_limit.is_zero() {
            return bad("time mode needs a nonzero time_limit");
        }
        if self.mode == GameMode::Speed && self.clock_budget.is_zero() {
            return bad("speed mode needs a nonzero clock_budget");
        }
        if matches!(self.reshuffle_interval, Some(d) if d.is_zero()) {
            return bad("reshuffle_interval must be > 0 when set");
        }
        if !(self.defeat_threshold > 0.0 && self.defeat_threshold <= 1.0) {
            return bad("defeat_threshold must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GamePhase {
    Lobby,
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "result", content = "player")]
pub enum Outcome {
    Winner(String),
    Draw,
}

impl Outcome {
    pub fn winner(&self) -> Option<&str> {
        match self {
            Outcome::Winner(name) => Some(name),
            Outcome::Draw => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameState {
    pub game_id: String,
    pub config: GameConfig,
    pub players: Vec<Player>,
    pub class_pool: Vec<UnitClass>,
    pub tick: u64,
    pub phase: GamePhase,
    /// Set exactly when `phase` is `Finished`.
    pub outcome: Option<Outcome>,
    pub paused: bool,
    pub started_at: Option<Timestamp>,
    next_unit_seq: u64,
}

impl GameState {
    pub fn player(&self, name: &str) -> Option<&Player> {
        self.players.iter().find(|p| p.name == name)
    }

    pub fn player_mut(&mut self, name: &str) -> Option<&mut Player> {
        self.players.iter_mut().find(|p| p.name == name)
    }

    pub fn unit(&self, unit_id: &str) -> Option<&UnitState> {
        self.players
            .iter()
            .flat_map(|p| p.realm.units.iter())
            .find(|u| u.unit_id == unit_id)
    }

    pub fn unit_mut(&mut self, unit_id: &str) -> Option<&mut UnitState> {
        self.players
            .iter_mut()
            .flat_map(|p| p.realm.units.iter_mut())
            .find(|u| u.unit_id == unit_id)
    }

    pub fn unit_by_fingerprint(&self, fp: &Fingerprint) -> Option<&UnitState> {
        self.players
            .iter()
            .flat_map(|p| p.realm.units.iter())
            .find(|u| &u.fingerprint == fp)
    }

    pub fn winner(&self) -> Option<&str> {
        self.outcome.as_ref().and_then(Outcome::winner)
    }

    pub fn class(&self, class_id: &str) -> Option<&UnitClass> {
        self.class_pool.iter().find(|c| c.class_id == class_id)
    }

    fn next_unit_id(&mut self, owner: &str) -> String {
        self.next_unit_seq += 1;
        format!("{owner}-u{}", self.next_unit_seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    GetOpponentIp,
    GetFlags,
    EnterUnit,
    CaptureUnit,
    AttackUnit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub actor: String,
    pub kind: ActionKind,
    pub payload: String,
    pub timestamp: Timestamp,
}

/// Creates a game in the lobby phase. Every player receives
/// `units_per_player` units drawn from `class_pool` with the RNG seeded from
/// `config.rng_seed`. Player `i` targets player `i + 1` (cyclically).
pub fn new_game(
    game_id: &str,
    config: GameConfig,
    player_names: &[String],
    class_pool: &[UnitClass],
    units_per_player: usize,
) -> Result<GameState, ModelError> {
    config.validate()?;
    if player_names.len() < 2 {
        return Err(ModelError::TooFewPlayers(player_names.len()));
    }
    let mut seen = HashSet::new();
    for name in player_names {
        if name.is_empty() {
            return Err(ModelError::EmptyPlayerName);
        }
        if !seen.insert(name.as_str()) {
            return Err(ModelError::DuplicatePlayer(name.clone()));
        }
    }
    validate_pool(class_pool)?;
    if units_per_player == 0 {
        return Err(ModelError::NoUnits);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut state = GameState {
        game_id: game_id.to_owned(),
        config,
        players: Vec::with_capacity(player_names.len()),
        class_pool: class_pool.to_vec(),
        tick: 0,
        phase: GamePhase::Lobby,
        outcome: None,
        paused: false,
        started_at: None,
        next_unit_seq: 0,
    };
    let mut fingerprints = HashSet::new();
    let n = player_names.len();
    for (i, name) in player_names.iter().enumerate() {
        let mut units = Vec::with_capacity(units_per_player);
        let mut ports = HashSet::new();
        for _ in 0..units_per_player {
            let unit = birth_unit(&mut state, name, &mut ports, &mut fingerprints, &mut rng);
            units.push(unit);
        }
        state.players.push(Player {
            name: name.clone(),
            realm: Realm {
                owner: name.clone(),
                units,
            },
            opponent: player_names[(i + 1) % n].clone(),
            host_address: String::new(),
        });
    }
    Ok(state)
}

fn birth_unit<R: Rng + ?Sized>(
    state: &mut GameState,
    owner: &str,
    taken_ports: &mut HashSet<u16>,
    fingerprints: &mut HashSet<Fingerprint>,
    rng: &mut R,
) -> UnitState {
    let class = state.class_pool[rng.random_range(0..state.class_pool.len())].clone();
    let fingerprint = loop {
        let fp = Fingerprint::generate(rng);
        if fingerprints.insert(fp.clone()) {
            break fp;
        }
    };
    let port = free_port(class.service_port, taken_ports);
    taken_ports.insert(port);
    UnitState {
        unit_id: state.next_unit_id(owner),
        owner: owner.to_owned(),
        class_id: class.class_id,
        port,
        health: state.config.default_health,
        fingerprint,
        status_code: StatusCode::Up,
        alive: true,
    }
}

/// The class port, or the next port above it not already used in the realm.
fn free_port(preferred: u16, taken: &HashSet<u16>) -> u16 {
    let mut port = preferred;
    while taken.contains(&port) {
        port = if port == u16::MAX { 1024 } else { port + 1 };
    }
    port
}

/// Every unit in the game: the union of all realms.
pub fn game_units(state: &GameState) -> Vec<&UnitState> {
    state
        .players
        .iter()
        .flat_map(|p| p.realm.units.iter())
        .collect()
}

/// Decommissions a living unit and births a replacement in its slot.
pub fn reshuffle_unit<R: Rng + ?Sized>(
    state: &GameState,
    owner: &str,
    unit_id: &str,
    rng: &mut R,
) -> Result<GameState, ModelError> {
    let mut next = state.clone();
    let player = next
        .player(owner)
        .ok_or_else(|| ModelError::UnknownPlayer(owner.to_owned()))?;
    let slot = player
        .realm
        .units
        .iter()
        .position(|u| u.unit_id == unit_id)
        .ok_or_else(|| ModelError::UnknownUnit(unit_id.to_owned()))?;
    if !player.realm.units[slot].alive {
        return Err(ModelError::UnitDead(unit_id.to_owned()));
    }
    let mut ports: HashSet<u16> = player.realm.units.iter().map(|u| u.port).collect();
    ports.remove(&player.realm.units[slot].port);
    let mut fingerprints: HashSet<Fingerprint> = game_units(&next)
        .into_iter()
        .map(|u| u.fingerprint.clone())
        .collect();
    let unit = birth_unit(&mut next, owner, &mut ports, &mut fingerprints, rng);
    next.player_mut(owner).expect("checked above").realm.units[slot] = unit;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn pool() -> Vec<UnitClass> {
        ClassPool::trial().classes
    }

    #[test]
    fn new_game_two_players_default_health() {
        let state = new_game(
            "g1",
            GameConfig::default(),
            &names(&["alice", "bob"]),
            &pool(),
            3,
        )
        .unwrap();
        let units = game_units(&state);
        assert_eq!(units.len(), 6);
        assert!(units.iter().all(|u| u.health == 100.0 && u.alive));
        assert_eq!(state.phase, GamePhase::Lobby);
        assert_eq!(state.player("alice").unwrap().opponent, "bob");
        assert_eq!(state.player("bob").unwrap().opponent, "alice");
    }

    #[test]
    fn sudden_death_health() {
        let config = GameConfig {
            default_health: 1.0,
            ..GameConfig::default()
        };
        let state = new_game("g", config, &names(&["a", "b"]), &pool(), 3).unwrap();
        assert!(game_units(&state).iter().all(|u| u.health == 1.0));
    }

    #[test]
    fn rejects_bad_setups() {
        let cfg = GameConfig::default();
        assert_eq!(
            new_game("g", cfg.clone(), &names(&["alice", "alice"]), &pool(), 3),
            Err(ModelError::DuplicatePlayer("alice".into()))
        );
        assert_eq!(
            new_game("g", cfg.clone(), &names(&["alice", "bob"]), &[], 3),
            Err(ModelError::EmptyClassPool)
        );
        assert_eq!(
            new_game("g", cfg.clone(), &names(&["alice"]), &pool(), 3),
            Err(ModelError::TooFewPlayers(1))
        );
        assert_eq!(
            new_game("g", cfg.clone(), &names(&["alice", "bob"]), &pool(), 0),
            Err(ModelError::NoUnits)
        );
        let mut low = pool();
        low[0].service_port = 80;
        assert!(matches!(
            new_game("g", cfg, &names(&["alice", "bob"]), &low, 1),
            Err(ModelError::InvalidPort { .. })
        ));
    }

    #[test]
    fn three_players_cyclic_targets() {
        let state = new_game(
            "g",
            GameConfig::default(),
            &names(&["a", "b", "c"]),
            &pool(),
            2,
        )
        .unwrap();
        assert_eq!(game_units(&state).len(), 6);
        let targets: Vec<_> = state.players.iter().map(|p| p.opponent.as_str()).collect();
        assert_eq!(targets, ["b", "c", "a"]);
    }

    #[test]
    fn ports_are_distinct_within_a_realm() {
        let one_class = vec![pool()[0].clone()];
        let state = new_game("g", GameConfig::default(), &names(&["a", "b"]), &one_class, 3)
            .unwrap();
        let ports: Vec<u16> = state.players[0].realm.units.iter().map(|u| u.port).collect();
        assert_eq!(ports, [3001, 3002, 3003]);
    }

    #[test]
    fn reshuffle_replaces_living_unit() {
        let state = new_game("g", GameConfig::default(), &names(&["a", "b"]), &pool(), 3)
            .unwrap();
        let old = state.players[0].realm.units[1].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let next = reshuffle_unit(&state, "a", &old.unit_id, &mut rng).unwrap();
        let new = &next.players[0].realm.units[1];
        assert_ne!(new.unit_id, old.unit_id);
        assert_ne!(new.fingerprint, old.fingerprint);
        assert_eq!(new.health, 100.0);
        assert_eq!(game_units(&next).len(), 6);
        assert!(next.unit(&old.unit_id).is_none());
    }

    #[test]
    fn reshuffle_rejects_dead_and_unknown() {
        let mut state = new_game("g", GameConfig::default(), &names(&["a", "b"]), &pool(), 3)
            .unwrap();
        let id = state.players[0].realm.units[0].unit_id.clone();
        {
            let u = state.unit_mut(&id).unwrap();
            u.health = 0.0;
            u.alive = false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            reshuffle_unit(&state, "a", &id, &mut rng),
            Err(ModelError::UnitDead(id))
        );
        assert_eq!(
            reshuffle_unit(&state, "a", "nope", &mut rng),
            Err(ModelError::UnknownUnit("nope".into()))
        );
    }

    #[test]
    fn reshuffle_is_reproducible_with_seed() {
        let state = new_game("g", GameConfig::default(), &names(&["a", "b"]), &pool(), 3)
            .unwrap();
        let id = state.players[1].realm.units[2].unit_id.clone();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            reshuffle_unit(&state, "b", &id, &mut rng).unwrap()
        };
        let (x, y) = (run(), run());
        assert_eq!(x.players[1].realm.units[2].class_id, y.players[1].realm.units[2].class_id);
        assert_eq!(x, y);
    }

    #[test]
    fn fingerprint_validation() {
        assert!(Fingerprint::parse(&"a".repeat(64)).is_ok());
        assert!(Fingerprint::parse(&"A".repeat(64)).is_err());
        assert!(Fingerprint::parse(&"a".repeat(63)).is_err());
        assert!(Fingerprint::parse(&"g".repeat(64)).is_err());
    }

    #[test]
    fn class_pool_toml_round_trip() {
        let pool = ClassPool::trial();
        let text = pool.to_toml_string();
        assert_eq!(ClassPool::from_toml_str(&text).unwrap(), pool);
        assert!(matches!(
            ClassPool::from_toml_str("class = []"),
            Err(ModelError::EmptyClassPool)
        ));
    }

    #[test]
    fn status_code_wire_values() {
        assert_eq!(serde_json::to_string(&StatusCode::Down).unwrap(), "400");
        assert_eq!(serde_json::from_str::<StatusCode>("200").unwrap(), StatusCode::Up);
        assert!(serde_json::from_str::<StatusCode>("500").is_err());
    }
}
