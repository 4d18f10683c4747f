//! The game server: source of truth for every match it mediates.
//!
//! A [`Match`] is the per-game state machine. All of its methods take the
//! server's receive time explicitly, so the same code runs against the wall
//! clock in `gamed` and a virtual clock in simulations. [`GameServer`] holds
//! many matches, each behind its own lock, and publishes their score and
//! event streams on a [`Transport`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::health::{apply_tick, is_defeated, DownSet, HealthError};
use crate::ledger::{Ledger, LedgerError};
use crate::metrics::{CommandEvent, EventLog};
use crate::model::{
    new_game, reshuffle_unit, ClassPool, Fingerprint, GameConfig, GameMode, GamePhase, GameState,
    ModelError, Outcome, StatusCode, TieBreak, Timestamp,
};
use crate::protocol::{
    CaptureSubmission, Channel, ClockView, EventRecord, GameEvent, GameSnapshot, Message,
    OpponentInfo, RealmAssignment, Request, Response, ScoreUpdate, StatusReport, Topic,
    Transport, Verdict,
};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("unknown game `{0}`")]
    UnknownGame(String),
    #[error("unknown player `{0}`")]
    UnknownPlayer(String),
    #[error("unknown unit `{0}` in report")]
    UnknownUnit(String),
    #[error("game is {0:?}, expected {1:?}")]
    WrongPhase(GamePhase, GamePhase),
    #[error("game is paused")]
    Paused,
    #[error("game is not paused")]
    NotPaused,
    #[error("clock press only applies to speed mode")]
    NotSpeedMode,
    #[error("`{0}` is not the active player")]
    NotActive(String),
    #[error("malformed fingerprint")]
    MalformedFingerprint,
    #[error("player `{0}` already registered")]
    AlreadyRegistered(String),
    #[error("game has not been created yet")]
    NotReady,
    #[error("bad session token")]
    BadToken,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Health(#[from] HealthError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Per-mode timekeeping. Speed mode runs one countdown per player; only the
/// active player's clock drains.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchClock {
    pub mode: GameMode,
    pub elapsed: Duration,
    pub time_limit: Option<Duration>,
    pub per_player_remaining: BTreeMap<String, Duration>,
    pub active_player: Option<String>,
    last_update: Option<Timestamp>,
}

impl MatchClock {
    fn new(config: &GameConfig, players: &[String]) -> Self {
        let speed = config.mode == GameMode::Speed;
        MatchClock {
            mode: config.mode,
            elapsed: Duration::ZERO,
            time_limit: (config.mode == GameMode::Time).then_some(config.time_limit),
            per_player_remaining: if speed {
                players.iter().map(|p| (p.clone(), config.clock_budget)).collect()
            } else {
                BTreeMap::new()
            },
            active_player: None,
            last_update: None,
        }
    }

    fn start(&mut self, now: Timestamp, first: Option<String>) {
        self.last_update = Some(now);
        if self.mode == GameMode::Speed {
            self.active_player = first;
        }
    }

    /// Moves the clock to `now`. Frozen (no-op apart from resetting the
    /// reference point) when `running` is false.
    fn advance(&mut self, now: Timestamp, running: bool) {
        let delta = self.last_update.map_or(Duration::ZERO, |t| now.since(t));
        self.last_update = Some(now.max(self.last_update.unwrap_or(now)));
        if !running {
            return;
        }
        self.elapsed += delta;
        if let Some(active) = &self.active_player {
            if let Some(rem) = self.per_player_remaining.get_mut(active) {
                *rem = rem.saturating_sub(delta);
            }
        }
    }

    pub fn remaining(&self, player: &str) -> Option<Duration> {
        self.per_player_remaining.get(player).copied()
    }

    pub fn expired(&self) -> bool {
        matches!(self.time_limit, Some(limit) if self.elapsed >= limit)
    }

    fn view(&self) -> ClockView {
        ClockView {
            mode: self.mode,
            elapsed_ms: self.elapsed.as_millis() as u64,
            time_limit_ms: self.time_limit.map(|d| d.as_millis() as u64),
            remaining_ms: self
                .per_player_remaining
                .iter()
                .map(|(k, v)| (k.clone(), v.as_millis() as u64))
                .collect(),
            active_player: self.active_player.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportOutcome {
    Applied,
    /// Same or older client timestamp than the last accepted report.
    Duplicate,
    /// Accepted while paused; no damage charged.
    Paused,
}

/// One game's authoritative state.
pub struct Match {
    state: GameState,
    clock: MatchClock,
    accounted_until: BTreeMap<String, Timestamp>,
    last_report: BTreeMap<String, Timestamp>,
    defeated: BTreeSet<String>,
    commands: EventLog,
    recent_cmds: BTreeMap<String, BTreeMap<String, String>>,
    reshuffle_rng: ChaCha8Rng,
    next_reshuffle: Option<Timestamp>,
    /// Extra slack before a silent player's units are charged as down.
    missed_report_grace: Duration,
    ledger: Option<Ledger>,
    outbox: Vec<(Topic, Message)>,
}

const RECENT_CMDS: usize = 8;

impl Match {
    pub fn new(state: GameState) -> Self {
        let names: Vec<String> = state.players.iter().map(|p| p.name.clone()).collect();
        let clock = MatchClock::new(&state.config, &names);
        let interval = state.config.report_interval;
        Match {
            reshuffle_rng: ChaCha8Rng::seed_from_u64(state.config.rng_seed ^ 0x5eed_5eed),
            clock,
            accounted_until: BTreeMap::new(),
            last_report: BTreeMap::new(),
            defeated: BTreeSet::new(),
            commands: EventLog::new(),
            recent_cmds: BTreeMap::new(),
            next_reshuffle: None,
            missed_report_grace: interval / 2,
            ledger: None,
            outbox: Vec::new(),
            state,
        }
    }

    pub fn with_ledger(mut self, ledger: Ledger) -> Self {
        self.ledger = Some(ledger);
        self
    }

    pub fn state(&self) -> &GameState {
        &self.state
    }

    pub fn clock(&self) -> &MatchClock {
        &self.clock
    }

    pub fn ledger(&self) -> Option<&Ledger> {
        self.ledger.as_ref()
    }

    pub fn commands(&self) -> &EventLog {
        &self.commands
    }

    /// Messages produced since the last call, in publish order.
    pub fn take_outbox(&mut self) -> Vec<(Topic, Message)> {
        std::mem::take(&mut self.outbox)
    }

    fn require_running(&self) -> Result<(), ServerError> {
        if self.state.phase != GamePhase::Running {
            return Err(ServerError::WrongPhase(self.state.phase, GamePhase::Running));
        }
        Ok(())
    }

    fn player_names(&self) -> Vec<String> {
        self.state.players.iter().map(|p| p.name.clone()).collect()
    }

    fn topic(&self, player: &str, channel: Channel) -> Topic {
        Topic::new(&self.state.game_id, player, channel).expect("validated names")
    }

    fn emit(&mut self, player: &str, at: Timestamp, event: GameEvent) {
        let record = EventRecord {
            game_id: self.state.game_id.clone(),
            tick: self.state.tick,
            at,
            event,
        };
        let topic = self.topic(player, Channel::Events);
        self.outbox.push((topic, Message::Event(record)));
    }

    fn emit_all(&mut self, at: Timestamp, event: GameEvent) {
        for name in self.player_names() {
            self.emit(&name, at, event.clone());
        }
    }

    fn publish_score(&mut self, player: &str) {
        let remaining = self.clock.remaining(player).map(|d| d.as_millis() as u64);
        if let Some(score) = ScoreUpdate::from_state(&self.state, player, remaining) {
            let topic = self.topic(player, Channel::Score);
            self.outbox.push((topic, Message::Score(score)));
        }
    }

    fn publish_all_scores(&mut self) {
        for name in self.player_names() {
            self.publish_score(&name);
        }
    }

    fn record_ledger(&mut self, player: &str, at: Timestamp) -> Result<(), ServerError> {
        if let Some(ledger) = self.ledger.as_mut() {
            if let Some(mut payload) = StatusReport::from_state(&self.state, player, at) {
                payload.cmds = self.recent_cmds.get(player).cloned().unwrap_or_default();
                ledger.append(&payload)?;
            }
        }
        Ok(())
    }

    pub fn set_host(&mut self, player: &str, host: &str) -> Result<(), ServerError> {
        let p = self
            .state
            .player_mut(player)
            .ok_or_else(|| ServerError::UnknownPlayer(player.to_owned()))?;
        p.host_address = host.to_owned();
        Ok(())
    }

    pub fn start(&mut self, now: Timestamp) -> Result<(), ServerError> {
        if self.state.phase != GamePhase::Lobby {
            return Err(ServerError::WrongPhase(self.state.phase, GamePhase::Lobby));
        }
        self.state.phase = GamePhase::Running;
        self.state.started_at = Some(now);
        for name in self.player_names() {
            self.accounted_until.insert(name, now);
        }
        let first = self.state.players.first().map(|p| p.name.clone());
        self.clock.start(now, first);
        self.next_reshuffle = self.state.config.reshuffle_interval.map(|d| now.plus(d));
        info!(game = %self.state.game_id, mode = %self.state.config.mode, "game started");
        self.emit_all(now, GameEvent::GameStarted);
        for p in self.state.players.clone() {
            let info = OpponentInfo {
                game_id: self.state.game_id.clone(),
                player: p.name.clone(),
                opponent: p.opponent.clone(),
                ip: self
                    .state
                    .player(&p.opponent)
                    .map(|o| o.host_address.clone())
                    .unwrap_or_default(),
            };
            let topic = self.topic(&p.name, Channel::Opponent);
            self.outbox.push((topic, Message::Opponent(info)));
        }
        self.publish_all_scores();
        Ok(())
    }

    pub fn pause(&mut self, now: Timestamp) -> Result<(), ServerError> {
        self.require_running()?;
        if self.state.paused {
            return Err(ServerError::Paused);
        }
        self.charge_missed_reports(now)?;
        self.clock.advance(now, true);
        self.state.paused = true;
        self.emit_all(now, GameEvent::Paused);
        Ok(())
    }

    pub fn resume(&mut self, now: Timestamp) -> Result<(), ServerError> {
        self.require_running()?;
        if !self.state.paused {
            return Err(ServerError::NotPaused);
        }
        self.state.paused = false;
        self.clock.advance(now, false);
        for until in self.accounted_until.values_mut() {
            *until = now;
        }
        self.emit_all(now, GameEvent::Resumed);
        Ok(())
    }

    fn charge(&mut self, player: &str, down: BTreeSet<String>, now: Timestamp) -> Result<(), ServerError> {
        let since = self.accounted_until.get(player).copied().unwrap_or(now);
        let mut dt = now.since(since).as_secs_f64();
        // damage comes in whole ticks: an early down report still costs one interval
        if dt > 0.0 && !down.is_empty() {
            dt = dt.max(self.state.config.report_interval.as_secs_f64());
        }
        let before: Vec<(String, f64)> = self
            .state
            .player(player)
            .map(|p| p.realm.units.iter().map(|u| (u.unit_id.clone(), u.health)).collect())
            .unwrap_or_default();
        if dt > 0.0 {
            let set = DownSet {
                tick: self.state.tick,
                unit_ids: down,
            };
            self.state = apply_tick(&self.state, &set, dt)?;
        } else if let Some(p) = self.state.player_mut(player) {
            for u in p.realm.units.iter_mut().filter(|u| down.contains(&u.unit_id)) {
                u.status_code = StatusCode::Down;
            }
        }
        self.accounted_until.insert(player.to_owned(), now.max(since));
        for (unit_id, old) in before {
            let unit = self.state.unit(&unit_id).expect("units unchanged by a tick").clone();
            if unit.health != old {
                self.emit(
                    player,
                    now,
                    GameEvent::HealthChanged {
                        player: player.to_owned(),
                        unit_id,
                        health: unit.health,
                        alive: unit.alive,
                    },
                );
            }
        }
        self.note_defeats(now);
        self.publish_score(player);
        self.record_ledger(player, now)
    }

    /// Applies a daemon's report. Units reported 400, or missing from the
    /// report, are charged for the server-side time since the player's last
    /// accounted instant.
    pub fn handle_status_report(
        &mut self,
        report: &StatusReport,
        now: Timestamp,
    ) -> Result<ReportOutcome, ServerError> {
        self.require_running()?;
        let player = self
            .state
            .player(&report.player_name)
            .ok_or_else(|| ServerError::UnknownPlayer(report.player_name.clone()))?;
        let by_hash: BTreeMap<String, String> = player
            .realm
            .units
            .iter()
            .map(|u| (u.identity_hash(), u.unit_id.clone()))
            .collect();
        let mut up = BTreeSet::new();
        for u in &report.units {
            let unit_id = by_hash
                .get(&u.id)
                .ok_or_else(|| ServerError::UnknownUnit(u.id.clone()))?;
            if u.code == StatusCode::Up {
                up.insert(unit_id.clone());
            }
        }
        let name = report.player_name.clone();
        if matches!(self.last_report.get(&name), Some(last) if report.timestamp <= *last) {
            debug!(player = %name, ts = %report.timestamp, "duplicate report ignored");
            return Ok(ReportOutcome::Duplicate);
        }
        self.last_report.insert(name.clone(), report.timestamp);
        if self.state.paused {
            return Ok(ReportOutcome::Paused);
        }
        let down: BTreeSet<String> = by_hash.into_values().filter(|id| !up.contains(id)).collect();
        if let Some(p) = self.state.player_mut(&name) {
            for u in p.realm.units.iter_mut().filter(|u| up.contains(&u.unit_id) && u.alive) {
                u.status_code = StatusCode::Up;
            }
        }
        self.charge(&name, down, now)?;
        Ok(ReportOutcome::Applied)
    }

    /// Proof of exploitation: a correct opponent fingerprint destroys the
    /// unit at once.
    pub fn handle_capture(
        &mut self,
        sub: &CaptureSubmission,
        now: Timestamp,
    ) -> Result<Verdict, ServerError> {
        let claimed =
            Fingerprint::parse(&sub.claimed_fingerprint).map_err(|_| ServerError::MalformedFingerprint)?;
        self.require_running()?;
        if self.state.paused {
            return Err(ServerError::Paused);
        }
        let attacker = self
            .state
            .player(&sub.attacker)
            .ok_or_else(|| ServerError::UnknownPlayer(sub.attacker.clone()))?;
        let target = attacker.opponent.clone();
        let hit = self
            .state
            .unit_by_fingerprint(&claimed)
            .filter(|u| u.owner == target && u.alive)
            .map(|u| u.unit_id.clone());
        let Some(unit_id) = hit else {
            debug!(attacker = %sub.attacker, "capture rejected");
            return Ok(Verdict::Rejected);
        };
        {
            let unit = self.state.unit_mut(&unit_id).expect("found above");
            unit.health = 0.0;
            unit.alive = false;
        }
        info!(attacker = %sub.attacker, unit = %unit_id, "unit captured");
        let captured = GameEvent::UnitCaptured {
            attacker: sub.attacker.clone(),
            owner: target.clone(),
            unit_id: unit_id.clone(),
        };
        self.emit(&target, now, captured.clone());
        self.emit(&sub.attacker, now, captured);
        self.emit(
            &target,
            now,
            GameEvent::HealthChanged {
                player: target.clone(),
                unit_id,
                health: 0.0,
                alive: false,
            },
        );
        self.note_defeats(now);
        self.publish_score(&target);
        self.record_ledger(&target, now)?;
        Ok(Verdict::Accepted)
    }

    /// Logs a captured command. In speed mode a valid submission by the
    /// active player also hands the clock over.
    pub fn handle_command(&mut self, event: CommandEvent, now: Timestamp) -> Result<(), ServerError> {
        if self.state.player(&event.player).is_none() {
            return Err(ServerError::UnknownPlayer(event.player));
        }
        if event.is_valid_command() {
            let recent = self.recent_cmds.entry(event.player.clone()).or_default();
            recent.insert(format!("{:020}", event.timestamp.millis()), event.text.clone());
            while recent.len() > RECENT_CMDS {
                recent.pop_first();
            }
        }
        let press = event.is_valid_command()
            && self.state.config.mode == GameMode::Speed
            && self.clock.active_player.as_deref() == Some(event.player.as_str());
        let player = event.player.clone();
        if let Err(e) = self.commands.push(event) {
            warn!(%player, "command not logged: {e}");
        }
        if press && self.state.phase == GamePhase::Running && !self.state.paused {
            self.clock_press(&player, now)?;
        }
        Ok(())
    }

    pub fn clock_press(&mut self, player: &str, now: Timestamp) -> Result<(), ServerError> {
        self.require_running()?;
        if self.state.config.mode != GameMode::Speed {
            return Err(ServerError::NotSpeedMode);
        }
        if self.state.paused {
            return Err(ServerError::Paused);
        }
        if self.clock.active_player.as_deref() != Some(player) {
            return Err(ServerError::NotActive(player.to_owned()));
        }
        self.clock.advance(now, true);
        let next = self.next_in_turn(player);
        let remaining = self.clock.remaining(player).unwrap_or_default();
        self.clock.active_player = Some(next.clone());
        self.emit_all(
            now,
            GameEvent::ClockPressed {
                player: player.to_owned(),
                next_active: next,
                remaining_ms: remaining.as_millis() as u64,
            },
        );
        self.publish_all_scores();
        Ok(())
    }

    fn next_in_turn(&self, player: &str) -> String {
        let mut next = self
            .state
            .player(player)
            .map(|p| p.opponent.clone())
            .unwrap_or_default();
        for _ in 0..self.state.players.len() {
            if !self.defeated.contains(&next) {
                break;
            }
            next = self
                .state
                .player(&next)
                .map(|p| p.opponent.clone())
                .unwrap_or_default();
        }
        next
    }

    fn eliminated(&self, player: &str) -> bool {
        let Some(p) = self.state.player(player) else {
            return false;
        };
        let threshold = self.state.config.defeat_threshold;
        if threshold >= 1.0 {
            return is_defeated(&self.state, player).unwrap_or(false);
        }
        let dead = p.realm.units.iter().filter(|u| u.health <= 0.0).count();
        dead as f64 / p.realm.units.len() as f64 >= threshold
    }

    fn clock_exhausted(&self, player: &str) -> bool {
        self.clock.remaining(player) == Some(Duration::ZERO)
    }

    fn note_defeats(&mut self, now: Timestamp) {
        for name in self.player_names() {
            if self.defeated.contains(&name) {
                continue;
            }
            let out = match self.state.config.mode {
                GameMode::Objective => self.eliminated(&name),
                GameMode::Speed => self.eliminated(&name) || self.clock_exhausted(&name),
                GameMode::Time => false,
            };
            if out {
                self.defeated.insert(name.clone());
                self.emit_all(now, GameEvent::PlayerDefeated { player: name });
            }
        }
    }

    /// Winner (or draw) if the mode's victory condition holds right now.
    pub fn evaluate_win(&self) -> Option<Outcome> {
        let names = self.player_names();
        match self.state.config.mode {
            GameMode::Objective | GameMode::Speed => {
                let standing: Vec<&String> = names
                    .iter()
                    .filter(|n| {
                        !(self.eliminated(n)
                            || (self.state.config.mode == GameMode::Speed && self.clock_exhausted(n)))
                    })
                    .collect();
                match standing.as_slice() {
                    [] => Some(Outcome::Draw),
                    [one] => Some(Outcome::Winner((*one).clone())),
                    _ => None,
                }
            }
            GameMode::Time => self.clock.expired().then(|| self.rank_at_expiry()),
        }
    }

    fn rank_at_expiry(&self) -> Outcome {
        let tie = self.state.config.tie_break;
        let key = |name: &String| {
            let realm = &self.state.player(name).expect("listed").realm;
            (realm.total_health(), realm.alive_count())
        };
        let cmp = |a: &(f64, usize), b: &(f64, usize)| match tie {
            TieBreak::HealthThenAlive => a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)),
            TieBreak::HealthOnly => a.0.total_cmp(&b.0),
            TieBreak::AliveThenHealth => a.1.cmp(&b.1).then(a.0.total_cmp(&b.0)),
        };
        let names = self.player_names();
        let scored: Vec<(String, (f64, usize))> = names.iter().map(|n| (n.clone(), key(n))).collect();
        let best = scored
            .iter()
            .map(|(_, k)| *k)
            .max_by(|a, b| cmp(a, b))
            .expect("at least two players");
        let leaders: Vec<&String> = scored
            .iter()
            .filter(|(_, k)| cmp(k, &best).is_eq())
            .map(|(n, _)| n)
            .collect();
        match leaders.as_slice() {
            [one] => Outcome::Winner((*one).clone()),
            _ => Outcome::Draw,
        }
    }

    fn charge_missed_reports(&mut self, now: Timestamp) -> Result<(), ServerError> {
        let limit = self.state.config.report_interval + self.missed_report_grace;
        for name in self.player_names() {
            let since = self.accounted_until.get(&name).copied().unwrap_or(now);
            if now.since(since) > limit {
                debug!(player = %name, "missed report; charging all units");
                let all: BTreeSet<String> = self
                    .state
                    .player(&name)
                    .map(|p| p.realm.units.iter().map(|u| u.unit_id.clone()).collect())
                    .unwrap_or_default();
                self.charge(&name, all, now)?;
            }
        }
        Ok(())
    }

    fn reshuffle_due(&mut self, now: Timestamp) -> Result<(), ServerError> {
        let (Some(due), Some(interval)) = (self.next_reshuffle, self.state.config.reshuffle_interval)
        else {
            return Ok(());
        };
        if now < due {
            return Ok(());
        }
        self.next_reshuffle = Some(due.plus(interval));
        for name in self.player_names() {
            let alive: Vec<String> = self
                .state
                .player(&name)
                .map(|p| p.realm.units.iter().filter(|u| u.alive).map(|u| u.unit_id.clone()).collect())
                .unwrap_or_default();
            if alive.is_empty() {
                continue;
            }
            let pick = alive[(self.reshuffle_rng.next_u64() % alive.len() as u64) as usize].clone();
            let slot = self
                .state
                .player(&name)
                .and_then(|p| p.realm.units.iter().position(|u| u.unit_id == pick))
                .expect("picked from realm");
            self.state = reshuffle_unit(&self.state, &name, &pick, &mut self.reshuffle_rng)?;
            let new_id = self.state.player(&name).expect("exists").realm.units[slot].unit_id.clone();
            self.emit(
                &name,
                now,
                GameEvent::UnitReshuffled {
                    owner: name.clone(),
                    old_unit_id: pick,
                    new_unit_id: new_id,
                },
            );
            self.publish_score(&name);
        }
        Ok(())
    }

    /// Periodic housekeeping: clocks, missed reports, reshuffles and the
    /// victory check. Returns the outcome once the game finishes.
    pub fn tick(&mut self, now: Timestamp) -> Result<Option<Outcome>, ServerError> {
        if self.state.phase != GamePhase::Running {
            return Ok(self.state.outcome.clone());
        }
        if self.state.paused {
            self.clock.advance(now, false);
            return Ok(None);
        }
        self.clock.advance(now, true);
        self.charge_missed_reports(now)?;
        self.reshuffle_due(now)?;
        self.note_defeats(now);
        if self.state.config.mode == GameMode::Speed {
            let active = self.clock.active_player.clone();
            if let Some(active) = active.filter(|a| self.defeated.contains(a)) {
                let next = self.next_in_turn(&active);
                self.clock.active_player = Some(next);
            }
        }
        if let Some(outcome) = self.evaluate_win() {
            self.finish(outcome.clone(), now);
            return Ok(Some(outcome));
        }
        Ok(None)
    }

    fn finish(&mut self, outcome: Outcome, now: Timestamp) {
        info!(game = %self.state.game_id, ?outcome, "game finished");
        self.state.phase = GamePhase::Finished;
        self.state.outcome = Some(outcome.clone());
        self.publish_all_scores();
        self.emit_all(now, GameEvent::GameFinished { outcome });
    }

    pub fn snapshot(&self) -> GameSnapshot {
        GameSnapshot {
            game_id: self.state.game_id.clone(),
            mode: self.state.config.mode,
            phase: self.state.phase,
            paused: self.state.paused,
            tick: self.state.tick,
            outcome: self.state.outcome.clone(),
            players: self
                .state
                .players
                .iter()
                .filter_map(|p| {
                    ScoreUpdate::from_state(
                        &self.state,
                        &p.name,
                        self.clock.remaining(&p.name).map(|d| d.as_millis() as u64),
                    )
                })
                .collect(),
            clock: self.clock.view(),
        }
    }
}

/// Server-wide defaults applied to every game it creates.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub game: GameConfig,
    pub class_pool: ClassPool,
    pub units_per_player: usize,
    pub players_per_game: usize,
    /// Start a game as soon as its last player registers.
    pub auto_start: bool,
    /// Directory receiving one `<game_id>.chain` file per game.
    pub ledger_dir: Option<PathBuf>,
    /// Keep an in-memory chain even without a directory.
    pub decentralized: bool,
    pub difficulty_bits: u8,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            game: GameConfig::default(),
            class_pool: ClassPool::trial(),
            units_per_player: 3,
            players_per_game: 2,
            auto_start: false,
            ledger_dir: None,
            decentralized: false,
            difficulty_bits: 0,
        }
    }
}

struct Registration {
    name: String,
    host: String,
    token: String,
}

enum Slot {
    Lobby(Vec<Registration>),
    Active {
        game: Box<Match>,
        tokens: BTreeMap<String, String>,
    },
}

/// Mediates any number of independent games. Each game sits behind its own
/// lock so mutations to one game are serialized while games run in parallel.
pub struct GameServer {
    config: ServerConfig,
    games: Mutex<BTreeMap<String, Arc<Mutex<Slot>>>>,
    transport: Arc<dyn Transport>,
    token_rng: Mutex<ChaCha8Rng>,
}

impl GameServer {
    pub fn new(config: ServerConfig, transport: Arc<dyn Transport>) -> Self {
        let seed = config.game.rng_seed;
        GameServer {
            config,
            games: Mutex::new(BTreeMap::new()),
            transport,
            token_rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ 0x70c3_70c3)),
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    fn slot(&self, game_id: &str) -> Option<Arc<Mutex<Slot>>> {
        self.games.lock().expect("games lock").get(game_id).cloned()
    }

    pub fn game_ids(&self) -> Vec<String> {
        self.games.lock().expect("games lock").keys().cloned().collect()
    }

    fn new_token(&self) -> String {
        let mut bytes = [0u8; 16];
        self.token_rng.lock().expect("rng lock").fill_bytes(&mut bytes);
        hex::encode(bytes)
    }

    fn flush(&self, game: &mut Match) {
        for (topic, msg) in game.take_outbox() {
            if let Err(e) = self.transport.publish(&topic, &msg) {
                warn!(%topic, "publish failed: {e}");
            }
        }
    }

    /// Runs `f` against an active game while holding its lock, then
    /// publishes whatever it produced.
    pub fn with_match<T>(
        &self,
        game_id: &str,
        f: impl FnOnce(&mut Match) -> Result<T, ServerError>,
    ) -> Result<T, ServerError> {
        let slot = self
            .slot(game_id)
            .ok_or_else(|| ServerError::UnknownGame(game_id.to_owned()))?;
        let mut guard = slot.lock().expect("game lock");
        match &mut *guard {
            Slot::Lobby(_) => Err(ServerError::NotReady),
            Slot::Active { game, .. } => {
                let out = f(game);
                self.flush(game);
                out
            }
        }
    }

    fn create_match(&self, game_id: &str, regs: &[Registration]) -> Result<Match, ServerError> {
        let names: Vec<String> = regs.iter().map(|r| r.name.clone()).collect();
        let state = new_game(
            game_id,
            self.config.game.clone(),
            &names,
            &self.config.class_pool.classes,
            self.config.units_per_player,
        )?;
        let mut game = Match::new(state);
        for r in regs {
            game.set_host(&r.name, &r.host)?;
        }
        if let Some(dir) = &self.config.ledger_dir {
            std::fs::create_dir_all(dir).map_err(LedgerError::from)?;
            let ledger = Ledger::open(&dir.join(format!("{game_id}.chain")), self.config.difficulty_bits)?;
            game = game.with_ledger(ledger);
        } else if self.config.decentralized {
            game = game.with_ledger(Ledger::new(self.config.difficulty_bits)?);
        }
        game.emit_all(
            Timestamp::default(),
            GameEvent::GameCreated {
                players: names.clone(),
            },
        );
        Ok(game)
    }

    pub fn register(&self, game_id: &str, player: &str, host: &str, now: Timestamp) -> Result<String, ServerError> {
        crate::protocol::Topic::new(game_id, player, Channel::Status)
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let slot = {
            let mut games = self.games.lock().expect("games lock");
            games
                .entry(game_id.to_owned())
                .or_insert_with(|| Arc::new(Mutex::new(Slot::Lobby(Vec::new()))))
                .clone()
        };
        let mut guard = slot.lock().expect("game lock");
        match &mut *guard {
            Slot::Active { game, tokens } => {
                let same_host = game.state().player(player).map(|p| p.host_address == host);
                match (same_host, tokens.get(player)) {
                    (Some(true), Some(token)) => Ok(token.clone()),
                    _ => Err(ServerError::AlreadyRegistered(player.to_owned())),
                }
            }
            Slot::Lobby(regs) => {
                if let Some(r) = regs.iter().find(|r| r.name == player) {
                    return if r.host == host {
                        Ok(r.token.clone())
                    } else {
                        Err(ServerError::AlreadyRegistered(player.to_owned()))
                    };
                }
                let token = self.new_token();
                regs.push(Registration {
                    name: player.to_owned(),
                    host: host.to_owned(),
                    token: token.clone(),
                });
                info!(game = game_id, player, "player registered");
                if regs.len() >= self.config.players_per_game {
                    let mut game = self.create_match(game_id, regs)?;
                    let tokens = regs.iter().map(|r| (r.name.clone(), r.token.clone())).collect();
                    if self.config.auto_start {
                        game.start(now)?;
                    }
                    self.flush(&mut game);
                    *guard = Slot::Active {
                        game: Box::new(game),
                        tokens,
                    };
                }
                Ok(token)
            }
        }
    }

    pub fn handle_request(&self, request: &Request, now: Timestamp) -> Response {
        match self.try_request(request, now) {
            Ok(r) => r,
            Err(e) => {
                debug!(game = request.game_id(), "request rejected: {e}");
                Response::Rejected {
                    reason: e.to_string(),
                }
            }
        }
    }

    fn try_request(&self, request: &Request, now: Timestamp) -> Result<Response, ServerError> {
        match request {
            Request::Register { game_id, player, host } => Ok(Response::Registered {
                token: self.register(game_id, player, host, now)?,
            }),
            Request::FetchRealm { game_id, player, token } => {
                let slot = self
                    .slot(game_id)
                    .ok_or_else(|| ServerError::UnknownGame(game_id.clone()))?;
                let guard = slot.lock().expect("game lock");
                match &*guard {
                    Slot::Lobby(regs) => {
                        if regs.iter().any(|r| &r.name == player && &r.token == token) {
                            Ok(Response::NotReady)
                        } else {
                            Err(ServerError::BadToken)
                        }
                    }
                    Slot::Active { game, tokens } => {
                        if tokens.get(player) != Some(token) {
                            return Err(ServerError::BadToken);
                        }
                        RealmAssignment::from_state(game.state(), player)
                            .map(Response::Realm)
                            .ok_or_else(|| ServerError::UnknownPlayer(player.clone()))
                    }
                }
            }
            Request::Start { game_id } => self.with_match(game_id, |g| {
                g.start(now)?;
                Ok(Response::Snapshot(g.snapshot()))
            }),
            Request::Pause { game_id } => self.with_match(game_id, |g| {
                g.pause(now)?;
                Ok(Response::Snapshot(g.snapshot()))
            }),
            Request::Resume { game_id } => self.with_match(game_id, |g| {
                g.resume(now)?;
                Ok(Response::Snapshot(g.snapshot()))
            }),
            Request::ClockPress { game_id, player } => self.with_match(game_id, |g| {
                g.clock_press(player, now)?;
                Ok(Response::Snapshot(g.snapshot()))
            }),
            Request::Capture(sub) => self.with_match(&sub.game_id, |g| {
                Ok(Response::Verdict(g.handle_capture(sub, now)?))
            }),
            Request::OpponentAddress { game_id, player } => self.with_match(game_id, |g| {
                let p = g
                    .state()
                    .player(player)
                    .ok_or_else(|| ServerError::UnknownPlayer(player.clone()))?;
                let ip = g
                    .state()
                    .player(&p.opponent)
                    .map(|o| o.host_address.clone())
                    .unwrap_or_default();
                Ok(Response::Address { ip })
            }),
            Request::Snapshot { game_id } => {
                self.with_match(game_id, |g| Ok(Response::Snapshot(g.snapshot())))
            }
        }
    }

    /// Handles a message published by a player (status reports and captured
    /// commands). Anything else on the wire is ignored.
    pub fn handle_publish(&self, topic: &Topic, message: &Message, now: Timestamp) -> Result<(), ServerError> {
        match message {
            Message::Status(report) => {
                if report.player_name != topic.player() {
                    return Err(ServerError::UnknownPlayer(report.player_name.clone()));
                }
                self.with_match(topic.game_id(), |g| g.handle_status_report(report, now).map(|_| ()))
            }
            Message::Command(event) => {
                if event.player != topic.player() {
                    return Err(ServerError::UnknownPlayer(event.player.clone()));
                }
                self.with_match(topic.game_id(), |g| g.handle_command(event.clone(), now))
            }
            _ => Ok(()),
        }
    }

    /// Housekeeping for every active game.
    pub fn tick_all(&self, now: Timestamp) {
        for id in self.game_ids() {
            if let Err(e) = self.with_match(&id, |g| g.tick(now)) {
                if !matches!(e, ServerError::NotReady) {
                    warn!(game = %id, "tick failed: {e}");
                }
            }
        }
    }

    pub fn snapshot(&self, game_id: &str) -> Result<GameSnapshot, ServerError> {
        self.with_match(game_id, |g| Ok(g.snapshot()))
    }
}
