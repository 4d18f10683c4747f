//! Fully simulated, seeded matches. Everything runs in one thread against a
//! virtual clock, the in-process bus and the in-memory unit network, so the
//! transcript is a pure function of the configuration and seed.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tracing::{debug, warn};

use crate::bot::{Bot, BotConfig, BotError, BotStep, Brain};
use crate::daemon::{flag_from_reply, DaemonError, LocalLink, PlayerDaemon, SimNetwork};
use crate::ledger::LedgerBlock;
use crate::metrics::CommandGrammar;
use crate::model::{ClassPool, Clock, GameConfig, GamePhase, GameState, ManualClock, Outcome, Timestamp};
use crate::protocol::{InProcessBus, Message, Request, Response, TopicFilter, Transport};
use crate::server::{GameServer, ServerConfig, ServerError};
use crate::transcript::{Footer, Header, PlayerEntry, Record};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Daemon(#[from] DaemonError),
    #[error(transparent)]
    Bot(#[from] BotError),
}

/// Something a scripted player does at a given second of game time.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptAction {
    /// Types and submits a command line.
    Command(String),
    /// Stops one of the player's own units.
    KillOwnUnit(usize),
    RestartOwnUnit(usize),
    /// Extracts the flag from the opponent's unit with its real key and
    /// submits it.
    Exploit(usize),
    /// Sends a kill request to the opponent's unit.
    KillOpponentUnit(usize),
    /// Submits an arbitrary claimed fingerprint.
    Capture(String),
    ClockPress,
    StopReporting,
    ResumeReporting,
    Pause,
    Resume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptStep {
    pub at_secs: u64,
    pub action: ScriptAction,
}

impl ScriptStep {
    pub fn new(at_secs: u64, action: ScriptAction) -> Self {
        ScriptStep { at_secs, action }
    }
}

#[derive(Clone)]
pub enum Role {
    /// Hosts and reports its units, nothing else.
    Idle,
    /// Registers but never reports.
    Silent,
    Bot { brain: Brain, config: BotConfig },
    Scripted(Vec<ScriptStep>),
}

impl Role {
    pub fn name(&self) -> &'static str {
        match self {
            Role::Idle => "idle",
            Role::Silent => "silent",
            Role::Bot { .. } => "bot",
            Role::Scripted(_) => "scripted",
        }
    }
}

#[derive(Clone)]
pub struct PlayerSpec {
    pub name: String,
    pub role: Role,
}

impl PlayerSpec {
    pub fn new(name: &str, role: Role) -> Self {
        PlayerSpec {
            name: name.to_owned(),
            role,
        }
    }
}

#[derive(Clone)]
pub struct SimConfig {
    pub game_id: String,
    pub game: GameConfig,
    pub class_pool: ClassPool,
    pub units_per_player: usize,
    pub players: Vec<PlayerSpec>,
    /// Hard stop in game time.
    pub max_duration: Duration,
    /// Keep an in-memory ledger at this difficulty.
    pub ledger_difficulty: Option<u8>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            game_id: "sim".into(),
            game: GameConfig::default(),
            class_pool: ClassPool::trial(),
            units_per_player: 3,
            players: Vec::new(),
            max_duration: Duration::from_secs(3600),
            ledger_difficulty: None,
        }
    }
}

pub struct SimOutcome {
    pub records: Vec<Record>,
    pub final_state: GameState,
    pub outcome: Option<Outcome>,
    pub ledger: Option<Vec<LedgerBlock>>,
    pub bot_steps: BTreeMap<String, Vec<BotStep>>,
    pub elapsed: Duration,
}

impl SimOutcome {
    pub fn transcript_bytes(&self) -> Vec<u8> {
        crate::transcript::to_bytes(&self.records).expect("records always encode")
    }
}

struct Participant {
    spec: PlayerSpec,
    daemon: PlayerDaemon,
    bot: Option<Bot>,
    reporting: bool,
}

const START: Timestamp = Timestamp(0);

/// Runs one match to completion (or `max_duration`).
pub fn simulate(config: &SimConfig, seed: u64) -> Result<SimOutcome, SimError> {
    if config.players.len() < 2 {
        return Err(SimError::Config(format!(
            "need at least 2 players, got {}",
            config.players.len()
        )));
    }
    let mut game = config.game.clone();
    game.rng_seed = seed;
    game.validate().map_err(|e| SimError::Config(e.to_string()))?;
    let step = game.report_interval;
    if step.is_zero() {
        return Err(SimError::Config("report interval must be positive".into()));
    }

    let clock = ManualClock::new(START);
    let bus = InProcessBus::new();
    let observer = bus.subscribe(&TopicFilter::parse("#").expect("static filter")).expect("bus");
    let server = Arc::new(GameServer::new(
        ServerConfig {
            game: game.clone(),
            class_pool: config.class_pool.clone(),
            units_per_player: config.units_per_player,
            players_per_game: config.players.len(),
            auto_start: false,
            ledger_dir: None,
            decentralized: config.ledger_difficulty.is_some(),
            difficulty_bits: config.ledger_difficulty.unwrap_or(0),
        },
        Arc::new(bus.clone()),
    ));
    let link = Arc::new(LocalLink::new(server.clone(), Arc::new(clock.clone())));
    let net = Arc::new(SimNetwork::new());

    let mut records = vec![Record::Header(Header {
        game_id: config.game_id.clone(),
        seed,
        started_at: START,
        players: config
            .players
            .iter()
            .map(|p| PlayerEntry {
                name: p.name.clone(),
                role: p.role.name().to_owned(),
            })
            .collect(),
        config: game.clone(),
    })];
    let drain = |records: &mut Vec<Record>, parts: &mut [Participant]| {
        for (topic, message) in observer.drain() {
            if let Message::Score(score) = &message {
                for p in parts.iter_mut() {
                    p.daemon.observe_score(score);
                }
            }
            records.push(Record::Message {
                at: clock.now(),
                topic,
                message,
            });
        }
    };

    let mut parts = Vec::new();
    for (i, spec) in config.players.iter().enumerate() {
        let host = format!("10.0.0.{}", i + 1);
        let daemon = PlayerDaemon::connect(
            &config.game_id,
            &spec.name,
            &host,
            link.clone(),
            net.clone(),
            Arc::new(clock.clone()),
        )?;
        let bot = match &spec.role {
            Role::Bot { brain, config: bc } => {
                let mut bc = bc.clone();
                bc.seed = bc.seed ^ seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                Some(Bot::new(brain.clone(), bc)?)
            }
            _ => None,
        };
        parts.push(Participant {
            reporting: !matches!(spec.role, Role::Silent),
            spec: spec.clone(),
            daemon,
            bot,
        });
    }
    for p in &mut parts {
        if !p.daemon.sync_realm()? {
            return Err(SimError::Config("game was not created after registration".into()));
        }
    }
    match link_request(&server, &clock, &Request::Start { game_id: config.game_id.clone() }) {
        Response::Rejected { reason } => return Err(SimError::Config(reason)),
        _ => drain(&mut records, &mut parts),
    }

    let grammar = CommandGrammar::default();
    let mut bot_steps: BTreeMap<String, Vec<BotStep>> = BTreeMap::new();
    let reshuffles = game.reshuffle_interval.is_some();
    loop {
        let now = clock.advance(step);
        let second = now.since(START).as_secs();
        for p in parts.iter_mut() {
            let due: Vec<ScriptAction> = match &p.spec.role {
                Role::Scripted(script) => script
                    .iter()
                    .filter(|s| s.at_secs == second)
                    .map(|s| s.action.clone())
                    .collect(),
                _ => Vec::new(),
            };
            for action in due {
                if let Err(e) = run_script(&server, &clock, &config.game_id, p, &grammar, action) {
                    debug!(player = %p.spec.name, "script action failed: {e}");
                }
            }
            if let Some(bot) = p.bot.as_mut() {
                match bot.step(&mut p.daemon) {
                    Ok(s) => bot_steps.entry(p.spec.name.clone()).or_default().push(s),
                    Err(e) => debug!(player = %p.spec.name, "bot step failed: {e}"),
                }
            }
            if p.reporting {
                if let Err(e) = p.daemon.report() {
                    warn!(player = %p.spec.name, "report failed: {e}");
                }
            }
        }
        server.tick_all(now);
        drain(&mut records, &mut parts);
        let state = server.with_match(&config.game_id, |m| Ok(m.state().clone()))?;
        if state.phase == GamePhase::Finished || now.since(START) >= config.max_duration {
            break;
        }
        if reshuffles {
            for p in &mut parts {
                p.daemon.sync_realm()?;
            }
        }
    }

    let (final_state, ledger) = server.with_match(&config.game_id, |m| {
        Ok((m.state().clone(), m.ledger().map(|l| l.blocks().to_vec())))
    })?;
    let outcome = final_state.outcome.clone();
    for p in &mut parts {
        if let Some(bot) = p.bot.as_mut() {
            let won = matches!(&outcome, Some(Outcome::Winner(w)) if *w == p.spec.name);
            bot.finish(won)?;
        }
    }
    let elapsed = clock.now().since(START);
    records.push(Record::Footer(Footer {
        outcome: outcome.clone(),
        ended_at: clock.now(),
        ticks: final_state.tick,
    }));
    Ok(SimOutcome {
        records,
        final_state,
        outcome,
        ledger,
        bot_steps,
        elapsed,
    })
}

fn link_request(server: &GameServer, clock: &ManualClock, request: &Request) -> Response {
    server.handle_request(request, clock.now())
}

fn run_script(
    server: &GameServer,
    clock: &ManualClock,
    game_id: &str,
    p: &mut Participant,
    grammar: &CommandGrammar,
    action: ScriptAction,
) -> Result<(), SimError> {
    let opponent_unit = |i: usize| -> Result<(u16, String), SimError> {
        server
            .with_match(game_id, |m| {
                let state = m.state();
                let me = state.player(p.daemon.name()).expect("registered");
                let target = state.player(&me.opponent).expect("opponent exists");
                let unit = target
                    .realm
                    .units
                    .get(i)
                    .ok_or_else(|| ServerError::UnknownUnit(i.to_string()))?;
                let key = state
                    .class(&unit.class_id)
                    .map(|c| c.vuln_key.clone())
                    .unwrap_or_default();
                Ok((unit.port, key))
            })
            .map_err(SimError::from)
    };
    let own_unit = |i: usize| -> Result<String, SimError> {
        p.daemon
            .units()
            .get(i)
            .map(|u| u.assigned.unit_id.clone())
            .ok_or_else(|| SimError::Config(format!("no own unit {i}")))
    };
    match action {
        ScriptAction::Command(line) => {
            for c in line.chars() {
                p.daemon.keystroke(&c.to_string())?;
            }
            let valid = grammar.is_valid(&line);
            p.daemon.submit_command(&line, valid)?;
        }
        ScriptAction::KillOwnUnit(i) => {
            let port = p.daemon.units().get(i).map(|u| u.assigned.port);
            let host = p.daemon.host().to_owned();
            if let Some(port) = port {
                p.daemon.network().send(&host, port, "kill").ok();
            }
        }
        ScriptAction::RestartOwnUnit(i) => {
            let id = own_unit(i)?;
            p.daemon.restart_unit(&id)?;
        }
        ScriptAction::Exploit(i) => {
            let (port, key) = opponent_unit(i)?;
            let reply = p.daemon.attack_unit(port, "key-guess", Some(&key))?;
            if let Some(flag) = flag_from_reply(&reply).map(str::to_owned) {
                p.daemon.capture_unit(&flag)?;
            }
        }
        ScriptAction::KillOpponentUnit(i) => {
            let (port, _) = opponent_unit(i)?;
            p.daemon.attack_unit(port, "kill-request", None)?;
        }
        ScriptAction::Capture(claimed) => {
            p.daemon.capture_unit(&claimed)?;
        }
        ScriptAction::ClockPress => {
            let r = server.handle_request(
                &Request::ClockPress {
                    game_id: game_id.to_owned(),
                    player: p.daemon.name().to_owned(),
                },
                clock.now(),
            );
            if let Response::Rejected { reason } = r {
                return Err(DaemonError::Rejected(reason).into());
            }
        }
        ScriptAction::StopReporting => p.reporting = false,
        ScriptAction::ResumeReporting => p.reporting = true,
        ScriptAction::Pause | ScriptAction::Resume => {
            let game_id = game_id.to_owned();
            let request = if action == ScriptAction::Pause {
                Request::Pause { game_id }
            } else {
                Request::Resume { game_id }
            };
            if let Response::Rejected { reason } = server.handle_request(&request, clock.now()) {
                return Err(DaemonError::Rejected(reason).into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GameMode;

    fn two(a: Role, b: Role) -> SimConfig {
        SimConfig {
            players: vec![PlayerSpec::new("alice", a), PlayerSpec::new("bob", b)],
            ..SimConfig::default()
        }
    }

    #[test]
    fn silent_daemon_loses_objective() {
        let out = simulate(&two(Role::Idle, Role::Silent), 1).unwrap();
        assert_eq!(out.outcome, Some(Outcome::Winner("alice".into())));
        assert!(out.elapsed <= Duration::from_secs(100), "{:?}", out.elapsed);
    }

    #[test]
    fn time_mode_no_attacks_draws() {
        let mut c = two(Role::Idle, Role::Idle);
        c.game.mode = GameMode::Time;
        c.game.time_limit = Duration::from_secs(30);
        let out = simulate(&c, 2).unwrap();
        assert_eq!(out.outcome, Some(Outcome::Draw));
        assert_eq!(out.elapsed, Duration::from_secs(30));
    }

    #[test]
    fn same_seed_same_transcript() {
        let mut c = two(
            Role::Scripted(vec![
                ScriptStep::new(2, ScriptAction::Command("nmap -Pn 10.0.0.2".into())),
                ScriptStep::new(3, ScriptAction::Exploit(0)),
            ]),
            Role::Idle,
        );
        c.game.mode = GameMode::Time;
        c.game.time_limit = Duration::from_secs(10);
        let a = simulate(&c, 5).unwrap().transcript_bytes();
        let b = simulate(&c, 5).unwrap().transcript_bytes();
        assert_eq!(a, b);
        let other = simulate(&c, 6).unwrap().transcript_bytes();
        assert_ne!(a, other);
    }

    #[test]
    fn bot_beats_idle_victim_by_capture() {
        let c = two(
            Role::Bot {
                brain: Brain::default_trained(4).unwrap(),
                config: BotConfig::default(),
            },
            Role::Idle,
        );
        let out = simulate(&c, 7).unwrap();
        assert_eq!(out.outcome, Some(Outcome::Winner("alice".into())));
    }
}
