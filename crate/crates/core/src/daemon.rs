//! Player daemon: hosts a player's mock units, probes their liveness,
//! reports status to the game server and exposes the player functions
//! (recon, defence and offence).
//!
//! A mock unit speaks a line protocol:
//!
//! ```text
//! ping          -> pong
//! key <guess>   -> flag <fingerprint> | denied
//! kill          -> bye            (the service then exits)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;
use tracing::{debug, info, warn};

use crate::metrics::CommandEvent;
use crate::model::{ActionKind, ActionRecord, Clock, Fingerprint, StatusCode, Timestamp};
use crate::protocol::{
    AssignedUnit, CaptureSubmission, Channel, Message, RealmAssignment, Request, Response,
    ScoreUpdate, StatusReport, Topic, TransportError, UnitReport, Verdict,
};
use crate::server::GameServer;

pub const PROBE_TIMEOUT: Duration = Duration::from_millis(250);
/// Pings sent by one liveness-flood attack.
pub const FLOOD_COUNT: usize = 32;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("{0}:{1} unreachable")]
    Unreachable(String, u16),
    #[error("{0}:{1} timed out")]
    Timeout(String, u16),
    #[error("port {0} already hosts a unit")]
    PortInUse(u16),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("server rejected the request: {0}")]
    Rejected(String),
    #[error("game is not ready yet")]
    NotReady,
    #[error("unexpected server response: {0}")]
    Unexpected(String),
    #[error("unknown attack template `{0}`")]
    UnknownTemplate(String),
    #[error("unit `{0}` is not running")]
    UnitDead(String),
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("malformed fingerprint")]
    MalformedFingerprint,
    #[error("opponent address unknown")]
    NoOpponent,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Behaviour of one mock service, independent of how it is reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockService {
    pub fingerprint: Fingerprint,
    pub vuln_key: String,
    pub running: bool,
}

impl MockService {
    pub fn new(fingerprint: Fingerprint, vuln_key: &str) -> Self {
        MockService {
            fingerprint,
            vuln_key: vuln_key.to_owned(),
            running: true,
        }
    }

    /// Answers one request line. `kill` stops the service.
    pub fn handle(&mut self, line: &str) -> String {
        let line = line.trim();
        let (verb, rest) = line.split_once(' ').unwrap_or((line, ""));
        match verb {
            "ping" => "pong".into(),
            "key" if rest.trim() == self.vuln_key => format!("flag {}", self.fingerprint),
            "key" => "denied".into(),
            "kill" => {
                self.running = false;
                "bye".into()
            }
            _ => "error unknown request".into(),
        }
    }
}

/// How daemons reach units: real sockets or a deterministic in-memory net.
pub trait Network: Send + Sync {
    /// Sends one request line and returns the single-line reply.
    fn send(&self, host: &str, port: u16, line: &str) -> Result<String, NetError>;
    /// Starts serving `service` at `host:port`.
    fn host_unit(&self, host: &str, port: u16, service: MockService) -> Result<(), NetError>;
    /// Stops the unit at `host:port`, if any.
    fn remove_unit(&self, host: &str, port: u16);
}

/// 200 iff the unit answers `ping` with `pong` within the network's timeout.
pub fn probe(net: &dyn Network, host: &str, port: u16) -> StatusCode {
    match net.send(host, port, "ping") {
        Ok(reply) if reply == "pong" => StatusCode::Up,
        _ => StatusCode::Down,
    }
}

/// A mock unit served over TCP by a background thread.
pub struct MockUnit {
    port: u16,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockUnit {
    /// Binds `host:port` (port 0 picks a free port) and starts serving.
    pub fn spawn(host: &str, port: u16, service: MockService) -> io::Result<Self> {
        let listener = TcpListener::bind((host, port))?;
        let port = listener.local_addr()?.port();
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let service = Arc::new(Mutex::new(service));
        let flag = stop.clone();
        let handle = thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let service = service.clone();
                        let flag = flag.clone();
                        thread::spawn(move || serve_connection(stream, &service, &flag));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(2));
                    }
                    Err(e) => {
                        warn!("mock unit accept failed: {e}");
                        break;
                    }
                }
            }
        });
        Ok(MockUnit {
            port,
            stop,
            handle: Some(handle),
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn is_running(&self) -> bool {
        !self.stop.load(Ordering::SeqCst)
    }

    /// Stops accepting and waits for the listener to close.
    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockUnit {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_connection(stream: TcpStream, service: &Mutex<MockService>, stop: &AtomicBool) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let Ok(mut writer) = stream.try_clone() else {
        return;
    };
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        let reply = {
            let mut svc = service.lock().expect("service lock");
            let reply = svc.handle(&line);
            if !svc.running {
                stop.store(true, Ordering::SeqCst);
            }
            reply
        };
        if writeln!(writer, "{reply}").is_err() || stop.load(Ordering::SeqCst) {
            break;
        }
    }
}

/// A listener whose connections are accepted by the kernel but never
/// answered. Probes against it must time out.
pub struct HungUnit {
    _listener: TcpListener,
    port: u16,
}

impl HungUnit {
    pub fn spawn(host: &str) -> io::Result<Self> {
        let listener = TcpListener::bind((host, 0))?;
        let port = listener.local_addr()?.port();
        Ok(HungUnit {
            _listener: listener,
            port,
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }
}

/// Real sockets. Units are bound on the daemon's host address.
pub struct TcpNetwork {
    timeout: Duration,
    units: Mutex<BTreeMap<(String, u16), MockUnit>>,
}

impl TcpNetwork {
    pub fn new(timeout: Duration) -> Self {
        TcpNetwork {
            timeout,
            units: Mutex::new(BTreeMap::new()),
        }
    }
}

impl Default for TcpNetwork {
    fn default() -> Self {
        Self::new(PROBE_TIMEOUT)
    }
}

impl Network for TcpNetwork {
    fn send(&self, host: &str, port: u16, line: &str) -> Result<String, NetError> {
        let unreachable = || NetError::Unreachable(host.to_owned(), port);
        let addr = (host, port)
            .to_socket_addrs()?
            .next()
            .ok_or_else(unreachable)?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(|_| unreachable())?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        writeln!(stream, "{line}")?;
        let mut reply = String::new();
        match BufReader::new(stream).read_line(&mut reply) {
            Ok(0) => Err(unreachable()),
            Ok(_) => Ok(reply.trim_end().to_owned()),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Err(NetError::Timeout(host.to_owned(), port))
            }
            Err(_) => Err(unreachable()),
        }
    }

    fn host_unit(&self, host: &str, port: u16, service: MockService) -> Result<(), NetError> {
        let mut units = self.units.lock().expect("units lock");
        let key = (host.to_owned(), port);
        if units.get(&key).is_some_and(MockUnit::is_running) {
            return Err(NetError::PortInUse(port));
        }
        units.remove(&key);
        let unit = MockUnit::spawn(host, port, service)?;
        units.insert(key, unit);
        Ok(())
    }

    fn remove_unit(&self, host: &str, port: u16) {
        let removed = self.units.lock().expect("units lock").remove(&(host.to_owned(), port));
        drop(removed);
    }
}

/// Deterministic in-memory network. A stopped service is unreachable.
#[derive(Default)]
pub struct SimNetwork {
    services: Mutex<BTreeMap<(String, u16), MockService>>,
}

impl SimNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_running(&self, host: &str, port: u16) -> bool {
        self.services
            .lock()
            .expect("sim lock")
            .get(&(host.to_owned(), port))
            .is_some_and(|s| s.running)
    }

    /// Ports with a running service on `host`.
    pub fn open_ports(&self, host: &str) -> Vec<u16> {
        self.services
            .lock()
            .expect("sim lock")
            .iter()
            .filter(|((h, _), s)| h == host && s.running)
            .map(|((_, p), _)| *p)
            .collect()
    }
}

impl Network for SimNetwork {
    fn send(&self, host: &str, port: u16, line: &str) -> Result<String, NetError> {
        let mut services = self.services.lock().expect("sim lock");
        match services.get_mut(&(host.to_owned(), port)) {
            Some(s) if s.running => Ok(s.handle(line)),
            _ => Err(NetError::Unreachable(host.to_owned(), port)),
        }
    }

    fn host_unit(&self, host: &str, port: u16, service: MockService) -> Result<(), NetError> {
        let mut services = self.services.lock().expect("sim lock");
        let key = (host.to_owned(), port);
        if services.get(&key).is_some_and(|s| s.running) {
            return Err(NetError::PortInUse(port));
        }
        services.insert(key, service);
        Ok(())
    }

    fn remove_unit(&self, host: &str, port: u16) {
        self.services
            .lock()
            .expect("sim lock")
            .remove(&(host.to_owned(), port));
    }
}

/// The daemon's channel to the game server.
pub trait ServerLink: Send + Sync {
    fn request(&self, request: &Request) -> Result<Response, TransportError>;
    fn publish(&self, topic: &Topic, message: &Message) -> Result<(), TransportError>;
}

/// Direct calls into an in-process server, stamped with a shared clock.
/// Publishes are also forwarded to the server's transport so observers see
/// the player-side traffic.
pub struct LocalLink {
    server: Arc<GameServer>,
    clock: Arc<dyn Clock>,
}

impl LocalLink {
    pub fn new(server: Arc<GameServer>, clock: Arc<dyn Clock>) -> Self {
        LocalLink { server, clock }
    }
}

impl ServerLink for LocalLink {
    fn request(&self, request: &Request) -> Result<Response, TransportError> {
        Ok(self.server.handle_request(request, self.clock.now()))
    }

    fn publish(&self, topic: &Topic, message: &Message) -> Result<(), TransportError> {
        self.server.transport().publish(topic, message)?;
        self.server
            .handle_publish(topic, message, self.clock.now())
            .map_err(|e| TransportError::Protocol(e.to_string()))
    }
}

/// Generic attacks a player can launch at a unit port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackTemplate {
    /// Hammers the liveness endpoint.
    LivenessFlood,
    /// Asks the service to exit.
    KillRequest,
    /// Tries a key against the service's vulnerability.
    KeyGuess(String),
}

impl AttackTemplate {
    pub const NAMES: [&'static str; 3] = ["liveness-flood", "kill-request", "key-guess"];

    pub fn parse(name: &str, arg: Option<&str>) -> Result<Self, DaemonError> {
        match (name, arg) {
            ("liveness-flood", _) => Ok(AttackTemplate::LivenessFlood),
            ("kill-request", _) => Ok(AttackTemplate::KillRequest),
            ("key-guess", Some(key)) => Ok(AttackTemplate::KeyGuess(key.to_owned())),
            _ => Err(DaemonError::UnknownTemplate(name.to_owned())),
        }
    }
}

/// One of this daemon's units as currently hosted.
#[derive(Debug, Clone, PartialEq)]
pub struct HostedUnit {
    pub assigned: AssignedUnit,
    pub flag_file: Option<PathBuf>,
}

pub struct PlayerDaemon {
    game_id: String,
    name: String,
    host: String,
    token: String,
    link: Arc<dyn ServerLink>,
    net: Arc<dyn Network>,
    clock: Arc<dyn Clock>,
    flag_dir: Option<PathBuf>,
    assignment: Option<RealmAssignment>,
    units: Vec<HostedUnit>,
    opponent_ip: Option<String>,
    sessions: u64,
    actions: Vec<ActionRecord>,
    last_report: Option<Timestamp>,
    health: BTreeMap<String, f64>,
}

impl PlayerDaemon {
    /// Registers with the server. Units are hosted once the realm exists
    /// (see [`PlayerDaemon::sync_realm`]).
    pub fn connect(
        game_id: &str,
        name: &str,
        host: &str,
        link: Arc<dyn ServerLink>,
        net: Arc<dyn Network>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, DaemonError> {
        let response = link.request(&Request::Register {
            game_id: game_id.to_owned(),
            player: name.to_owned(),
            host: host.to_owned(),
        })?;
        let token = match response {
            Response::Registered { token } => token,
            Response::Rejected { reason } => return Err(DaemonError::Rejected(reason)),
            other => return Err(DaemonError::Unexpected(format!("{other:?}"))),
        };
        Ok(PlayerDaemon {
            game_id: game_id.to_owned(),
            name: name.to_owned(),
            host: host.to_owned(),
            token,
            link,
            net,
            clock,
            flag_dir: None,
            assignment: None,
            units: Vec::new(),
            opponent_ip: None,
            sessions: 0,
            actions: Vec::new(),
            last_report: None,
            health: BTreeMap::new(),
        })
    }

    /// Write each unit's fingerprint to `<dir>/<unit_id>/flag`.
    pub fn with_flag_dir(mut self, dir: &Path) -> Self {
        self.flag_dir = Some(dir.to_owned());
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn game_id(&self) -> &str {
        &self.game_id
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn token(&self) -> &str {
        &self.token
    }

    pub fn units(&self) -> &[HostedUnit] {
        &self.units
    }

    pub fn assignment(&self) -> Option<&RealmAssignment> {
        self.assignment.as_ref()
    }

    pub fn actions(&self) -> &[ActionRecord] {
        &self.actions
    }

    pub fn network(&self) -> &Arc<dyn Network> {
        &self.net
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn log(&mut self, kind: ActionKind, payload: String) {
        self.actions.push(ActionRecord {
            actor: self.name.clone(),
            kind,
            payload,
            timestamp: self.clock.now(),
        });
    }

    fn topic(&self) -> Topic {
        Topic::new(&self.game_id, &self.name, Channel::Status).expect("registered names are valid")
    }

    /// Fetches the realm and (re)hosts any unit that is new or changed.
    /// Returns false while the game is still in its lobby.
    pub fn sync_realm(&mut self) -> Result<bool, DaemonError> {
        let response = self.link.request(&Request::FetchRealm {
            game_id: self.game_id.clone(),
            player: self.name.clone(),
            token: self.token.clone(),
        })?;
        let realm = match response {
            Response::Realm(r) => r,
            Response::NotReady => return Ok(false),
            Response::Rejected { reason } => return Err(DaemonError::Rejected(reason)),
            other => return Err(DaemonError::Unexpected(format!("{other:?}"))),
        };
        for (id, h) in realm.units.iter().map(|u| (u.unit_id.clone(), u.health)) {
            self.health.insert(id, h);
        }
        let unchanged = self.assignment.as_ref().is_some_and(|a| {
            a.units.len() == realm.units.len()
                && a.units.iter().zip(&realm.units).all(|(x, y)| x.same_service(y))
        });
        if unchanged {
            return Ok(true);
        }
        let wanted: BTreeMap<&str, &AssignedUnit> =
            realm.units.iter().map(|u| (u.unit_id.as_str(), u)).collect();
        let mut kept = Vec::new();
        for unit in std::mem::take(&mut self.units) {
            if wanted
                .get(unit.assigned.unit_id.as_str())
                .is_some_and(|w| w.same_service(&unit.assigned))
            {
                kept.push(unit);
            } else {
                debug!(unit = %unit.assigned.unit_id, "retiring unit");
                self.net.remove_unit(&self.host, unit.assigned.port);
            }
        }
        for assigned in &realm.units {
            if kept.iter().any(|k| k.assigned.same_service(assigned)) {
                continue;
            }
            let fingerprint = Fingerprint::parse(&assigned.fingerprint)
                .map_err(|_| DaemonError::MalformedFingerprint)?;
            self.net.host_unit(
                &self.host,
                assigned.port,
                MockService::new(fingerprint, &assigned.vuln_key),
            )?;
            let flag_file = match &self.flag_dir {
                Some(dir) => {
                    let unit_dir = dir.join(&assigned.unit_id);
                    fs::create_dir_all(&unit_dir)?;
                    let path = unit_dir.join("flag");
                    fs::write(&path, &assigned.fingerprint)?;
                    Some(path)
                }
                None => None,
            };
            info!(unit = %assigned.unit_id, port = assigned.port, "hosting unit");
            kept.push(HostedUnit {
                assigned: assigned.clone(),
                flag_file,
            });
        }
        kept.sort_by_key(|u| {
            realm
                .units
                .iter()
                .position(|a| a.unit_id == u.assigned.unit_id)
                .unwrap_or(usize::MAX)
        });
        self.units = kept;
        self.assignment = Some(realm);
        Ok(true)
    }

    pub fn report_interval(&self) -> Option<Duration> {
        self.assignment
            .as_ref()
            .map(|a| Duration::from_millis(a.report_interval_ms))
    }

    /// Probes every unit concurrently and assembles a report stamped with
    /// `now`.
    pub fn build_status_report(&self, now: Timestamp) -> StatusReport {
        let codes: Vec<StatusCode> = thread::scope(|s| {
            let handles: Vec<_> = self
                .units
                .iter()
                .map(|u| {
                    let net = &self.net;
                    let host = &self.host;
                    s.spawn(move || probe(net.as_ref(), host, u.assigned.port))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or(StatusCode::Down))
                .collect()
        });
        StatusReport {
            timestamp: now,
            ip: self.host.clone(),
            player_name: self.name.clone(),
            cmds: BTreeMap::new(),
            units: self
                .units
                .iter()
                .zip(codes)
                .map(|(u, code)| UnitReport {
                    code,
                    id: Fingerprint::parse(&u.assigned.fingerprint)
                        .map(|f| f.identity_hash())
                        .unwrap_or_default(),
                    health: self.health.get(&u.assigned.unit_id).copied().unwrap_or(0.0),
                    port: u.assigned.port,
                })
                .collect(),
        }
    }

    /// Probes and publishes one report. A failed publish is retried on the
    /// next interval.
    pub fn report(&mut self) -> Result<StatusReport, DaemonError> {
        let mut now = self.clock.now();
        if let Some(last) = self.last_report {
            now = now.max(Timestamp(last.0 + 1));
        }
        let report = self.build_status_report(now);
        self.link
            .publish(&self.topic(), &Message::Status(report.clone()))?;
        self.last_report = Some(now);
        Ok(report)
    }

    /// Publishes a captured command line.
    pub fn submit_command(&mut self, text: &str, valid: bool) -> Result<(), DaemonError> {
        let event = CommandEvent::submit(&self.name, self.clock.now(), text, valid);
        self.link.publish(&self.topic(), &Message::Command(event))?;
        Ok(())
    }

    /// Publishes one keystroke.
    pub fn keystroke(&mut self, key: &str) -> Result<(), DaemonError> {
        let event = CommandEvent::keystroke(&self.name, self.clock.now(), key);
        self.link.publish(&self.topic(), &Message::Command(event))?;
        Ok(())
    }

    /// Tracks the server's view of this player's unit health.
    pub fn observe_score(&mut self, score: &ScoreUpdate) {
        if score.player != self.name {
            return;
        }
        for u in &score.units {
            self.health.insert(u.unit_id.clone(), u.health);
        }
    }

    pub fn unit_health(&self, unit_id: &str) -> Option<f64> {
        self.health.get(unit_id).copied()
    }

    pub fn get_opponent_ip(&mut self) -> Result<String, DaemonError> {
        let response = self.link.request(&Request::OpponentAddress {
            game_id: self.game_id.clone(),
            player: self.name.clone(),
        })?;
        let ip = match response {
            Response::Address { ip } => ip,
            Response::Rejected { reason } => return Err(DaemonError::Rejected(reason)),
            other => return Err(DaemonError::Unexpected(format!("{other:?}"))),
        };
        self.log(ActionKind::GetOpponentIp, ip.clone());
        self.opponent_ip = Some(ip.clone());
        Ok(ip)
    }

    pub fn opponent(&self) -> Option<&str> {
        self.assignment.as_ref().map(|a| a.opponent.as_str())
    }

    /// Fingerprints of this player's own units.
    pub fn get_flags(&mut self) -> Vec<String> {
        let flags: Vec<String> = self.units.iter().map(|u| u.assigned.fingerprint.clone()).collect();
        self.log(ActionKind::GetFlags, flags.len().to_string());
        flags
    }

    /// Local stand-in for an SSH session into one of the player's units.
    pub fn enter_unit(&mut self, unit_id: &str) -> Result<String, DaemonError> {
        let unit = self
            .units
            .iter()
            .find(|u| u.assigned.unit_id == unit_id)
            .ok_or_else(|| DaemonError::UnknownUnit(unit_id.to_owned()))?;
        if probe(self.net.as_ref(), &self.host, unit.assigned.port) == StatusCode::Down {
            return Err(DaemonError::UnitDead(unit_id.to_owned()));
        }
        self.sessions += 1;
        let token = format!("session-{}-{}-{}", self.name, unit_id, self.sessions);
        self.log(ActionKind::EnterUnit, unit_id.to_owned());
        Ok(token)
    }

    /// Brings a stopped unit back up. Lost health is not restored.
    pub fn restart_unit(&mut self, unit_id: &str) -> Result<(), DaemonError> {
        let unit = self
            .units
            .iter()
            .find(|u| u.assigned.unit_id == unit_id)
            .ok_or_else(|| DaemonError::UnknownUnit(unit_id.to_owned()))?
            .clone();
        let fingerprint = Fingerprint::parse(&unit.assigned.fingerprint)
            .map_err(|_| DaemonError::MalformedFingerprint)?;
        self.net.remove_unit(&self.host, unit.assigned.port);
        self.net.host_unit(
            &self.host,
            unit.assigned.port,
            MockService::new(fingerprint, &unit.assigned.vuln_key),
        )?;
        Ok(())
    }

    /// Submits an opponent's fingerprint for proof of exploitation.
    pub fn capture_unit(&mut self, claimed: &str) -> Result<Verdict, DaemonError> {
        Fingerprint::parse(claimed).map_err(|_| DaemonError::MalformedFingerprint)?;
        let response = self.link.request(&Request::Capture(CaptureSubmission {
            game_id: self.game_id.clone(),
            attacker: self.name.clone(),
            claimed_fingerprint: claimed.to_owned(),
            timestamp: self.clock.now(),
        }))?;
        let verdict = match response {
            Response::Verdict(v) => v,
            Response::Rejected { reason } => return Err(DaemonError::Rejected(reason)),
            other => return Err(DaemonError::Unexpected(format!("{other:?}"))),
        };
        self.log(ActionKind::CaptureUnit, format!("{verdict:?}"));
        Ok(verdict)
    }

    /// Runs `template` against a port on the opponent's host and returns the
    /// service's answer.
    pub fn attack_unit(
        &mut self,
        target_port: u16,
        template: &str,
        arg: Option<&str>,
    ) -> Result<String, DaemonError> {
        let template = AttackTemplate::parse(template, arg)?;
        let host = match self.opponent_ip.clone() {
            Some(ip) => ip,
            None => self.get_opponent_ip()?,
        };
        if host.is_empty() {
            return Err(DaemonError::NoOpponent);
        }
        let outcome = match &template {
            AttackTemplate::LivenessFlood => {
                let answered = (0..FLOOD_COUNT)
                    .filter(|_| self.net.send(&host, target_port, "ping").is_ok())
                    .count();
                format!("flood {answered}/{FLOOD_COUNT}")
            }
            AttackTemplate::KillRequest => self
                .net
                .send(&host, target_port, "kill")
                .unwrap_or_else(|e| format!("error {e}")),
            AttackTemplate::KeyGuess(key) => self
                .net
                .send(&host, target_port, &format!("key {key}"))
                .unwrap_or_else(|e| format!("error {e}")),
        };
        self.log(ActionKind::AttackUnit, format!("{target_port} {template:?}"));
        Ok(outcome)
    }

    /// Ports answering `ping` on `host` among `candidates`.
    pub fn scan(&self, host: &str, candidates: &[u16]) -> Vec<u16> {
        candidates
            .iter()
            .copied()
            .filter(|&p| probe(self.net.as_ref(), host, p) == StatusCode::Up)
            .collect()
    }
}

/// Extracts the fingerprint from a `flag <hex>` reply.
pub fn flag_from_reply(reply: &str) -> Option<&str> {
    reply
        .strip_prefix("flag ")
        .map(str::trim)
        .filter(|f| Fingerprint::parse(f).is_ok())
}
