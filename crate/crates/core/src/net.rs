//! Network front end of the game server, and the matching client.
//!
//! One TCP port carries three kinds of traffic, told apart by the first
//! bytes a peer sends:
//!
//! * length-prefixed protocol frames from player daemons and bots,
//! * `GET /ws/game/{id}` websocket upgrades for the scoreboard,
//! * plain `GET` requests for the scoreboard's static files.
//!
//! # Scoreboard bridge
//!
//! Every websocket text message is one JSON object. On connect the server
//! sends `{"snapshot": GameSnapshot}` (or `{"unknown_game": {"game_id"}}`
//! and closes), then streams `{"score": ..}`, `{"event": ..}`,
//! `{"opponent": ..}` and periodic `{"metrics": [MetricsSnapshot]}`
//! messages. Clients send `{"id": n, "op": {"start": {}}}`, `"pause"`,
//! `"resume"` or `{"clock_press": {"player": ..}}`; the reply is
//! `{"ack": {"id", "snapshot"}}` or `{"rejected": {"id", "reason"}}`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};
use tungstenite::Message as WsMessage;

use crate::daemon::ServerLink;
use crate::metrics::MetricsSnapshot;
use crate::model::{Clock, Timestamp};
use crate::protocol::{
    read_frame, write_frame, Envelope, GameSnapshot, InProcessBus, Message, Request, Response,
    Subscription, Topic, TopicFilter, Transport, TransportError,
};
use crate::server::GameServer;

/// How often the server runs housekeeping for every game.
pub const TICK_PERIOD: Duration = Duration::from_millis(100);
/// How long a client waits for a response.
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(5);
const WS_POLL: Duration = Duration::from_millis(20);
const METRICS_PERIOD: Duration = Duration::from_secs(1);

const INDEX_HTML: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>cyberduel scoreboard</title></head>
<body>
<h1>cyberduel</h1>
<p>No scoreboard assets are installed. Start <code>gamed</code> with <code>--assets DIR</code>
to serve the scoreboard UI, or connect a websocket client to <code>/ws/game/&lt;id&gt;</code>.</p>
</body></html>
"#;

/// Operator actions accepted over the websocket bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeOp {
    Start {},
    Pause {},
    Resume {},
    ClockPress { player: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeCommand {
    pub id: u64,
    pub op: BridgeOp,
}

/// Everything the bridge sends to a scoreboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMessage {
    Snapshot(GameSnapshot),
    UnknownGame { game_id: String },
    Score(crate::protocol::ScoreUpdate),
    Event(crate::protocol::EventRecord),
    Opponent(crate::protocol::OpponentInfo),
    Metrics(Vec<MetricsSnapshot>),
    Ack { id: u64, snapshot: GameSnapshot },
    Rejected { id: u64, reason: String },
}

impl BridgeMessage {
    fn from_bus(message: Message) -> Option<Self> {
        match message {
            Message::Score(s) => Some(BridgeMessage::Score(s)),
            Message::Event(e) => Some(BridgeMessage::Event(e)),
            Message::Opponent(o) => Some(BridgeMessage::Opponent(o)),
            _ => None,
        }
    }
}

/// A running game-server endpoint.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

#[derive(Clone)]
struct Shared {
    server: Arc<GameServer>,
    bus: InProcessBus,
    clock: Arc<dyn Clock>,
    assets: Option<PathBuf>,
    stop: Arc<AtomicBool>,
}

/// Binds `addr` and serves the protocol, the bridge and static files.
/// `bus` must be the transport the server publishes on.
pub fn serve(
    addr: &str,
    server: Arc<GameServer>,
    bus: InProcessBus,
    clock: Arc<dyn Clock>,
    assets: Option<PathBuf>,
) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let shared = Shared {
        server,
        bus,
        clock,
        assets,
        stop: stop.clone(),
    };
    info!(%local, "game server listening");
    let ticker = {
        let s = shared.clone();
        thread::spawn(move || {
            while !s.stop.load(Ordering::SeqCst) {
                s.server.tick_all(s.clock.now());
                thread::sleep(TICK_PERIOD);
            }
        })
    };
    let acceptor = {
        let s = shared;
        thread::spawn(move || {
            while !s.stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let s = s.clone();
                        thread::spawn(move || {
                            if let Err(e) = route(stream, &s) {
                                debug!(%peer, "connection ended: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        })
    };
    Ok(ServerHandle {
        addr: local,
        stop,
        threads: vec![ticker, acceptor],
    })
}

fn route(stream: TcpStream, s: &Shared) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    let mut first = [0u8; 4];
    let deadline = Instant::now() + REQUEST_TIMEOUT;
    stream.set_read_timeout(Some(REQUEST_TIMEOUT))?;
    loop {
        let n = stream.peek(&mut first)?;
        if n == 0 {
            return Ok(());
        }
        if n == 4 {
            break;
        }
        if Instant::now() > deadline {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "short preamble"));
        }
        thread::sleep(Duration::from_millis(2));
    }
    if &first == b"GET " {
        serve_http(stream, s)
    } else {
        stream.set_read_timeout(None)?;
        serve_frames(stream, s)
    }
}

fn serve_frames(stream: TcpStream, s: &Shared) -> io::Result<()> {
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = stream;
    let mut forwarders: Vec<(Arc<AtomicBool>, JoinHandle<()>)> = Vec::new();
    let result = loop {
        if s.stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        let env = match read_frame(&mut reader) {
            Ok(Some(env)) => env,
            Ok(None) => break Ok(()),
            Err(e) => break Err(io::Error::other(e.to_string())),
        };
        let now = s.clock.now();
        match env {
            Envelope::Publish { topic, message } => {
                let _ = s.bus.publish(&topic, &message);
                if let Err(e) = s.server.handle_publish(&topic, &message, now) {
                    debug!(%topic, "publish rejected: {e}");
                }
            }
            Envelope::Subscribe { filter } => {
                let sub = s.bus.subscribe(&filter).map_err(io::Error::other)?;
                let done = Arc::new(AtomicBool::new(false));
                let flag = done.clone();
                let writer = writer.clone();
                let stop = s.stop.clone();
                let handle = thread::spawn(move || forward(sub, &writer, &flag, &stop));
                forwarders.push((done, handle));
            }
            Envelope::Request { id, request } => {
                let response = s.server.handle_request(&request, now);
                let mut w = writer.lock().expect("writer lock");
                write_frame(&mut *w, &Envelope::Response { id, response })?;
            }
            Envelope::Response { .. } => debug!("ignoring response from client"),
        }
    };
    for (done, handle) in forwarders {
        done.store(true, Ordering::SeqCst);
        let _ = handle.join();
    }
    let _ = reader.shutdown(Shutdown::Both);
    result
}

fn forward(sub: Subscription, writer: &Mutex<TcpStream>, done: &AtomicBool, stop: &AtomicBool) {
    while !done.load(Ordering::SeqCst) && !stop.load(Ordering::SeqCst) {
        match sub.next_timeout(Duration::from_millis(50)) {
            Ok(Some((topic, message))) => {
                let mut w = writer.lock().expect("writer lock");
                if write_frame(&mut *w, &Envelope::Publish { topic, message }).is_err() {
                    return;
                }
            }
            Ok(None) => {}
            Err(_) => return,
        }
    }
}

struct HttpHead {
    path: String,
    upgrade: bool,
    len: usize,
}

fn peek_head(stream: &TcpStream) -> io::Result<HttpHead> {
    let mut buf = vec![0u8; 8192];
    let deadline = Instant::now() + REQUEST_TIMEOUT;
    loop {
        let n = stream.peek(&mut buf)?;
        if let Some(end) = buf[..n].windows(4).position(|w| w == b"\r\n\r\n") {
            let head = String::from_utf8_lossy(&buf[..end]).into_owned();
            let mut lines = head.lines();
            let request_line = lines.next().unwrap_or_default();
            let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_owned();
            let upgrade = lines.any(|l| {
                l.split_once(':').is_some_and(|(k, v)| {
                    k.trim().eq_ignore_ascii_case("upgrade") && v.trim().eq_ignore_ascii_case("websocket")
                })
            });
            return Ok(HttpHead {
                path,
                upgrade,
                len: end + 4,
            });
        }
        if n == buf.len() || Instant::now() > deadline {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "request head too large or slow"));
        }
        thread::sleep(Duration::from_millis(2));
    }
}

fn serve_http(mut stream: TcpStream, s: &Shared) -> io::Result<()> {
    let head = peek_head(&stream)?;
    let path = head.path.split('?').next().unwrap_or("/").to_owned();
    if head.upgrade {
        return match path.strip_prefix("/ws/game/") {
            Some(id) if !id.is_empty() && !id.contains('/') => serve_bridge(stream, id, s),
            _ => respond(&mut stream, 404, "text/plain", b"no such websocket endpoint\n"),
        };
    }
    let mut sink = vec![0u8; head.len];
    stream.read_exact(&mut sink)?;
    match static_file(s.assets.as_deref(), &path) {
        Some((mime, body)) => respond(&mut stream, 200, mime, &body),
        None => respond(&mut stream, 404, "text/plain", b"not found\n"),
    }
}

fn respond(stream: &mut TcpStream, status: u16, mime: &str, body: &[u8]) -> io::Result<()> {
    let reason = if status == 200 { "OK" } else { "Not Found" };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: {mime}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(body)?;
    stream.flush()
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or_default() {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        _ => "application/octet-stream",
    }
}

/// Looks up `url_path` under `assets`. Paths escaping the directory are
/// refused. Without an asset directory only a placeholder index exists.
pub fn static_file(assets: Option<&Path>, url_path: &str) -> Option<(&'static str, Vec<u8>)> {
    let rel = url_path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel_path = Path::new(rel);
    if rel_path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    match assets {
        Some(dir) => {
            let full = dir.join(rel_path);
            fs::read(&full).ok().map(|b| (mime_for(&full), b))
        }
        None if rel == "index.html" => Some(("text/html; charset=utf-8", INDEX_HTML.as_bytes().to_vec())),
        None => None,
    }
}

fn ws_send(ws: &mut tungstenite::WebSocket<TcpStream>, msg: &BridgeMessage) -> Result<(), tungstenite::Error> {
    let text = serde_json::to_string(msg).expect("bridge messages encode");
    ws.send(WsMessage::text(text))
}

fn handle_bridge_command(s: &Shared, game_id: &str, text: &str) -> BridgeMessage {
    let cmd: BridgeCommand = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => {
            return BridgeMessage::Rejected {
                id: 0,
                reason: format!("bad command: {e}"),
            }
        }
    };
    let game_id = game_id.to_owned();
    let request = match cmd.op {
        BridgeOp::Start {} => Request::Start { game_id: game_id.clone() },
        BridgeOp::Pause {} => Request::Pause { game_id: game_id.clone() },
        BridgeOp::Resume {} => Request::Resume { game_id: game_id.clone() },
        BridgeOp::ClockPress { player } => Request::ClockPress {
            game_id: game_id.clone(),
            player,
        },
    };
    match s.server.handle_request(&request, s.clock.now()) {
        Response::Snapshot(snapshot) => BridgeMessage::Ack { id: cmd.id, snapshot },
        Response::Rejected { reason } => BridgeMessage::Rejected { id: cmd.id, reason },
        other => BridgeMessage::Rejected {
            id: cmd.id,
            reason: format!("unexpected response {other:?}"),
        },
    }
}

fn metrics_for(s: &Shared, game_id: &str) -> Option<Vec<MetricsSnapshot>> {
    let now = s.clock.now();
    s.server
        .with_match(game_id, |m| {
            let start = m.state().started_at.unwrap_or(now);
            Ok(m.state()
                .players
                .iter()
                .map(|p| MetricsSnapshot::compute(&p.name, m.commands().player(&p.name), start, now))
                .collect())
        })
        .ok()
}

fn serve_bridge(stream: TcpStream, game_id: &str, s: &Shared) -> io::Result<()> {
    let mut ws = tungstenite::accept(stream.try_clone()?).map_err(|e| io::Error::other(e.to_string()))?;
    let filter = TopicFilter::game(game_id).map_err(io::Error::other)?;
    // subscribe before taking the snapshot so nothing falls in between
    let sub = s.bus.subscribe(&filter).map_err(io::Error::other)?;
    let snapshot = match s.server.snapshot(game_id) {
        Ok(snap) => snap,
        Err(_) => {
            let _ = ws_send(&mut ws, &BridgeMessage::UnknownGame {
                game_id: game_id.to_owned(),
            });
            let _ = ws.close(None);
            return Ok(());
        }
    };
    let err = |e: tungstenite::Error| io::Error::other(e.to_string());
    ws_send(&mut ws, &BridgeMessage::Snapshot(snapshot)).map_err(err)?;
    stream.set_read_timeout(Some(WS_POLL))?;
    let mut last_metrics = Instant::now();
    while !s.stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(WsMessage::Text(text)) => {
                let reply = handle_bridge_command(s, game_id, text.as_str());
                ws_send(&mut ws, &reply).map_err(err)?;
            }
            Ok(WsMessage::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => return Err(err(e)),
        }
        for (_, message) in sub.drain() {
            if let Some(out) = BridgeMessage::from_bus(message) {
                ws_send(&mut ws, &out).map_err(err)?;
            }
        }
        if last_metrics.elapsed() >= METRICS_PERIOD {
            last_metrics = Instant::now();
            if let Some(m) = metrics_for(s, game_id) {
                ws_send(&mut ws, &BridgeMessage::Metrics(m)).map_err(err)?;
            }
        }
    }
    Ok(())
}

type Pending = Arc<Mutex<HashMap<u64, Sender<Response>>>>;
type LocalSubs = Arc<Mutex<Vec<(TopicFilter, Sender<(Topic, Message)>)>>>;

/// Client side of the framed protocol: request/response plus pub/sub.
pub struct TcpLink {
    writer: Mutex<TcpStream>,
    pending: Pending,
    subs: LocalSubs,
    next_id: AtomicU64,
    closed: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
}

impl TcpLink {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut reader_stream = stream.try_clone()?;
        let pending: Pending = Arc::new(Mutex::new(HashMap::new()));
        let subs: LocalSubs = Arc::new(Mutex::new(Vec::new()));
        let closed = Arc::new(AtomicBool::new(false));
        let reader = {
            let pending = pending.clone();
            let subs = subs.clone();
            let closed = closed.clone();
            thread::spawn(move || {
                loop {
                    match read_frame(&mut reader_stream) {
                        Ok(Some(Envelope::Response { id, response })) => {
                            if let Some(tx) = pending.lock().expect("pending lock").remove(&id) {
                                let _ = tx.send(response);
                            }
                        }
                        Ok(Some(Envelope::Publish { topic, message })) => {
                            let mut subs = subs.lock().expect("subs lock");
                            subs.retain(|(f, tx)| {
                                !f.matches(&topic) || tx.send((topic.clone(), message.clone())).is_ok()
                            });
                        }
                        Ok(Some(_)) => {}
                        Ok(None) | Err(_) => break,
                    }
                }
                closed.store(true, Ordering::SeqCst);
                pending.lock().expect("pending lock").clear();
                subs.lock().expect("subs lock").clear();
            })
        };
        Ok(TcpLink {
            writer: Mutex::new(stream),
            pending,
            subs,
            next_id: AtomicU64::new(1),
            closed,
            reader: Some(reader),
        })
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    fn send(&self, env: &Envelope) -> Result<(), TransportError> {
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        let mut w = self.writer.lock().expect("writer lock");
        write_frame(&mut *w, env).map_err(TransportError::Io)
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        if let Ok(w) = self.writer.lock() {
            let _ = w.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl ServerLink for TcpLink {
    fn request(&self, request: &Request) -> Result<Response, TransportError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().expect("pending lock").insert(id, tx);
        if let Err(e) = self.send(&Envelope::Request {
            id,
            request: request.clone(),
        }) {
            self.pending.lock().expect("pending lock").remove(&id);
            return Err(e);
        }
        rx.recv_timeout(REQUEST_TIMEOUT).map_err(|_| {
            self.pending.lock().expect("pending lock").remove(&id);
            TransportError::Closed
        })
    }

    fn publish(&self, topic: &Topic, message: &Message) -> Result<(), TransportError> {
        self.send(&Envelope::Publish {
            topic: topic.clone(),
            message: message.clone(),
        })
    }
}

impl Transport for TcpLink {
    fn publish(&self, topic: &Topic, message: &Message) -> Result<(), TransportError> {
        ServerLink::publish(self, topic, message)
    }

    fn subscribe(&self, filter: &TopicFilter) -> Result<Subscription, TransportError> {
        let (tx, rx) = mpsc::channel();
        self.subs.lock().expect("subs lock").push((filter.clone(), tx));
        self.send(&Envelope::Subscribe {
            filter: filter.clone(),
        })?;
        Ok(Subscription::new(rx))
    }
}

/// Wall-clock timestamp helper for binaries.
pub fn wall_now() -> Timestamp {
    Timestamp::now()
}
