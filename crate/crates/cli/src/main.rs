use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::{info, warn};

use cyberduel::bot::{load_corpus, Bot, BotConfig, Brain, DEFAULT_ALPHA, DEFAULT_ORDER};
use cyberduel::daemon::{PlayerDaemon, TcpNetwork};
use cyberduel::ledger::append_block_file;
use cyberduel::metrics::CommandGrammar;
use cyberduel::model::{ClassPool, GameConfig, GameMode, GamePhase, Outcome, SystemClock, Timestamp};
use cyberduel::net::{serve, TcpLink};
use cyberduel::protocol::{Channel, GameEvent, InProcessBus, Message, Topic, TopicFilter, Transport};
use cyberduel::report;
use cyberduel::server::{GameServer, ServerConfig};
use cyberduel::sim::{simulate, PlayerSpec, Role, SimConfig};
use cyberduel::transcript::{read_records, write_records, Record};

#[derive(Parser)]
#[command(name = "cyberduel", version, about = "Head-to-head attack/defense match engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the game server.
    Gamed(GamedArgs),
    /// Run a player daemon that hosts units and reports their status.
    Playerd(PlayerArgs),
    /// Run a bot player.
    Botd(BotArgs),
    /// Play a fully simulated, seeded match.
    Simulate(SimArgs),
    /// Turn a transcript into CSV metrics.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct GameArgs {
    #[arg(long, default_value = "objective")]
    mode: GameMode,
    /// Time-mode limit in seconds.
    #[arg(long, default_value_t = 300)]
    time_limit: u64,
    /// Speed-mode clock per player in seconds.
    #[arg(long, default_value_t = 300)]
    clock: u64,
    #[arg(long, default_value_t = 100.0)]
    health: f64,
    /// Health lost per second while a unit is down.
    #[arg(long, default_value_t = 1.0)]
    damage: f64,
    /// Status report interval in milliseconds.
    #[arg(long, default_value_t = 1000)]
    report_interval_ms: u64,
    /// Reassign units every so many seconds.
    #[arg(long)]
    reshuffle: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    defeat_threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file describing the unit classes. Defaults to the three trial units.
    #[arg(long)]
    class_pool: Option<PathBuf>,
}

impl GameArgs {
    fn class_pool(&self) -> Result<ClassPool> {
        match &self.class_pool {
            Some(path) => Ok(ClassPool::load(path)?),
            None => Ok(ClassPool::trial()),
        }
    }

    fn config(&self) -> Result<GameConfig> {
        let config = GameConfig {
            mode: self.mode,
            default_health: self.health,
            damage_constant: self.damage,
            report_interval: Duration::from_millis(self.report_interval_ms),
            time_limit: Duration::from_secs(self.time_limit),
            clock_budget: Duration::from_secs(self.clock),
            reshuffle_interval: self.reshuffle.map(Duration::from_secs),
            rng_seed: self.seed,
            defeat_threshold: self.defeat_threshold,
            ..GameConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct GamedArgs {
    #[arg(long, env = "CYBERDUEL_BIND", default_value = "127.0.0.1:7878")]
    bind: String,
    #[command(flatten)]
    game: GameArgs,
    #[arg(long, default_value_t = 2)]
    players: usize,
    #[arg(long, default_value_t = 3)]
    units: usize,
    /// Wait for an operator start instead of starting once every player joined.
    #[arg(long)]
    manual_start: bool,
    /// Directory for per-game ledger files.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Keep a hash-chained ledger of every accepted status report.
    #[arg(long)]
    decentralized: bool,
    #[arg(long, default_value_t = 0)]
    difficulty: u8,
    /// Directory with the scoreboard's static files.
    #[arg(long)]
    assets: Option<PathBuf>,
    /// Append every bus message to this transcript.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Exit once every game has finished.
    #[arg(long)]
    once: bool,
}

#[derive(Args, Clone)]
struct PlayerArgs {
    #[arg(long)]
    game: String,
    #[arg(long)]
    name: String,
    #[arg(long, env = "CYBERDUEL_SERVER", default_value = "127.0.0.1:7878")]
    server: String,
    /// Address this player's units listen on. Use distinct loopback
    /// addresses (127.0.0.2, 127.0.0.3) to run several players on one host.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Expected realm size. The server decides; this only warns on mismatch.
    #[arg(long)]
    units: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write each unit's flag to `<dir>/<unit_id>/flag`.
    #[arg(long)]
    flag_dir: Option<PathBuf>,
    /// Read player commands from stdin.
    #[arg(long)]
    interactive: bool,
}

#[derive(Args)]
struct BotArgs {
    #[command(flatten)]
    player: PlayerArgs,
    /// Phase-labelled corpus directory. Without one the built-in corpus is used.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    order: usize,
    /// Brain file loaded at start (if present) and saved after the game.
    #[arg(long)]
    brain: Option<PathBuf>,
    /// Sample the next phase instead of taking the most likely one.
    #[arg(long)]
    sample_phases: bool,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    game: GameArgs,
    /// `name:role` with role idle, silent or bot. Defaults to a bot against an idle victim.
    #[arg(long = "player")]
    players: Vec<String>,
    #[arg(long, default_value_t = 3)]
    units: usize,
    /// Hard stop in simulated seconds.
    #[arg(long, default_value_t = 3600)]
    max_duration: u64,
    /// Transcript output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the match ledger to this file.
    #[arg(long)]
    ledger: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    difficulty: u8,
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    order: usize,
}

#[derive(Args)]
struct ReportArgs {
    transcript: PathBuf,
    /// Directory receiving summary.csv, per_minute.csv and health.csv.
    /// Without it the summary goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    match Cli::parse().command {
        Command::Gamed(a) => gamed(a),
        Command::Playerd(a) => playerd(a),
        Command::Botd(a) => botd(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Report(a) => run_report(a),
    }
}

fn gamed(a: GamedArgs) -> Result<()> {
    if let Some(dir) = &a.ledger {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let bus = InProcessBus::new();
    let config = ServerConfig {
        game: a.game.config()?,
        class_pool: a.game.class_pool()?,
        units_per_player: a.units,
        players_per_game: a.players,
        auto_start: !a.manual_start,
        ledger_dir: a.ledger.clone(),
        decentralized: a.decentralized || a.ledger.is_some(),
        difficulty_bits: a.difficulty,
    };
    let server = Arc::new(GameServer::new(config, Arc::new(bus.clone())));
    if let Some(path) = &a.transcript {
        let sub = bus.subscribe(&TopicFilter::parse("#")?)?;
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        thread::spawn(move || loop {
            match sub.next_timeout(Duration::from_millis(200)) {
                Ok(Some((topic, message))) => {
                    let rec = Record::Message {
                        at: Timestamp::now(),
                        topic,
                        message,
                    };
                    if let Err(e) = write_records(&[rec], &mut out) {
                        warn!("transcript write failed: {e}");
                        return;
                    }
                }
                Ok(None) => {}
                Err(_) => return,
            }
        });
    }
    let handle = serve(&a.bind, server.clone(), bus, Arc::new(SystemClock), a.assets.clone())?;
    println!("listening on {}", handle.addr());
    if !a.once {
        handle.wait();
        return Ok(());
    }
    loop {
        thread::sleep(Duration::from_millis(200));
        let ids = server.game_ids();
        if ids.is_empty() {
            continue;
        }
        let finished = ids.iter().all(|id| {
            server
                .with_match(id, |m| Ok(m.state().phase == GamePhase::Finished))
                .unwrap_or(false)
        });
        if finished {
            for id in ids {
                let snap = server.snapshot(&id)?;
                println!("{}", serde_json::to_string(&snap)?);
            }
            handle.shutdown();
            return Ok(());
        }
    }
}

struct Session {
    daemon: PlayerDaemon,
    link: Arc<TcpLink>,
    updates: cyberduel::protocol::Subscription,
}

fn join(a: &PlayerArgs) -> Result<Session> {
    let link = Arc::new(TcpLink::connect(&a.server).with_context(|| format!("connecting to {}", a.server))?);
    let updates = link.subscribe(&TopicFilter::channel(Some(&a.game), Channel::Score)?)?;
    let events = Topic::new(&a.game, &a.name, Channel::Events)?;
    let own_events = link.subscribe(&TopicFilter::exact(&events))?;
    // merge both feeds into one subscription
    let (tx, rx) = mpsc::channel();
    for sub in [updates, own_events] {
        let tx = tx.clone();
        thread::spawn(move || {
            while let Ok(Some(m)) = sub.next_timeout(Duration::from_secs(3600)) {
                if tx.send(m).is_err() {
                    return;
                }
            }
        });
    }
    let mut daemon = PlayerDaemon::connect(
        &a.game,
        &a.name,
        &a.host,
        link.clone(),
        Arc::new(TcpNetwork::default()),
        Arc::new(SystemClock),
    )?;
    if let Some(dir) = &a.flag_dir {
        daemon = daemon.with_flag_dir(dir);
    }
    info!(game = %a.game, name = %a.name, "registered, waiting for the other players");
    while !daemon.sync_realm()? {
        thread::sleep(Duration::from_millis(200));
        if link.is_closed() {
            bail!("server closed the connection");
        }
    }
    if let Some(n) = a.units {
        if n != daemon.units().len() {
            warn!(expected = n, got = daemon.units().len(), "realm size differs from --units");
        }
    }
    info!(units = daemon.units().len(), "realm hosted");
    Ok(Session {
        daemon,
        link,
        updates: cyberduel::protocol::Subscription::new(rx),
    })
}

/// Applies pending updates. Returns the outcome once the game is over.
fn absorb(s: &mut Session) -> Option<Outcome> {
    let mut done = None;
    for (_, message) in s.updates.drain() {
        match message {
            Message::Score(score) => s.daemon.observe_score(&score),
            Message::Event(e) => {
                if let GameEvent::GameFinished { outcome } = e.event {
                    done = Some(outcome);
                }
            }
            _ => {}
        }
    }
    done
}

fn stdin_lines() -> mpsc::Receiver<String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in io::stdin().lock().lines() {
            let Ok(line) = line else { return };
            if tx.send(line).is_err() {
                return;
            }
        }
    });
    rx
}

fn player_command(daemon: &mut PlayerDaemon, grammar: &CommandGrammar, line: &str) -> String {
    let words: Vec<&str> = line.split_whitespace().collect();
    let result = match words.as_slice() {
        [] => return String::new(),
        ["getip"] => daemon.get_opponent_ip().map(|ip| ip.to_string()),
        ["flags"] => Ok(daemon.get_flags().join("\n")),
        ["units"] => Ok(daemon
            .units()
            .iter()
            .map(|u| format!("{} port {}", u.assigned.unit_id, u.assigned.port))
            .collect::<Vec<_>>()
            .join("\n")),
        ["enter", unit] => daemon.enter_unit(unit),
        ["restart", unit] => daemon.restart_unit(unit).map(|_| "restarted".into()),
        ["capture", fp] => daemon.capture_unit(fp).map(|v| format!("{v:?}")),
        ["attack", port, template, rest @ ..] => match port.parse() {
            Ok(port) => daemon.attack_unit(port, template, rest.first().copied()),
            Err(_) => Ok(format!("bad port {port}")),
        },
        _ => {
            let valid = grammar.is_valid(line);
            return match daemon.submit_command(line, valid) {
                Ok(()) if valid => "ok".into(),
                Ok(()) => "unknown command".into(),
                Err(e) => format!("error: {e}"),
            };
        }
    };
    if let Err(e) = daemon.submit_command(line, true) {
        return format!("error: {e}");
    }
    result.unwrap_or_else(|e| format!("error: {e}"))
}

fn print_outcome(name: &str, outcome: &Outcome) {
    match outcome {
        Outcome::Winner(w) if w == name => println!("won"),
        Outcome::Winner(w) => println!("lost to {w}"),
        Outcome::Draw => println!("draw"),
    }
}

fn playerd(a: PlayerArgs) -> Result<()> {
    let mut s = join(&a)?;
    let interval = s.daemon.report_interval().unwrap_or(Duration::from_secs(1));
    let input = a.interactive.then(stdin_lines);
    let grammar = CommandGrammar::default();
    loop {
        if let Some(outcome) = absorb(&mut s) {
            print_outcome(&a.name, &outcome);
            return Ok(());
        }
        if s.link.is_closed() {
            bail!("server closed the connection");
        }
        if let Some(rx) = &input {
            while let Ok(line) = rx.try_recv() {
                println!("{}", player_command(&mut s.daemon, &grammar, &line));
            }
        }
        s.daemon.sync_realm()?;
        if let Err(e) = s.daemon.report() {
            warn!("report failed: {e}");
        }
        thread::sleep(interval);
    }
}

fn load_brain(a: &BotArgs) -> Result<Brain> {
    if let Some(path) = a.brain.as_ref().filter(|p| p.exists()) {
        let brain: Brain = serde_json::from_slice(&fs::read(path)?).with_context(|| format!("reading {}", path.display()))?;
        brain.validate()?;
        return Ok(brain);
    }
    Ok(match &a.corpus {
        Some(dir) => Brain::train(&load_corpus(dir)?, a.order)?,
        None => Brain::default_trained(a.order)?,
    })
}

fn botd(a: BotArgs) -> Result<()> {
    let brain = load_brain(&a)?;
    let mut bot = Bot::new(
        brain,
        BotConfig {
            seed: a.player.seed,
            alpha: a.alpha,
            sample_phases: a.sample_phases,
            ..BotConfig::default()
        },
    )?;
    let mut s = join(&a.player)?;
    let interval = s.daemon.report_interval().unwrap_or(Duration::from_secs(1));
    let outcome = loop {
        if let Some(outcome) = absorb(&mut s) {
            break outcome;
        }
        if s.link.is_closed() {
            bail!("server closed the connection");
        }
        s.daemon.sync_realm()?;
        match bot.step(&mut s.daemon) {
            Ok(step) => info!(phase = step.phase.as_str(), command = %step.command, outcome = %step.outcome, "step"),
            Err(e) => warn!("bot step failed: {e}"),
        }
        if let Err(e) = s.daemon.report() {
            warn!("report failed: {e}");
        }
        thread::sleep(interval);
    };
    print_outcome(&a.player.name, &outcome);
    bot.finish(matches!(&outcome, Outcome::Winner(w) if *w == a.player.name))?;
    if let Some(path) = &a.brain {
        fs::write(path, serde_json::to_vec_pretty(bot.brain())?)?;
    }
    Ok(())
}

fn parse_player(spec: &str, order: usize) -> Result<PlayerSpec> {
    let (name, role) = spec.split_once(':').ok_or_else(|| anyhow!("expected name:role, got `{spec}`"))?;
    let role = match role {
        "idle" => Role::Idle,
        "silent" => Role::Silent,
        "bot" => Role::Bot {
            brain: Brain::default_trained(order)?,
            config: BotConfig::default(),
        },
        other => bail!("unknown role `{other}` (idle, silent or bot)"),
    };
    Ok(PlayerSpec::new(name, role))
}

fn run_simulate(a: SimArgs) -> Result<()> {
    let specs = if a.players.is_empty() {
        vec!["bot:bot".to_owned(), "victim:idle".to_owned()]
    } else {
        a.players.clone()
    };
    let config = SimConfig {
        game: a.game.config()?,
        class_pool: a.game.class_pool()?,
        units_per_player: a.units,
        players: specs.iter().map(|s| parse_player(s, a.order)).collect::<Result<_>>()?,
        max_duration: Duration::from_secs(a.max_duration),
        ledger_difficulty: a.ledger.as_ref().map(|_| a.difficulty),
        ..SimConfig::default()
    };
    let out = simulate(&config, a.game.seed)?;
    if let Some(path) = &a.out {
        fs::write(path, out.transcript_bytes()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let (Some(path), Some(blocks)) = (&a.ledger, &out.ledger) {
        if path.exists() {
            fs::remove_file(path)?;
        }
        for b in blocks {
            append_block_file(path, b)?;
        }
    }
    let summary = serde_json::json!({
        "outcome": out.outcome,
        "elapsed_s": out.elapsed.as_secs_f64(),
        "ticks": out.final_state.tick,
        "ledger_blocks": out.ledger.as_ref().map(Vec::len),
    });
    println!("{summary}");
    Ok(())
}

fn write_csv(dir: &Path, name: &str, f: impl FnOnce(File) -> Result<(), csv::Error>) -> Result<()> {
    let path = dir.join(name);
    f(File::create(&path).with_context(|| format!("creating {}", path.display()))?)?;
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<()> {
    let file = File::open(&a.transcript).with_context(|| format!("opening {}", a.transcript.display()))?;
    let records = read_records(BufReader::new(file))?;
    let r = report::build(&records);
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_csv(dir, "summary.csv", |f| r.summary_csv(f))?;
            write_csv(dir, "per_minute.csv", |f| r.per_minute_csv(f))?;
            write_csv(dir, "health.csv", |f| r.health_csv(f))?;
        }
        None => r.summary_csv(io::stdout().lock())?,
    }
    Ok(())
}
