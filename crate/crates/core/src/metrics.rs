//! Keystroke and command capture, and the gameplay metrics computed from it:
//! commands per minute (whole-game and 10 s window), characters per minute,
//! errors per minute, commands per entry and consistency.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Timestamp;

pub const BACKSPACE: &str = "Backspace";
pub const DELETE: &str = "Delete";
const NAMED_KEYS: &[&str] = &[
    BACKSPACE,
    DELETE,
    "Enter",
    "Tab",
    "Escape",
    "ArrowUp",
    "ArrowDown",
    "ArrowLeft",
    "ArrowRight",
];

/// Length of the real-time CoPM window. The x6 factor in [`copm_window`]
/// assumes this is exactly ten seconds.
pub const WINDOW: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("elapsed time must be positive, got {0} minutes")]
    NonPositiveElapsed(f64),
    #[error("at least one entry is required")]
    NoEntries,
    #[error("Unequal length: {0} vs {1}")]
    UnequalLength(usize, usize),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("timestamp for `{player}` went backwards: {prev} then {next}")]
    OutOfOrder {
        player: String,
        prev: Timestamp,
        next: Timestamp,
    },
    #[error("record {line}: {message}")]
    Record { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Keystroke,
    CommandSubmit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandEvent {
    pub player: String,
    pub timestamp: Timestamp,
    pub kind: EventKind,
    /// One character (or a named key such as `Backspace`) for keystrokes,
    /// the whole line for submissions.
    pub text: String,
    pub valid: bool,
}

impl CommandEvent {
    pub fn keystroke(player: &str, timestamp: Timestamp, key: &str) -> Self {
        CommandEvent {
            player: player.to_owned(),
            timestamp,
            kind: EventKind::Keystroke,
            text: key.to_owned(),
            valid: true,
        }
    }

    pub fn submit(player: &str, timestamp: Timestamp, line: &str, valid: bool) -> Self {
        CommandEvent {
            player: player.to_owned(),
            timestamp,
            kind: EventKind::CommandSubmit,
            text: line.to_owned(),
            valid,
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        match self.kind {
            EventKind::CommandSubmit if self.text.trim().is_empty() => Err(
                MetricsError::InvalidEvent("command submission with empty text".into()),
            ),
            EventKind::Keystroke
                if self.text.chars().count() != 1 && !NAMED_KEYS.contains(&self.text.as_str()) =>
            {
                Err(MetricsError::InvalidEvent(format!(
                    "keystroke `{}` is neither one character nor a named key",
                    self.text
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn is_error_key(&self) -> bool {
        self.kind == EventKind::Keystroke && (self.text == BACKSPACE || self.text == DELETE)
    }

    pub fn is_valid_command(&self) -> bool {
        self.kind == EventKind::CommandSubmit && self.valid
    }
}

/// Append-only capture log, one stream per player.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    streams: BTreeMap<String, Vec<CommandEvent>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: CommandEvent) -> Result<(), MetricsError> {
        event.validate()?;
        let stream = self.streams.entry(event.player.clone()).or_default();
        if let Some(last) = stream.last() {
            if event.timestamp < last.timestamp {
                return Err(MetricsError::OutOfOrder {
                    player: event.player,
                    prev: last.timestamp,
                    next: event.timestamp,
                });
            }
        }
        stream.push(event);
        Ok(())
    }

    pub fn player(&self, name: &str) -> &[CommandEvent] {
        self.streams.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn players(&self) -> impl Iterator<Item = &str> {
        self.streams.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.streams.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_elapsed(elapsed_minutes: f64) -> Result<(), MetricsError> {
    if elapsed_minutes > 0.0 && elapsed_minutes.is_finite() {
        Ok(())
    } else {
        Err(MetricsError::NonPositiveElapsed(elapsed_minutes))
    }
}

/// Whole-game CoPM: total commands over elapsed game minutes.
pub fn copm_total(total_commands: usize, elapsed_minutes: f64) -> Result<f64, MetricsError> {
    check_elapsed(elapsed_minutes)?;
    Ok(total_commands as f64 / elapsed_minutes)
}

/// [`copm_total`] over the valid submissions of an event stream.
pub fn copm_total_of(events: &[CommandEvent], elapsed_minutes: f64) -> Result<f64, MetricsError> {
    copm_total(
        events.iter().filter(|e| e.is_valid_command()).count(),
        elapsed_minutes,
    )
}

/// Real-time CoPM: six times the valid submissions in `(now - 10 s, now]`.
pub fn copm_window(events: &[CommandEvent], now: Timestamp) -> f64 {
    let end = i128::from(now.millis());
    let start = end - WINDOW.as_millis() as i128;
    let in_window = events
        .iter()
        .filter(|e| e.is_valid_command())
        .filter(|e| {
            let t = i128::from(e.timestamp.millis());
            t > start && t <= end
        })
        .count();
    6.0 * in_window as f64
}

/// Keystrokes per minute, error keys included.
pub fn cpm(events: &[CommandEvent], elapsed_minutes: f64) -> Result<f64, MetricsError> {
    check_elapsed(elapsed_minutes)?;
    let keys = events
        .iter()
        .filter(|e| e.kind == EventKind::Keystroke)
        .count();
    Ok(keys as f64 / elapsed_minutes)
}

/// Delete and Backspace presses per minute.
pub fn epm(events: &[CommandEvent], elapsed_minutes: f64) -> Result<f64, MetricsError> {
    check_elapsed(elapsed_minutes)?;
    let errors = events.iter().filter(|e| e.is_error_key()).count();
    Ok(errors as f64 / elapsed_minutes)
}

/// Indices of the `;` characters that separate commands, ignoring any inside
/// single or double quotes or escaped with a backslash.
pub fn separator_positions(line: &str) -> Vec<usize> {
    #[derive(PartialEq)]
    enum Quote {
        None,
        Single,
        Double,
    }
    let mut quote = Quote::None;
    let mut escaped = false;
    let mut out = Vec::new();
    for (i, c) in line.char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        match (&quote, c) {
            (Quote::Single, '\'') => quote = Quote::None,
            (Quote::Single, _) => {}
            (_, '\\') => escaped = true,
            (Quote::Double, '"') => quote = Quote::None,
            (Quote::Double, _) => {}
            (Quote::None, '\'') => quote = Quote::Single,
            (Quote::None, '"') => quote = Quote::Double,
            (Quote::None, ';') => out.push(i),
            (Quote::None, _) => {}
        }
    }
    out
}

/// Splits an entry into its chained commands (trimmed, possibly empty).
pub fn split_commands(line: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut start = 0;
    for pos in separator_positions(line) {
        parts.push(line[start..pos].trim());
        start = pos + 1;
    }
    parts.push(line[start..].trim());
    parts
}

/// Commands per entry: mean of `1 + top-level separators` over all entries.
pub fn cope<S: AsRef<str>>(entries: &[S]) -> Result<f64, MetricsError> {
    if entries.is_empty() {
        return Err(MetricsError::NoEntries);
    }
    let total: usize = entries
        .iter()
        .map(|e| 1 + separator_positions(e.as_ref()).len())
        .sum();
    Ok(total as f64 / entries.len() as f64)
}

fn head_token(entry: &str) -> &str {
    entry
        .split(|c: char| c.is_whitespace() || c == ';')
        .find(|w| !w.is_empty())
        .unwrap_or("")
}

/// Head-token repetition: `1 - distinct heads / entries`. 1 is maximally
/// repetitive, 0 means every entry starts with a different program.
pub fn consistency<S: AsRef<str>>(entries: &[S]) -> Result<f64, MetricsError> {
    if entries.is_empty() {
        return Err(MetricsError::NoEntries);
    }
    let distinct: HashSet<&str> = entries.iter().map(|e| head_token(e.as_ref())).collect();
    Ok(1.0 - distinct.len() as f64 / entries.len() as f64)
}

/// Number of character positions at which two equal-length commands differ.
pub fn hamming_distance(c1: &str, c2: &str) -> Result<usize, MetricsError> {
    let (n1, n2) = (c1.chars().count(), c2.chars().count());
    if n1 != n2 {
        return Err(MetricsError::UnequalLength(n1, n2));
    }
    Ok(c1.chars().zip(c2.chars()).filter(|(a, b)| a != b).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub player: String,
    pub at: Timestamp,
    pub copm: f64,
    pub copm_window: f64,
    pub cpm: f64,
    pub epm: f64,
    pub cope: f64,
    pub consistency: f64,
}

impl MetricsSnapshot {
    /// Metrics for one player's stream, over the game time `[start, at]`.
    /// Rates are zero before any time has elapsed; CoPE and consistency are
    /// zero before the first submission.
    pub fn compute(player: &str, events: &[CommandEvent], start: Timestamp, at: Timestamp) -> Self {
        let seen: Vec<CommandEvent> = events
            .iter()
            .filter(|e| e.timestamp <= at)
            .cloned()
            .collect();
        let minutes = at.since(start).as_secs_f64() / 60.0;
        let rate = |f: fn(&[CommandEvent], f64) -> Result<f64, MetricsError>| {
            f(&seen, minutes).unwrap_or(0.0)
        };
        let entries: Vec<&str> = seen
            .iter()
            .filter(|e| e.kind == EventKind::CommandSubmit)
            .map(|e| e.text.as_str())
            .collect();
        MetricsSnapshot {
            player: player.to_owned(),
            at,
            copm: rate(copm_total_of),
            copm_window: copm_window(&seen, at),
            cpm: rate(cpm),
            epm: rate(epm),
            cope: cope(&entries).unwrap_or(0.0),
            consistency: consistency(&entries).unwrap_or(0.0),
        }
    }
}

/// Allowed argument count for a command head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgShape {
    pub min: usize,
    pub max: usize,
}

/// Decides whether a submitted line is a "valid command": every chained
/// command must start with an allowlisted program and carry an allowed
/// number of arguments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandGrammar {
    rules: HashMap<String, ArgShape>,
}

impl Default for CommandGrammar {
    fn default() -> Self {
        let table: &[(&str, usize, usize)] = &[
            // recon
            ("getip", 0, 0),
            ("host", 1, 1),
            ("whois", 1, 1),
            ("ping", 1, 3),
            ("dig", 1, 2),
            // enumeration
            ("nmap", 1, 6),
            ("nc", 2, 4),
            // gaining access
            ("exploit", 5, 5),
            ("killsvc", 2, 2),
            ("flood", 2, 3),
            ("capture", 1, 1),
            ("curl", 1, 6),
            ("ssh", 1, 4),
            // general shell
            ("ls", 0, 4),
            ("cd", 0, 1),
            ("pwd", 0, 0),
            ("cat", 1, 4),
            ("echo", 0, 16),
            ("whoami", 0, 0),
            ("id", 0, 0),
            ("uname", 0, 2),
            ("ps", 0, 3),
            ("grep", 1, 5),
            ("find", 1, 6),
        ];
        CommandGrammar {
            rules: table
                .iter()
                .map(|&(h, min, max)| (h.to_owned(), ArgShape { min, max }))
                .collect(),
        }
    }
}

impl CommandGrammar {
    pub fn empty() -> Self {
        CommandGrammar {
            rules: HashMap::new(),
        }
    }

    pub fn allow(mut self, head: &str, min: usize, max: usize) -> Self {
        self.rules.insert(head.to_owned(), ArgShape { min, max });
        self
    }

    pub fn is_valid(&self, line: &str) -> bool {
        let commands = split_commands(line);
        let last = commands.len() - 1;
        if commands.iter().all(|c| c.is_empty()) {
            return false;
        }
        commands.iter().enumerate().all(|(i, cmd)| {
            // a trailing `;` leaves an empty last command, which is fine
            if cmd.is_empty() {
                return i == last;
            }
            let words = shell_words(cmd);
            match words.split_first() {
                Some((head, args)) => self
                    .rules
                    .get(head.as_str())
                    .is_some_and(|s| (s.min..=s.max).contains(&args.len())),
                None => false,
            }
        })
    }
}

/// Whitespace-separated words with quotes removed.
pub fn shell_words(cmd: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    let mut quote: Option<char> = None;
    let mut chars = cmd.chars();
    while let Some(c) = chars.next() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some('"'), '\\') => {
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
            }
            (Some(_), c) => cur.push(c),
            (None, '\'' | '"') => {
                quote = Some(c);
                in_word = true;
            }
            (None, '\\') => {
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
                in_word = true;
            }
            (None, c) if c.is_whitespace() => {
                if in_word {
                    words.push(std::mem::take(&mut cur));
                    in_word = false;
                }
            }
            (None, c) => {
                cur.push(c);
                in_word = true;
            }
        }
    }
    if in_word {
        words.push(cur);
    }
    words
}

/// Writes events as newline-delimited JSON, one event per line.
pub fn write_ndjson<W: Write>(events: &[CommandEvent], mut out: W) -> Result<(), MetricsError> {
    for e in events {
        let line = crate::protocol::canonical_json(e).map_err(|e| MetricsError::Io(e.to_string()))?;
        out.write_all(&line)
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| MetricsError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(input: R) -> Result<Vec<CommandEvent>, MetricsError> {
    let mut events = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| MetricsError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: CommandEvent = serde_json::from_str(&line).map_err(|e| MetricsError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        event.validate().map_err(|e| MetricsError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(secs: f64) -> Timestamp {
        Timestamp((secs * 1000.0) as u64)
    }

    #[test]
    fn copm_total_examples() {
        assert_eq!(copm_total(30, 15.0).unwrap(), 2.0);
        assert_eq!(copm_total(0, 10.0).unwrap(), 0.0);
        assert!(matches!(copm_total(3, 0.0), Err(MetricsError::NonPositiveElapsed(_))));
        assert!(copm_total(3, -1.0).is_err());
    }

    #[test]
    fn window_counts_last_ten_seconds() {
        let mut events: Vec<_> = [91.0, 95.0, 99.0, 100.0]
            .iter()
            .map(|&s| CommandEvent::submit("p", ts(s), "ls", true))
            .collect();
        events.push(CommandEvent::submit("p", ts(90.0), "ls", true));
        events.push(CommandEvent::submit("p", ts(95.0), "bogus", false));
        assert_eq!(copm_window(&events, ts(100.0)), 24.0);
        assert_eq!(copm_window(&[], ts(100.0)), 0.0);
    }

    #[test]
    fn cpm_and_epm() {
        let mut events = Vec::new();
        for i in 0..300 {
            let key = if i % 30 == 0 { BACKSPACE } else { "a" };
            events.push(CommandEvent::keystroke("p", ts(i as f64), key));
        }
        assert_eq!(cpm(&events, 5.0).unwrap(), 60.0);
        assert_eq!(epm(&events, 5.0).unwrap(), 2.0);
        assert_eq!(cpm(&[], 5.0).unwrap(), 0.0);
        assert!(epm(&events, 0.0).is_err());
    }

    #[test]
    fn cope_examples() {
        assert_eq!(cope(&["ls", "cd /tmp; ls; pwd"]).unwrap(), 2.0);
        assert_eq!(cope(&["ls"]).unwrap(), 1.0);
        assert_eq!(cope(&["echo \"a;b\""]).unwrap(), 1.0);
        assert_eq!(cope(&["echo 'a;b'; ls"]).unwrap(), 2.0);
        assert_eq!(cope(&["echo a\\;b"]).unwrap(), 1.0);
        assert_eq!(cope::<&str>(&[]), Err(MetricsError::NoEntries));
    }

    #[test]
    fn consistency_examples() {
        let c = consistency(&["nmap a", "nmap b", "nmap c"]).unwrap();
        assert!((c - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(consistency(&["ls", "pwd", "nmap x"]).unwrap(), 0.0);
        assert_eq!(consistency(&["ls"]).unwrap(), 0.0);
        assert!(consistency::<&str>(&[]).is_err());
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming_distance("nmap -Pn", "nmap -sS").unwrap(), 2);
        assert_eq!(hamming_distance("same", "same").unwrap(), 0);
        let err = hamming_distance("ab", "abc").unwrap_err();
        assert_eq!(err, MetricsError::UnequalLength(2, 3));
        assert!(err.to_string().starts_with("Unequal length"));
    }

    #[test]
    fn grammar_validity() {
        let g = CommandGrammar::default();
        assert!(g.is_valid("nmap -Pn 10.0.0.2"));
        assert!(g.is_valid("cd /tmp; ls; pwd"));
        assert!(g.is_valid("ls;"));
        assert!(g.is_valid("echo \"a; b\""));
        assert!(!g.is_valid("rm -rf /"));
        assert!(!g.is_valid("pwd extra"));
        assert!(!g.is_valid("ls;; pwd"));
        assert!(!g.is_valid("   "));
        assert!(g.is_valid("exploit -p 3001 -k qs-exec 10.0.0.2"));
        assert!(!g.is_valid("exploit -p 3001"));
    }

    #[test]
    fn shell_words_handles_quotes() {
        assert_eq!(shell_words("echo 'a b' \"c d\" e\\ f"), ["echo", "a b", "c d", "e f"]);
        assert_eq!(shell_words("  "), Vec::<String>::new());
        assert_eq!(shell_words("x ''"), ["x", ""]);
    }

    #[test]
    fn event_validation_and_ordering() {
        let mut log = EventLog::new();
        log.push(CommandEvent::keystroke("p", ts(1.0), "a")).unwrap();
        assert!(matches!(
            log.push(CommandEvent::keystroke("p", ts(0.5), "b")),
            Err(MetricsError::OutOfOrder { .. })
        ));
        log.push(CommandEvent::keystroke("q", ts(0.5), "b")).unwrap();
        assert!(log.push(CommandEvent::keystroke("p", ts(2.0), "ab")).is_err());
        assert!(log.push(CommandEvent::submit("p", ts(2.0), " ", true)).is_err());
        log.push(CommandEvent::keystroke("p", ts(2.0), DELETE)).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.player("p").len(), 2);
    }

    #[test]
    fn snapshot_of_simple_log() {
        let events = vec![
            CommandEvent::keystroke("p", ts(1.0), "l"),
            CommandEvent::keystroke("p", ts(2.0), "s"),
            CommandEvent::keystroke("p", ts(3.0), BACKSPACE),
            CommandEvent::submit("p", ts(4.0), "ls; pwd", true),
            CommandEvent::submit("p", ts(50.0), "ls", true),
        ];
        let snap = MetricsSnapshot::compute("p", &events, ts(0.0), ts(60.0));
        assert_eq!(snap.copm, 2.0);
        assert_eq!(snap.cpm, 3.0);
        assert_eq!(snap.epm, 1.0);
        assert_eq!(snap.cope, 1.5);
        assert_eq!(snap.consistency, 0.5);
        assert_eq!(snap.copm_window, 0.0);
        let early = MetricsSnapshot::compute("p", &events, ts(0.0), ts(0.0));
        assert_eq!((early.copm, early.cope), (0.0, 0.0));
    }

    #[test]
    fn ndjson_round_trip_and_bad_record() {
        let events = vec![
            CommandEvent::keystroke("p", ts(1.0), "a"),
            CommandEvent::submit("p", ts(2.0), "ls", true),
        ];
        let mut buf = Vec::new();
        write_ndjson(&events, &mut buf).unwrap();
        assert_eq!(read_ndjson(buf.as_slice()).unwrap(), events);
        let bad = b"{\"player\":\"p\"}\n";
        assert!(matches!(
            read_ndjson(&bad[..]),
            Err(MetricsError::Record { line: 1, .. })
        ));
    }
}
