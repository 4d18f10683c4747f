//! Post-match metrics: per-player summary, commands per minute, and health
//! over time, all derived from a transcript.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;

use crate::metrics::{CommandEvent, EventKind, MetricsSnapshot};
use crate::model::Timestamp;
use crate::protocol::Message;
use crate::transcript::Record;

/// Name of the row aggregating every player.
pub const ALL_PLAYERS: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub player: String,
    pub commands: usize,
    pub keystrokes: usize,
    pub minutes: f64,
    pub copm: f64,
    pub cpm: f64,
    pub epm: f64,
    pub cope: f64,
    pub consistency: f64,
    pub final_health: f64,
    pub alive_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinuteRow {
    pub minute: u64,
    pub player: String,
    pub commands: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealthRow {
    pub at_ms: u64,
    pub player: String,
    pub total_health: f64,
    pub alive_units: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub per_minute: Vec<MinuteRow>,
    pub health: Vec<HealthRow>,
}

fn summarize(player: &str, events: &[CommandEvent], start: Timestamp, end: Timestamp) -> SummaryRow {
    let snap = MetricsSnapshot::compute(player, events, start, end);
    SummaryRow {
        player: player.to_owned(),
        commands: events.iter().filter(|e| e.is_valid_command()).count(),
        keystrokes: events.iter().filter(|e| e.kind == EventKind::Keystroke).count(),
        minutes: end.since(start).as_secs_f64() / 60.0,
        copm: snap.copm,
        cpm: snap.cpm,
        epm: snap.epm,
        cope: snap.cope,
        consistency: snap.consistency,
        final_health: 0.0,
        alive_units: 0,
    }
}

/// Builds the report. The game runs from the header's start (else the first
/// record) to the footer's end (else the last record).
pub fn build(records: &[Record]) -> Report {
    let mut start = None;
    let mut end = None;
    let mut players: Vec<String> = Vec::new();
    let mut events: BTreeMap<String, Vec<CommandEvent>> = BTreeMap::new();
    let mut health = Vec::new();
    let mut last_score: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut first_at = None;
    let mut last_at = None;
    for r in records {
        match r {
            Record::Header(h) => {
                start = Some(h.started_at);
                players.extend(h.players.iter().map(|p| p.name.clone()));
            }
            Record::Footer(f) => end = Some(f.ended_at),
            Record::Message { at, message, .. } => {
                first_at.get_or_insert(*at);
                last_at = Some(*at);
                match message {
                    Message::Command(e) => events.entry(e.player.clone()).or_default().push(e.clone()),
                    Message::Score(s) => {
                        let point = (s.total_health, s.alive_units);
                        if last_score.get(&s.player) != Some(&point) {
                            health.push(HealthRow {
                                at_ms: at.millis(),
                                player: s.player.clone(),
                                total_health: s.total_health,
                                alive_units: s.alive_units,
                            });
                        }
                        last_score.insert(s.player.clone(), point);
                    }
                    _ => {}
                }
            }
        }
    }
    let start = start.or(first_at).unwrap_or_default();
    let end = end.or(last_at).unwrap_or(start).max(start);
    let mut seen: BTreeSet<String> = players.iter().cloned().collect();
    let extra: Vec<String> = events
        .keys()
        .chain(last_score.keys())
        .filter(|p| seen.insert((*p).clone()))
        .cloned()
        .collect();
    players.extend(extra);

    let mut all: Vec<CommandEvent> = events.values().flatten().cloned().collect();
    all.sort_by_key(|e| e.timestamp);
    let mut total = summarize(ALL_PLAYERS, &all, start, end);
    let mut summary = Vec::new();
    for p in &players {
        let mut row = summarize(p, events.get(p).map(Vec::as_slice).unwrap_or(&[]), start, end);
        if let Some((h, alive)) = last_score.get(p) {
            row.final_health = *h;
            row.alive_units = *alive;
        }
        total.final_health += row.final_health;
        total.alive_units += row.alive_units;
        summary.push(row);
    }
    summary.insert(0, total);

    let minutes = end.since(start).as_millis().div_ceil(60_000).max(1) as u64;
    let mut per_minute = Vec::new();
    for minute in 0..minutes {
        for p in &players {
            let commands = events
                .get(p)
                .map(|es| {
                    es.iter()
                        .filter(|e| e.is_valid_command())
                        .filter(|e| e.timestamp.since(start).as_millis() as u64 / 60_000 == minute)
                        .count()
                })
                .unwrap_or(0);
            per_minute.push(MinuteRow {
                minute,
                player: p.clone(),
                commands,
            });
        }
    }
    Report {
        summary,
        per_minute,
        health,
    }
}

fn write_csv<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl Report {
    pub fn summary_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        write_csv(&self.summary, out)
    }

    pub fn per_minute_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        write_csv(&self.per_minute, out)
    }

    pub fn health_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        write_csv(&self.health, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GameConfig;
    use crate::protocol::{Channel, Topic};
    use crate::transcript::{Footer, Header, PlayerEntry};

    fn header() -> Record {
        Record::Header(Header {
            game_id: "g".into(),
            seed: 0,
            started_at: Timestamp(0),
            players: vec![PlayerEntry {
                name: "alice".into(),
                role: "scripted".into(),
            }],
            config: GameConfig::default(),
        })
    }

    fn command(at_ms: u64) -> Record {
        Record::Message {
            at: Timestamp(at_ms),
            topic: Topic::new("g", "alice", Channel::Status).unwrap(),
            message: Message::Command(CommandEvent::submit("alice", Timestamp(at_ms), "ls", true)),
        }
    }

    #[test]
    fn thirty_commands_in_fifteen_minutes() {
        let mut records = vec![header()];
        records.extend((0..30).map(|i| command(i * 30_000)));
        records.push(Record::Footer(Footer {
            outcome: None,
            ended_at: Timestamp(15 * 60_000),
            ticks: 0,
        }));
        let r = build(&records);
        let alice = r.summary.iter().find(|s| s.player == "alice").unwrap();
        assert_eq!(alice.copm, 2.0);
        assert_eq!(alice.commands, 30);
        assert_eq!(r.per_minute.len(), 15);
        assert!(r.per_minute.iter().all(|m| m.commands == 2));
    }

    #[test]
    fn empty_transcript_is_all_zero() {
        let r = build(&[]);
        assert_eq!(r.summary.len(), 1);
        let s = &r.summary[0];
        assert_eq!(s.player, ALL_PLAYERS);
        assert_eq!((s.commands, s.copm, s.cpm, s.epm, s.cope, s.consistency), (0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(r.health.is_empty());
    }

    #[test]
    fn csv_is_stable() {
        let records = vec![header(), command(1000), command(2000)];
        let a = build(&records);
        let mut x = Vec::new();
        let mut y = Vec::new();
        a.summary_csv(&mut x).unwrap();
        build(&records).summary_csv(&mut y).unwrap();
        assert_eq!(x, y);
        let text = String::from_utf8(x).unwrap();
        assert!(text.starts_with("player,commands,keystrokes,minutes,copm,cpm,epm,cope,consistency"));
    }
}
