//! Match transcripts: one canonical JSON record per line. A header names the
//! game, every bus message follows in delivery order, and a footer records
//! the outcome.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GameConfig, Outcome, Timestamp};
use crate::protocol::{canonical_json, Message, Topic};

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("record {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerEntry {
    pub name: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub game_id: String,
    pub seed: u64,
    pub started_at: Timestamp,
    pub players: Vec<PlayerEntry>,
    pub config: GameConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Footer {
    pub outcome: Option<Outcome>,
    pub ended_at: Timestamp,
    pub ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Record {
    Header(Header),
    Message {
        at: Timestamp,
        topic: Topic,
        message: Message,
    },
    Footer(Footer),
}

pub fn write_records<W: Write>(records: &[Record], mut out: W) -> Result<(), TranscriptError> {
    for r in records {
        out.write_all(&canonical_json(r)?)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn to_bytes(records: &[Record]) -> Result<Vec<u8>, TranscriptError> {
    let mut buf = Vec::new();
    write_records(records, &mut buf)?;
    Ok(buf)
}

/// Parses a transcript. Errors name the 1-based line of the bad record.
pub fn read_records<R: BufRead>(input: R) -> Result<Vec<Record>, TranscriptError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| TranscriptError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Channel, EventRecord, GameEvent};

    #[test]
    fn round_trip_and_corrupt_line() {
        let records = vec![
            Record::Message {
                at: Timestamp(5),
                topic: Topic::new("g", "a", Channel::Events).unwrap(),
                message: Message::Event(EventRecord {
                    game_id: "g".into(),
                    tick: 0,
                    at: Timestamp(5),
                    event: GameEvent::GameStarted,
                }),
            },
            Record::Footer(Footer {
                outcome: Some(Outcome::Draw),
                ended_at: Timestamp(9),
                ticks: 3,
            }),
        ];
        let bytes = to_bytes(&records).unwrap();
        assert_eq!(read_records(&bytes[..]).unwrap(), records);

        let mut bad = bytes.clone();
        bad.extend_from_slice(b"{\"message\":{}}\n");
        match read_records(&bad[..]) {
            Err(TranscriptError::Corrupt { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
