//! Topic grammar:
//!
//! ```text
//! topic   = "game/" id "/player/" name "/" channel
//! channel = "status" | "score" | "opponent" | "events"
//! filter  = topic with any level replaced by "+" (one level) or a final "#"
//! ```
//!
//! Levels are nonempty and may not contain `/`, `+` or `#`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("empty {0} component")]
    Empty(&'static str),
    #[error("component `{0}` contains a reserved character")]
    Reserved(String),
    #[error("`{0}` does not match game/<id>/player/<name>/<channel>")]
    Shape(String),
    #[error("unknown channel `{0}`")]
    Channel(String),
    #[error("`#` must be the last level of a filter: `{0}`")]
    Wildcard(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    /// Player -> server liveness reports and captured commands.
    Status,
    /// Server -> derived score for this player.
    Score,
    /// Server -> information about the player's target.
    Opponent,
    /// Server -> ordered game events concerning this player.
    Events,
}

impl Channel {
    pub const ALL: [Channel; 4] = [
        Channel::Status,
        Channel::Score,
        Channel::Opponent,
        Channel::Events,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Status => "status",
            Channel::Score => "score",
            Channel::Opponent => "opponent",
            Channel::Events => "events",
        }
    }
}

impl FromStr for Channel {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| TopicError::Channel(s.to_owned()))
    }
}

fn check_level(what: &'static str, level: &str) -> Result<(), TopicError> {
    if level.is_empty() {
        return Err(TopicError::Empty(what));
    }
    if level.contains(['/', '+', '#']) {
        return Err(TopicError::Reserved(level.to_owned()));
    }
    Ok(())
}

/// A concrete publish path. Never contains wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Topic {
    game_id: String,
    player: String,
    channel: Channel,
}

impl Topic {
    pub fn new(game_id: &str, player: &str, channel: Channel) -> Result<Self, TopicError> {
        check_level("game id", game_id)?;
        check_level("player", player)?;
        Ok(Topic {
            game_id: game_id.to_owned(),
            player: player.to_owned(),
            channel,
        })
    }

    pub fn parse(path: &str) -> Result<Self, TopicError> {
        let levels: Vec<&str> = path.split('/').collect();
        match levels.as_slice() {
            ["game", game, "player", player, channel] => {
                Topic::new(game, player, channel.parse()?)
            }
            _ => Err(TopicError::Shape(path.to_owned())),
        }
    }

    pub fn game_id(&self) -> &str {
        &self.game_id
    }

    pub fn player(&self) -> &str {
        &self.player
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn path(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "game/{}/player/{}/{}",
            self.game_id,
            self.player,
            self.channel.as_str()
        )
    }
}

impl TryFrom<String> for Topic {
    type Error = TopicError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Topic::parse(&s)
    }
}

impl From<Topic> for String {
    fn from(t: Topic) -> Self {
        t.to_string()
    }
}

/// MQTT-style subscription filter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicFilter {
    levels: Vec<String>,
}

impl TopicFilter {
    pub fn parse(text: &str) -> Result<Self, TopicError> {
        let levels: Vec<String> = text.split('/').map(str::to_owned).collect();
        for (i, level) in levels.iter().enumerate() {
            match level.as_str() {
                "" => return Err(TopicError::Empty("filter")),
                "+" => {}
                "#" if i + 1 == levels.len() => {}
                "#" => return Err(TopicError::Wildcard(text.to_owned())),
                l if l.contains(['+', '#']) => return Err(TopicError::Reserved(l.to_owned())),
                _ => {}
            }
        }
        Ok(TopicFilter { levels })
    }

    /// Everything published for one game.
    pub fn game(game_id: &str) -> Result<Self, TopicError> {
        check_level("game id", game_id)?;
        Self::parse(&format!("game/{game_id}/#"))
    }

    /// One channel of every player, across games if `game_id` is `None`.
    pub fn channel(game_id: Option<&str>, channel: Channel) -> Result<Self, TopicError> {
        let game = game_id.unwrap_or("+");
        Self::parse(&format!("game/{game}/player/+/{}", channel.as_str()))
    }

    pub fn exact(topic: &Topic) -> Self {
        Self::parse(&topic.to_string()).expect("topics are valid filters")
    }

    pub fn matches(&self, topic: &Topic) -> bool {
        let path = topic.to_string();
        let levels: Vec<&str> = path.split('/').collect();
        let mut i = 0;
        for f in &self.levels {
            match f.as_str() {
                "#" => return true,
                "+" if i < levels.len() => {}
                l if i < levels.len() && l == levels[i] => {}
                _ => return false,
            }
            i += 1;
        }
        i == levels.len()
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.levels.join("/"))
    }
}

impl TryFrom<String> for TopicFilter {
    type Error = TopicError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        TopicFilter::parse(&s)
    }
}

impl From<TopicFilter> for String {
    fn from(f: TopicFilter) -> Self {
        f.to_string()
    }
}
