//! Health decay for units that fail their liveness probes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GamePhase, GameState, StatusCode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HealthError {
    #[error("unknown unit `{0}` in down set")]
    UnknownUnit(String),
    #[error("unknown player `{0}`")]
    UnknownPlayer(String),
    #[error("tick length must be positive and finite, got {0}")]
    InvalidTick(f64),
    #[error("game is not running")]
    NotRunning,
}

/// Units that were unreachable during one tick.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownSet {
    pub tick: u64,
    pub unit_ids: BTreeSet<String>,
}

impl DownSet {
    pub fn new<I, S>(tick: u64, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        DownSet {
            tick,
            unit_ids: ids.into_iter().map(Into::into).collect(),
        }
    }
}

/// Health of a unit that has been down for `seconds_down` seconds, starting
/// from `current`, losing `damage_constant` points per second. Never negative.
pub fn unit_health(current: f64, seconds_down: f64, damage_constant: f64) -> f64 {
    (current - seconds_down * damage_constant).max(0.0)
}

/// Charges `dt_seconds` of down-time to every unit in `down` and advances the
/// tick counter. Units outside the down set keep their health.
pub fn apply_tick(
    state: &GameState,
    down: &DownSet,
    dt_seconds: f64,
) -> Result<GameState, HealthError> {
    if !(dt_seconds.is_finite() && dt_seconds > 0.0) {
        return Err(HealthError::InvalidTick(dt_seconds));
    }
    if state.phase != GamePhase::Running {
        return Err(HealthError::NotRunning);
    }
    if let Some(missing) = down.unit_ids.iter().find(|id| state.unit(id).is_none()) {
        return Err(HealthError::UnknownUnit(missing.clone()));
    }
    let dc = state.config.damage_constant;
    let mut next = state.clone();
    for unit in next
        .players
        .iter_mut()
        .flat_map(|p| p.realm.units.iter_mut())
        .filter(|u| down.unit_ids.contains(&u.unit_id))
    {
        unit.health = unit_health(unit.health, dt_seconds, dc);
        unit.alive = unit.health > 0.0;
        unit.status_code = StatusCode::Down;
    }
    next.tick += 1;
    Ok(next)
}

/// A player is defeated once every unit in their realm is at or below zero.
pub fn is_defeated(state: &GameState, player: &str) -> Result<bool, HealthError> {
    let p = state
        .player(player)
        .ok_or_else(|| HealthError::UnknownPlayer(player.to_owned()))?;
    Ok(p.realm.units.iter().all(|u| u.health <= 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{new_game, ClassPool, GameConfig};

    fn running(default_health: f64) -> GameState {
        let cfg = GameConfig {
            default_health,
            ..GameConfig::default()
        };
        let mut s = new_game(
            "g",
            cfg,
            &["alice".to_string(), "bob".to_string()],
            &ClassPool::trial().classes,
            3,
        )
        .unwrap();
        s.phase = GamePhase::Running;
        s
    }

    #[test]
    fn unit_health_examples() {
        assert_eq!(unit_health(100.0, 30.0, 1.0), 70.0);
        assert_eq!(unit_health(100.0, 0.0, 1.0), 100.0);
        assert_eq!(unit_health(1.0, 1.0, 1.0), 0.0);
        assert_eq!(unit_health(5.0, 100.0, 1.0), 0.0);
    }

    #[test]
    fn tick_damages_only_down_units() {
        let s = running(100.0);
        let id = s.players[0].realm.units[0].unit_id.clone();
        let next = apply_tick(&s, &DownSet::new(0, [id.clone()]), 5.0).unwrap();
        assert_eq!(next.unit(&id).unwrap().health, 95.0);
        assert_eq!(next.unit(&id).unwrap().status_code, StatusCode::Down);
        assert_eq!(next.tick, 1);
        let others: Vec<f64> = next
            .players
            .iter()
            .flat_map(|p| &p.realm.units)
            .filter(|u| u.unit_id != id)
            .map(|u| u.health)
            .collect();
        assert!(others.iter().all(|h| *h == 100.0));
    }

    #[test]
    fn empty_down_set_is_identity_on_health() {
        let s = running(100.0);
        let next = apply_tick(&s, &DownSet::default(), 1.0).unwrap();
        assert_eq!(next.players, s.players);
    }

    #[test]
    fn many_small_ticks_equal_one_large() {
        let s = running(100.0);
        let id = s.players[1].realm.units[2].unit_id.clone();
        let down = DownSet::new(0, [id.clone()]);
        let mut looped = s.clone();
        for _ in 0..100 {
            looped = apply_tick(&looped, &down, 1.0).unwrap();
        }
        let once = apply_tick(&s, &down, 100.0).unwrap();
        assert_eq!(looped.unit(&id).unwrap().health, once.unit(&id).unwrap().health);
        assert!(!once.unit(&id).unwrap().alive);
    }

    #[test]
    fn sudden_death_single_tick() {
        let s = running(1.0);
        let id = s.players[0].realm.units[0].unit_id.clone();
        let next = apply_tick(&s, &DownSet::new(0, [id.clone()]), 1.0).unwrap();
        let u = next.unit(&id).unwrap();
        assert_eq!(u.health, 0.0);
        assert!(!u.alive);
    }

    #[test]
    fn tick_errors() {
        let s = running(100.0);
        assert_eq!(
            apply_tick(&s, &DownSet::new(0, ["ghost"]), 1.0),
            Err(HealthError::UnknownUnit("ghost".into()))
        );
        assert_eq!(
            apply_tick(&s, &DownSet::default(), 0.0),
            Err(HealthError::InvalidTick(0.0))
        );
        let mut lobby = s.clone();
        lobby.phase = GamePhase::Lobby;
        assert_eq!(
            apply_tick(&lobby, &DownSet::default(), 1.0),
            Err(HealthError::NotRunning)
        );
    }

    #[test]
    fn defeat_rules() {
        let mut s = running(100.0);
        assert!(!is_defeated(&s, "alice").unwrap());
        for u in &mut s.players[0].realm.units {
            u.health = 0.0;
            u.alive = false;
        }
        assert!(is_defeated(&s, "alice").unwrap());
        s.players[0].realm.units[1].health = 0.5;
        assert!(!is_defeated(&s, "alice").unwrap());
        assert_eq!(
            is_defeated(&s, "carol"),
            Err(HealthError::UnknownPlayer("carol".into()))
        );
    }
}
