use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

use cyberduel::bot::{
    abstract_command, apply_outcome_penalty, gate, Brain, Decode, KnowledgeBase, Phase, Slots, Symbol, UsedActions,
    STOCHASTIC_TOLERANCE, TARGET_IP, TARGET_PORT,
};
use cyberduel::health::{apply_tick, is_defeated, unit_health, DownSet};
use cyberduel::ledger::{genesis, make_block, resolve, verify_chain, LedgerBlock};
use cyberduel::metrics::{
    cope, copm_total_of, copm_window, cpm, epm, hamming_distance, CommandEvent, MetricsSnapshot, BACKSPACE,
};
use cyberduel::model::{
    new_game, ClassPool, GameConfig, GameMode, GamePhase, GameState, Outcome, StatusCode, Timestamp,
};
use cyberduel::protocol::{
    decode, encode, CaptureSubmission, Channel, ClockView, Envelope, EventRecord, GameEvent, GameSnapshot, Message,
    OpponentInfo, Request, Response, ScoreUpdate, StatusReport, Topic, TopicFilter, UnitReport, UnitScore, Verdict,
};
use cyberduel::sim::{simulate, PlayerSpec, Role, ScriptAction, ScriptStep, SimConfig};
use cyberduel::transcript::Record;

fn running(config: GameConfig, players: usize, units: usize) -> GameState {
    let names: Vec<String> = (0..players).map(|i| format!("p{i}")).collect();
    let mut s = new_game("g", config, &names, &ClassPool::trial().classes, units).unwrap();
    s.phase = GamePhase::Running;
    s
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 _./;:\"'\\\\\u{e9}\u{1F642}-]{0,16}"
}

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,8}"
}

fn health() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 0.0..1e6f64, (0u64..0x7fef_ffff_ffff_ffff).prop_map(f64::from_bits)]
}

fn unit_report() -> impl Strategy<Value = UnitReport> {
    (any::<bool>(), "[0-9a-f]{64}", health(), any::<u16>()).prop_map(|(up, id, health, port)| UnitReport {
        code: if up { StatusCode::Up } else { StatusCode::Down },
        id,
        health,
        port,
    })
}

fn status_report() -> impl Strategy<Value = StatusReport> {
    (any::<u64>(), text(), name(), btree_map(text(), text(), 0..3), vec(unit_report(), 0..5)).prop_map(
        |(t, ip, player_name, cmds, units)| StatusReport {
            timestamp: Timestamp(t),
            ip,
            player_name,
            cmds,
            units,
        },
    )
}

fn score() -> impl Strategy<Value = ScoreUpdate> {
    (
        name(),
        any::<u64>(),
        vec((name(), any::<u16>(), health(), any::<bool>()), 0..4),
        health(),
        any::<usize>(),
        proptest::option::of(any::<u64>()),
    )
        .prop_map(|(player, tick, units, total_health, alive_units, clock)| ScoreUpdate {
            game_id: "g".into(),
            tick,
            player,
            units: units
                .into_iter()
                .map(|(unit_id, port, health, alive)| UnitScore {
                    unit_id,
                    port,
                    health,
                    alive,
                })
                .collect(),
            total_health,
            alive_units,
            clock_remaining_ms: clock,
        })
}

fn outcome() -> impl Strategy<Value = Outcome> {
    prop_oneof![Just(Outcome::Draw), name().prop_map(Outcome::Winner)]
}

fn game_event() -> impl Strategy<Value = GameEvent> {
    prop_oneof![
        vec(name(), 0..3).prop_map(|players| GameEvent::GameCreated { players }),
        Just(GameEvent::GameStarted),
        Just(GameEvent::Paused),
        Just(GameEvent::Resumed),
        (name(), name(), health(), any::<bool>()).prop_map(|(player, unit_id, health, alive)| {
            GameEvent::HealthChanged {
                player,
                unit_id,
                health,
                alive,
            }
        }),
        (name(), name(), name()).prop_map(|(attacker, owner, unit_id)| GameEvent::UnitCaptured {
            attacker,
            owner,
            unit_id
        }),
        (name(), name(), name()).prop_map(|(owner, old_unit_id, new_unit_id)| GameEvent::UnitReshuffled {
            owner,
            old_unit_id,
            new_unit_id
        }),
        name().prop_map(|player| GameEvent::PlayerDefeated { player }),
        (name(), name(), any::<u64>()).prop_map(|(player, next_active, remaining_ms)| GameEvent::ClockPressed {
            player,
            next_active,
            remaining_ms
        }),
        outcome().prop_map(|outcome| GameEvent::GameFinished { outcome }),
    ]
}

fn mode() -> impl Strategy<Value = GameMode> {
    prop_oneof![Just(GameMode::Objective), Just(GameMode::Time), Just(GameMode::Speed)]
}

fn snapshot() -> impl Strategy<Value = GameSnapshot> {
    (
        mode(),
        any::<bool>(),
        any::<u64>(),
        proptest::option::of(outcome()),
        vec(score(), 0..3),
        btree_map(name(), any::<u64>(), 0..3),
        proptest::option::of(any::<u64>()),
    )
        .prop_map(|(mode, paused, tick, outcome, players, remaining_ms, limit)| GameSnapshot {
            game_id: "g".into(),
            mode,
            phase: GamePhase::Running,
            paused,
            tick,
            outcome,
            players,
            clock: ClockView {
                mode,
                elapsed_ms: tick,
                time_limit_ms: limit,
                remaining_ms,
                active_player: None,
            },
        })
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        status_report().prop_map(Message::Status),
        (name(), any::<u64>(), text(), any::<bool>(), any::<bool>()).prop_map(|(p, t, line, key, valid)| {
            Message::Command(if key {
                CommandEvent::keystroke(&p, Timestamp(t), &line)
            } else {
                CommandEvent::submit(&p, Timestamp(t), &line, valid)
            })
        }),
        score().prop_map(Message::Score),
        (any::<u64>(), any::<u64>(), game_event()).prop_map(|(tick, at, event)| Message::Event(EventRecord {
            game_id: "g".into(),
            tick,
            at: Timestamp(at),
            event,
        })),
        (name(), name(), text()).prop_map(|(player, opponent, ip)| Message::Opponent(OpponentInfo {
            game_id: "g".into(),
            player,
            opponent,
            ip,
        })),
        snapshot().prop_map(Message::Snapshot),
    ]
}

fn request() -> impl Strategy<Value = Request> {
    let g = || name();
    prop_oneof![
        (g(), name(), text()).prop_map(|(game_id, player, host)| Request::Register { game_id, player, host }),
        (g(), name(), text()).prop_map(|(game_id, player, token)| Request::FetchRealm { game_id, player, token }),
        g().prop_map(|game_id| Request::Start { game_id }),
        g().prop_map(|game_id| Request::Pause { game_id }),
        g().prop_map(|game_id| Request::Resume { game_id }),
        (g(), name()).prop_map(|(game_id, player)| Request::ClockPress { game_id, player }),
        (g(), name(), text(), any::<u64>()).prop_map(|(game_id, attacker, claimed_fingerprint, t)| {
            Request::Capture(CaptureSubmission {
                game_id,
                attacker,
                claimed_fingerprint,
                timestamp: Timestamp(t),
            })
        }),
        (g(), name()).prop_map(|(game_id, player)| Request::OpponentAddress { game_id, player }),
        g().prop_map(|game_id| Request::Snapshot { game_id }),
    ]
}

fn response() -> impl Strategy<Value = Response> {
    prop_oneof![
        text().prop_map(|token| Response::Registered { token }),
        Just(Response::NotReady),
        any::<bool>().prop_map(|a| Response::Verdict(if a { Verdict::Accepted } else { Verdict::Rejected })),
        text().prop_map(|ip| Response::Address { ip }),
        snapshot().prop_map(Response::Snapshot),
        text().prop_map(|reason| Response::Rejected { reason }),
    ]
}

fn envelope() -> impl Strategy<Value = Envelope> {
    let channel = prop_oneof![
        Just(Channel::Status),
        Just(Channel::Score),
        Just(Channel::Opponent),
        Just(Channel::Events)
    ];
    prop_oneof![
        (name(), name(), channel, message()).prop_map(|(g, p, c, message)| Envelope::Publish {
            topic: Topic::new(&g, &p, c).unwrap(),
            message,
        }),
        name().prop_map(|g| Envelope::Subscribe {
            filter: TopicFilter::game(&g).unwrap()
        }),
        (any::<u64>(), request()).prop_map(|(id, request)| Envelope::Request { id, request }),
        (any::<u64>(), response()).prop_map(|(id, response)| Envelope::Response { id, response }),
    ]
}

fn chain(reports: &[StatusReport]) -> Vec<LedgerBlock> {
    let mut blocks: Vec<LedgerBlock> = Vec::new();
    for r in reports {
        let b = match blocks.last() {
            Some(prev) => make_block(prev, r, 0).unwrap(),
            None => genesis(r, 0).unwrap(),
        };
        blocks.push(b);
    }
    blocks
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_envelope_round_trips(env in envelope()) {
        let bytes = encode(&env).unwrap();
        let (back, used) = decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(&back, &env);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn opponents_form_a_derangement(n in 2usize..9, seed in any::<u64>()) {
        let s = running(GameConfig { rng_seed: seed, ..GameConfig::default() }, n, 2);
        let names: BTreeSet<&str> = s.players.iter().map(|p| p.name.as_str()).collect();
        let targets: BTreeSet<&str> = s.players.iter().map(|p| p.opponent.as_str()).collect();
        prop_assert_eq!(&names, &targets);
        prop_assert!(s.players.iter().all(|p| p.opponent != p.name));
        prop_assert!(s.players.iter().all(|p| p.realm.units.iter().all(|u| u.owner == p.name)));
        let total: usize = s.players.iter().map(|p| p.realm.units.len()).sum();
        prop_assert_eq!(total, n * 2);
    }

    #[test]
    fn same_seed_same_births(seed in any::<u64>()) {
        let a = running(GameConfig { rng_seed: seed, ..GameConfig::default() }, 2, 4);
        let b = running(GameConfig { rng_seed: seed, ..GameConfig::default() }, 2, 4);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn health_never_rises_and_never_goes_negative(
        ch in 1.0..300.0f64,
        dc in 0.01..10.0f64,
        steps in vec((vec(any::<bool>(), 3), 0.01..5.0f64), 1..40),
    ) {
        let mut s = running(GameConfig { default_health: ch, damage_constant: dc, ..GameConfig::default() }, 2, 3);
        let ids: Vec<String> = s.players[0].realm.units.iter().map(|u| u.unit_id.clone()).collect();
        let mut defeated = false;
        for (mask, dt) in steps {
            let down: Vec<&String> = ids.iter().zip(&mask).filter(|(_, d)| **d).map(|(id, _)| id).collect();
            let next = apply_tick(&s, &DownSet::new(s.tick, down.iter().map(|s| s.as_str())), dt).unwrap();
            for (a, b) in s.players[0].realm.units.iter().zip(&next.players[0].realm.units) {
                prop_assert!(b.health <= a.health);
                prop_assert!(b.health >= 0.0);
                prop_assert_eq!(b.alive, b.health > 0.0);
            }
            let now_defeated = is_defeated(&next, "p0").unwrap();
            prop_assert!(!defeated || now_defeated);
            defeated = now_defeated;
            s = next;
        }
    }

    #[test]
    fn continuous_down_time_is_linear(ch in 1.0..300.0f64, dc in 0.01..10.0f64, dts in vec(0.01..3.0f64, 1..60)) {
        let mut s = running(GameConfig { default_health: ch, damage_constant: dc, ..GameConfig::default() }, 2, 1);
        let id = s.players[0].realm.units[0].unit_id.clone();
        let mut t = 0.0;
        for dt in dts {
            s = apply_tick(&s, &DownSet::new(0, [id.as_str()]), dt).unwrap();
            t += dt;
            let want = (ch - t * dc).max(0.0);
            prop_assert!((s.players[0].realm.units[0].health - want).abs() <= 1e-9);
            prop_assert_eq!(unit_health(ch, t, dc), want);
        }
    }

    #[test]
    fn rate_metrics_are_consistent(
        keys in vec((0u64..600_000, prop_oneof![Just("a".to_string()), Just(BACKSPACE.to_string()), Just("Delete".to_string())]), 0..100),
        minutes in 0.1..30.0f64,
    ) {
        let events: Vec<CommandEvent> = keys.iter().map(|(t, k)| CommandEvent::keystroke("p", Timestamp(*t), k)).collect();
        prop_assert!(cpm(&events, minutes).unwrap() >= epm(&events, minutes).unwrap());
    }

    #[test]
    fn uniform_window_matches_whole_game(per_window in 1u64..20, windows in 1u64..30) {
        // per_window commands evenly spaced inside every 10 s window
        let gap = 10_000 / per_window;
        let end = windows * 10_000;
        let events: Vec<CommandEvent> = (0..windows)
            .flat_map(|w| (0..per_window).map(move |j| w * 10_000 + j * gap + 1))
            .map(|t| CommandEvent::submit("p", Timestamp(t), "ls", true))
            .collect();
        let total = copm_total_of(&events, end as f64 / 60_000.0).unwrap();
        let window = copm_window(&events, Timestamp(end));
        prop_assert!((total - window).abs() < 1e-9, "{} vs {}", total, window);
    }

    #[test]
    fn cope_at_least_one(entries in vec(text(), 1..20)) {
        prop_assert!(cope(&entries).unwrap() >= 1.0);
    }

    #[test]
    fn metrics_replay_identically(
        ev in vec((0u64..100_000, text(), any::<bool>()), 0..50),
    ) {
        let mut sorted = ev.clone();
        sorted.sort_by_key(|e| e.0);
        let events: Vec<CommandEvent> = sorted
            .iter()
            .filter(|(_, line, _)| !line.trim().is_empty())
            .map(|(t, line, valid)| CommandEvent::submit("p", Timestamp(*t), line, *valid))
            .collect();
        let a = MetricsSnapshot::compute("p", &events, Timestamp(0), Timestamp(100_000));
        let b = MetricsSnapshot::compute("p", &events, Timestamp(0), Timestamp(100_000));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.copm >= 0.0 && a.cpm >= 0.0 && a.epm >= 0.0 && a.consistency >= 0.0);
        prop_assert!(events.is_empty() || a.cope >= 1.0);
    }

    #[test]
    fn hamming_is_a_metric(s in vec((any::<u8>(), any::<u8>(), any::<u8>()), 0..30)) {
        let pick = |b: u8| ['a', 'b', ';', ' '][usize::from(b % 4)];
        let a: String = s.iter().map(|t| pick(t.0)).collect();
        let b: String = s.iter().map(|t| pick(t.1)).collect();
        let c: String = s.iter().map(|t| pick(t.2)).collect();
        let d = |x: &str, y: &str| hamming_distance(x, y).unwrap();
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &b) == 0, a == b);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        let longer = format!("{a}x");
        prop_assert!(hamming_distance(&a, &longer).is_err());
    }

    #[test]
    fn verified_prefix_stays_verified(reports in vec(status_report(), 1..8), more in vec(status_report(), 1..4)) {
        let mut blocks = chain(&reports);
        prop_assert!(verify_chain(&blocks, 0).valid);
        for r in &more {
            let b = make_block(blocks.last().unwrap(), r, 0).unwrap();
            blocks.push(b);
            prop_assert!(verify_chain(&blocks, 0).valid);
            prop_assert!(verify_chain(&blocks[..reports.len()], 0).valid);
        }
    }

    #[test]
    fn resolve_is_idempotent_and_order_free(
        chains in vec(vec(status_report(), 1..5), 1..5),
        rotate in 0usize..5,
        tamper in proptest::option::of(0usize..5),
    ) {
        let mut peers: Vec<Vec<LedgerBlock>> = chains.iter().map(|c| chain(c)).collect();
        if let Some(t) = tamper {
            let i = t % peers.len();
            peers[i][0].nonce ^= 1;
        }
        let Ok(best) = resolve(&peers, 0) else {
            prop_assert!(peers.iter().all(|p| !verify_chain(p, 0).valid));
            return Ok(());
        };
        let mut shuffled = peers.clone();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(&resolve(&shuffled, 0).unwrap(), &best);
        prop_assert_eq!(&resolve(&[best.clone(), best.clone()], 0).unwrap(), &best);
        let mut again = peers.clone();
        again.push(best.clone());
        prop_assert_eq!(&resolve(&again, 0).unwrap(), &best);
    }

    #[test]
    fn gating_only_lifts_the_preferred_phase(
        weights in vec(0.01..1.0f64, 5),
        who in any::<bool>(),
        what in any::<bool>(),
        boost in 1.0..10.0f64,
    ) {
        let total: f64 = weights.iter().sum();
        let row: BTreeMap<Phase, f64> = Phase::ALL.iter().zip(&weights).map(|(p, w)| (*p, w / total)).collect();
        let kb = KnowledgeBase {
            who: who.then(|| "x".into()),
            what: what.then(|| "3001".into()),
            ..KnowledgeBase::default()
        };
        let gated = gate(&row, &kb, boost);
        let s: f64 = gated.values().sum();
        prop_assert!((s - 1.0).abs() <= STOCHASTIC_TOLERANCE);
        let preferred = kb.preferred_phase();
        if let Some(p) = preferred {
            if boost > 1.0 {
                prop_assert!(gated[&p] > row[&p]);
            }
        } else {
            prop_assert_eq!(&gated, &row);
        }
        let others: Vec<Phase> = Phase::ALL.iter().copied().filter(|q| Some(*q) != preferred).collect();
        for a in &others {
            for b in &others {
                if row[a] < row[b] {
                    prop_assert!(gated[a] < gated[b]);
                }
            }
        }
    }

    #[test]
    fn penalties_keep_distributions_stochastic(seed in any::<u64>(), rounds in 1usize..30, won in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut brain = Brain::default_trained(3).unwrap();
        for _ in 0..rounds {
            let mut used = UsedActions::default();
            for (key, row) in brain.transitions.rows() {
                for to in row.keys() {
                    if rng.random_bool(0.5) {
                        used.transitions.insert((key.0, key.1, *to));
                    }
                }
            }
            for (phase, model) in &brain.models {
                for (ctx, dist) in model.contexts() {
                    for sym in dist.keys() {
                        if rng.random_bool(0.5) {
                            used.chars.entry(*phase).or_default().insert((ctx.clone(), *sym));
                        }
                    }
                }
            }
            let (models, transitions) = apply_outcome_penalty(&brain.models, &brain.transitions, &used, won, 0.1).unwrap();
            brain = Brain { transitions, models };
            prop_assert!(brain.validate().is_ok());
        }
    }

    #[test]
    fn generated_commands_hold_no_placeholders(seed in any::<u64>(), ip in "10\\.0\\.[0-9]{1,2}\\.[0-9]{1,2}", port in 1024u16..) {
        use rand::SeedableRng;
        let brain = Brain::default_trained(4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for model in brain.models.values() {
            let g = model.generate("", &Slots { ip: &ip, port }, Decode::Sample(&mut rng), 256).unwrap();
            prop_assert!(!g.text.contains(TARGET_IP) && !g.text.contains(TARGET_PORT), "{}", g.text);
            prop_assert!(!abstract_command(&g.text).contains(&Symbol::Start));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// With one unit per realm, a unit that stays down ends the game within
    /// default_health / dc seconds.
    #[test]
    fn a_dead_realm_ends_the_game_in_time(ch in 1.0..40.0f64, dc in 0.5..5.0f64, at in 1u64..5, seed in any::<u64>()) {
        let config = SimConfig {
            game: GameConfig { default_health: ch, damage_constant: dc, ..GameConfig::default() },
            units_per_player: 1,
            players: vec![
                PlayerSpec::new("alice", Role::Scripted(vec![ScriptStep::new(at, ScriptAction::KillOwnUnit(0))])),
                PlayerSpec::new("bob", Role::Idle),
            ],
            max_duration: Duration::from_secs(200),
            ..SimConfig::default()
        };
        let out = simulate(&config, seed).unwrap();
        prop_assert_eq!(out.outcome, Some(Outcome::Winner("bob".into())));
        // down from the report at `at`, charged in whole report intervals
        let bound = at as f64 + (ch / dc).ceil() + 1.0;
        prop_assert!(out.elapsed.as_secs_f64() <= bound, "{:?} > {}", out.elapsed, bound);
    }

    /// Health changes reach each events subscriber in tick order, and a
    /// capture never shows an intermediate health.
    #[test]
    fn events_arrive_in_tick_order(seed in any::<u64>()) {
        let attacker = Role::Scripted(vec![
            ScriptStep::new(2, ScriptAction::KillOpponentUnit(1)),
            ScriptStep::new(4, ScriptAction::Exploit(0)),
            ScriptStep::new(6, ScriptAction::Exploit(2)),
        ]);
        let config = SimConfig {
            game: GameConfig { default_health: 20.0, ..GameConfig::default() },
            players: vec![PlayerSpec::new("alice", attacker), PlayerSpec::new("bob", Role::Idle)],
            ..SimConfig::default()
        };
        let out = simulate(&config, seed).unwrap();
        let mut last_tick: BTreeMap<String, u64> = BTreeMap::new();
        let mut captured = BTreeSet::new();
        for r in &out.records {
            let Record::Message { topic, message: Message::Event(e), .. } = r else { continue };
            if topic.channel() != Channel::Events {
                continue;
            }
            let prev = last_tick.insert(topic.player().to_owned(), e.tick).unwrap_or(0);
            prop_assert!(e.tick >= prev);
            match &e.event {
                GameEvent::UnitCaptured { unit_id, .. } => { captured.insert(unit_id.clone()); }
                GameEvent::HealthChanged { unit_id, health, .. } if captured.contains(unit_id) => {
                    prop_assert_eq!(*health, 0.0);
                }
                _ => {}
            }
        }
        prop_assert_eq!(captured.len(), 2);
        prop_assert_eq!(out.outcome, Some(Outcome::Winner("alice".into())));
    }
}

#[test]
fn ten_thousand_fingerprints_are_distinct() {
    let s = running(GameConfig::default(), 100, 100);
    let fps: BTreeSet<String> = s
        .players
        .iter()
        .flat_map(|p| p.realm.units.iter())
        .map(|u| u.fingerprint.to_string())
        .collect();
    assert_eq!(fps.len(), 10_000);
}
