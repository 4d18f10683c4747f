//! Autonomous hacker. A small MDP over attack phases picks what to do next,
//! a per-phase character model writes the command, and a who/what/when/
//! where/why knowledge base steers the phase choice. Losing a game
//! penalizes everything the bot used during it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::daemon::{flag_from_reply, DaemonError, PlayerDaemon};
use crate::metrics::{shell_words, split_commands, CommandGrammar};
use crate::protocol::Verdict;

/// Row sums must land within this of 1.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;
pub const MAX_PHASES: usize = 5;
pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BOOST: f64 = 3.0;
pub const DEFAULT_MAX_LEN: usize = 256;
/// Extra attempts when a generated command fails the grammar.
pub const MAX_RETRIES: usize = 3;
/// Placeholder standing for the target's address in corpora.
pub const TARGET_IP: &str = "TARGET_IP";
pub const TARGET_PORT: &str = "TARGET_PORT";
/// Port emitted for [`Symbol::TargetPort`] when nothing better is known.
pub const FALLBACK_PORT: u16 = 3001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BotError {
    #[error("a phase set holds at most {MAX_PHASES} phases, got {0}")]
    TooManyPhases(usize),
    #[error("phase set is empty")]
    NoPhases,
    #[error("phase {0} listed twice")]
    DuplicatePhase(Phase),
    #[error("phase {0} is not in the phase set")]
    UnknownPhase(Phase),
    #[error("unknown phase name `{0}`")]
    PhaseName(String),
    #[error("transition row ({0}, {1:?}) is invalid: {2}")]
    InvalidRow(Phase, StepResult, String),
    #[error("distribution is invalid: {0}")]
    InvalidDistribution(String),
    #[error("empty corpus for phase {0}")]
    EmptyCorpus(Phase),
    #[error("model order must be at least 1")]
    ZeroOrder,
    #[error("model for phase {0} is untrained")]
    Untrained(Phase),
    #[error("penalty rate must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("boost factor must be at least 1, got {0}")]
    Boost(f64),
    #[error("corpus: {0}")]
    Corpus(String),
}

/// Attack phases. `Enumeration` is the scanning stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Recon,
    #[serde(alias = "scanning")]
    Enumeration,
    GainingAccess,
    MaintainingAccess,
    CoveringTracks,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Recon,
        Phase::Enumeration,
        Phase::GainingAccess,
        Phase::MaintainingAccess,
        Phase::CoveringTracks,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Recon => "recon",
            Phase::Enumeration => "enumeration",
            Phase::GainingAccess => "gaining_access",
            Phase::MaintainingAccess => "maintaining_access",
            Phase::CoveringTracks => "covering_tracks",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = BotError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "scanning" => Ok(Phase::Enumeration),
            _ => Phase::ALL
                .into_iter()
                .find(|p| p.as_str() == norm)
                .ok_or_else(|| BotError::PhaseName(s.to_owned())),
        }
    }
}

/// Ordered set of phases the bot moves between. The order breaks ties.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Phase>", into = "Vec<Phase>")]
pub struct PhaseSet(Vec<Phase>);

impl PhaseSet {
    pub fn new(phases: Vec<Phase>) -> Result<Self, BotError> {
        if phases.is_empty() {
            return Err(BotError::NoPhases);
        }
        if phases.len() > MAX_PHASES {
            return Err(BotError::TooManyPhases(phases.len()));
        }
        let mut seen = BTreeSet::new();
        for p in &phases {
            if !seen.insert(*p) {
                return Err(BotError::DuplicatePhase(*p));
            }
        }
        Ok(PhaseSet(phases))
    }

    /// Recon, Enumeration, GainingAccess.
    pub fn default_fsm() -> Self {
        PhaseSet(vec![Phase::Recon, Phase::Enumeration, Phase::GainingAccess])
    }

    pub fn phases(&self) -> &[Phase] {
        &self.0
    }

    pub fn contains(&self, p: Phase) -> bool {
        self.0.contains(&p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<Phase>> for PhaseSet {
    type Error = BotError;
    fn try_from(v: Vec<Phase>) -> Result<Self, Self::Error> {
        PhaseSet::new(v)
    }
}

impl From<PhaseSet> for Vec<Phase> {
    fn from(s: PhaseSet) -> Self {
        s.0
    }
}

/// The action part of a transition: did the last step get anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepResult {
    Progress,
    NoProgress,
}

impl StepResult {
    pub const ALL: [StepResult; 2] = [StepResult::Progress, StepResult::NoProgress];
}

fn check_distribution<K: fmt::Debug>(dist: &BTreeMap<K, f64>) -> Result<(), String> {
    if dist.is_empty() {
        return Err("empty".into());
    }
    if let Some((k, p)) = dist.iter().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        return Err(format!("bad probability {p} for {k:?}"));
    }
    let sum: f64 = dist.values().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

fn normalize<K>(dist: &mut BTreeMap<K, f64>) {
    let sum: f64 = dist.values().sum();
    if sum > 0.0 {
        for p in dist.values_mut() {
            *p /= sum;
        }
    }
}

/// p(s' | s, a) for every phase s and step result a.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    phases: PhaseSet,
    rows: BTreeMap<(Phase, StepResult), BTreeMap<Phase, f64>>,
}

impl TransitionModel {
    pub fn new(
        phases: PhaseSet,
        rows: BTreeMap<(Phase, StepResult), BTreeMap<Phase, f64>>,
    ) -> Result<Self, BotError> {
        let model = TransitionModel { phases, rows };
        model.validate()?;
        Ok(model)
    }

    pub fn uniform(phases: PhaseSet) -> Self {
        let p = 1.0 / phases.len() as f64;
        let row: BTreeMap<Phase, f64> = phases.phases().iter().map(|&s| (s, p)).collect();
        let rows = phases
            .phases()
            .iter()
            .flat_map(|&s| StepResult::ALL.map(|a| ((s, a), row.clone())))
            .collect();
        TransitionModel { phases, rows }
    }

    /// Progress mostly advances to the next phase; no progress mostly
    /// repeats the current one. The last phase keeps itself on progress.
    pub fn progression(phases: PhaseSet) -> Self {
        let list = phases.phases().to_vec();
        let n = list.len();
        let mut rows = BTreeMap::new();
        for (i, &s) in list.iter().enumerate() {
            let spread = |main: &[(Phase, f64)]| {
                let used: f64 = main.iter().map(|(_, p)| p).sum();
                let rest: Vec<Phase> = list
                    .iter()
                    .copied()
                    .filter(|q| !main.iter().any(|(m, _)| m == q))
                    .collect();
                let mut row: BTreeMap<Phase, f64> = main.iter().copied().collect();
                if rest.is_empty() {
                    normalize(&mut row);
                } else {
                    for q in &rest {
                        row.insert(*q, (1.0 - used) / rest.len() as f64);
                    }
                }
                row
            };
            let progress = if n == 1 {
                spread(&[(s, 1.0)])
            } else if i + 1 < n {
                spread(&[(list[i + 1], 0.7), (s, 0.2)])
            } else {
                spread(&[(s, 0.8)])
            };
            let stuck = if n == 1 { spread(&[(s, 1.0)]) } else { spread(&[(s, 0.5)]) };
            rows.insert((s, StepResult::Progress), progress);
            rows.insert((s, StepResult::NoProgress), stuck);
        }
        TransitionModel { phases, rows }
    }

    pub fn phases(&self) -> &PhaseSet {
        &self.phases
    }

    pub fn row(&self, s: Phase, a: StepResult) -> Option<&BTreeMap<Phase, f64>> {
        self.rows.get(&(s, a))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&(Phase, StepResult), &BTreeMap<Phase, f64>)> {
        self.rows.iter()
    }

    pub fn validate(&self) -> Result<(), BotError> {
        for &s in self.phases.phases() {
            for a in StepResult::ALL {
                let row = self
                    .rows
                    .get(&(s, a))
                    .ok_or_else(|| BotError::InvalidRow(s, a, "missing".into()))?;
                if let Some(q) = row.keys().find(|q| !self.phases.contains(**q)) {
                    return Err(BotError::InvalidRow(s, a, format!("targets {q} outside the set")));
                }
                check_distribution(row).map_err(|m| BotError::InvalidRow(s, a, m))?;
            }
        }
        if let Some(((s, _), _)) = self.rows.iter().find(|((s, _), _)| !self.phases.contains(*s)) {
            return Err(BotError::UnknownPhase(*s));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TransitionRow {
    from: Phase,
    result: StepResult,
    to: BTreeMap<Phase, f64>,
}

#[derive(Serialize, Deserialize)]
struct TransitionFile {
    phases: PhaseSet,
    rows: Vec<TransitionRow>,
}

impl Serialize for TransitionModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransitionFile {
            phases: self.phases.clone(),
            rows: self
                .rows
                .iter()
                .map(|(&(from, result), to)| TransitionRow {
                    from,
                    result,
                    to: to.clone(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TransitionModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = TransitionFile::deserialize(d)?;
        let rows = file.rows.into_iter().map(|r| ((r.from, r.result), r.to)).collect();
        TransitionModel::new(file.phases, rows).map_err(serde::de::Error::custom)
    }
}

/// Facts the bot has learned about its target.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    /// Target identity.
    pub who: Option<String>,
    /// Service map, e.g. open ports.
    pub what: Option<String>,
    pub when: Option<String>,
    /// Target address.
    pub r#where: Option<String>,
    /// Current objective.
    pub why: Option<String>,
}

impl KnowledgeBase {
    /// The phase the knowledge base prefers, if any.
    pub fn preferred_phase(&self) -> Option<Phase> {
        match (&self.who, &self.what) {
            (None, _) => Some(Phase::Recon),
            (Some(_), None) => Some(Phase::Enumeration),
            _ => None,
        }
    }
}

/// Multiplies the preferred phase's weight by `boost` and renormalizes.
pub fn gate(row: &BTreeMap<Phase, f64>, kb: &KnowledgeBase, boost: f64) -> BTreeMap<Phase, f64> {
    let mut out = row.clone();
    if let Some(p) = kb.preferred_phase() {
        if let Some(w) = out.get_mut(&p) {
            *w *= boost;
            normalize(&mut out);
        }
    }
    out
}

/// How to pick from a distribution.
pub enum Decode<'a> {
    /// Most likely outcome, ties to the earliest in order.
    Argmax,
    Sample(&'a mut dyn rand::RngCore),
}

fn sample_index(weights: &[f64], rng: &mut dyn rand::RngCore) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if x < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Next phase from the gated row for (current, result).
pub fn plan_next_state(
    kb: &KnowledgeBase,
    current: Phase,
    result: StepResult,
    transitions: &TransitionModel,
    boost: f64,
    decode: Decode<'_>,
) -> Result<Phase, BotError> {
    if boost < 1.0 || !boost.is_finite() {
        return Err(BotError::Boost(boost));
    }
    let row = transitions
        .row(current, result)
        .ok_or(BotError::UnknownPhase(current))?;
    check_distribution(row).map_err(BotError::InvalidDistribution)?;
    let gated = gate(row, kb, boost);
    // walk in phase-set order so ties go to the earlier phase
    let order: Vec<(Phase, f64)> = transitions
        .phases()
        .phases()
        .iter()
        .map(|p| (*p, gated.get(p).copied().unwrap_or(0.0)))
        .collect();
    let pick = match decode {
        Decode::Argmax => {
            let mut best = 0;
            for (i, (_, w)) in order.iter().enumerate() {
                if *w > order[best].1 {
                    best = i;
                }
            }
            best
        }
        Decode::Sample(rng) => {
            let weights: Vec<f64> = order.iter().map(|(_, w)| *w).collect();
            sample_index(&weights, rng)
        }
    };
    Ok(order[pick].0)
}

/// One step of the character model's alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symbol {
    /// Padding before the first character.
    Start,
    Char(char),
    /// The target address, expanded on emission.
    TargetIp,
    /// A service port, expanded on emission.
    TargetPort,
    End,
}

fn ip_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"<TARGET_IP>|TARGET_IP|\b(?:(?:25[0-5]|2[0-4]\d|1?\d?\d)\.){3}(?:25[0-5]|2[0-4]\d|1?\d?\d)\b")
            .expect("static pattern")
    })
}

fn port_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<TARGET_PORT>|TARGET_PORT|\d+").expect("static pattern"))
}

/// A standalone 4-5 digit token in the unprivileged range.
fn is_port_token(cmd: &str, start: usize, end: usize) -> bool {
    let text = &cmd[start..end];
    if text.contains("TARGET_PORT") {
        return true;
    }
    let spaced = |c: Option<char>| c.is_none_or(char::is_whitespace);
    (4..=5).contains(&text.len())
        && text.parse::<u32>().is_ok_and(|p| (1024..=65535).contains(&p))
        && spaced(cmd[..start].chars().next_back())
        && spaced(cmd[end..].chars().next())
}

/// Turns a command into symbols. IPv4 literals and `TARGET_IP` become
/// [`Symbol::TargetIp`]; standalone port numbers and `TARGET_PORT` become
/// [`Symbol::TargetPort`]. Port ranges such as `3001-3003` stay literal.
pub fn abstract_command(cmd: &str) -> Vec<Symbol> {
    let mut spans: Vec<(usize, usize, Symbol)> = ip_pattern()
        .find_iter(cmd)
        .map(|m| (m.start(), m.end(), Symbol::TargetIp))
        .collect();
    for m in port_pattern().find_iter(cmd) {
        let inside_ip = spans.iter().any(|&(a, b, _)| m.start() < b && a < m.end());
        if !inside_ip && is_port_token(cmd, m.start(), m.end()) {
            spans.push((m.start(), m.end(), Symbol::TargetPort));
        }
    }
    spans.sort_by_key(|s| s.0);
    let mut out = Vec::new();
    let mut last = 0;
    for (start, end, sym) in spans {
        out.extend(cmd[last..start].chars().map(Symbol::Char));
        out.push(sym);
        last = end;
    }
    out.extend(cmd[last..].chars().map(Symbol::Char));
    out
}

/// Values substituted for placeholder symbols during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slots<'a> {
    pub ip: &'a str,
    pub port: u16,
}

impl<'a> Slots<'a> {
    pub fn ip(ip: &'a str) -> Self {
        Slots { ip, port: FALLBACK_PORT }
    }
}

/// Order-k character model for one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct CharModel {
    pub phase: Phase,
    pub order: usize,
    table: BTreeMap<Vec<Symbol>, BTreeMap<Symbol, f64>>,
}

/// One generated command plus the table entries it used.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub used: Vec<(Vec<Symbol>, Symbol)>,
}

impl CharModel {
    fn start_context(&self) -> Vec<Symbol> {
        vec![Symbol::Start; self.order]
    }

    fn shift(context: &mut Vec<Symbol>, s: Symbol) {
        context.remove(0);
        context.push(s);
    }

    pub fn distribution(&self, context: &[Symbol]) -> Option<&BTreeMap<Symbol, f64>> {
        self.table.get(context)
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&Vec<Symbol>, &BTreeMap<Symbol, f64>)> {
        self.table.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn validate(&self) -> Result<(), BotError> {
        for (ctx, dist) in &self.table {
            check_distribution(dist)
                .map_err(|m| BotError::InvalidDistribution(format!("context {ctx:?}: {m}")))?;
        }
        Ok(())
    }

    /// Continues `prefix` until END, an unseen context, or `max_len`
    /// output characters.
    pub fn generate(
        &self,
        prefix: &str,
        slots: &Slots<'_>,
        mut decode: Decode<'_>,
        max_len: usize,
    ) -> Result<Generation, BotError> {
        if self.table.is_empty() {
            return Err(BotError::Untrained(self.phase));
        }
        let mut context = self.start_context();
        let mut text = String::new();
        for s in abstract_command(prefix) {
            match s {
                Symbol::Char(c) => text.push(c),
                Symbol::TargetPort => text.push_str(&slots.port.to_string()),
                _ => text.push_str(slots.ip),
            }
            Self::shift(&mut context, s);
        }
        let mut used = Vec::new();
        while text.chars().count() < max_len {
            let Some(dist) = self.table.get(&context) else { break };
            let next = match &mut decode {
                Decode::Argmax => {
                    let mut best: Option<(Symbol, f64)> = None;
                    for (s, p) in dist {
                        if best.is_none_or(|(_, bp)| *p > bp) {
                            best = Some((*s, *p));
                        }
                    }
                    best.expect("nonempty row").0
                }
                Decode::Sample(rng) => {
                    let symbols: Vec<Symbol> = dist.keys().copied().collect();
                    let weights: Vec<f64> = dist.values().copied().collect();
                    symbols[sample_index(&weights, *rng)]
                }
            };
            used.push((context.clone(), next));
            match next {
                Symbol::End => break,
                Symbol::Char(c) => text.push(c),
                Symbol::TargetIp => text.push_str(slots.ip),
                Symbol::TargetPort => text.push_str(&slots.port.to_string()),
                Symbol::Start => break,
            }
            Self::shift(&mut context, next);
        }
        let text: String = text.chars().take(max_len).collect();
        Ok(Generation { text, used })
    }
}

/// Counts (context → next symbol) over the corpus and normalizes each
/// context.
pub fn train_char_model(phase: Phase, corpus: &[String], order: usize) -> Result<CharModel, BotError> {
    if order == 0 {
        return Err(BotError::ZeroOrder);
    }
    let lines: Vec<&String> = corpus.iter().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(BotError::EmptyCorpus(phase));
    }
    let mut counts: BTreeMap<Vec<Symbol>, BTreeMap<Symbol, f64>> = BTreeMap::new();
    for line in lines {
        let mut context = vec![Symbol::Start; order];
        let mut symbols = abstract_command(line.trim());
        symbols.push(Symbol::End);
        for s in symbols {
            *counts.entry(context.clone()).or_default().entry(s).or_default() += 1.0;
            CharModel::shift(&mut context, s);
        }
    }
    for dist in counts.values_mut() {
        normalize(dist);
    }
    Ok(CharModel {
        phase,
        order,
        table: counts,
    })
}

/// Generates one command with `model`; see [`CharModel::generate`].
pub fn policy_predict(
    model: &CharModel,
    prefix: &str,
    target_ip: &str,
    decode: Decode<'_>,
) -> Result<String, BotError> {
    Ok(model.generate(prefix, &Slots::ip(target_ip), decode, DEFAULT_MAX_LEN)?.text)
}

#[derive(Serialize, Deserialize)]
struct ContextRow {
    context: Vec<Symbol>,
    next: Vec<(Symbol, f64)>,
}

#[derive(Serialize, Deserialize)]
struct CharModelFile {
    phase: Phase,
    order: usize,
    table: Vec<ContextRow>,
}

impl Serialize for CharModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        CharModelFile {
            phase: self.phase,
            order: self.order,
            table: self
                .table
                .iter()
                .map(|(c, d)| ContextRow {
                    context: c.clone(),
                    next: d.iter().map(|(s, p)| (*s, *p)).collect(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CharModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = CharModelFile::deserialize(d)?;
        let model = CharModel {
            phase: file.phase,
            order: file.order,
            table: file
                .table
                .into_iter()
                .map(|r| (r.context, r.next.into_iter().collect()))
                .collect(),
        };
        model.validate().map_err(serde::de::Error::custom)?;
        Ok(model)
    }
}

/// Everything the bot touched during one game.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UsedActions {
    pub transitions: BTreeSet<(Phase, StepResult, Phase)>,
    pub chars: BTreeMap<Phase, BTreeSet<(Vec<Symbol>, Symbol)>>,
}

impl UsedActions {
    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty() && self.chars.values().all(BTreeSet::is_empty)
    }
}

/// On a loss, scales every used entry by `1 - alpha` once and renormalizes
/// its row. A win changes nothing.
pub fn apply_outcome_penalty(
    models: &BTreeMap<Phase, CharModel>,
    transitions: &TransitionModel,
    used: &UsedActions,
    won: bool,
    alpha: f64,
) -> Result<(BTreeMap<Phase, CharModel>, TransitionModel), BotError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BotError::Alpha(alpha));
    }
    let mut models = models.clone();
    let mut transitions = transitions.clone();
    if won {
        return Ok((models, transitions));
    }
    let keep = 1.0 - alpha;
    let mut touched_rows = BTreeSet::new();
    for &(s, a, next) in &used.transitions {
        if let Some(w) = transitions.rows.get_mut(&(s, a)).and_then(|r| r.get_mut(&next)) {
            *w *= keep;
            touched_rows.insert((s, a));
        }
    }
    for key in touched_rows {
        if let Some(row) = transitions.rows.get_mut(&key) {
            normalize(row);
        }
    }
    for (phase, entries) in &used.chars {
        let Some(model) = models.get_mut(phase) else { continue };
        let mut touched = BTreeSet::new();
        for (ctx, sym) in entries {
            if let Some(w) = model.table.get_mut(ctx).and_then(|d| d.get_mut(sym)) {
                *w *= keep;
                touched.insert(ctx.clone());
            }
        }
        for ctx in touched {
            if let Some(d) = model.table.get_mut(&ctx) {
                normalize(d);
            }
        }
    }
    Ok((models, transitions))
}

/// Built-in commands per phase, keyed to the trial unit pool.
pub fn default_corpus() -> BTreeMap<Phase, Vec<String>> {
    let lines = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    BTreeMap::from([
        (
            Phase::Recon,
            lines(&[
                "getip",
                "host TARGET_IP",
                "whois TARGET_IP",
                "ping -c 1 TARGET_IP",
                "dig TARGET_IP",
            ]),
        ),
        (
            Phase::Enumeration,
            lines(&[
                "nmap -Pn TARGET_IP",
                "nmap -sV -p 3001-3003 TARGET_IP",
                "nc TARGET_IP 3001",
                "nc TARGET_IP 3002",
                "nc TARGET_IP 3003",
            ]),
        ),
        (
            Phase::GainingAccess,
            lines(&[
                "exploit -p 3001 -k qs-exec TARGET_IP",
                "exploit -p 3002 -k form-inject TARGET_IP",
                "exploit -p 3003 -k ping-inject TARGET_IP",
            ]),
        ),
        (
            Phase::MaintainingAccess,
            lines(&["ssh root@TARGET_IP", "whoami", "id", "uname -a"]),
        ),
        (
            Phase::CoveringTracks,
            lines(&["echo > /var/log/auth.log", "ls /tmp", "find /tmp -name flag"]),
        ),
    ])
}

/// Reads `<dir>/<phase>/*` (or `<dir>/<phase>.txt`), one command per line.
/// Lines starting with `#` are comments.
pub fn load_corpus(dir: &Path) -> Result<BTreeMap<Phase, Vec<String>>, BotError> {
    let err = |e: std::io::Error| BotError::Corpus(format!("{}: {e}", dir.display()));
    let mut out: BTreeMap<Phase, Vec<String>> = BTreeMap::new();
    let mut entries: Vec<_> = fs::read_dir(dir).map_err(err)?.collect::<Result<_, _>>().map_err(err)?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_owned();
        let Ok(phase) = stem.parse::<Phase>() else {
            debug!(path = %path.display(), "skipping non-phase corpus entry");
            continue;
        };
        let files: Vec<std::path::PathBuf> = if path.is_dir() {
            let mut f: Vec<_> = fs::read_dir(&path)
                .map_err(err)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            f.sort();
            f
        } else {
            vec![path]
        };
        for file in files {
            let text = fs::read_to_string(&file).map_err(err)?;
            out.entry(phase).or_default().extend(
                text.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(str::to_owned),
            );
        }
    }
    if out.is_empty() {
        return Err(BotError::Corpus(format!("{}: no phase corpora found", dir.display())));
    }
    Ok(out)
}

/// The bot's learned state: transitions plus one model per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Brain {
    pub transitions: TransitionModel,
    pub models: BTreeMap<Phase, CharModel>,
}

impl Brain {
    /// Trains a model per phase that has a corpus. Phases follow canonical
    /// order.
    pub fn train(corpus: &BTreeMap<Phase, Vec<String>>, order: usize) -> Result<Self, BotError> {
        let phases: Vec<Phase> = Phase::ALL
            .into_iter()
            .filter(|p| corpus.get(p).is_some_and(|c| !c.is_empty()))
            .collect();
        let set = PhaseSet::new(phases)?;
        let mut models = BTreeMap::new();
        for &p in set.phases() {
            models.insert(p, train_char_model(p, &corpus[&p], order)?);
        }
        Ok(Brain {
            transitions: TransitionModel::progression(set),
            models,
        })
    }

    /// Default brain over Recon, Enumeration and GainingAccess.
    pub fn default_trained(order: usize) -> Result<Self, BotError> {
        let mut corpus = default_corpus();
        corpus.retain(|p, _| PhaseSet::default_fsm().contains(*p));
        Self::train(&corpus, order)
    }

    pub fn validate(&self) -> Result<(), BotError> {
        self.transitions.validate()?;
        for p in self.transitions.phases().phases() {
            self.models.get(p).ok_or(BotError::Untrained(*p))?.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BotConfig {
    pub seed: u64,
    pub alpha: f64,
    pub boost: f64,
    /// Sample the next phase instead of taking the argmax.
    pub sample_phases: bool,
    /// Sample characters (the default) or take the argmax.
    pub sample_chars: bool,
    pub max_len: usize,
    /// Ports tried by `nmap` without an explicit `-p`.
    pub scan_ports: Vec<u16>,
    pub grammar: CommandGrammar,
}

impl Default for BotConfig {
    fn default() -> Self {
        BotConfig {
            seed: 0,
            alpha: DEFAULT_ALPHA,
            boost: DEFAULT_BOOST,
            sample_phases: false,
            sample_chars: true,
            max_len: DEFAULT_MAX_LEN,
            scan_ports: (3001..=3010).collect(),
            grammar: CommandGrammar::default(),
        }
    }
}

/// What one decision step did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotStep {
    pub phase: Phase,
    pub command: String,
    pub valid: bool,
    pub result: StepResult,
    pub outcome: String,
}

/// A running bot bound to one game.
pub struct Bot {
    config: BotConfig,
    brain: Brain,
    kb: KnowledgeBase,
    phase: Phase,
    last: StepResult,
    rng: ChaCha8Rng,
    used: UsedActions,
    captured: BTreeSet<String>,
    /// Ports whose unit has been taken, or that refused a connection.
    spent_ports: BTreeSet<u16>,
    port_cursor: usize,
}

impl Bot {
    pub fn new(brain: Brain, config: BotConfig) -> Result<Self, BotError> {
        brain.validate()?;
        if !(config.alpha > 0.0 && config.alpha < 1.0) {
            return Err(BotError::Alpha(config.alpha));
        }
        let phase = brain.transitions.phases().phases()[0];
        Ok(Bot {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            kb: KnowledgeBase {
                why: Some("capture opponent units".into()),
                ..KnowledgeBase::default()
            },
            phase,
            last: StepResult::NoProgress,
            used: UsedActions::default(),
            captured: BTreeSet::new(),
            spent_ports: BTreeSet::new(),
            port_cursor: 0,
            brain,
            config,
        })
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn brain(&self) -> &Brain {
        &self.brain
    }

    pub fn used(&self) -> &UsedActions {
        &self.used
    }

    pub fn captured(&self) -> &BTreeSet<String> {
        &self.captured
    }

    /// One decision: plan, write a command, type it, run it.
    pub fn step(&mut self, daemon: &mut PlayerDaemon) -> Result<BotStep, DaemonError> {
        let decode = if self.config.sample_phases {
            Decode::Sample(&mut self.rng)
        } else {
            Decode::Argmax
        };
        let next = plan_next_state(
            &self.kb,
            self.phase,
            self.last,
            &self.brain.transitions,
            self.config.boost,
            decode,
        )
        .expect("brain validated at construction");
        self.used.transitions.insert((self.phase, self.last, next));
        self.phase = next;

        let target = self.kb.r#where.clone().unwrap_or_else(|| "0.0.0.0".into());
        let slots = Slots {
            ip: &target,
            port: self.next_port(),
        };
        let model = &self.brain.models[&next];
        let mut command = String::new();
        let mut valid = false;
        for _ in 0..=MAX_RETRIES {
            let decode = if self.config.sample_chars {
                Decode::Sample(&mut self.rng)
            } else {
                Decode::Argmax
            };
            let generation = model
                .generate("", &slots, decode, self.config.max_len)
                .expect("trained model");
            self.used
                .chars
                .entry(next)
                .or_default()
                .extend(generation.used.iter().cloned());
            command = generation.text;
            valid = self.config.grammar.is_valid(&command);
            if valid {
                break;
            }
        }
        for c in command.chars() {
            daemon.keystroke(&c.to_string())?;
        }
        daemon.submit_command(&command, valid)?;
        let (result, outcome) = if valid {
            self.execute(daemon, &command)?
        } else {
            (StepResult::NoProgress, "invalid command".to_owned())
        };
        self.last = result;
        debug!(phase = %next, %command, ?result, "bot step");
        Ok(BotStep {
            phase: next,
            command,
            valid,
            result,
            outcome,
        })
    }

    fn known_ports(&self) -> BTreeSet<u16> {
        self.kb
            .what
            .as_deref()
            .unwrap_or_default()
            .split(',')
            .filter_map(|p| p.parse().ok())
            .collect()
    }

    /// Rotates through open ports not yet taken, falling back to the scan
    /// list when every known port is spent.
    fn next_port(&mut self) -> u16 {
        let fresh = |ports: Vec<u16>| -> Vec<u16> { ports.into_iter().filter(|p| !self.spent_ports.contains(p)).collect() };
        let mut candidates = fresh(self.known_ports().into_iter().collect());
        if candidates.is_empty() {
            candidates = fresh(self.config.scan_ports.clone());
        }
        if candidates.is_empty() {
            return self.config.scan_ports.first().copied().unwrap_or(FALLBACK_PORT);
        }
        let port = candidates[self.port_cursor % candidates.len()];
        self.port_cursor = self.port_cursor.wrapping_add(1);
        port
    }

    fn is_target(&self, ip: &str) -> bool {
        self.kb.r#where.as_deref() == Some(ip)
    }

    /// Interprets each `;`-separated command against the daemon.
    fn execute(&mut self, daemon: &mut PlayerDaemon, line: &str) -> Result<(StepResult, String), DaemonError> {
        let mut result = StepResult::NoProgress;
        let mut outcomes = Vec::new();
        for cmd in split_commands(line) {
            let words = shell_words(cmd);
            let Some(head) = words.first() else { continue };
            let (r, out) = self.execute_one(daemon, head, &words[1..])?;
            if r == StepResult::Progress {
                result = r;
            }
            outcomes.push(out);
        }
        Ok((result, outcomes.join("; ")))
    }

    fn learn_target(&mut self, daemon: &mut PlayerDaemon) -> Result<StepResult, DaemonError> {
        let ip = daemon.get_opponent_ip()?;
        let who = daemon.opponent().map(str::to_owned);
        let fresh = self.kb.r#where.as_deref() != Some(ip.as_str()) || self.kb.who != who;
        self.kb.r#where = Some(ip);
        self.kb.who = who;
        if self.kb.when.is_none() {
            self.kb.when = Some(daemon.now().to_string());
        }
        Ok(if fresh { StepResult::Progress } else { StepResult::NoProgress })
    }

    fn note_ports(&mut self, ports: &[u16]) -> StepResult {
        let mut known = self.known_ports();
        let before = known.len();
        known.extend(ports.iter().copied());
        if known.is_empty() {
            return StepResult::NoProgress;
        }
        self.kb.what = Some(known.iter().map(u16::to_string).collect::<Vec<_>>().join(","));
        if known.len() > before {
            StepResult::Progress
        } else {
            StepResult::NoProgress
        }
    }

    fn execute_one(
        &mut self,
        daemon: &mut PlayerDaemon,
        head: &str,
        args: &[String],
    ) -> Result<(StepResult, String), DaemonError> {
        let last_ip = args.iter().rev().find(|a| ip_pattern().is_match(a)).cloned();
        let port_arg = |flag: &str| -> Option<u16> {
            args.iter()
                .position(|a| a == flag)
                .and_then(|i| args.get(i + 1))
                .and_then(|p| p.parse().ok())
        };
        let bare_port = || args.iter().find_map(|a| a.parse::<u16>().ok());
        match head {
            "getip" | "host" | "whois" | "dig" | "ping" => {
                let r = self.learn_target(daemon)?;
                Ok((r, format!("target {}", self.kb.r#where.clone().unwrap_or_default())))
            }
            "nmap" => {
                let Some(ip) = last_ip.filter(|ip| self.is_target(ip)) else {
                    return Ok((StepResult::NoProgress, "no route".into()));
                };
                let candidates = match args.iter().position(|a| a == "-p").and_then(|i| args.get(i + 1)) {
                    Some(spec) => parse_port_spec(spec),
                    None => self.config.scan_ports.clone(),
                };
                let open = daemon.scan(&ip, &candidates);
                let r = self.note_ports(&open);
                Ok((r, format!("open {open:?}")))
            }
            "nc" => {
                let (Some(ip), Some(port)) = (last_ip.filter(|ip| self.is_target(ip)), args.get(1).and_then(|p| p.parse::<u16>().ok()))
                else {
                    return Ok((StepResult::NoProgress, "no route".into()));
                };
                let open = daemon.scan(&ip, &[port]);
                if open.is_empty() {
                    self.spent_ports.insert(port);
                }
                let r = self.note_ports(&open);
                Ok((r, if open.is_empty() { "closed".into() } else { "open".into() }))
            }
            "exploit" => {
                let key = args
                    .iter()
                    .position(|a| a == "-k")
                    .and_then(|i| args.get(i + 1))
                    .cloned();
                let (Some(port), Some(key), Some(_)) = (port_arg("-p"), key, last_ip.filter(|ip| self.is_target(ip)))
                else {
                    return Ok((StepResult::NoProgress, "usage".into()));
                };
                let reply = daemon.attack_unit(port, "key-guess", Some(&key))?;
                match flag_from_reply(&reply).map(str::to_owned) {
                    Some(flag) => {
                        self.spent_ports.insert(port);
                        self.capture(daemon, &flag)
                    }
                    None => {
                        if reply.starts_with("error") {
                            self.spent_ports.insert(port);
                        }
                        Ok((StepResult::NoProgress, reply))
                    }
                }
            }
            "capture" => match args.first() {
                Some(flag) if flag_from_reply(&format!("flag {flag}")).is_some() => {
                    self.capture(daemon, &flag.clone())
                }
                _ => Ok((StepResult::NoProgress, "malformed".into())),
            },
            "killsvc" | "flood" => {
                let (Some(_), Some(port)) = (last_ip.filter(|ip| self.is_target(ip)), bare_port()) else {
                    return Ok((StepResult::NoProgress, "no route".into()));
                };
                let template = if head == "killsvc" { "kill-request" } else { "liveness-flood" };
                let reply = daemon.attack_unit(port, template, None)?;
                let r = if reply == "bye" { StepResult::Progress } else { StepResult::NoProgress };
                Ok((r, reply))
            }
            _ => Ok((StepResult::NoProgress, "ok".into())),
        }
    }

    fn capture(&mut self, daemon: &mut PlayerDaemon, flag: &str) -> Result<(StepResult, String), DaemonError> {
        if self.captured.contains(flag) {
            return Ok((StepResult::NoProgress, "already captured".into()));
        }
        match daemon.capture_unit(flag) {
            Ok(Verdict::Accepted) => {
                self.captured.insert(flag.to_owned());
                Ok((StepResult::Progress, "captured".into()))
            }
            Ok(Verdict::Rejected) => {
                self.captured.insert(flag.to_owned());
                Ok((StepResult::NoProgress, "capture rejected".into()))
            }
            Err(DaemonError::Rejected(reason)) => Ok((StepResult::NoProgress, reason)),
            Err(e) => Err(e),
        }
    }

    /// Applies the game outcome to the brain and clears the usage record.
    pub fn finish(&mut self, won: bool) -> Result<(), BotError> {
        let (models, transitions) = apply_outcome_penalty(
            &self.brain.models,
            &self.brain.transitions,
            &self.used,
            won,
            self.config.alpha,
        )?;
        self.brain = Brain { transitions, models };
        self.used = UsedActions::default();
        Ok(())
    }
}

/// `3001`, `3001-3003` or `3001,3005`.
pub fn parse_port_spec(spec: &str) -> Vec<u16> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        match part.split_once('-') {
            Some((a, b)) => {
                if let (Ok(a), Ok(b)) = (a.parse::<u16>(), b.parse::<u16>()) {
                    if a <= b && b - a <= 1024 {
                        out.extend(a..=b);
                    }
                }
            }
            None => out.extend(part.parse::<u16>().ok()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn phase_set_limits() {
        assert!(PhaseSet::new(Phase::ALL.to_vec()).is_ok());
        assert_eq!(PhaseSet::new(vec![]), Err(BotError::NoPhases));
        assert_eq!(
            PhaseSet::new(vec![Phase::Recon, Phase::Recon]),
            Err(BotError::DuplicatePhase(Phase::Recon))
        );
        let mut six = Phase::ALL.to_vec();
        six.push(Phase::Recon);
        assert_eq!(PhaseSet::new(six), Err(BotError::TooManyPhases(6)));
        assert_eq!("scanning".parse::<Phase>().unwrap(), Phase::Enumeration);
        assert_eq!("gaining-access".parse::<Phase>().unwrap(), Phase::GainingAccess);
    }

    #[test]
    fn empty_kb_uniform_prefers_recon() {
        let t = TransitionModel::uniform(PhaseSet::default_fsm());
        let kb = KnowledgeBase::default();
        let p = plan_next_state(&kb, Phase::GainingAccess, StepResult::Progress, &t, 3.0, Decode::Argmax);
        assert_eq!(p.unwrap(), Phase::Recon);
    }

    #[test]
    fn who_known_prefers_enumeration() {
        let t = TransitionModel::uniform(PhaseSet::default_fsm());
        let kb = KnowledgeBase {
            who: Some("bob".into()),
            ..Default::default()
        };
        let p = plan_next_state(&kb, Phase::Recon, StepResult::Progress, &t, 3.0, Decode::Argmax);
        assert_eq!(p.unwrap(), Phase::Enumeration);
    }

    #[test]
    fn point_mass_wins_with_full_kb() {
        let set = PhaseSet::default_fsm();
        let mut rows = BTreeMap::new();
        for &s in set.phases() {
            for a in StepResult::ALL {
                rows.insert((s, a), BTreeMap::from([(Phase::GainingAccess, 1.0)]));
            }
        }
        let t = TransitionModel::new(set, rows).unwrap();
        let kb = KnowledgeBase {
            who: Some("bob".into()),
            what: Some("3001".into()),
            ..Default::default()
        };
        let p = plan_next_state(&kb, Phase::Recon, StepResult::NoProgress, &t, 3.0, Decode::Argmax);
        assert_eq!(p.unwrap(), Phase::GainingAccess);
    }

    #[test]
    fn invalid_rows_rejected() {
        let set = PhaseSet::default_fsm();
        let mut rows = BTreeMap::new();
        for &s in set.phases() {
            for a in StepResult::ALL {
                rows.insert((s, a), BTreeMap::from([(Phase::Recon, 0.5)]));
            }
        }
        assert!(matches!(TransitionModel::new(set, rows), Err(BotError::InvalidRow(..))));
    }

    #[test]
    fn nmap_example_argmax() {
        let m = train_char_model(Phase::Enumeration, &corpus(&["nmap -Pn <TARGET_IP>"]), 4).unwrap();
        let out = policy_predict(&m, "", "192.168.10.2", Decode::Argmax).unwrap();
        assert_eq!(out, "nmap -Pn 192.168.10.2");
    }

    #[test]
    fn ip_literals_are_abstracted() {
        let m = train_char_model(Phase::Enumeration, &corpus(&["nmap -Pn 10.1.2.3"]), 4).unwrap();
        let out = policy_predict(&m, "", "172.16.0.9", Decode::Argmax).unwrap();
        assert_eq!(out, "nmap -Pn 172.16.0.9");
        assert!(!out.contains(TARGET_IP));
    }

    #[test]
    fn ports_are_abstracted_but_ranges_kept() {
        use Symbol::*;
        let syms = abstract_command("nc 10.0.0.2 3004");
        assert_eq!(&syms[syms.len() - 3..], &[TargetIp, Char(' '), TargetPort]);
        assert!(!abstract_command("nmap -p 3001-3003 TARGET_IP").contains(&TargetPort));
        assert!(!abstract_command("ping -c 1 x").contains(&TargetPort));
        let m = train_char_model(Phase::GainingAccess, &corpus(&["exploit -p 3001 -k a TARGET_IP"]), 4).unwrap();
        let g = m
            .generate("", &Slots { ip: "10.0.0.9", port: 3007 }, Decode::Argmax, 64)
            .unwrap();
        assert_eq!(g.text, "exploit -p 3007 -k a 10.0.0.9");
    }

    #[test]
    fn single_command_verbatim() {
        let m = train_char_model(Phase::Recon, &corpus(&["whoami"]), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(policy_predict(&m, "", "x", Decode::Sample(&mut rng)).unwrap(), "whoami");
    }

    #[test]
    fn ls_ls_ends_with_certainty() {
        let m = train_char_model(Phase::Recon, &corpus(&["ls", "ls"]), 4).unwrap();
        let ctx = vec![Symbol::Start, Symbol::Start, Symbol::Char('l'), Symbol::Char('s')];
        assert_eq!(m.distribution(&ctx).unwrap(), &BTreeMap::from([(Symbol::End, 1.0)]));
    }

    #[test]
    fn ab_ac_split_evenly() {
        let m = train_char_model(Phase::Recon, &corpus(&["ab", "ac"]), 1).unwrap();
        let d = m.distribution(&[Symbol::Char('a')]).unwrap();
        assert_eq!(d[&Symbol::Char('b')], 0.5);
        assert_eq!(d[&Symbol::Char('c')], 0.5);
    }

    #[test]
    fn seeded_generation_repeats() {
        let m = train_char_model(Phase::GainingAccess, &default_corpus()[&Phase::GainingAccess], 4).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| policy_predict(&m, "", "10.0.0.2", Decode::Sample(&mut rng)).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn generation_respects_max_len() {
        let m = train_char_model(Phase::Recon, &corpus(&["aaaaaaaa"]), 1).unwrap();
        let g = m.generate("", &Slots::ip("x"), Decode::Argmax, 5).unwrap();
        assert_eq!(g.text, "aaaaa");
    }

    #[test]
    fn untrained_and_empty_rejected() {
        assert_eq!(
            train_char_model(Phase::Recon, &[], 4),
            Err(BotError::EmptyCorpus(Phase::Recon))
        );
        assert_eq!(train_char_model(Phase::Recon, &corpus(&["ls"]), 0), Err(BotError::ZeroOrder));
    }

    #[test]
    fn penalty_hand_computed() {
        // row {Recon: 0.5, Enumeration: 0.5}; penalize Recon at alpha 0.5
        let set = PhaseSet::new(vec![Phase::Recon, Phase::Enumeration]).unwrap();
        let t = TransitionModel::uniform(set);
        let used = UsedActions {
            transitions: BTreeSet::from([(Phase::Recon, StepResult::Progress, Phase::Recon)]),
            chars: BTreeMap::new(),
        };
        let (_, won) = apply_outcome_penalty(&BTreeMap::new(), &t, &used, true, 0.5).unwrap();
        assert_eq!(won, t);
        let (_, lost) = apply_outcome_penalty(&BTreeMap::new(), &t, &used, false, 0.5).unwrap();
        let row = lost.row(Phase::Recon, StepResult::Progress).unwrap();
        // 0.25 / 0.75 and 0.5 / 0.75
        assert!((row[&Phase::Recon] - 1.0 / 3.0).abs() < 1e-12);
        assert!((row[&Phase::Enumeration] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            lost.row(Phase::Recon, StepResult::NoProgress),
            t.row(Phase::Recon, StepResult::NoProgress)
        );
        assert!(apply_outcome_penalty(&BTreeMap::new(), &t, &used, false, 1.0).is_err());
    }

    #[test]
    fn brain_round_trips_through_json() {
        let brain = Brain::default_trained(4).unwrap();
        let text = serde_json::to_string(&brain).unwrap();
        let back: Brain = serde_json::from_str(&text).unwrap();
        assert_eq!(back, brain);
    }

    #[test]
    fn progression_rows_valid() {
        for n in 1..=5 {
            let set = PhaseSet::new(Phase::ALL[..n].to_vec()).unwrap();
            TransitionModel::progression(set).validate().unwrap();
        }
    }

    #[test]
    fn default_corpus_is_grammatical() {
        let g = CommandGrammar::default();
        for (phase, lines) in default_corpus() {
            for l in lines {
                assert!(g.is_valid(&l), "{phase}: {l}");
            }
        }
    }

    #[test]
    fn port_specs() {
        assert_eq!(parse_port_spec("3001-3003"), vec![3001, 3002, 3003]);
        assert_eq!(parse_port_spec("22,80"), vec![22, 80]);
        assert!(parse_port_spec("x").is_empty());
    }
}
