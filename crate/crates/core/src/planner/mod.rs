//! C-RTDP: real-time dynamic programming over discretized beliefs, with
//! backups restricted to choice beliefs.
//!
//! One simulation walks the belief from its start: at every choice belief it
//! computes Q values by rolling each action forward to the next choice
//! belief (exact observation-sequence enumeration when the tree is small,
//! Monte Carlo otherwise), backs up the best, then follows it with sampled
//! observations. Values start at zero, which never overestimates the
//! remaining cost, so repeated simulations only push them up toward the
//! optimum.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pomdp::{Belief, ExecError, GenerativeModel, Observation, Peek, SegEnd, Walker};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("no action available at a choice belief")]
    NoActions,
    #[error("value table io: {0}")]
    TableIo(String),
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    /// Simulations per planning call.
    pub simulations: u32,
    /// Particle count for runtime beliefs (and the resampling target).
    pub particle_count: usize,
    /// Marginal-histogram weights are rounded to multiples of `1/histogram_k`
    /// when a belief is hashed.
    pub histogram_k: u32,
    /// Monte Carlo rollouts per action when a segment cannot be enumerated.
    pub psi_samples: u32,
    /// Enumerate observation sequences exactly up to this many leaves.
    pub psi_exact_limit: usize,
    pub seed: u64,
    /// Guard against non-terminating default segments.
    pub max_segment_steps: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            simulations: 1000,
            particle_count: 1000,
            histogram_k: 10,
            psi_samples: 16,
            psi_exact_limit: 64,
            seed: 42,
            max_segment_steps: 10_000,
        }
    }
}

impl PlannerConfig {
    pub fn walker<'m>(&self, model: &'m GenerativeModel) -> Walker<'m> {
        Walker::sampled(model, self.particle_count, self.max_segment_steps)
    }
}

/// Canonical discretized key of a belief: machine stack, remaining-budget
/// bucket, observed slot values, and per-slot marginal histograms of hidden
/// values with weights rounded to the nearest `1/k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BeliefKey(pub Vec<u8>);

impl BeliefKey {
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.0.len() * 2);
        for b in &self.0 {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    pub fn from_hex(hex: &str) -> Option<BeliefKey> {
        if hex.len() % 2 != 0 {
            return None;
        }
        let mut out = Vec::with_capacity(hex.len() / 2);
        for i in (0..hex.len()).step_by(2) {
            out.push(u8::from_str_radix(&hex[i..i + 2], 16).ok()?);
        }
        Some(BeliefKey(out))
    }
}

pub fn belief_key(b: &Belief, k: u32) -> BeliefKey {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&(b.machine.len() as u16).to_le_bytes());
    for frame in &b.machine {
        out.extend_from_slice(&(frame.def.0 as u16).to_le_bytes());
        out.extend_from_slice(&(frame.state as u16).to_le_bytes());
    }
    // costs are charged in (possibly fractional) cents; bucket by whole cents
    let bucket = (b.cum_cost_cents + 1e-9).floor() as i64;
    out.extend_from_slice(&bucket.to_le_bytes());
    for shared in &b.shared {
        out.push(0xFE);
        for (idx, v) in shared.iter().enumerate() {
            if let Some(v) = v {
                out.extend_from_slice(&(idx as u16).to_le_bytes());
                let s = v.to_string();
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
    for (fi, frame_marginals) in b.hidden_marginals().iter().enumerate() {
        out.push(0xFF);
        out.extend_from_slice(&(fi as u16).to_le_bytes());
        for (slot, marginal) in frame_marginals.iter().enumerate() {
            let mut entries: Vec<(Vec<u8>, u32)> = marginal
                .iter()
                .filter_map(|(v, w)| {
                    let rounded = (w * k as f64).round() as u32;
                    if rounded == 0 {
                        return None;
                    }
                    let mut enc = Vec::new();
                    v.encode_into(&mut enc);
                    Some((enc, rounded))
                })
                .collect();
            if entries.is_empty() {
                continue;
            }
            entries.sort();
            out.extend_from_slice(&(slot as u16).to_le_bytes());
            out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
            for (enc, w) in entries {
                out.extend_from_slice(&enc);
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    BeliefKey(out)
}

/// Map from discretized choice beliefs to cost-to-go estimates, in cents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValueTable {
    map: HashMap<BeliefKey, f64>,
}

impl ValueTable {
    pub fn new() -> ValueTable {
        ValueTable::default()
    }

    /// Unseen beliefs are worth 0: an optimistic estimate for nonnegative
    /// costs.
    pub fn get(&self, key: &BeliefKey) -> f64 {
        self.map.get(key).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, key: BeliefKey, value: f64) {
        self.map.insert(key, value);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BeliefKey, &f64)> {
        self.map.iter()
    }

    pub fn save(&self, path: &Path) -> Result<(), PlanError> {
        let mut lines: Vec<String> = self
            .map
            .iter()
            .map(|(k, v)| format!("{} {v:?}", k.to_hex()))
            .collect();
        lines.sort();
        let body = format!("poaps-vtable 1\n{}\n", lines.join("\n"));
        std::fs::write(path, body).map_err(|e| PlanError::TableIo(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ValueTable, PlanError> {
        let text = std::fs::read_to_string(path).map_err(|e| PlanError::TableIo(e.to_string()))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("poaps-vtable 1") => {}
            other => {
                return Err(PlanError::TableIo(format!(
                    "bad header {other:?}, expected `poaps-vtable 1`"
                )))
            }
        }
        let mut map = HashMap::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (hex, value) = line
                .split_once(' ')
                .ok_or_else(|| PlanError::TableIo(format!("bad line `{line}`")))?;
            let key = BeliefKey::from_hex(hex).ok_or_else(|| PlanError::TableIo(format!("bad key `{hex}`")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| PlanError::TableIo(format!("bad value `{value}`")))?;
            map.insert(key, value);
        }
        Ok(ValueTable { map })
    }
}

/// Apply `action` (when given) and run default actions, sampling every
/// observation, until the next choice belief or the end of the program.
/// Returns the observation sequence, the segment's cost, and how it ended.
pub fn advance_to_choice(
    model: &GenerativeModel,
    b: &mut Belief,
    action: Option<usize>,
    cfg: &PlannerConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<Observation>, f64, SegEnd), PlanError> {
    Ok(cfg.walker(model).advance_sampled(b, action, rng)?)
}

fn leaf_value(model: &GenerativeModel, vtable: &ValueTable, cfg: &PlannerConfig, belief: &Belief, end: SegEnd) -> f64 {
    match end {
        SegEnd::Choice => vtable.get(&belief_key(belief, cfg.histogram_k)),
        SegEnd::Terminal => {
            if model.goal_met(belief) {
                0.0
            } else {
                model.goal.fail_penalty_cents
            }
        }
        SegEnd::DeadEnd => model.goal.fail_penalty_cents,
    }
}

/// `Q(a, b)`: expected segment cost plus the value of the choice belief each
/// observation sequence leads to.
pub fn q_value(
    model: &GenerativeModel,
    b: &Belief,
    action: usize,
    vtable: &ValueTable,
    cfg: &PlannerConfig,
    rng: &mut impl Rng,
) -> Result<f64, PlanError> {
    let walker = cfg.walker(model);
    if let Some(leaves) = walker.enumerate_segments(b, Some(action), cfg.psi_exact_limit, rng)? {
        let mut q = 0.0;
        for leaf in leaves {
            q += leaf.prob * (leaf.cost + leaf_value(model, vtable, cfg, &leaf.belief, leaf.end));
        }
        return Ok(q);
    }
    let mut total = 0.0;
    for _ in 0..cfg.psi_samples {
        let mut nb = b.clone();
        let (_, cost, end) = walker.advance_sampled(&mut nb, Some(action), rng)?;
        total += cost + leaf_value(model, vtable, cfg, &nb, end);
    }
    Ok(total / cfg.psi_samples as f64)
}

/// Greedy action at a choice belief: the allowed action with the lowest Q,
/// ties broken by the lowest index.
pub fn select_action(
    model: &GenerativeModel,
    b: &Belief,
    vtable: &ValueTable,
    cfg: &PlannerConfig,
    rng: &mut impl Rng,
) -> Result<usize, PlanError> {
    let walker = cfg.walker(model);
    let actions = walker.allowed_actions(b)?;
    let mut best: Option<(usize, f64)> = None;
    for a in actions {
        let q = q_value(model, b, a, vtable, cfg, rng)?;
        if best.map(|(_, bq)| q < bq).unwrap_or(true) {
            best = Some((a, q));
        }
    }
    best.map(|(a, _)| a).ok_or(PlanError::NoActions)
}

/// One C-RTDP simulation: walk from `b0`, backing up `V(b) = Q(a_hat, b)` at
/// every choice belief along the way.
pub fn simulate_once(
    model: &GenerativeModel,
    b0: &Belief,
    vtable: &mut ValueTable,
    cfg: &PlannerConfig,
    rng: &mut impl Rng,
) -> Result<(), PlanError> {
    let walker = cfg.walker(model);
    let mut b = b0.clone();
    for _ in 0..cfg.max_segment_steps {
        match walker.peek(&b)? {
            Peek::Terminal | Peek::DeadEnd => return Ok(()),
            Peek::Choice { .. } => {
                let actions = walker.allowed_actions(&b)?;
                if actions.is_empty() {
                    return Ok(());
                }
                let mut best: Option<(usize, f64)> = None;
                for a in actions {
                    let q = q_value(model, &b, a, vtable, cfg, rng)?;
                    if best.map(|(_, bq)| q < bq).unwrap_or(true) {
                        best = Some((a, q));
                    }
                }
                let (a_hat, q_hat) = best.expect("nonempty actions");
                vtable.set(belief_key(&b, cfg.histogram_k), q_hat);
                let (_, _, end) = walker.advance_sampled(&mut b, Some(a_hat), rng)?;
                if end != SegEnd::Choice {
                    return Ok(());
                }
            }
            _ => {
                let (_, _, end) = walker.advance_sampled(&mut b, None, rng)?;
                if end != SegEnd::Choice {
                    return Ok(());
                }
            }
        }
    }
    Err(PlanError::Exec(ExecError::SegmentOverrun(cfg.max_segment_steps)))
}

/// Run `cfg.simulations` independent simulations into an existing table.
pub fn plan_into(
    model: &GenerativeModel,
    b0: &Belief,
    vtable: &mut ValueTable,
    cfg: &PlannerConfig,
    rng: &mut impl Rng,
) -> Result<(), PlanError> {
    for _ in 0..cfg.simulations {
        simulate_once(model, b0, vtable, cfg, rng)?;
    }
    Ok(())
}

/// Plan from scratch: a fresh table, deterministic in `cfg.seed`.
pub fn plan(model: &GenerativeModel, b0: &Belief, cfg: &PlannerConfig) -> Result<ValueTable, PlanError> {
    let mut vtable = ValueTable::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    plan_into(model, b0, &mut vtable, cfg, &mut rng)?;
    Ok(vtable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::{assemble, elicit_goal, GoalRequest, GoalSpec};
    use crate::prims::{ModelParams, Registry};
    use crate::sexpr::parse;
    use crate::value::Value;
    use std::sync::Arc;

    fn desk_vote_model(epsilon: f64, budget: f64) -> GenerativeModel {
        let set = parse(include_str!("../../../../programs/vote.poaps")).unwrap();
        let params = ModelParams::parse("[primitive crowd-vote]\nbins = 2\n").unwrap();
        let reg = Arc::new(Registry::standard(&params).unwrap());
        let goal = elicit_goal(
            GoalRequest::AnswerAccuracy {
                epsilon,
                budget_cents: budget,
            },
            &reg,
        )
        .unwrap();
        assemble(&set, "vote-better?", reg, goal).unwrap()
    }

    fn vote_args() -> Vec<Value> {
        vec![
            Value::Str("q".into()),
            Value::Str("a".into()),
            Value::Str("b".into()),
            Value::Int(0),
            Value::Int(0),
        ]
    }

    fn desk_cfg() -> PlannerConfig {
        PlannerConfig {
            simulations: 2000,
            particle_count: 64,
            seed: 7,
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn zero_simulations_leave_empty_table() {
        let model = desk_vote_model(0.85, 5.0);
        let b0 = model.initial_belief_exact(&vote_args()).unwrap();
        let cfg = PlannerConfig {
            simulations: 0,
            ..desk_cfg()
        };
        let table = plan(&model, &b0, &cfg).unwrap();
        assert!(table.is_empty());
    }

    #[test]
    fn seeded_planning_is_deterministic() {
        let model = desk_vote_model(0.85, 5.0);
        let b0 = model.initial_belief_exact(&vote_args()).unwrap();
        let cfg = PlannerConfig {
            simulations: 200,
            ..desk_cfg()
        };
        let a = plan(&model, &b0, &cfg).unwrap();
        let b = plan(&model, &b0, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_program_touches_no_beliefs() {
        let set = parse("(define (id x) x)").unwrap();
        let reg = Arc::new(Registry::standard(&ModelParams::default()).unwrap());
        let model = assemble(&set, "id", reg, GoalSpec::cost_only(None)).unwrap();
        let b0 = model.initial_belief_exact(&[Value::Int(7)]).unwrap();
        let table = plan(&model, &b0, &desk_cfg()).unwrap();
        assert!(table.is_empty(), "no choice nodes, no backups");
    }

    #[test]
    fn table_keys_only_at_choice_beliefs() {
        // every key is written at a choice belief: replaying the key set
        // against reachable choice beliefs of the voting program finds them
        let model = desk_vote_model(0.85, 5.0);
        let b0 = model.initial_belief_exact(&vote_args()).unwrap();
        let cfg = PlannerConfig {
            simulations: 500,
            ..desk_cfg()
        };
        let table = plan(&model, &b0, &cfg).unwrap();
        assert!(!table.is_empty());
        // collect reachable choice-belief keys by breadth-first enumeration
        let walker = cfg.walker(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reachable = std::collections::HashSet::new();
        let mut frontier = vec![b0.clone()];
        let mut first = Vec::new();
        walker
            .enumerate_segments(&frontier.pop().unwrap(), None, 64, &mut rng)
            .unwrap()
            .unwrap()
            .into_iter()
            .for_each(|l| first.push(l.belief));
        let mut queue = first;
        while let Some(b) = queue.pop() {
            if !matches!(walker.peek(&b).unwrap(), Peek::Choice { .. }) {
                continue;
            }
            if !reachable.insert(belief_key(&b, cfg.histogram_k)) {
                continue;
            }
            for a in walker.allowed_actions(&b).unwrap() {
                for leaf in walker.enumerate_segments(&b, Some(a), 64, &mut rng).unwrap().unwrap() {
                    if leaf.end == SegEnd::Choice {
                        queue.push(leaf.belief);
                    }
                }
            }
        }
        for (key, _) in table.iter() {
            assert!(reachable.contains(key), "table key not a reachable choice belief");
        }
    }

    #[test]
    fn backups_never_decrease_values() {
        let model = desk_vote_model(0.85, 5.0);
        let b0 = model.initial_belief_exact(&vote_args()).unwrap();
        let cfg = desk_cfg();
        let mut vtable = ValueTable::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut snapshot: HashMap<BeliefKey, f64> = HashMap::new();
        for _ in 0..300 {
            simulate_once(&model, &b0, &mut vtable, &cfg, &mut rng).unwrap();
            for (k, v) in vtable.iter() {
                if let Some(prev) = snapshot.get(k) {
                    assert!(*v >= prev - 1e-9, "value decreased: {prev} -> {v}");
                }
                snapshot.insert(k.clone(), *v);
            }
        }
    }

    #[test]
    fn sampled_q_matches_enumerated_q() {
        let model = desk_vote_model(0.85, 5.0);
        let b0 = model.initial_belief_exact(&vote_args()).unwrap();
        let cfg = desk_cfg();
        let walker = cfg.walker(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // move to the first choice belief
        let mut b = b0.clone();
        walker.advance_sampled(&mut b, None, &mut rng).unwrap();
        let vtable = ValueTable::new();
        let exact = q_value(&model, &b, 0, &vtable, &cfg, &mut rng).unwrap();
        // Monte Carlo estimate of the same quantity
        let n = 4000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut nb = b.clone();
            let (_, cost, end) = walker.advance_sampled(&mut nb, Some(0), &mut rng).unwrap();
            samples.push(cost + super::leaf_value(&model, &vtable, &cfg, &nb, end));
        }
        let mean: f64 = samples.iter().sum::<f64>() / n as f64;
        let var: f64 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt().max(1e-12);
        assert!(
            (mean - exact).abs() <= 3.0 * se + 1e-9,
            "sampled {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn tie_break_picks_lowest_action_index() {
        // a choose with identical branches has equal Qs
        let set = parse("(define (f x) (choose (+ x 1) (+ x 1)))").unwrap();
        let reg = Arc::new(Registry::standard(&ModelParams::default()).unwrap());
        let model = assemble(&set, "f", reg, GoalSpec::cost_only(None)).unwrap();
        let b0 = model.initial_belief_exact(&[Value::Int(0)]).unwrap();
        let cfg = desk_cfg();
        let walker = cfg.walker(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = b0.clone();
        walker.advance_sampled(&mut b, None, &mut rng).unwrap();
        let vtable = ValueTable::new();
        let a = select_action(&model, &b, &vtable, &cfg, &mut rng).unwrap();
        assert_eq!(a, 0);
    }

    #[test]
    fn singleton_dynamic_choice_selects_it() {
        let set = parse(include_str!("../../../../programs/rocksample.poaps")).unwrap();
        let params = ModelParams::parse(include_str!("../../../../programs/rocksample.manifest")).unwrap();
        let reg = Arc::new(Registry::standard(&params).unwrap());
        let model = assemble(&set, "find-good-rock", reg, GoalSpec::cost_only(None)).unwrap();
        let b0 = model
            .initial_belief_exact(&[Value::List(vec![Value::Int(2)])])
            .unwrap();
        let cfg = desk_cfg();
        let walker = cfg.walker(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = b0.clone();
        walker.advance_sampled(&mut b, None, &mut rng).unwrap();
        let vtable = ValueTable::new();
        assert_eq!(select_action(&model, &b, &vtable, &cfg, &mut rng).unwrap(), 0);
    }

    #[test]
    fn value_table_round_trips_through_disk() {
        let model = desk_vote_model(0.85, 5.0);
        let b0 = model.initial_belief_exact(&vote_args()).unwrap();
        let cfg = PlannerConfig {
            simulations: 100,
            ..desk_cfg()
        };
        let table = plan(&model, &b0, &cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("poaps-vtable-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("table.vt");
        table.save(&path).unwrap();
        let loaded = ValueTable::load(&path).unwrap();
        assert_eq!(table, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }
}
