//! Execute a program for real: Normal evaluation against a world, belief
//! maintenance in lockstep, online planning at every choice belief, and a
//! replayable trace.

mod trace;

pub use trace::{read_trace, write_trace, SlotSummary, TraceHeader, TraceRecord, WorldCall};

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ham::{ActionOp, StateKind};
use crate::planner::{plan_into, select_action, PlanError, PlannerConfig, ValueTable};
use crate::pomdp::{Belief, ExecError, GenerativeModel, Observation, Peek, SegEnd, Walker};
use crate::sexpr::ExprId;
use crate::value::Value;

/// The environment primitives execute against: a crowd platform, its
/// simulation, or a recording.
pub trait WorldAdapter {
    fn execute_primitive(
        &mut self,
        name: &str,
        args: &[Value],
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Value, Option<Value>), String>;
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("world failed executing `{name}`: {message} (after {steps} steps)")]
    World {
        name: String,
        message: String,
        steps: usize,
    },
    #[error("replay diverged at step {step}: expected {expected}, got {got}")]
    ReplayDivergence {
        step: usize,
        expected: String,
        got: String,
    },
    #[error("recorded world ran out of calls (extra call to `{0}`)")]
    RecordingExhausted(String),
    #[error("internal: {0}")]
    Internal(String),
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub return_value: Value,
    pub total_cents: f64,
    pub goal_achieved: bool,
    pub budget_exhausted: bool,
    pub trace: Vec<TraceRecord>,
}

/// Normal-value frames, indexed by schema slot id, stacked alongside the
/// belief's machine stack.
struct NormalExec {
    frames: Vec<Vec<Option<Value>>>,
}

impl NormalExec {
    fn read(&self, fi: usize, slot: usize) -> Result<&Value, RuntimeError> {
        self.frames[fi][slot]
            .as_ref()
            .ok_or_else(|| RuntimeError::Internal(format!("empty Normal slot {slot}")))
    }
}

/// Execute one episode. Plans online: before every decision at a choice
/// belief, `cfg.simulations` planner simulations refresh `table` from the
/// current belief, and the greedy action is taken.
pub fn run(
    model: &GenerativeModel,
    args: &[Value],
    cfg: &PlannerConfig,
    world: &mut dyn WorldAdapter,
    table: &mut ValueTable,
) -> Result<EpisodeResult, RuntimeError> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1217);
    let mut exec_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE1EC);
    let mut plan_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut world_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3031);

    let walker = cfg.walker(model);
    let mut belief = model.initial_belief(args, cfg.particle_count, &mut init_rng)?;
    let entry = model.entry_def();
    let mut normal = NormalExec {
        frames: vec![vec![None; entry.schema.slot_count()]],
    };
    for (i, arg) in args.iter().enumerate() {
        normal.frames[0][entry.schema.param_slot[i]] = Some(arg.clone());
    }

    let mut records: Vec<TraceRecord> = Vec::new();
    let mut budget_exhausted = false;
    let mut step: u64 = 0;

    loop {
        let top = belief.top();
        let def = model.def(top.def);
        let state = def.ham.state(top.state);
        let machine_label = format!("{}/s{}", def.name, top.state);
        let fi = belief.depth() - 1;

        match walker.peek(&belief)? {
            Peek::Terminal => break,
            Peek::DeadEnd => {
                return Err(RuntimeError::Internal(
                    "execution reached a dynamic choice over an empty list".to_string(),
                ))
            }
            Peek::Choice { .. } => {
                let allowed = walker.allowed_actions(&belief)?;
                if belief.cum_cost_cents >= model.goal.horizon_cents {
                    budget_exhausted = true;
                }
                let action = if allowed.len() == 1 {
                    allowed[0]
                } else {
                    plan_into(model, &belief, table, cfg, &mut plan_rng)?;
                    select_action(model, &belief, table, cfg, &mut plan_rng)?
                };
                // the policy space is exactly the program's nondeterminism
                assert!(allowed.contains(&action), "selected action outside the program's choices");
                normal_choice(model, &mut normal, &belief, fi, state, action)?;
                walker.apply_choice(&mut belief, action, &mut exec_rng)?;
                records.push(trace::record(
                    step,
                    machine_label,
                    format!("choice-{action}"),
                    Vec::new(),
                    0.0,
                    None,
                    &belief,
                ));
            }
            Peek::Silent => {
                let world_call = normal_silent(model, &mut normal, &belief, fi, &state.kind, world, &mut world_rng, records.len())?;
                let cost = walker.advance_silent(&mut belief, &mut exec_rng)?;
                records.push(trace::record(
                    step,
                    machine_label,
                    "default".to_string(),
                    Vec::new(),
                    cost,
                    world_call,
                    &belief,
                ));
            }
            Peek::ObsPoint => {
                let (real_obs, world_call) =
                    normal_observe(model, &mut normal, &belief, fi, &state.kind, world, &mut world_rng, records.len())?;
                let cost = walker.apply_observation(&mut belief, &real_obs, &mut exec_rng)?;
                if belief.effective_sample_size() < cfg.particle_count as f64 / 2.0 && belief.particle_count() > 1 {
                    belief.resample(cfg.particle_count, &mut exec_rng);
                }
                records.push(trace::record(
                    step,
                    machine_label,
                    "default".to_string(),
                    vec![real_obs.to_string()],
                    cost,
                    world_call,
                    &belief,
                ));
            }
        }
        step += 1;
        if step as usize > cfg.max_segment_steps * 10 {
            return Err(RuntimeError::Exec(ExecError::SegmentOverrun(cfg.max_segment_steps * 10)));
        }
        debug_assert!(
            (belief.total_weight() - 1.0).abs() < 1e-6,
            "belief weights drifted"
        );
    }

    let return_value = normal
        .read(0, model.entry_def().schema.result_slot)?
        .clone();
    let total_cents = belief.cum_cost_cents;
    debug_assert!({
        let sum: f64 = records.iter().map(|r| r.cents).sum();
        (sum - total_cents).abs() < 1e-6
    });
    Ok(EpisodeResult {
        return_value,
        total_cents,
        goal_achieved: model.goal_met(&belief),
        budget_exhausted,
        trace: records,
    })
}

fn normal_choice(
    model: &GenerativeModel,
    normal: &mut NormalExec,
    belief: &Belief,
    fi: usize,
    state: &crate::ham::HamState,
    action: usize,
) -> Result<(), RuntimeError> {
    if let StateKind::Choice {
        expr,
        dynamic: Some(list),
    } = &state.kind
    {
        let def = model.def(belief.top().def);
        let list_slot = def.schema.slot_of(*list);
        let items = normal
            .read(fi, list_slot)?
            .as_list()
            .ok_or_else(|| RuntimeError::Internal("dynamic choose over non-list".to_string()))?
            .to_vec();
        let slot = def.schema.slot_of(*expr);
        normal.frames[fi][slot] = Some(items[action].clone());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn normal_silent(
    model: &GenerativeModel,
    normal: &mut NormalExec,
    belief: &Belief,
    fi: usize,
    kind: &StateKind,
    world: &mut dyn WorldAdapter,
    world_rng: &mut ChaCha8Rng,
    steps: usize,
) -> Result<Option<WorldCall>, RuntimeError> {
    let def = model.def(belief.top().def);
    match kind {
        StateKind::Start | StateKind::Action { op: ActionOp::Sym(_), .. } => Ok(None),
        StateKind::Action {
            expr,
            op: ActionOp::Const(v),
        } => {
            normal.frames[fi][def.schema.slot_of(*expr)] = Some(v.clone());
            Ok(None)
        }
        StateKind::Action {
            expr,
            op: ActionOp::Prim { name, args },
        } => {
            // a primitive with no observation space still acts on the world
            let (result, _obs, call) = call_world(model, normal, def, fi, *expr, name, args, world, world_rng, steps)?;
            normal.frames[fi][def.schema.slot_of(*expr)] = Some(result);
            Ok(Some(call))
        }
        StateKind::Call { callee, args, tail } => {
            let callee_def = model.def(model.def_id(callee));
            let mut frame = vec![None; callee_def.schema.slot_count()];
            for (j, arg) in args.iter().enumerate() {
                let v = normal.read(fi, def.schema.slot_of(*arg))?.clone();
                frame[callee_def.schema.param_slot[j]] = Some(v);
            }
            if *tail {
                normal.frames[fi] = frame;
            } else {
                normal.frames.push(frame);
            }
            Ok(None)
        }
        StateKind::Stop => {
            // return into the caller's slot for the call expression
            let result = normal.read(fi, def.schema.result_slot)?.clone();
            normal.frames.pop();
            let caller_top = belief.machine[belief.depth() - 2];
            let caller_def = model.def(caller_top.def);
            let call_expr = match &caller_def.ham.state(caller_top.state).kind {
                StateKind::Call { expr, .. } => *expr,
                other => return Err(RuntimeError::Internal(format!("return into {other:?}"))),
            };
            let caller_fi = normal.frames.len() - 1;
            normal.frames[caller_fi][caller_def.schema.slot_of(call_expr)] = Some(result);
            Ok(None)
        }
        other => Err(RuntimeError::Internal(format!("normal_silent at {other:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn normal_observe(
    model: &GenerativeModel,
    normal: &mut NormalExec,
    belief: &Belief,
    fi: usize,
    kind: &StateKind,
    world: &mut dyn WorldAdapter,
    world_rng: &mut ChaCha8Rng,
    steps: usize,
) -> Result<(Observation, Option<WorldCall>), RuntimeError> {
    let def = model.def(belief.top().def);
    match kind {
        StateKind::Action {
            expr,
            op: ActionOp::Prim { name, args },
        } => {
            let (result, obs, call) = call_world(model, normal, def, fi, *expr, name, args, world, world_rng, steps)?;
            normal.frames[fi][def.schema.slot_of(*expr)] = Some(result);
            let prim = model.registry.lookup(name).expect("validated primitive");
            let obs_value = obs.ok_or_else(|| {
                RuntimeError::Internal(format!("world emitted no observation for `{name}`"))
            })?;
            let space = prim.observations.as_ref().expect("observing primitive");
            let point = space.point_of_value(&obs_value).ok_or_else(|| {
                RuntimeError::Internal(format!("observation {obs_value} outside `{name}`'s space"))
            })?;
            Ok((Observation::Prim(point), Some(call)))
        }
        StateKind::Obs { test, .. } => {
            // real execution routes by the Normal test value; the emitted
            // branch observation re-synchronizes the belief
            let v = normal.read(fi, def.schema.slot_of(*test))?;
            let branch = match v.as_bool() {
                Some(true) => 0u8,
                Some(false) => 1u8,
                None => {
                    return Err(RuntimeError::Internal(format!(
                        "if test evaluated to non-boolean {v}"
                    )))
                }
            };
            Ok((Observation::Branch(branch), None))
        }
        other => Err(RuntimeError::Internal(format!("normal_observe at {other:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn call_world(
    model: &GenerativeModel,
    normal: &NormalExec,
    def: &crate::pomdp::CompiledDef,
    fi: usize,
    _expr: ExprId,
    name: &str,
    args: &[ExprId],
    world: &mut dyn WorldAdapter,
    world_rng: &mut ChaCha8Rng,
    steps: usize,
) -> Result<(Value, Option<Value>, WorldCall), RuntimeError> {
    let arg_values: Vec<Value> = args
        .iter()
        .map(|a| normal.read(fi, def.schema.slot_of(*a)).cloned())
        .collect::<Result<_, _>>()?;
    let (result, obs) = model
        .registry
        .user_apply(name, &arg_values, world, world_rng)
        .map_err(|e| RuntimeError::World {
            name: name.to_string(),
            message: e.to_string(),
            steps,
        })?;
    let call = WorldCall {
        name: name.to_string(),
        args: arg_values,
        result: result.clone(),
        obs: obs.clone(),
    };
    Ok((result, obs, call))
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// A world that replays recorded primitive calls and fails loudly on the
/// first divergence.
pub struct RecordedWorld {
    calls: VecDeque<WorldCall>,
}

impl RecordedWorld {
    pub fn from_trace(records: &[TraceRecord]) -> RecordedWorld {
        RecordedWorld {
            calls: records.iter().filter_map(|r| r.world.clone()).collect(),
        }
    }
}

impl WorldAdapter for RecordedWorld {
    fn execute_primitive(
        &mut self,
        name: &str,
        args: &[Value],
        _rng: &mut dyn rand::RngCore,
    ) -> Result<(Value, Option<Value>), String> {
        let call = self
            .calls
            .pop_front()
            .ok_or_else(|| format!("no recorded call left for `{name}`"))?;
        if call.name != name || call.args != args {
            return Err(format!(
                "recorded call was `{}` {:?}, got `{}` {:?}",
                call.name, call.args, name, args
            ));
        }
        Ok((call.result, call.obs))
    }
}

/// Re-execute an episode against its recorded world responses and verify the
/// produced trace matches record for record.
pub fn replay(
    model: &GenerativeModel,
    args: &[Value],
    cfg: &PlannerConfig,
    original: &[TraceRecord],
) -> Result<EpisodeResult, RuntimeError> {
    let mut world = RecordedWorld::from_trace(original);
    let mut table = ValueTable::new();
    let result = run(model, args, cfg, &mut world, &mut table)?;
    for (i, (got, expected)) in result.trace.iter().zip(original).enumerate() {
        if got != expected {
            return Err(RuntimeError::ReplayDivergence {
                step: i,
                expected: serde_json::to_string(expected).unwrap_or_default(),
                got: serde_json::to_string(got).unwrap_or_default(),
            });
        }
    }
    if result.trace.len() != original.len() {
        return Err(RuntimeError::ReplayDivergence {
            step: result.trace.len().min(original.len()),
            expected: format!("{} records", original.len()),
            got: format!("{} records", result.trace.len()),
        });
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Batch experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpisodeOutcome {
    pub returned: Value,
    pub cents: f64,
    pub goal_achieved: bool,
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BatchSummary {
    pub episodes: usize,
    /// Fraction of episodes whose return matched the ground truth, over
    /// episodes that have one.
    pub accuracy: Option<f64>,
    pub mean_cents: f64,
    pub goal_rate: f64,
    pub per_episode: Vec<EpisodeOutcome>,
}

/// Run one episode per task, sharing a single value table so later episodes
/// reuse what earlier ones learned. Episode `i` runs with seed
/// `cfg.seed + i` and a world built by `world_for(i)`.
pub fn batch_experiment<W: WorldAdapter>(
    model: &GenerativeModel,
    tasks: &[(Vec<Value>, Option<Value>)],
    cfg: &PlannerConfig,
    mut world_for: impl FnMut(usize) -> W,
) -> Result<BatchSummary, RuntimeError> {
    let mut table = ValueTable::new();
    let mut per_episode = Vec::with_capacity(tasks.len());
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut total_cents = 0.0;
    let mut goals = 0usize;
    for (i, (args, truth)) in tasks.iter().enumerate() {
        let mut world = world_for(i);
        let episode_cfg = PlannerConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let result = run(model, args, &episode_cfg, &mut world, &mut table)?;
        let is_correct = truth.as_ref().map(|t| *t == result.return_value);
        if let Some(c) = is_correct {
            scored += 1;
            if c {
                correct += 1;
            }
        }
        total_cents += result.total_cents;
        if result.goal_achieved {
            goals += 1;
        }
        per_episode.push(EpisodeOutcome {
            returned: result.return_value,
            cents: result.total_cents,
            goal_achieved: result.goal_achieved,
            correct: is_correct,
        });
    }
    Ok(BatchSummary {
        episodes: tasks.len(),
        accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
        mean_cents: if tasks.is_empty() {
            0.0
        } else {
            total_cents / tasks.len() as f64
        },
        goal_rate: if tasks.is_empty() {
            0.0
        } else {
            goals as f64 / tasks.len() as f64
        },
        per_episode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::{assemble, elicit_goal, GoalRequest, GoalSpec};
    use crate::prims::{ModelParams, Registry};
    use crate::sexpr::parse;
    use crate::sim::{task_generator, SimulatedWorld, TaskKind};
    use std::sync::Arc;

    fn stock() -> Arc<Registry> {
        Arc::new(Registry::standard(&ModelParams::default()).unwrap())
    }

    struct NoWorld;
    impl WorldAdapter for NoWorld {
        fn execute_primitive(
            &mut self,
            name: &str,
            _args: &[Value],
            _rng: &mut dyn rand::RngCore,
        ) -> Result<(Value, Option<Value>), String> {
            Err(format!("no world available for `{name}`"))
        }
    }

    #[test]
    fn identity_program_runs_with_three_records() {
        let set = parse("(define (id x) x)").unwrap();
        let model = assemble(&set, "id", stock(), GoalSpec::cost_only(None)).unwrap();
        let cfg = PlannerConfig::default();
        let mut table = ValueTable::new();
        let result = run(&model, &[Value::Str("hello".into())], &cfg, &mut NoWorld, &mut table).unwrap();
        assert_eq!(result.return_value, Value::Str("hello".into()));
        assert_eq!(result.total_cents, 0.0);
        assert_eq!(result.trace.len(), 3); // Start, Action, Stop
        assert!(result.goal_achieved);
        assert!(!result.budget_exhausted);
    }

    #[test]
    fn improve_with_zero_budget_returns_immediately() {
        let set = parse(include_str!("../../../../programs/improve.poaps")).unwrap();
        let model = assemble(&set, "improve", stock(), GoalSpec::cost_only(Some(0.0))).unwrap();
        let cfg = PlannerConfig {
            particle_count: 50,
            ..PlannerConfig::default()
        };
        let mut table = ValueTable::new();
        let mut world = SimulatedWorld::new(stock());
        let result = run(&model, &[Value::Str("draft".into())], &cfg, &mut world, &mut table).unwrap();
        assert_eq!(result.return_value, Value::Str("draft".into()));
        assert_eq!(result.total_cents, 0.0);
        assert!(result.budget_exhausted);
    }

    #[test]
    fn voting_episode_reaches_goal_and_accounts_costs() {
        let set = parse(include_str!("../../../../programs/vote.poaps")).unwrap();
        let reg = stock();
        let goal = elicit_goal(
            GoalRequest::AnswerAccuracy {
                epsilon: 0.9,
                budget_cents: 20.0,
            },
            &reg,
        )
        .unwrap();
        let model = assemble(&set, "vote-better?", reg.clone(), goal).unwrap();
        let cfg = PlannerConfig {
            simulations: 300,
            particle_count: 400,
            seed: 17,
            ..PlannerConfig::default()
        };
        let mut table = ValueTable::new();
        let mut world = SimulatedWorld::new(reg);
        let args = vec![
            Value::Str("q".into()),
            Value::Str("a".into()),
            Value::Str("b".into()),
            Value::Int(0),
            Value::Int(0),
        ];
        let result = run(&model, &args, &cfg, &mut world, &mut table).unwrap();
        assert!(matches!(result.return_value, Value::Bool(_)));
        let vote_calls = result
            .trace
            .iter()
            .filter(|r| r.world.as_ref().map(|w| w.name == "crowd-vote").unwrap_or(false))
            .count();
        assert!(vote_calls >= 1, "should ask at least one worker");
        assert_eq!(result.total_cents, vote_calls as f64);
        let sum: f64 = result.trace.iter().map(|r| r.cents).sum();
        assert!((sum - result.total_cents).abs() < 1e-9);
    }

    #[test]
    fn replay_reproduces_and_detects_tampering() {
        let set = parse(include_str!("../../../../programs/vote.poaps")).unwrap();
        let reg = stock();
        let goal = elicit_goal(
            GoalRequest::AnswerAccuracy {
                epsilon: 0.85,
                budget_cents: 10.0,
            },
            &reg,
        )
        .unwrap();
        let model = assemble(&set, "vote-better?", reg.clone(), goal).unwrap();
        let cfg = PlannerConfig {
            simulations: 150,
            particle_count: 200,
            seed: 23,
            ..PlannerConfig::default()
        };
        let args = vec![
            Value::Str("q".into()),
            Value::Str("x".into()),
            Value::Str("y".into()),
            Value::Int(0),
            Value::Int(0),
        ];
        let mut table = ValueTable::new();
        let mut world = SimulatedWorld::new(reg);
        let original = run(&model, &args, &cfg, &mut world, &mut table).unwrap();

        let replayed = replay(&model, &args, &cfg, &original.trace).unwrap();
        assert_eq!(replayed.total_cents, original.total_cents);
        assert_eq!(replayed.return_value, original.return_value);

        // flip one recorded observation: replay must fail loudly
        let mut tampered = original.trace.clone();
        let idx = tampered
            .iter()
            .position(|r| r.world.as_ref().map(|w| w.name == "crowd-vote").unwrap_or(false))
            .expect("at least one vote");
        if let Some(call) = &mut tampered[idx].world {
            let flipped = match call.result.as_bool().unwrap() {
                true => Value::Bool(false),
                false => Value::Bool(true),
            };
            call.result = flipped.clone();
            call.obs = Some(flipped);
        }
        let err = replay(&model, &args, &cfg, &tampered).unwrap_err();
        assert!(matches!(err, RuntimeError::ReplayDivergence { .. }), "{err}");
    }

    #[test]
    fn batch_experiment_empty_is_empty() {
        let set = parse(include_str!("../../../../programs/vote.poaps")).unwrap();
        let reg = stock();
        let goal = elicit_goal(
            GoalRequest::AnswerAccuracy {
                epsilon: 0.9,
                budget_cents: 20.0,
            },
            &reg,
        )
        .unwrap();
        let model = assemble(&set, "vote-better?", reg, goal).unwrap();
        let summary = batch_experiment(&model, &[], &PlannerConfig::default(), |_| NoWorld).unwrap();
        assert_eq!(summary.episodes, 0);
        assert_eq!(summary.accuracy, None);
        assert_eq!(summary.mean_cents, 0.0);
    }

    #[test]
    fn small_voting_batch_is_mostly_correct() {
        let set = parse(include_str!("../../../../programs/vote.poaps")).unwrap();
        let reg = stock();
        let goal = elicit_goal(
            GoalRequest::AnswerAccuracy {
                epsilon: 0.9,
                budget_cents: 20.0,
            },
            &reg,
        )
        .unwrap();
        let model = assemble(&set, "vote-better?", reg.clone(), goal).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tasks = task_generator(TaskKind::Voting, 40, &reg, &mut rng);
        let pairs: Vec<(Vec<Value>, Option<Value>)> =
            tasks.iter().map(|t| (t.args.clone(), t.truth.clone())).collect();
        let cfg = PlannerConfig {
            simulations: 120,
            particle_count: 300,
            seed: 31,
            ..PlannerConfig::default()
        };
        let summary = batch_experiment(&model, &pairs, &cfg, |i| {
            SimulatedWorld::with_ground_truth(reg.clone(), tasks[i].ground.clone())
        })
        .unwrap();
        let accuracy = summary.accuracy.unwrap();
        assert!(accuracy >= 0.7, "accuracy {accuracy}");
        assert!(summary.mean_cents <= 20.0);
    }
}
