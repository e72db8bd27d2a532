//! Compilation step three: merge the machines with the control schemas into a
//! generative goal-POMDP over joint (machine, control) states.
//!
//! The model is immutable once assembled; stepping takes all mutable state as
//! arguments, so independent simulations can run concurrently with their own
//! generators.

mod belief;
mod exec;
mod goal;

pub use belief::{Belief, DefId, HiddenFrame, MachineFrame, Particle, SharedFrame, WEIGHT_TOL};
pub use exec::{ExecError, Observation, Peek, SegEnd, SegLeaf, Walker};
pub use goal::{elicit_goal, GoalError, GoalKind, GoalRequest, GoalSpec, Tier};

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::analysis::{build_schemas, AnalysisError, ControlSchema};
use crate::ham::{compile_set, ActionOp, CompileError, Ham, StateId, StateKind};
use crate::prims::{Registry, SpaceDesc};
use crate::sexpr::{validate, Diagnostic, ProgramSet};
use crate::value::Value;

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("program failed validation:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<Diagnostic>),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Compile(#[from] CompileError),
}

/// One definition, compiled: its machine and its control schema.
#[derive(Debug)]
pub struct CompiledDef {
    pub name: String,
    pub schema: ControlSchema,
    pub ham: Ham,
}

/// The assembled POMDP: machines, schemas, primitive models, and a goal.
#[derive(Debug)]
pub struct GenerativeModel {
    pub set: ProgramSet,
    pub registry: Arc<Registry>,
    pub goal: GoalSpec,
    pub entry: DefId,
    defs: Vec<CompiledDef>,
    by_name: BTreeMap<String, DefId>,
    /// Cheapest-exit action at each choice state, taken once the budget runs
    /// out.
    forced: HashMap<(DefId, StateId), usize>,
}

/// Merge the compiled machines with the control schemas under a goal.
pub fn assemble(
    set: &ProgramSet,
    entry: &str,
    registry: Arc<Registry>,
    goal: GoalSpec,
) -> Result<GenerativeModel, AssembleError> {
    let diags = validate(set, &|name| registry.contains(name));
    if !diags.is_empty() {
        return Err(AssembleError::Validation(diags));
    }
    let schemas = build_schemas(set, entry, &registry)?;
    let mut hams = compile_set(set, &registry, schemas.defs.keys().cloned())?;
    let mut defs = Vec::new();
    let mut by_name = BTreeMap::new();
    for (name, schema) in schemas.defs {
        let ham = hams.remove(&name).expect("compiled with schemas");
        by_name.insert(name.clone(), DefId(defs.len()));
        defs.push(CompiledDef { name, schema, ham });
    }
    let entry_id = by_name[entry];
    let forced = forced_exits(&defs, &by_name, &registry);
    Ok(GenerativeModel {
        set: set.clone(),
        registry,
        goal,
        entry: entry_id,
        defs,
        by_name,
        forced,
    })
}

/// Minimum remaining cost from each machine state to its definition's Stop,
/// treating observation branches optimistically; used to pick the cheapest
/// exit once the budget is exhausted.
fn forced_exits(
    defs: &[CompiledDef],
    by_name: &BTreeMap<String, DefId>,
    registry: &Registry,
) -> HashMap<(DefId, StateId), usize> {
    let mut value: Vec<Vec<f64>> = defs.iter().map(|d| vec![f64::INFINITY; d.ham.states.len()]).collect();
    for round in 0.. {
        let mut changed = false;
        for (di, def) in defs.iter().enumerate() {
            for state in &def.ham.states {
                let candidate = match &state.kind {
                    StateKind::Stop => 0.0,
                    StateKind::Action {
                        op: ActionOp::Prim { name, .. },
                        ..
                    } => {
                        let cost = registry.lookup(name).map(|p| p.cost_cents).unwrap_or(0.0);
                        cost + value[di][state.succ[0]]
                    }
                    StateKind::Call { callee, tail: false, .. } => {
                        let cid = by_name[callee].0;
                        let callee_start = defs[cid].ham.start;
                        value[cid][callee_start] + value[di][state.succ[0]]
                    }
                    _ => state
                        .succ
                        .iter()
                        .map(|s| value[di][*s])
                        .fold(f64::INFINITY, f64::min),
                };
                if candidate < value[di][state.id] {
                    value[di][state.id] = candidate;
                    changed = true;
                }
            }
        }
        if !changed || round > 10_000 {
            break;
        }
    }
    let mut forced = HashMap::new();
    for (di, def) in defs.iter().enumerate() {
        for state in &def.ham.states {
            if let StateKind::Choice { dynamic, .. } = &state.kind {
                let action = if dynamic.is_some() {
                    0
                } else {
                    let mut best = 0;
                    let mut best_v = f64::INFINITY;
                    for (a, s) in state.succ.iter().enumerate() {
                        if value[di][*s] < best_v {
                            best_v = value[di][*s];
                            best = a;
                        }
                    }
                    best
                };
                forced.insert((DefId(di), state.id), action);
            }
        }
    }
    forced
}

/// A single sampled world: a belief with exactly one particle.
#[derive(Debug, Clone)]
pub struct JointState(pub Belief);

impl GenerativeModel {
    pub fn def(&self, id: DefId) -> &CompiledDef {
        &self.defs[id.0]
    }

    pub fn def_id(&self, name: &str) -> DefId {
        self.by_name[name]
    }

    pub fn entry_def(&self) -> &CompiledDef {
        self.def(self.entry)
    }

    pub fn defs(&self) -> &[CompiledDef] {
        &self.defs
    }

    pub fn forced_action(&self, def: DefId, state: StateId) -> usize {
        self.forced.get(&(def, state)).copied().unwrap_or(0)
    }

    fn init_frame(
        &self,
        args: &[Value],
    ) -> Result<(SharedFrame, Vec<(usize, SpaceDesc)>), ExecError> {
        let entry = self.entry_def();
        if args.len() != entry.schema.args.len() {
            return Err(ExecError::Internal(format!(
                "`{}` takes {} arguments, got {}",
                entry.name,
                entry.schema.args.len(),
                args.len()
            )));
        }
        let mut shared: SharedFrame = vec![None; entry.schema.shared_len];
        let mut hidden_params = Vec::new();
        for (i, arg) in args.iter().enumerate() {
            let info = &entry.schema.slots[entry.schema.param_slot[i]];
            if info.space.is_observed() {
                shared[info.storage] = Some(Arc::new(arg.clone()));
            } else {
                hidden_params.push((info.storage, info.space.clone()));
            }
        }
        Ok((shared, hidden_params))
    }

    /// Uniform initial belief: observable arguments pinned to their Normal
    /// values, each unobservable argument sampled from its space, all
    /// particles at the entry Start state.
    pub fn initial_belief(
        &self,
        args: &[Value],
        particle_count: usize,
        rng: &mut impl Rng,
    ) -> Result<Belief, ExecError> {
        let entry = self.entry_def();
        let (shared, hidden_params) = self.init_frame(args)?;
        let hidden_len = entry.schema.hidden_len;
        let mut particles = Vec::with_capacity(particle_count);
        for _ in 0..particle_count {
            let mut frame: HiddenFrame = vec![None; hidden_len];
            for (storage, space) in &hidden_params {
                frame[*storage] = Some(
                    space
                        .uniform_sample(rng)
                        .ok_or_else(|| ExecError::Internal(format!("cannot sample {space}")))?,
                );
            }
            particles.push(Particle { frames: vec![frame] });
        }
        let weights = vec![1.0 / particle_count as f64; particle_count];
        let mut b = Belief {
            machine: vec![MachineFrame {
                def: self.entry,
                state: entry.ham.start,
            }],
            shared: vec![shared],
            particles,
            weights,
            cum_cost_cents: 0.0,
        };
        b.dedup();
        Ok(b)
    }

    /// Exact initial belief: one particle per point of the product of the
    /// unobservable argument spaces. Used by the oracles and tests.
    pub fn initial_belief_exact(&self, args: &[Value]) -> Result<Belief, ExecError> {
        let entry = self.entry_def();
        let (shared, hidden_params) = self.init_frame(args)?;
        let hidden_len = entry.schema.hidden_len;
        let mut frames: Vec<HiddenFrame> = vec![vec![None; hidden_len]];
        for (storage, space) in &hidden_params {
            let points = space
                .enumerate()
                .ok_or_else(|| ExecError::Internal(format!("cannot enumerate {space}")))?;
            let mut next = Vec::with_capacity(frames.len() * points.len());
            for frame in &frames {
                for p in &points {
                    let mut f = frame.clone();
                    f[*storage] = Some(p.clone());
                    next.push(f);
                }
            }
            frames = next;
        }
        let n = frames.len();
        Ok(Belief {
            machine: vec![MachineFrame {
                def: self.entry,
                state: entry.ham.start,
            }],
            shared: vec![shared],
            particles: frames.into_iter().map(|f| Particle { frames: vec![f] }).collect(),
            weights: vec![1.0 / n as f64; n],
            cum_cost_cents: 0.0,
        })
    }

    /// Sample one initial world state.
    pub fn initial(&self, args: &[Value], rng: &mut impl Rng) -> Result<JointState, ExecError> {
        Ok(JointState(self.initial_belief(args, 1, rng)?))
    }

    /// Actions available in a state: one per branch at a choice, a single
    /// default everywhere else.
    pub fn available_actions(&self, s: &JointState) -> Result<usize, ExecError> {
        let w = Walker::exact(self);
        Ok(match w.peek(&s.0)? {
            Peek::Choice { actions } => actions,
            Peek::Terminal | Peek::DeadEnd => 0,
            _ => 1,
        })
    }

    pub fn is_terminal(&self, s: &JointState) -> bool {
        let w = Walker::exact(self);
        matches!(w.peek(&s.0), Ok(Peek::Terminal))
    }

    /// Advance one machine transition, sampling stochastic outcomes.
    pub fn step(
        &self,
        s: &mut JointState,
        action: usize,
        rng: &mut impl Rng,
    ) -> Result<(Vec<Observation>, f64), ExecError> {
        let w = Walker {
            model: self,
            expand_cap: 0,
            resample_target: None,
            max_steps: 10_000,
        };
        match w.peek(&s.0)? {
            Peek::Choice { .. } => {
                w.apply_choice(&mut s.0, action, rng)?;
                Ok((Vec::new(), 0.0))
            }
            Peek::Silent => {
                let cost = w.advance_silent(&mut s.0, rng)?;
                Ok((Vec::new(), cost))
            }
            Peek::ObsPoint => {
                let support = w.obs_support(&s.0)?;
                let obs = exec::pick_weighted(&support, rng);
                let cost = w.apply_observation(&mut s.0, &obs, rng)?;
                Ok((vec![obs], cost))
            }
            Peek::Terminal => Ok((Vec::new(), 0.0)),
            Peek::DeadEnd => Err(ExecError::BadAction {
                action,
                available: 0,
            }),
        }
    }

    /// Evaluate the goal predicate against a (normally terminal) belief.
    pub fn goal_met(&self, b: &Belief) -> bool {
        let entry = self.entry_def();
        match &self.goal.kind {
            GoalKind::CostOnly => true,
            GoalKind::AnswerAccuracy { epsilon } => {
                let result = &entry.schema.slots[entry.schema.result_slot];
                let answer = match b.shared[0]
                    .get(result.storage)
                    .and_then(|v| v.as_ref())
                    .and_then(|v| v.as_bool())
                {
                    Some(v) => v,
                    None => return false,
                };
                // the final two unobservable unit-grid arguments are the
                // competing answer qualities; the first wins ties
                let grid_args: Vec<usize> = entry
                    .schema
                    .args
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| matches!(a.space, SpaceDesc::UnitGrid { .. }))
                    .map(|(i, _)| i)
                    .collect();
                if grid_args.len() < 2 {
                    return false;
                }
                let s0 = entry.schema.slots[entry.schema.param_slot[grid_args[grid_args.len() - 2]]].storage;
                let s1 = entry.schema.slots[entry.schema.param_slot[grid_args[grid_args.len() - 1]]].storage;
                let mut p = 0.0;
                for (particle, w) in b.particles.iter().zip(&b.weights) {
                    let q0 = &particle.frames[0][s0];
                    let q1 = &particle.frames[0][s1];
                    if let (Some(crate::prims::PoapsValue::Bin(b0)), Some(crate::prims::PoapsValue::Bin(b1))) =
                        (q0, q1)
                    {
                        if (b0 >= b1) == answer {
                            p += w;
                        }
                    }
                }
                p >= *epsilon
            }
            GoalKind::QualityTier { q_star, epsilon } => {
                let result = entry.schema.slots[entry.schema.result_slot].clone();
                let bins = match result.space {
                    SpaceDesc::UnitGrid { bins } => bins,
                    _ => return false,
                };
                let mut p = 0.0;
                for (particle, w) in b.particles.iter().zip(&b.weights) {
                    if let Some(crate::prims::PoapsValue::Bin(idx)) = particle.frames[0][result.storage] {
                        if SpaceDesc::grid_center(bins, idx) >= *q_star {
                            p += w;
                        }
                    }
                }
                p >= *epsilon
            }
            GoalKind::SampleAll { arg } => {
                let info = &entry.schema.slots[entry.schema.param_slot[*arg]];
                match b.shared[0].get(info.storage).and_then(|v| v.as_ref()) {
                    Some(v) => v.as_list().map(|l| l.is_empty()).unwrap_or(false),
                    None => false,
                }
            }
        }
    }
}
