//! The transition and observation engine: advances a belief through machine
//! states, conditioning particles exactly on every emitted observation.
//!
//! Observations arrive in two ways only: a primitive with an observation
//! space emits one when it executes, and an Obs state after a conditional
//! announces which branch was taken. Everything else is silent. Hidden
//! transitions with no observation (like `c-imp`) either expand the particle
//! set exactly over the transition support (when small enough) or draw one
//! sample per particle.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::ham::{ActionOp, HamState, StateKind};
use crate::prims::{Model, ModelError, PoapsValue, Primitive, SpaceDesc};
use crate::sexpr::ExprId;
use crate::value::Value;

use super::belief::{Belief, HiddenFrame, MachineFrame, SharedFrame};
use super::{CompiledDef, GenerativeModel};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("segment exceeded {0} machine steps (runaway loop)")]
    SegmentOverrun(usize),
    #[error("observation has zero probability under the current belief: {0}")]
    ImpossibleObservation(String),
    #[error("machine is not at a choice state")]
    NotAtChoice,
    #[error("action {action} out of range ({available} available)")]
    BadAction { action: usize, available: usize },
    #[error("trivial primitive `{0}` applied to divergent hidden values")]
    DivergentArgs(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("internal: {0}")]
    Internal(String),
}

/// One emitted observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Observation {
    /// Emitted by a primitive call.
    Prim(PoapsValue),
    /// Emitted by an Obs state: which conditional branch was taken.
    Branch(u8),
}

impl std::fmt::Display for Observation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Observation::Prim(PoapsValue::Obs(v)) => write!(f, "{v}"),
            Observation::Prim(p) => write!(f, "{p:?}"),
            Observation::Branch(b) => write!(f, "branch-{b}"),
        }
    }
}

/// What the current machine state will do.
#[derive(Debug, Clone, PartialEq)]
pub enum Peek {
    Choice { actions: usize },
    Terminal,
    /// A dynamic choice over an empty list: no action is available.
    DeadEnd,
    /// The next step emits an observation.
    ObsPoint,
    Silent,
}

/// How a segment ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegEnd {
    Choice,
    Terminal,
    DeadEnd,
}

/// One enumerated observation path out of a choice belief.
#[derive(Debug, Clone)]
pub struct SegLeaf {
    pub psi: Vec<Observation>,
    pub prob: f64,
    pub cost: f64,
    pub belief: Belief,
    pub end: SegEnd,
}

#[derive(Debug, Clone, Copy)]
pub struct Walker<'m> {
    pub model: &'m GenerativeModel,
    /// Expand hidden transitions exactly while the expanded particle count
    /// stays at or under this; beyond it, sample one successor per particle.
    pub expand_cap: usize,
    /// Resample (systematic) when the effective sample size drops below half
    /// this target. `None` keeps the belief exact.
    pub resample_target: Option<usize>,
    pub max_steps: usize,
}

impl<'m> Walker<'m> {
    pub fn exact(model: &'m GenerativeModel) -> Walker<'m> {
        Walker {
            model,
            expand_cap: 1 << 20,
            resample_target: None,
            max_steps: 10_000,
        }
    }

    pub fn sampled(model: &'m GenerativeModel, particles: usize, max_steps: usize) -> Walker<'m> {
        Walker {
            model,
            expand_cap: 2 * particles,
            resample_target: Some(particles),
            max_steps,
        }
    }

    fn cur(&self, b: &Belief) -> (&'m CompiledDef, &'m HamState) {
        let frame = b.top();
        let def = self.model.def(frame.def);
        (def, def.ham.state(frame.state))
    }

    fn advance_top(&self, b: &mut Belief, next: usize) {
        let top = b.machine.last_mut().expect("nonempty stack");
        let def = self.model.def(top.def);
        top.state = def.ham.state(top.state).succ[next];
    }

    // -- slot access ------------------------------------------------------

    fn shared_value(&self, b: &Belief, fi: usize, def: &CompiledDef, expr: ExprId) -> Result<Arc<Value>, ExecError> {
        let info = &def.schema.slots[def.schema.slot_of(expr)];
        b.shared[fi][info.storage]
            .clone()
            .ok_or_else(|| ExecError::Internal(format!("empty observed slot for e{expr} in {}", def.name)))
    }

    /// Read one expression slot as a per-particle closure-friendly source.
    fn slot_source(&self, b: &Belief, fi: usize, def: &CompiledDef, expr: ExprId) -> Result<ArgSrc, ExecError> {
        let slot = def.schema.slot_of(expr);
        let info = &def.schema.slots[slot];
        if info.space.is_observed() {
            Ok(ArgSrc::Shared(self.shared_value(b, fi, def, expr)?))
        } else {
            Ok(ArgSrc::Hidden(info.storage))
        }
    }

    /// The Normal-level value of a slot, requiring all particles to agree if
    /// it is hidden (used by trivial primitives and dynamic choice).
    fn consensus_value(&self, b: &Belief, fi: usize, def: &CompiledDef, expr: ExprId) -> Result<Value, ExecError> {
        let slot = def.schema.slot_of(expr);
        let info = &def.schema.slots[slot];
        if info.space.is_observed() {
            return Ok((*self.shared_value(b, fi, def, expr)?).clone());
        }
        let first = b.particles[0].frames[fi][info.storage]
            .clone()
            .ok_or_else(|| ExecError::Internal(format!("empty hidden slot e{expr}")))?;
        for p in &b.particles[1..] {
            if p.frames[fi][info.storage].as_ref() != Some(&first) {
                let (def, _) = self.cur(b);
                return Err(ExecError::DivergentArgs(def.name.clone()));
            }
        }
        info.space
            .value_of(&first)
            .ok_or_else(|| ExecError::Internal("hidden value with no Normal reading".to_string()))
    }

    // -- hidden transitions ------------------------------------------------

    /// Write the result of a per-particle stochastic transition into a hidden
    /// slot: exact expansion when small, sampling otherwise.
    fn hidden_transition(
        &self,
        b: &mut Belief,
        fi: usize,
        storage: usize,
        supports: Vec<Vec<(PoapsValue, f64)>>,
        rng: &mut impl Rng,
    ) -> Result<(), ExecError> {
        let expanded: usize = supports.iter().map(|s| s.len()).sum();
        if expanded <= self.expand_cap {
            let mut particles = Vec::with_capacity(expanded);
            let mut weights = Vec::with_capacity(expanded);
            for ((p, w), support) in b.particles.drain(..).zip(b.weights.drain(..)).zip(supports) {
                let n = support.len();
                for (i, (r, pr)) in support.into_iter().enumerate() {
                    if pr <= 0.0 {
                        continue;
                    }
                    let mut np = if i + 1 == n { p.clone() } else { p.clone() };
                    np.frames[fi][storage] = Some(r);
                    particles.push(np);
                    weights.push(w * pr);
                }
            }
            b.particles = particles;
            b.weights = weights;
            b.dedup();
        } else {
            for ((p, _w), support) in b.particles.iter_mut().zip(&b.weights).zip(supports) {
                let r = crate::prims::sample_from(&support, rng);
                p.frames[fi][storage] = Some(r);
            }
        }
        Ok(())
    }

    fn uniform_supports(&self, b: &Belief, space: &SpaceDesc) -> Result<Vec<Vec<(PoapsValue, f64)>>, ExecError> {
        let points = space
            .enumerate()
            .ok_or_else(|| ExecError::Internal(format!("cannot sample a value in {space}")))?;
        let p = 1.0 / points.len() as f64;
        let support: Vec<(PoapsValue, f64)> = points.into_iter().map(|v| (v, p)).collect();
        Ok(vec![support; b.particle_count()])
    }

    /// Write a Normal value into an expression slot, coercing into hidden
    /// spaces by drawing a fresh latent from the slot's prior.
    fn write_value(
        &self,
        b: &mut Belief,
        fi: usize,
        def: &CompiledDef,
        expr: ExprId,
        value: Value,
        rng: &mut impl Rng,
    ) -> Result<(), ExecError> {
        let slot = def.schema.slot_of(expr);
        let info = def.schema.slots[slot].clone();
        if info.space.is_observed() {
            b.shared[fi][info.storage] = Some(Arc::new(value));
        } else {
            let supports = self.uniform_supports(b, &info.space)?;
            self.hidden_transition(b, fi, info.storage, supports, rng)?;
        }
        Ok(())
    }

    // -- primitive execution ----------------------------------------------

    fn prim_of(&self, name: &str) -> &'m Primitive {
        self.model
            .registry
            .lookup(name)
            .expect("validated primitive name")
    }

    fn particle_args(
        &self,
        b: &Belief,
        fi: usize,
        sources: &[ArgSrc],
        particle: usize,
    ) -> Result<Vec<PoapsValue>, ExecError> {
        sources
            .iter()
            .map(|src| match src {
                ArgSrc::Shared(v) => Ok(PoapsValue::Obs(v.clone())),
                ArgSrc::Hidden(storage) => b.particles[particle].frames[fi][*storage]
                    .clone()
                    .ok_or_else(|| ExecError::Internal("empty hidden argument slot".to_string())),
            })
            .collect()
    }

    fn mirror_result(&self, b: &Belief, fi: usize, def: &CompiledDef, name: &str, args: &[ExprId]) -> Result<Value, ExecError> {
        let values: Vec<Value> = args
            .iter()
            .map(|a| self.consensus_value(b, fi, def, *a))
            .collect::<Result<_, _>>()?;
        let prim = self.prim_of(name);
        let f = match prim.user_fn {
            crate::prims::UserFn::Pure(f) => f,
            crate::prims::UserFn::World => {
                return Err(ExecError::Internal(format!("mirror primitive `{name}` has no pure function")))
            }
        };
        f(&values).map_err(|msg| {
            ExecError::Model(ModelError::BadArgs {
                name: name.to_string(),
                msg,
            })
        })
    }

    // -- the five public operations ----------------------------------------

    pub fn peek(&self, b: &Belief) -> Result<Peek, ExecError> {
        let (def, state) = self.cur(b);
        let fi = b.depth() - 1;
        Ok(match &state.kind {
            StateKind::Start => Peek::Silent,
            StateKind::Stop => {
                if b.depth() == 1 {
                    Peek::Terminal
                } else {
                    Peek::Silent
                }
            }
            StateKind::Action { op: ActionOp::Prim { name, .. }, .. } => {
                if self.prim_of(name).observations.is_some() {
                    Peek::ObsPoint
                } else {
                    Peek::Silent
                }
            }
            StateKind::Action { .. } => Peek::Silent,
            StateKind::Call { .. } => Peek::Silent,
            StateKind::Choice { dynamic: None, .. } => Peek::Choice {
                actions: state.succ.len(),
            },
            StateKind::Choice {
                dynamic: Some(list), ..
            } => {
                let items = self.consensus_value(b, fi, def, *list)?;
                let n = items
                    .as_list()
                    .ok_or_else(|| ExecError::Internal("dynamic choose over a non-list".to_string()))?
                    .len();
                if n == 0 {
                    Peek::DeadEnd
                } else {
                    Peek::Choice { actions: n }
                }
            }
            StateKind::Obs { .. } => Peek::ObsPoint,
        })
    }

    /// All observations the next step can emit, with their probabilities
    /// under the current belief. Only valid when `peek` says `ObsPoint`.
    pub fn obs_support(&self, b: &Belief) -> Result<Vec<(Observation, f64)>, ExecError> {
        let (def, state) = self.cur(b);
        let fi = b.depth() - 1;
        match &state.kind {
            StateKind::Action {
                op: ActionOp::Prim { name, args },
                ..
            } => {
                let prim = self.prim_of(name);
                if prim.is_trivial() {
                    let value = self.mirror_result(b, fi, def, name, args)?;
                    return Ok(vec![(Observation::Prim(PoapsValue::obs(value)), 1.0)]);
                }
                let range_points = prim.range.enumerate().ok_or_else(|| {
                    ExecError::Internal(format!("primitive `{name}` observes over a non-finite range"))
                })?;
                let sources: Vec<ArgSrc> = args
                    .iter()
                    .map(|a| self.slot_source(b, fi, def, *a))
                    .collect::<Result<_, _>>()?;
                let mut mass = vec![0.0f64; range_points.len()];
                for i in 0..b.particle_count() {
                    let d = self.particle_args(b, fi, &sources, i)?;
                    for (r, p) in prim.transition_support(&d)? {
                        let idx = range_points
                            .iter()
                            .position(|pt| *pt == r)
                            .ok_or_else(|| ExecError::Internal("transition left the range space".to_string()))?;
                        mass[idx] += b.weights[i] * p;
                    }
                }
                Ok(range_points
                    .into_iter()
                    .zip(mass)
                    .filter(|(_, m)| *m > 0.0)
                    .map(|(pt, m)| (Observation::Prim(pt), m))
                    .collect())
            }
            StateKind::Obs { test, .. } => {
                let branch_of = self.branch_predicate(b, fi, def, *test)?;
                let mut mass = [0.0f64; 2];
                for i in 0..b.particle_count() {
                    mass[branch_of(b, i)? as usize] += b.weights[i];
                }
                Ok((0..2u8)
                    .filter(|x| mass[*x as usize] > 0.0)
                    .map(|x| (Observation::Branch(x), mass[x as usize]))
                    .collect())
            }
            other => Err(ExecError::Internal(format!("obs_support at {other:?}"))),
        }
    }

    /// Which branch a particle's test value routes to (0 = then, 1 = else).
    #[allow(clippy::type_complexity)]
    fn branch_predicate(
        &self,
        b: &Belief,
        fi: usize,
        def: &CompiledDef,
        test: ExprId,
    ) -> Result<Box<dyn Fn(&Belief, usize) -> Result<u8, ExecError> + '_>, ExecError> {
        let slot = def.schema.slot_of(test);
        let info = def.schema.slots[slot].clone();
        if info.space.is_observed() {
            let v = self.shared_value(b, fi, def, test)?;
            let branch = match v.as_bool() {
                Some(true) => 0u8,
                Some(false) => 1u8,
                None => {
                    return Err(ExecError::Internal(format!(
                        "if test evaluated to non-boolean {v}"
                    )))
                }
            };
            Ok(Box::new(move |_, _| Ok(branch)))
        } else {
            let storage = info.storage;
            let space = info.space;
            Ok(Box::new(move |b: &Belief, i: usize| {
                let v = b.particles[i].frames[fi][storage]
                    .as_ref()
                    .ok_or_else(|| ExecError::Internal("empty test slot".to_string()))?;
                match v.as_bool_in(&space) {
                    Some(true) => Ok(0),
                    Some(false) => Ok(1),
                    None => Err(ExecError::Internal(format!("hidden test value {v:?} is not boolean"))),
                }
            }))
        }
    }

    /// Execute the observing state, conditioning the belief on `obs`.
    /// Returns the cost charged.
    pub fn apply_observation(
        &self,
        b: &mut Belief,
        obs: &Observation,
        rng: &mut impl Rng,
    ) -> Result<f64, ExecError> {
        let (def, state) = self.cur(b);
        let fi = b.depth() - 1;
        match &state.kind {
            StateKind::Action {
                expr,
                op: ActionOp::Prim { name, args },
            } => {
                let prim = self.prim_of(name);
                let cost = prim.cost_cents;
                if prim.is_trivial() {
                    let value = self.mirror_result(b, fi, def, name, args)?;
                    let expected = Observation::Prim(PoapsValue::obs(value.clone()));
                    if *obs != expected {
                        return Err(ExecError::ImpossibleObservation(format!(
                            "`{name}` computed {expected} but observed {obs}"
                        )));
                    }
                    self.write_value(b, fi, def, *expr, value, rng)?;
                } else {
                    let omega = match obs {
                        Observation::Prim(p) => p.clone(),
                        Observation::Branch(_) => {
                            return Err(ExecError::ImpossibleObservation(
                                "branch observation at a primitive call".to_string(),
                            ))
                        }
                    };
                    let sources: Vec<ArgSrc> = args
                        .iter()
                        .map(|a| self.slot_source(b, fi, def, *a))
                        .collect::<Result<_, _>>()?;
                    let slot = def.schema.slot_of(*expr);
                    let info = def.schema.slots[slot].clone();
                    debug_assert!(!info.space.is_observed());
                    let mut total = 0.0;
                    for i in 0..b.particle_count() {
                        let d = self.particle_args(b, fi, &sources, i)?;
                        let like = prim.transition_prob(&d, &omega)?;
                        b.weights[i] *= like;
                        total += b.weights[i];
                        b.particles[i].frames[fi][info.storage] = Some(omega.clone());
                    }
                    if total <= 0.0 {
                        return Err(ExecError::ImpossibleObservation(format!("{obs} at `{name}`")));
                    }
                    b.prune();
                    b.normalize();
                }
                b.cum_cost_cents += cost;
                self.advance_top(b, 0);
                Ok(cost)
            }
            StateKind::Obs { test, .. } => {
                let branch = match obs {
                    Observation::Branch(x) => *x,
                    Observation::Prim(_) => {
                        return Err(ExecError::ImpossibleObservation(
                            "primitive observation at a branch point".to_string(),
                        ))
                    }
                };
                let branch_of = self.branch_predicate(b, fi, def, *test)?;
                let mut total = 0.0;
                for i in 0..b.particle_count() {
                    if branch_of(b, i)? != branch {
                        b.weights[i] = 0.0;
                    } else {
                        total += b.weights[i];
                    }
                }
                if total <= 0.0 {
                    return Err(ExecError::ImpossibleObservation(format!("branch-{branch}")));
                }
                b.prune();
                b.normalize();
                self.advance_top(b, branch as usize);
                Ok(0.0)
            }
            other => Err(ExecError::Internal(format!("apply_observation at {other:?}"))),
        }
    }

    /// Execute one silent machine state. Returns the cost charged.
    pub fn advance_silent(&self, b: &mut Belief, rng: &mut impl Rng) -> Result<f64, ExecError> {
        let (def, state) = self.cur(b);
        let fi = b.depth() - 1;
        match state.kind.clone() {
            StateKind::Start => {
                self.advance_top(b, 0);
                Ok(0.0)
            }
            StateKind::Action { op: ActionOp::Sym(_), .. } => {
                self.advance_top(b, 0);
                Ok(0.0)
            }
            StateKind::Action {
                expr,
                op: ActionOp::Const(v),
            } => {
                self.write_value(b, fi, def, expr, v, rng)?;
                self.advance_top(b, 0);
                Ok(0.0)
            }
            StateKind::Action {
                expr,
                op: ActionOp::Prim { name, args },
            } => {
                // a hidden transition with no observation
                let prim = self.prim_of(&name);
                debug_assert!(prim.observations.is_none());
                let sources: Vec<ArgSrc> = args
                    .iter()
                    .map(|a| self.slot_source(b, fi, def, *a))
                    .collect::<Result<_, _>>()?;
                let supports = (0..b.particle_count())
                    .map(|i| {
                        let d = self.particle_args(b, fi, &sources, i)?;
                        prim.transition_support(&d).map_err(ExecError::from)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let slot = def.schema.slot_of(expr);
                let info = def.schema.slots[slot].clone();
                debug_assert!(!info.space.is_observed());
                self.hidden_transition(b, fi, info.storage, supports, rng)?;
                let cost = prim.cost_cents;
                b.cum_cost_cents += cost;
                self.advance_top(b, 0);
                Ok(cost)
            }
            StateKind::Call {
                expr: _,
                callee,
                args,
                tail,
            } => {
                self.perform_call(b, fi, def, &callee, &args, tail)?;
                Ok(0.0)
            }
            StateKind::Stop => {
                self.perform_return(b)?;
                Ok(0.0)
            }
            other => Err(ExecError::Internal(format!("advance_silent at {other:?}"))),
        }
    }

    fn perform_call(
        &self,
        b: &mut Belief,
        fi: usize,
        def: &CompiledDef,
        callee: &str,
        args: &[ExprId],
        tail: bool,
    ) -> Result<(), ExecError> {
        let callee_id = self.model.def_id(callee);
        let callee_def = self.model.def(callee_id);
        let cs = &callee_def.schema;
        let mut shared: SharedFrame = vec![None; cs.shared_len];
        let mut hidden: Vec<HiddenFrame> = vec![vec![None; cs.hidden_len]; b.particle_count()];
        for (j, arg) in args.iter().enumerate() {
            let src_slot = def.schema.slot_of(*arg);
            let src = def.schema.slots[src_slot].clone();
            let dst = cs.slots[cs.param_slot[j]].clone();
            if dst.space.is_observed() {
                shared[dst.storage] = Some(self.shared_value(b, fi, def, *arg)?);
            } else if src.space.is_observed() {
                return Err(ExecError::Internal(format!(
                    "observed argument feeding hidden parameter {j} of `{callee}`"
                )));
            } else {
                for (i, p) in b.particles.iter().enumerate() {
                    let v = p.frames[fi][src.storage]
                        .clone()
                        .ok_or_else(|| ExecError::Internal("empty argument slot at call".to_string()))?;
                    hidden[i][dst.storage] = Some(v);
                }
            }
        }
        if tail {
            *b.shared.last_mut().expect("frame") = shared;
            for (p, h) in b.particles.iter_mut().zip(hidden) {
                *p.frames.last_mut().expect("frame") = h;
            }
            // the tail edge points back at the state after Start
            self.advance_top(b, 0);
            b.dedup();
        } else {
            b.machine.push(MachineFrame {
                def: callee_id,
                state: callee_def.ham.start,
            });
            b.shared.push(shared);
            for (p, h) in b.particles.iter_mut().zip(hidden) {
                p.frames.push(h);
            }
        }
        Ok(())
    }

    fn perform_return(&self, b: &mut Belief) -> Result<(), ExecError> {
        let (callee_def, _) = self.cur(b);
        let result = callee_def.schema.slots[callee_def.schema.result_slot].clone();
        let fi = b.depth() - 1;
        let ret_shared = if result.space.is_observed() {
            Some(
                b.shared[fi][result.storage]
                    .clone()
                    .ok_or_else(|| ExecError::Internal("return value missing".to_string()))?,
            )
        } else {
            None
        };
        let ret_hidden: Option<Vec<PoapsValue>> = if result.space.is_observed() {
            None
        } else {
            Some(
                b.particles
                    .iter()
                    .map(|p| {
                        p.frames[fi][result.storage]
                            .clone()
                            .ok_or_else(|| ExecError::Internal("return value missing".to_string()))
                    })
                    .collect::<Result<_, _>>()?,
            )
        };

        b.machine.pop();
        b.shared.pop();
        for p in &mut b.particles {
            p.frames.pop();
        }

        let (caller_def, call_state) = self.cur(b);
        let call_expr = match &call_state.kind {
            StateKind::Call { expr, .. } => *expr,
            other => return Err(ExecError::Internal(format!("return into {other:?}"))),
        };
        let dst_slot = caller_def.schema.slot_of(call_expr);
        let dst = caller_def.schema.slots[dst_slot].clone();
        let fi = b.depth() - 1;
        if let Some(v) = ret_shared {
            if !dst.space.is_observed() {
                return Err(ExecError::Internal("observed return into hidden slot".to_string()));
            }
            b.shared[fi][dst.storage] = Some(v);
        } else if let Some(vals) = ret_hidden {
            for (p, v) in b.particles.iter_mut().zip(vals) {
                p.frames[fi][dst.storage] = Some(v);
            }
        }
        self.advance_top(b, 0);
        Ok(())
    }

    /// Number of actions at the current state (only valid at a choice).
    pub fn actions(&self, b: &Belief) -> Result<usize, ExecError> {
        match self.peek(b)? {
            Peek::Choice { actions } => Ok(actions),
            Peek::DeadEnd => Ok(0),
            _ => Err(ExecError::NotAtChoice),
        }
    }

    /// Actions permitted by the budget: all of them while money remains, else
    /// only the cheapest path toward Stop.
    pub fn allowed_actions(&self, b: &Belief) -> Result<Vec<usize>, ExecError> {
        let n = self.actions(b)?;
        if b.cum_cost_cents >= self.model.goal.horizon_cents && n > 0 {
            let top = b.top();
            Ok(vec![self.model.forced_action(top.def, top.state)])
        } else {
            Ok((0..n).collect())
        }
    }

    pub fn apply_choice(&self, b: &mut Belief, action: usize, rng: &mut impl Rng) -> Result<(), ExecError> {
        let (def, state) = self.cur(b);
        let fi = b.depth() - 1;
        match &state.kind {
            StateKind::Choice { dynamic: None, .. } => {
                if action >= state.succ.len() {
                    return Err(ExecError::BadAction {
                        action,
                        available: state.succ.len(),
                    });
                }
                self.advance_top(b, action);
                Ok(())
            }
            StateKind::Choice {
                expr,
                dynamic: Some(list),
            } => {
                let items_value = self.consensus_value(b, fi, def, *list)?;
                let items = items_value
                    .as_list()
                    .ok_or_else(|| ExecError::Internal("dynamic choose over a non-list".to_string()))?;
                if action >= items.len() {
                    return Err(ExecError::BadAction {
                        action,
                        available: items.len(),
                    });
                }
                let element = items[action].clone();
                self.write_value(b, fi, def, *expr, element, rng)?;
                self.advance_top(b, 0);
                Ok(())
            }
            _ => Err(ExecError::NotAtChoice),
        }
    }

    fn maybe_resample(&self, b: &mut Belief, rng: &mut impl Rng) {
        if let Some(target) = self.resample_target {
            if b.effective_sample_size() < target as f64 / 2.0 && b.particle_count() > 1 {
                b.resample(target, rng);
            }
        }
    }

    /// Apply `action` (if the belief sits at a choice), then run default
    /// actions, sampling each observation from its predictive distribution,
    /// until the next choice belief or the end of the program.
    pub fn advance_sampled(
        &self,
        b: &mut Belief,
        action: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<(Vec<Observation>, f64, SegEnd), ExecError> {
        if let Some(a) = action {
            self.apply_choice(b, a, rng)?;
        }
        let mut psi = Vec::new();
        let mut cost = 0.0;
        for _ in 0..self.max_steps {
            match self.peek(b)? {
                Peek::Choice { .. } => return Ok((psi, cost, SegEnd::Choice)),
                Peek::Terminal => return Ok((psi, cost, SegEnd::Terminal)),
                Peek::DeadEnd => return Ok((psi, cost, SegEnd::DeadEnd)),
                Peek::Silent => cost += self.advance_silent(b, rng)?,
                Peek::ObsPoint => {
                    let support = self.obs_support(b)?;
                    let obs = pick_weighted(&support, rng);
                    cost += self.apply_observation(b, &obs, rng)?;
                    self.maybe_resample(b, rng);
                    psi.push(obs);
                }
            }
        }
        Err(ExecError::SegmentOverrun(self.max_steps))
    }

    /// Enumerate every observation sequence reachable by taking `action`,
    /// with exact conditional beliefs. Returns `None` when the tree exceeds
    /// `limit` leaves.
    pub fn enumerate_segments(
        &self,
        b: &Belief,
        action: Option<usize>,
        limit: usize,
        rng: &mut impl Rng,
    ) -> Result<Option<Vec<SegLeaf>>, ExecError> {
        let mut start = b.clone();
        if let Some(a) = action {
            self.apply_choice(&mut start, a, rng)?;
        }
        let mut leaves = Vec::new();
        let full = self.enumerate_rec(start, Vec::new(), 1.0, 0.0, limit, &mut leaves, rng, 0)?;
        Ok(full.then_some(leaves))
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate_rec(
        &self,
        mut b: Belief,
        psi: Vec<Observation>,
        prob: f64,
        mut cost: f64,
        limit: usize,
        leaves: &mut Vec<SegLeaf>,
        rng: &mut impl Rng,
        depth: usize,
    ) -> Result<bool, ExecError> {
        for _ in depth..self.max_steps {
            match self.peek(&b)? {
                Peek::Silent => cost += self.advance_silent(&mut b, rng)?,
                Peek::ObsPoint => {
                    let support = self.obs_support(&b)?;
                    for (obs, p) in support {
                        if leaves.len() >= limit {
                            return Ok(false);
                        }
                        let mut nb = b.clone();
                        let step_cost = self.apply_observation(&mut nb, &obs, rng)?;
                        let mut npsi = psi.clone();
                        npsi.push(obs);
                        if !self.enumerate_rec(nb, npsi, prob * p, cost + step_cost, limit, leaves, rng, depth + 1)? {
                            return Ok(false);
                        }
                    }
                    return Ok(true);
                }
                end => {
                    if leaves.len() >= limit {
                        return Ok(false);
                    }
                    let end = match end {
                        Peek::Choice { .. } => SegEnd::Choice,
                        Peek::Terminal => SegEnd::Terminal,
                        Peek::DeadEnd => SegEnd::DeadEnd,
                        _ => unreachable!(),
                    };
                    leaves.push(SegLeaf {
                        psi,
                        prob,
                        cost,
                        belief: b,
                        end,
                    });
                    return Ok(true);
                }
            }
        }
        Err(ExecError::SegmentOverrun(self.max_steps))
    }
}

enum ArgSrc {
    Shared(Arc<Value>),
    Hidden(usize),
}

pub(crate) fn pick_weighted(support: &[(Observation, f64)], rng: &mut impl Rng) -> Observation {
    let total: f64 = support.iter().map(|(_, p)| p).sum();
    let mut target = rng.random::<f64>() * total;
    for (o, p) in support {
        target -= p;
        if target <= 0.0 {
            return o.clone();
        }
    }
    support.last().expect("nonempty support").0.clone()
}
