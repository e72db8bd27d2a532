//! POAPS: adaptive programs with partially observable state.
//!
//! A small Lisp dialect with a `choose` special form compiles into a
//! goal-POMDP: a static analysis derives the hidden-state space from the
//! primitives a program uses, each definition becomes a hierarchical abstract
//! machine, and the two merge into a generative model over joint
//! (machine, control) states. An online planner (C-RTDP) drives execution by
//! backing up values only at choice beliefs, and a simulated crowdsourcing
//! world makes the whole pipeline runnable and testable on a desk.

pub mod analysis;
pub mod ham;
pub mod planner;
pub mod pomdp;
pub mod prims;
pub mod runtime;
pub mod sexpr;
pub mod sim;
pub mod value;

pub use analysis::{build_schemas, ControlSchema, ProgramSchemas};
pub use ham::{compile_program, render_ham, Ham};
pub use planner::{plan, select_action, Belief, PlannerConfig, ValueTable};
pub use pomdp::{assemble, elicit_goal, GenerativeModel, GoalKind, GoalSpec};
pub use prims::{ModelParams, Primitive, Registry, SpaceDesc};
pub use runtime::{batch_experiment, replay, run, EpisodeResult, WorldAdapter};
pub use sexpr::{parse, print_canonical, validate, Expr, ProgramDef, ProgramSet};
pub use sim::SimulatedWorld;
pub use value::Value;
