//! Compilation step two: evaluate each definition to a hierarchical abstract
//! machine.
//!
//! A machine state is a program counter. Action states evaluate a symbol or
//! constant or execute a primitive; Call states run another definition's
//! machine; Choice states fan out to the branches of a `choose`; Obs states
//! sit after each conditional and emit which branch was taken so beliefs can
//! drop inconsistent worlds. A `choose` with a single argument is a dynamic
//! choice over the runtime list that argument evaluates to.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::prims::Registry;
use crate::sexpr::{Expr, ExprId, ExprKind, ProgramDef, ProgramSet};
use crate::value::Value;

pub type StateId = usize;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("`{0}` is neither a special form, a primitive, nor a defined function")]
    UnknownHead(String),
    #[error("function name `{0}` used as a value")]
    FunctionAsValue(String),
    #[error("definition `{0}` not found")]
    MissingDef(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionOp {
    /// Evaluate a symbol occurrence (its slot aliases the binding).
    Sym(String),
    /// Evaluate a literal.
    Const(Value),
    /// Execute a primitive on previously evaluated argument slots.
    Prim { name: String, args: Vec<ExprId> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateKind {
    Start,
    Stop,
    Action {
        expr: ExprId,
        op: ActionOp,
    },
    Call {
        expr: ExprId,
        callee: String,
        args: Vec<ExprId>,
        tail: bool,
    },
    /// Static choice: one successor per branch. Dynamic choice (`dynamic`
    /// holds the list expression) has a single successor and one runtime
    /// action per list element.
    Choice {
        expr: ExprId,
        dynamic: Option<ExprId>,
    },
    /// Emits which branch of conditional `cond` was taken; successors are
    /// `[then, else]`.
    Obs {
        cond: ExprId,
    },
}

#[derive(Debug, Clone)]
pub struct HamState {
    pub id: StateId,
    pub kind: StateKind,
    pub succ: Vec<StateId>,
}

#[derive(Debug, Clone)]
pub struct Ham {
    pub name: String,
    pub states: Vec<HamState>,
    pub start: StateId,
    pub stop: StateId,
}

impl Ham {
    pub fn state(&self, id: StateId) -> &HamState {
        &self.states[id]
    }

    /// Count states per kind, for structural assertions.
    pub fn census(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for s in &self.states {
            let key = match s.kind {
                StateKind::Start => "Start",
                StateKind::Stop => "Stop",
                StateKind::Action { .. } => "Action",
                StateKind::Call { .. } => "Call",
                StateKind::Choice { .. } => "Choice",
                StateKind::Obs { .. } => "Obs",
            };
            *out.entry(key).or_insert(0) += 1;
        }
        out
    }
}

struct Builder {
    states: Vec<HamState>,
}

/// A compiled sub-machine: an entry state and the states whose successor is
/// still open (to be wired to whatever comes next).
struct Fragment {
    entry: StateId,
    exits: Vec<StateId>,
}

impl Builder {
    fn push(&mut self, kind: StateKind) -> StateId {
        let id = self.states.len();
        self.states.push(HamState {
            id,
            kind,
            succ: Vec::new(),
        });
        id
    }

    fn connect(&mut self, exits: &[StateId], entry: StateId) {
        for &e in exits {
            self.states[e].succ.push(entry);
        }
    }

    fn single(&mut self, kind: StateKind) -> Fragment {
        let id = self.push(kind);
        Fragment {
            entry: id,
            exits: vec![id],
        }
    }
}

/// Compile one expression to a machine fragment. Exposed for tests; programs
/// are normally compiled whole with [`compile_program`].
fn compile_expr(
    set: &ProgramSet,
    registry: &Registry,
    expr: &Expr,
    b: &mut Builder,
) -> Result<Fragment, CompileError> {
    match &expr.kind {
        ExprKind::Symbol(name) => {
            if set.defs.contains_key(name) && !registry.contains(name) {
                return Err(CompileError::FunctionAsValue(name.clone()));
            }
            Ok(b.single(StateKind::Action {
                expr: expr.id,
                op: ActionOp::Sym(name.clone()),
            }))
        }
        ExprKind::Int(_) | ExprKind::Float(_) | ExprKind::Boolean(_) | ExprKind::Str(_) => {
            let value = expr.literal_value().expect("literal");
            Ok(b.single(StateKind::Action {
                expr: expr.id,
                op: ActionOp::Const(value),
            }))
        }
        ExprKind::List(items) if items.is_empty() => Ok(b.single(StateKind::Action {
            expr: expr.id,
            op: ActionOp::Const(Value::List(Vec::new())),
        })),
        ExprKind::List(items) => {
            let head = items[0].as_symbol().expect("validated head");
            match head {
                "choose" if items.len() == 2 => {
                    // dynamic choice over a runtime list
                    let list = compile_expr(set, registry, &items[1], b)?;
                    let choice = b.push(StateKind::Choice {
                        expr: expr.id,
                        dynamic: Some(items[1].id),
                    });
                    b.connect(&list.exits, choice);
                    Ok(Fragment {
                        entry: list.entry,
                        exits: vec![choice],
                    })
                }
                "choose" => {
                    let choice = b.push(StateKind::Choice {
                        expr: expr.id,
                        dynamic: None,
                    });
                    let mut exits = Vec::new();
                    for branch in &items[1..] {
                        let frag = compile_expr(set, registry, branch, b)?;
                        b.states[choice].succ.push(frag.entry);
                        exits.extend(frag.exits);
                    }
                    Ok(Fragment {
                        entry: choice,
                        exits,
                    })
                }
                "if" => {
                    let test = compile_expr(set, registry, &items[1], b)?;
                    let obs = b.push(StateKind::Obs { cond: expr.id });
                    b.connect(&test.exits, obs);
                    let mut exits = Vec::new();
                    for arm in &items[2..4] {
                        let frag = compile_expr(set, registry, arm, b)?;
                        b.states[obs].succ.push(frag.entry);
                        exits.extend(frag.exits);
                    }
                    Ok(Fragment {
                        entry: test.entry,
                        exits,
                    })
                }
                "let" => {
                    let bindings = items[1].as_list().expect("validated let");
                    let mut entry = None;
                    let mut open: Vec<StateId> = Vec::new();
                    for binding in bindings {
                        let pair = binding.as_list().expect("validated binding");
                        let frag = compile_expr(set, registry, &pair[1], b)?;
                        if let Some(_) = entry {
                            b.connect(&open, frag.entry);
                        } else {
                            entry = Some(frag.entry);
                        }
                        open = frag.exits;
                    }
                    let body = compile_expr(set, registry, &items[2], b)?;
                    match entry {
                        Some(e) => {
                            b.connect(&open, body.entry);
                            Ok(Fragment {
                                entry: e,
                                exits: body.exits,
                            })
                        }
                        None => Ok(body),
                    }
                }
                _ => {
                    let mut entry = None;
                    let mut open: Vec<StateId> = Vec::new();
                    let mut arg_ids = Vec::new();
                    for arg in &items[1..] {
                        let frag = compile_expr(set, registry, arg, b)?;
                        arg_ids.push(arg.id);
                        if entry.is_some() {
                            b.connect(&open, frag.entry);
                        } else {
                            entry = Some(frag.entry);
                        }
                        open = frag.exits;
                    }
                    let op_state = if registry.contains(head) {
                        b.push(StateKind::Action {
                            expr: expr.id,
                            op: ActionOp::Prim {
                                name: head.to_string(),
                                args: arg_ids,
                            },
                        })
                    } else if set.defs.contains_key(head) {
                        b.push(StateKind::Call {
                            expr: expr.id,
                            callee: head.to_string(),
                            args: arg_ids,
                            tail: false,
                        })
                    } else {
                        return Err(CompileError::UnknownHead(head.to_string()));
                    };
                    if entry.is_some() {
                        b.connect(&open, op_state);
                    }
                    Ok(Fragment {
                        entry: entry.unwrap_or(op_state),
                        exits: vec![op_state],
                    })
                }
            }
        }
    }
}

/// Compile one definition to a machine: `Start`, the body fragment, `Stop`.
/// Tail calls are not yet rewired; see [`optimize_tail_calls`].
pub fn compile_program(
    set: &ProgramSet,
    registry: &Registry,
    def: &ProgramDef,
) -> Result<Ham, CompileError> {
    let mut b = Builder { states: Vec::new() };
    let start = b.push(StateKind::Start);
    let body = compile_expr(set, registry, &def.body, &mut b)?;
    b.states[start].succ.push(body.entry);
    let stop = b.push(StateKind::Stop);
    b.connect(&body.exits, stop);
    Ok(Ham {
        name: def.name.clone(),
        states: b.states,
        start,
        stop,
    })
}

/// Rewire self-calls whose only continuation is `Stop`: the call rebinds the
/// current frame and jumps back to the state after `Start` instead of pushing
/// a new activation.
pub fn optimize_tail_calls(mut ham: Ham) -> Ham {
    let stop = ham.stop;
    let loop_entry = ham.states[ham.start].succ[0];
    let name = ham.name.clone();
    for state in &mut ham.states {
        if let StateKind::Call { callee, tail, .. } = &mut state.kind {
            if *callee == name && state.succ == vec![stop] {
                *tail = true;
                state.succ = vec![loop_entry];
            }
        }
    }
    ham
}

/// Compile and tail-optimize every definition in `names`.
pub fn compile_set(
    set: &ProgramSet,
    registry: &Registry,
    names: impl IntoIterator<Item = String>,
) -> Result<BTreeMap<String, Ham>, CompileError> {
    let mut out = BTreeMap::new();
    for name in names {
        let def = set.defs.get(&name).ok_or_else(|| CompileError::MissingDef(name.clone()))?;
        let ham = optimize_tail_calls(compile_program(set, registry, def)?);
        out.insert(name, ham);
    }
    Ok(out)
}

/// Deterministic plain-text listing, one line per state, for golden tests
/// and the `compile` subcommand.
pub fn render_ham(ham: &Ham) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ham {}", ham.name);
    for s in &ham.states {
        let desc = match &s.kind {
            StateKind::Start => "Start".to_string(),
            StateKind::Stop => "Stop".to_string(),
            StateKind::Action { expr, op } => match op {
                ActionOp::Sym(name) => format!("Action e{expr} sym {name}"),
                ActionOp::Const(v) => format!("Action e{expr} const {v}"),
                ActionOp::Prim { name, args } => {
                    let args = args.iter().map(|a| format!("e{a}")).collect::<Vec<_>>().join(" ");
                    format!("Action e{expr} prim {name} ({args})")
                }
            },
            StateKind::Call {
                expr,
                callee,
                args,
                tail,
            } => {
                let args = args.iter().map(|a| format!("e{a}")).collect::<Vec<_>>().join(" ");
                let tail = if *tail { " tail" } else { "" };
                format!("Call e{expr} {callee} ({args}){tail}")
            }
            StateKind::Choice { expr, dynamic } => match dynamic {
                Some(list) => format!("Choice e{expr} dynamic e{list}"),
                None => format!("Choice e{expr}"),
            },
            StateKind::Obs { cond } => format!("Obs if e{cond}"),
        };
        if s.succ.is_empty() {
            let _ = writeln!(out, "s{} {}", s.id, desc);
        } else {
            let succ = s.succ.iter().map(|t| format!("s{t}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(out, "s{} {} -> {}", s.id, desc, succ);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prims::ModelParams;
    use crate::sexpr::parse;
    use std::collections::HashSet;

    fn stock() -> Registry {
        Registry::standard(&ModelParams::default()).unwrap()
    }

    fn compile_one(src: &str, name: &str) -> Ham {
        let set = parse(src).unwrap();
        let reg = stock();
        optimize_tail_calls(compile_program(&set, &reg, &set.defs[name]).unwrap())
    }

    #[test]
    fn improve_matches_golden_topology() {
        let ham = compile_one(include_str!("../../../programs/improve.poaps"), "improve");
        let rendered = render_ham(&ham);
        let golden = include_str!("../tests/golden/improve_ham.txt");
        assert_eq!(rendered, golden, "rendered:\n{rendered}");
    }

    #[test]
    fn identity_program_is_three_states() {
        let ham = compile_one("(define (id x) x)", "id");
        assert_eq!(ham.states.len(), 3);
        let rendered = render_ham(&ham);
        assert_eq!(rendered.lines().count(), 4); // header plus one per state
        let census = ham.census();
        assert_eq!(census["Start"], 1);
        assert_eq!(census["Action"], 1);
        assert_eq!(census["Stop"], 1);
    }

    #[test]
    fn render_is_deterministic() {
        let a = render_ham(&compile_one(include_str!("../../../programs/vote.poaps"), "vote-better?"));
        let b = render_ham(&compile_one(include_str!("../../../programs/vote.poaps"), "vote-better?"));
        assert_eq!(a, b);
    }

    #[test]
    fn vote_better_census() {
        // Hand-built machine for the voting program: one Choice for the
        // choose, one Obs per conditional, one tail Call per recursive arm,
        // and an Action per leaf, primitive call, and constant:
        //   test (crowd-vote q a0 a1): 4, each recursion 3 + (+ c0 1) as 3
        //   + c1 as 1 = 7, second test (> c0 c1): 3, #t #f: 2 -> 23 actions.
        let ham = compile_one(include_str!("../../../programs/vote.poaps"), "vote-better?");
        let census = ham.census();
        assert_eq!(census["Start"], 1);
        assert_eq!(census["Stop"], 1);
        assert_eq!(census["Choice"], 1);
        assert_eq!(census["Obs"], 2);
        assert_eq!(census["Call"], 2);
        assert_eq!(census["Action"], 23);
        for s in &ham.states {
            if let StateKind::Call { tail, .. } = &s.kind {
                assert!(*tail, "both recursive calls are tail loops");
            }
        }
    }

    #[test]
    fn conditional_gets_one_obs_with_two_successors() {
        let ham = compile_one(include_str!("../../../programs/vote.poaps"), "vote-better?");
        for s in &ham.states {
            if let StateKind::Obs { .. } = s.kind {
                assert_eq!(s.succ.len(), 2);
            }
        }
    }

    #[test]
    fn tail_call_only_rewires_self_leaf_calls() {
        // find-fix calls fix in tail position but fix is a different
        // definition, so the call still pushes a frame.
        let set = parse(include_str!("../../../programs/ffv.poaps")).unwrap();
        let reg = stock();
        let ham = optimize_tail_calls(compile_program(&set, &reg, &set.defs["find-fix"]).unwrap());
        for s in &ham.states {
            if let StateKind::Call { callee, tail, .. } = &s.kind {
                assert!(!tail, "cross-definition call must not loop: {callee}");
            }
        }
        // ffv's call to find-fix sits in argument position: not a tail call
        let ham = optimize_tail_calls(compile_program(&set, &reg, &set.defs["ffv"]).unwrap());
        for s in &ham.states {
            if let StateKind::Call { callee, tail, .. } = &s.kind {
                if callee == "find-fix" {
                    assert!(!tail);
                }
            }
        }
    }

    #[test]
    fn no_call_program_unchanged_by_tail_pass() {
        let set = parse("(define (f x) (+ x 1))").unwrap();
        let reg = stock();
        let before = compile_program(&set, &reg, &set.defs["f"]).unwrap();
        let before_render = render_ham(&before);
        let after = optimize_tail_calls(before);
        assert_eq!(before_render, render_ham(&after));
    }

    #[test]
    fn dynamic_choose_compiles_to_dynamic_choice() {
        let set = parse(include_str!("../../../programs/rocksample.poaps")).unwrap();
        let reg = stock();
        let ham = compile_one(include_str!("../../../programs/rocksample.poaps"), "find-good-rock");
        let _ = set;
        let _ = reg;
        let dynamic = ham.states.iter().any(|s| {
            matches!(
                s.kind,
                StateKind::Choice {
                    dynamic: Some(_),
                    ..
                }
            )
        });
        assert!(dynamic);
    }

    #[test]
    fn payload_expr_ids_are_unique_and_cover_everything_but_lets() {
        use crate::analysis;
        for (src, name) in [
            (include_str!("../../../programs/vote.poaps"), "vote-better?"),
            (include_str!("../../../programs/ffv.poaps"), "fix"),
            (include_str!("../../../programs/rocksample.poaps"), "r-s"),
        ] {
            let set = parse(src).unwrap();
            let reg = stock();
            let ham = compile_one(src, name);
            let mut seen = HashSet::new();
            for s in &ham.states {
                let id = match &s.kind {
                    StateKind::Action { expr, .. } => Some(*expr),
                    StateKind::Call { expr, .. } => Some(*expr),
                    StateKind::Choice { expr, .. } => Some(*expr),
                    StateKind::Obs { cond } => Some(*cond),
                    _ => None,
                };
                if let Some(id) = id {
                    assert!(seen.insert(id), "expr e{id} appears in two payloads");
                }
            }
            // every evaluated subexpression is owned by exactly one state,
            // except `let` forms, whose value is their body's
            let exprs = analysis::enumerate_subexpressions(&set, name, &reg).unwrap();
            let def = &set.defs[name];
            let mut let_ids = HashSet::new();
            def.body.walk(&mut |e| {
                if let Some(items) = e.as_list() {
                    if items.first().and_then(|h| h.as_symbol()) == Some("let") {
                        let_ids.insert(e.id);
                    }
                }
            });
            for (id, _) in &exprs {
                if let_ids.contains(id) {
                    assert!(!seen.contains(id));
                } else {
                    assert!(seen.contains(id), "expr e{id} in `{name}` has no owning state");
                }
            }
        }
    }

    #[test]
    fn choice_nodes_match_choose_forms() {
        for (src, name, expected) in [
            (include_str!("../../../programs/vote.poaps"), "vote-better?", 1),
            (include_str!("../../../programs/ffv.poaps"), "fix", 2), // static + dynamic
            (include_str!("../../../programs/rocksample.poaps"), "move", 1),
        ] {
            let ham = compile_one(src, name);
            let count = ham
                .states
                .iter()
                .filter(|s| matches!(s.kind, StateKind::Choice { .. }))
                .count();
            assert_eq!(count, expected, "{name}");
        }
    }

    #[test]
    fn every_state_reachable_and_terminating() {
        for (src, name) in [
            (include_str!("../../../programs/vote.poaps"), "vote-better?"),
            (include_str!("../../../programs/ffv.poaps"), "ffv"),
            (include_str!("../../../programs/ffv.poaps"), "fix"),
            (include_str!("../../../programs/multi_vote.poaps"), "m-vote"),
            (include_str!("../../../programs/rocksample.poaps"), "r-s"),
            (include_str!("../../../programs/rocksample.poaps"), "move"),
        ] {
            let ham = compile_one(src, name);
            let mut reached = HashSet::new();
            let mut stack = vec![ham.start];
            while let Some(id) = stack.pop() {
                if reached.insert(id) {
                    stack.extend(&ham.states[id].succ);
                }
            }
            assert_eq!(reached.len(), ham.states.len(), "unreachable states in {name}");
            for s in &ham.states {
                match &s.kind {
                    StateKind::Stop => assert!(s.succ.is_empty()),
                    StateKind::Choice { dynamic: None, .. } => assert!(s.succ.len() >= 2),
                    _ => assert!(!s.succ.is_empty(), "s{} of {name} dead-ends", s.id),
                }
            }
        }
    }
}
