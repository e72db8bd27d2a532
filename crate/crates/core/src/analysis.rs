//! Static analysis (compilation step one): derive the hidden-state space of a
//! program.
//!
//! Every argument and every subexpression of each definition gets one state
//! slot. An argument's space comes from the primitives that consume it,
//! propagated by parameter position through user-function calls; anything no
//! primitive constrains stays observed. Slots that must hold the same value
//! at runtime — a conditional and its branches, a `choose` and its branches,
//! a `let` and its body, a symbol occurrence and its binding — share one
//! slot, so a definition's frame is a small dense array.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::prims::{Registry, SpaceDesc};
use crate::sexpr::{Expr, ExprId, ExprKind, ProgramDef, ProgramSet, Span};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("`{var}` in `{def}` needs space {first} at {first_site} but {second} at {second_site}")]
    SpaceConflict {
        def: String,
        var: String,
        first: SpaceDesc,
        first_site: Span,
        second: SpaceDesc,
        second_site: Span,
    },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("`{0}` is not defined")]
    MissingEntry(String),
    #[error("program failed validation: {0}")]
    Invalid(String),
}

/// The inferred space of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct VarSpace {
    pub variable: String,
    pub space: SpaceDesc,
    pub observable: bool,
}

/// Index of a slot in a definition's frame.
pub type SlotId = usize;

#[derive(Debug, Clone)]
pub struct SlotInfo {
    pub space: SpaceDesc,
    /// Offset into the frame's shared (observed) or per-particle (hidden)
    /// storage, depending on `space`.
    pub storage: usize,
}

/// What an evaluated symbol refers to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SymbolSource {
    Param(usize),
    LetBinding(ExprId),
}

/// Per-definition result of the static analysis.
#[derive(Debug, Clone)]
pub struct ControlSchema {
    pub name: String,
    /// One entry per parameter, in order.
    pub args: Vec<VarSpace>,
    /// Names of user functions this definition calls.
    pub callees: BTreeSet<String>,
    /// Frame slot for every evaluated expression (branches of conditionals
    /// alias their parent's slot).
    slot_of_expr: HashMap<ExprId, SlotId>,
    pub param_slot: Vec<SlotId>,
    pub slots: Vec<SlotInfo>,
    pub shared_len: usize,
    pub hidden_len: usize,
    /// Resolution of each evaluated symbol occurrence.
    pub symbol_source: HashMap<ExprId, SymbolSource>,
    /// Pre-order list of evaluated subexpressions with their spaces.
    pub expr_spaces: Vec<(ExprId, SpaceDesc)>,
    /// Slot holding the body's (and so the definition's) result.
    pub result_slot: SlotId,
}

impl ControlSchema {
    pub fn slot_of(&self, expr: ExprId) -> SlotId {
        self.slot_of_expr[&expr]
    }

    pub fn try_slot_of(&self, expr: ExprId) -> Option<SlotId> {
        self.slot_of_expr.get(&expr).copied()
    }

    pub fn space_of_expr(&self, expr: ExprId) -> &SpaceDesc {
        &self.slots[self.slot_of(expr)].space
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }
}

/// Schemas for an entry point and everything it transitively calls.
#[derive(Debug, Clone)]
pub struct ProgramSchemas {
    pub entry: String,
    pub defs: BTreeMap<String, ControlSchema>,
}

impl ProgramSchemas {
    pub fn schema(&self, name: &str) -> &ControlSchema {
        &self.defs[name]
    }
}

// ---------------------------------------------------------------------------
// Space cells: union-find over (def, local key) pairs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum LocalKey {
    Param(usize),
    Expr(ExprId),
}

struct Cells {
    parent: Vec<usize>,
    /// Joined space demand at each root, with the site that imposed it.
    demand: Vec<Option<(SpaceDesc, Span)>>,
    index: HashMap<(String, LocalKey), usize>,
}

impl Cells {
    fn new() -> Cells {
        Cells {
            parent: Vec::new(),
            demand: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn cell(&mut self, def: &str, key: LocalKey) -> usize {
        if let Some(&c) = self.index.get(&(def.to_string(), key)) {
            return c;
        }
        let c = self.parent.len();
        self.parent.push(c);
        self.demand.push(None);
        self.index.insert((def.to_string(), key), c);
        c
    }

    fn find(&mut self, mut c: usize) -> usize {
        while self.parent[c] != c {
            self.parent[c] = self.parent[self.parent[c]];
            c = self.parent[c];
        }
        c
    }

    fn union(&mut self, a: usize, b: usize) -> Result<(), (SpaceDesc, Span, SpaceDesc, Span)> {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return Ok(());
        }
        let joined = match (self.demand[ra].clone(), self.demand[rb].clone()) {
            (None, d) | (d, None) => d,
            (Some((sa, site_a)), Some((sb, site_b))) => match sa.join(&sb) {
                Ok(s) => Some((s, site_a)),
                Err(_) => return Err((sa, site_a, sb, site_b)),
            },
        };
        self.parent[rb] = ra;
        self.demand[ra] = joined;
        Ok(())
    }

    fn demand_space(
        &mut self,
        c: usize,
        space: SpaceDesc,
        site: Span,
    ) -> Result<(), (SpaceDesc, Span, SpaceDesc, Span)> {
        let r = self.find(c);
        match &self.demand[r] {
            None => {
                self.demand[r] = Some((space, site));
                Ok(())
            }
            Some((existing, prior_site)) => match existing.join(&space) {
                Ok(joined) => {
                    let prior = *prior_site;
                    self.demand[r] = Some((joined, prior));
                    Ok(())
                }
                Err(_) => Err((existing.clone(), *prior_site, space, site)),
            },
        }
    }

    fn space_of(&mut self, c: usize) -> SpaceDesc {
        let r = self.find(c);
        self.demand[r]
            .as_ref()
            .map(|(s, _)| s.clone())
            .unwrap_or(SpaceDesc::Observed)
    }
}

// ---------------------------------------------------------------------------
// Constraint collection
// ---------------------------------------------------------------------------

struct Analyzer<'a> {
    set: &'a ProgramSet,
    registry: &'a Registry,
    cells: Cells,
    /// Evaluated symbol resolutions per def.
    symbol_sources: HashMap<(String, ExprId), SymbolSource>,
    callees: BTreeMap<String, BTreeSet<String>>,
    conflict_var: HashMap<usize, (String, String)>,
    /// Pairs of positions in one frame that hold the same runtime value: a
    /// conditional and its arms, a choose and its branches, a let and its
    /// body, a symbol occurrence and its binding. Space cells also unify
    /// across call boundaries, but storage never does — calls copy.
    local_aliases: BTreeMap<String, Vec<(LocalKey, LocalKey)>>,
}

enum Scope {
    Param(usize),
    Let(ExprId),
}

impl<'a> Analyzer<'a> {
    fn run(&mut self, def: &ProgramDef) -> Result<(), AnalysisError> {
        let mut scope: Vec<(String, Scope)> = def
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), Scope::Param(i)))
            .collect();
        for (i, p) in def.params.iter().enumerate() {
            let cell = self.cells.cell(&def.name, LocalKey::Param(i));
            self.conflict_var.insert(cell, (def.name.clone(), p.clone()));
        }
        let _ = self.collect(def, &def.body, &mut scope)?;
        Ok(())
    }

    fn alias(&mut self, def: &ProgramDef, a: LocalKey, b: LocalKey) {
        self.local_aliases
            .get_mut(&def.name)
            .expect("alias sets prefilled")
            .push((a, b));
    }

    fn conflict(
        &mut self,
        def: &ProgramDef,
        cell: usize,
        err: (SpaceDesc, Span, SpaceDesc, Span),
    ) -> AnalysisError {
        let root = self.cells.find(cell);
        let (dname, var) = self
            .conflict_var
            .get(&root)
            .cloned()
            .unwrap_or_else(|| (def.name.clone(), "<expr>".to_string()));
        AnalysisError::SpaceConflict {
            def: dname,
            var,
            first: err.0,
            first_site: err.1,
            second: err.2,
            second_site: err.3,
        }
    }

    fn unite(&mut self, def: &ProgramDef, at: &Expr, a: usize, b: usize) -> Result<(), AnalysisError> {
        self.cells
            .union(a, b)
            .map_err(|e| self.conflict(def, a, e))
            .map_err(|e| {
                let _ = at;
                e
            })
    }

    fn demand(
        &mut self,
        def: &ProgramDef,
        cell: usize,
        space: SpaceDesc,
        site: Span,
    ) -> Result<(), AnalysisError> {
        self.cells
            .demand_space(cell, space, site)
            .map_err(|e| self.conflict(def, cell, e))
    }

    /// Collect constraints for `expr`, returning its cell.
    fn collect(
        &mut self,
        def: &ProgramDef,
        expr: &Expr,
        scope: &mut Vec<(String, Scope)>,
    ) -> Result<usize, AnalysisError> {
        let my_cell = self.cells.cell(&def.name, LocalKey::Expr(expr.id));
        match &expr.kind {
            ExprKind::Symbol(name) => {
                let resolved = scope.iter().rev().find(|(n, _)| n == name);
                match resolved {
                    Some((_, Scope::Param(i))) => {
                        let i = *i;
                        let param_cell = self.cells.cell(&def.name, LocalKey::Param(i));
                        self.unite(def, expr, param_cell, my_cell)?;
                        self.alias(def, LocalKey::Expr(expr.id), LocalKey::Param(i));
                        self.symbol_sources
                            .insert((def.name.clone(), expr.id), SymbolSource::Param(i));
                    }
                    Some((_, Scope::Let(binding))) => {
                        let binding = *binding;
                        let bind_cell = self.cells.cell(&def.name, LocalKey::Expr(binding));
                        self.unite(def, expr, bind_cell, my_cell)?;
                        self.alias(def, LocalKey::Expr(expr.id), LocalKey::Expr(binding));
                        self.symbol_sources
                            .insert((def.name.clone(), expr.id), SymbolSource::LetBinding(binding));
                    }
                    None => {
                        return Err(AnalysisError::Invalid(format!(
                            "unbound symbol `{name}` in `{}`",
                            def.name
                        )))
                    }
                }
            }
            ExprKind::Int(_) | ExprKind::Float(_) | ExprKind::Boolean(_) | ExprKind::Str(_) => {}
            ExprKind::List(items) if items.is_empty() => {}
            ExprKind::List(items) => {
                let head = items[0]
                    .as_symbol()
                    .ok_or_else(|| AnalysisError::Invalid("call head must be a symbol".into()))?;
                match head {
                    "choose" if items.len() == 2 => {
                        // dynamic choose over a runtime list
                        let list_cell = self.collect(def, &items[1], scope)?;
                        self.demand(def, list_cell, SpaceDesc::Observed, items[1].span)?;
                    }
                    "choose" => {
                        for branch in &items[1..] {
                            let branch_cell = self.collect(def, branch, scope)?;
                            self.unite(def, branch, branch_cell, my_cell)?;
                            self.alias(def, LocalKey::Expr(expr.id), LocalKey::Expr(branch.id));
                        }
                    }
                    "if" => {
                        let _test = self.collect(def, &items[1], scope)?;
                        for arm in &items[2..4] {
                            let arm_cell = self.collect(def, arm, scope)?;
                            self.unite(def, arm, arm_cell, my_cell)?;
                            self.alias(def, LocalKey::Expr(expr.id), LocalKey::Expr(arm.id));
                        }
                    }
                    "let" => {
                        let bindings = items[1].as_list().expect("validated let");
                        let mut introduced = 0;
                        for binding in bindings {
                            let pair = binding.as_list().expect("validated binding");
                            let name = pair[0].as_symbol().expect("validated name");
                            let value_cell = self.collect(def, &pair[1], scope)?;
                            let _ = value_cell;
                            scope.push((name.to_string(), Scope::Let(pair[1].id)));
                            introduced += 1;
                        }
                        let body_cell = self.collect(def, &items[2], scope)?;
                        self.unite(def, &items[2], body_cell, my_cell)?;
                        self.alias(def, LocalKey::Expr(expr.id), LocalKey::Expr(items[2].id));
                        for _ in 0..introduced {
                            scope.pop();
                        }
                    }
                    _ => {
                        let arg_cells: Vec<usize> = items[1..]
                            .iter()
                            .map(|arg| self.collect(def, arg, scope))
                            .collect::<Result<_, _>>()?;
                        if let Some(p) = self.registry.lookup(head) {
                            for ((arg, cell), space) in items[1..].iter().zip(&arg_cells).zip(&p.domain) {
                                self.demand(def, *cell, space.clone(), arg.span)?;
                            }
                            self.demand(def, my_cell, p.range.clone(), expr.span)?;
                        } else if let Some(callee) = self.set.defs.get(head) {
                            self.callees
                                .get_mut(&def.name)
                                .expect("callee sets prefilled")
                                .insert(head.to_string());
                            // call-by-poaps-value: caller argument slots share
                            // spaces with callee parameters, and the call's
                            // slot shares the callee's result space.
                            for (i, cell) in arg_cells.iter().enumerate() {
                                let param_cell = self.cells.cell(&callee.name, LocalKey::Param(i));
                                self.unite(def, expr, *cell, param_cell)?;
                            }
                            let callee_body = self.cells.cell(&callee.name, LocalKey::Expr(callee.body.id));
                            self.unite(def, expr, my_cell, callee_body)?;
                        } else {
                            return Err(AnalysisError::UnknownFunction(head.to_string()));
                        }
                    }
                }
            }
        }
        Ok(my_cell)
    }
}

/// Is this expression position evaluated (eligible for a state slot)?
/// Heads of calls, special-form keywords, binding lists and binding names are
/// not; everything else is.
fn evaluated_exprs(def: &ProgramDef) -> Vec<ExprId> {
    let mut out = Vec::new();
    fn walk(expr: &Expr, out: &mut Vec<ExprId>) {
        out.push(expr.id);
        if let ExprKind::List(items) = &expr.kind {
            if items.is_empty() {
                return;
            }
            match items[0].as_symbol() {
                Some("choose") => {
                    for b in &items[1..] {
                        walk(b, out);
                    }
                }
                Some("if") => {
                    for a in &items[1..] {
                        walk(a, out);
                    }
                }
                Some("let") => {
                    if let Some(bindings) = items[1].as_list() {
                        for binding in bindings {
                            if let Some([_, value]) = binding.as_list() {
                                walk(value, out);
                            }
                        }
                    }
                    walk(&items[2], out);
                }
                _ => {
                    for a in &items[1..] {
                        walk(a, out);
                    }
                }
            }
        }
    }
    walk(&def.body, &mut out);
    out
}

/// Infer spaces for the arguments of every definition reachable from `entry`.
pub fn infer_arg_spaces(
    set: &ProgramSet,
    entry: &str,
    registry: &Registry,
) -> Result<BTreeMap<String, Vec<VarSpace>>, AnalysisError> {
    let schemas = build_schemas(set, entry, registry)?;
    Ok(schemas
        .defs
        .into_iter()
        .map(|(name, schema)| (name, schema.args))
        .collect())
}

/// Pre-order list of evaluated subexpressions of one definition with their
/// inferred spaces. Builds the full schema for the definition in isolation.
pub fn enumerate_subexpressions(
    set: &ProgramSet,
    def_name: &str,
    registry: &Registry,
) -> Result<Vec<(ExprId, SpaceDesc)>, AnalysisError> {
    let schemas = build_schemas(set, def_name, registry)?;
    Ok(schemas.schema(def_name).expr_spaces.clone())
}

/// Build control schemas for `entry` and every definition it transitively
/// calls. Spaces are solved jointly across the closure, so an argument used
/// by a primitive three calls away still gets that primitive's space.
pub fn build_schemas(
    set: &ProgramSet,
    entry: &str,
    registry: &Registry,
) -> Result<ProgramSchemas, AnalysisError> {
    if !set.defs.contains_key(entry) {
        return Err(AnalysisError::MissingEntry(entry.to_string()));
    }
    // closure of reachable defs
    let mut reachable = BTreeSet::new();
    let mut stack = vec![entry.to_string()];
    while let Some(name) = stack.pop() {
        if !reachable.insert(name.clone()) {
            continue;
        }
        let def = set
            .defs
            .get(&name)
            .ok_or_else(|| AnalysisError::UnknownFunction(name.clone()))?;
        let mut calls = Vec::new();
        def.body.walk(&mut |e| {
            if let Some(items) = e.as_list() {
                if let Some(head) = items.first().and_then(|h| h.as_symbol()) {
                    if set.defs.contains_key(head) && !registry.contains(head) {
                        calls.push(head.to_string());
                    }
                }
            }
        });
        stack.extend(calls);
    }

    let mut analyzer = Analyzer {
        set,
        registry,
        cells: Cells::new(),
        symbol_sources: HashMap::new(),
        callees: reachable.iter().map(|n| (n.clone(), BTreeSet::new())).collect(),
        conflict_var: HashMap::new(),
        local_aliases: reachable.iter().map(|n| (n.clone(), Vec::new())).collect(),
    };
    for name in &reachable {
        analyzer.run(&set.defs[name])?;
    }

    let mut defs = BTreeMap::new();
    for name in &reachable {
        let def = &set.defs[name];
        let args: Vec<VarSpace> = def
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let cell = analyzer.cells.cell(name, LocalKey::Param(i));
                let space = analyzer.cells.space_of(cell);
                VarSpace {
                    variable: p.clone(),
                    observable: space.is_observed(),
                    space,
                }
            })
            .collect();

        // Assign dense frame slots: a little union-find over this frame's
        // positions, params first, then evaluated expressions in pre-order.
        let evaluated = evaluated_exprs(def);
        let mut key_index: HashMap<LocalKey, usize> = HashMap::new();
        let mut keys: Vec<LocalKey> = Vec::new();
        for i in 0..def.params.len() {
            key_index.insert(LocalKey::Param(i), keys.len());
            keys.push(LocalKey::Param(i));
        }
        for id in &evaluated {
            key_index.insert(LocalKey::Expr(*id), keys.len());
            keys.push(LocalKey::Expr(*id));
        }
        let mut parent: Vec<usize> = (0..keys.len()).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for (a, b) in &analyzer.local_aliases[name] {
            let (ia, ib) = (key_index[a], key_index[b]);
            let (ra, rb) = (find(&mut parent, ia), find(&mut parent, ib));
            if ra != rb {
                parent[rb.max(ra)] = rb.min(ra);
            }
        }

        let mut slot_of_root: HashMap<usize, SlotId> = HashMap::new();
        let mut slots: Vec<SlotInfo> = Vec::new();
        let mut shared_len = 0usize;
        let mut hidden_len = 0usize;
        let mut slot_for = |root: usize, space: SpaceDesc| -> SlotId {
            *slot_of_root.entry(root).or_insert_with(|| {
                let storage = if space.is_observed() {
                    shared_len += 1;
                    shared_len - 1
                } else {
                    hidden_len += 1;
                    hidden_len - 1
                };
                slots.push(SlotInfo { space, storage });
                slots.len() - 1
            })
        };

        let mut param_slot = Vec::new();
        for i in 0..def.params.len() {
            let cell = analyzer.cells.cell(name, LocalKey::Param(i));
            let space = analyzer.cells.space_of(cell);
            let root = find(&mut parent, key_index[&LocalKey::Param(i)]);
            param_slot.push(slot_for(root, space));
        }
        let mut slot_of_expr = HashMap::new();
        let mut expr_spaces = Vec::new();
        for id in &evaluated {
            let cell = analyzer.cells.cell(name, LocalKey::Expr(*id));
            let space = analyzer.cells.space_of(cell);
            let root = find(&mut parent, key_index[&LocalKey::Expr(*id)]);
            let slot = slot_for(root, space.clone());
            slot_of_expr.insert(*id, slot);
            expr_spaces.push((*id, space));
        }
        let result_slot = slot_of_expr[&def.body.id];

        let symbol_source = analyzer
            .symbol_sources
            .iter()
            .filter(|((d, _), _)| d == name)
            .map(|((_, id), src)| (*id, *src))
            .collect();

        defs.insert(
            name.clone(),
            ControlSchema {
                name: name.clone(),
                args,
                callees: analyzer.callees[name].clone(),
                slot_of_expr,
                param_slot,
                slots,
                shared_len,
                hidden_len,
                symbol_source,
                expr_spaces,
                result_slot,
            },
        );
    }

    Ok(ProgramSchemas {
        entry: entry.to_string(),
        defs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prims::ModelParams;
    use crate::sexpr::parse;

    fn stock() -> Registry {
        Registry::standard(&ModelParams::default()).unwrap()
    }

    fn load(src: &str) -> ProgramSet {
        parse(src).unwrap()
    }

    #[test]
    fn improve_text_arg_is_quality_grid() {
        let set = load(include_str!("../../../programs/improve.poaps"));
        let reg = stock();
        let spaces = infer_arg_spaces(&set, "improve", &reg).unwrap();
        let arg = &spaces["improve"][0];
        assert_eq!(arg.variable, "text");
        assert_eq!(arg.space, SpaceDesc::UnitGrid { bins: 10 });
        assert!(!arg.observable);
    }

    #[test]
    fn vote_counters_are_observed() {
        let set = load(include_str!("../../../programs/vote.poaps"));
        let reg = stock();
        let spaces = infer_arg_spaces(&set, "vote-better?", &reg).unwrap();
        let by_name: BTreeMap<_, _> = spaces["vote-better?"]
            .iter()
            .map(|v| (v.variable.clone(), v))
            .collect();
        assert_eq!(by_name["q"].space, SpaceDesc::UnitGrid { bins: 10 });
        assert_eq!(by_name["a0"].space, SpaceDesc::UnitGrid { bins: 10 });
        assert_eq!(by_name["a1"].space, SpaceDesc::UnitGrid { bins: 10 });
        assert_eq!(by_name["c0"].space, SpaceDesc::Observed);
        assert!(by_name["c0"].observable);
        assert_eq!(by_name["c1"].space, SpaceDesc::Observed);
    }

    #[test]
    fn space_conflict_is_reported_with_both_sites() {
        // x flows into both c-imp (unit grid) and crowd-vote's answer slot in
        // a 2-bin registry, so the same variable gets two different grids.
        let set = load("(define (f x) (if (crowd-vote x x x) (c-imp x) x))");
        let params = ModelParams::parse("[primitive crowd-vote]\nbins = 2\n").unwrap();
        let reg = Registry::standard(&params).unwrap();
        let err = build_schemas(&set, "f", &reg).unwrap_err();
        match err {
            AnalysisError::SpaceConflict { var, first, second, .. } => {
                assert_eq!(var, "x");
                assert_ne!(first, second);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn improve_subexpression_slots() {
        // body (choose (improve (c-imp text)) text): slots for the choose,
        // the recursive call, the c-imp call, and the two text occurrences.
        let set = load(include_str!("../../../programs/improve.poaps"));
        let reg = stock();
        let exprs = enumerate_subexpressions(&set, "improve", &reg).unwrap();
        assert_eq!(exprs.len(), 5);
        let grid = SpaceDesc::UnitGrid { bins: 10 };
        for (_, space) in &exprs {
            assert_eq!(space, &grid);
        }
    }

    #[test]
    fn identity_def_has_one_observed_slot() {
        let set = load("(define (f x) x)");
        let reg = stock();
        let exprs = enumerate_subexpressions(&set, "f", &reg).unwrap();
        assert_eq!(exprs.len(), 1);
        assert_eq!(exprs[0].1, SpaceDesc::Observed);
    }

    #[test]
    fn vote_better_evaluated_slot_census() {
        // Hand count of evaluated positions in the voting program's body:
        //   (choose A B)                      1
        //   A = (if (crowd-vote q a0 a1) R1 R2)
        //     if 1, test call 1, q/a0/a1 3    5
        //     R1 = (vote-better? q a0 a1 (+ c0 1) c1)
        //       call 1, q/a0/a1 3, (+ c0 1) 1, c0 1, 1 1, c1 1 = 8
        //     R2 likewise                     8
        //   B = (if (> c0 c1) #t #f)
        //     if 1, test 1, c0/c1 2, #t 1, #f 1 = 6
        // total 28
        let set = load(include_str!("../../../programs/vote.poaps"));
        let reg = stock();
        let exprs = enumerate_subexpressions(&set, "vote-better?", &reg).unwrap();
        assert_eq!(exprs.len(), 28);
    }

    #[test]
    fn ffv_closure_has_all_schemas() {
        let set = load(include_str!("../../../programs/ffv.poaps"));
        let reg = stock();
        let schemas = build_schemas(&set, "ffv", &reg).unwrap();
        let names: Vec<_> = schemas.defs.keys().cloned().collect();
        assert_eq!(names, vec!["ffv", "find", "find-fix", "fix", "vote-better?"]);
        // texts flow through c-find, so they carry quality plus need-bits
        let better = &schemas.schema("ffv").args[1];
        assert_eq!(
            better.space,
            SpaceDesc::Product(vec![SpaceDesc::UnitGrid { bins: 10 }, SpaceDesc::int_range(16)])
        );
        assert_eq!(schemas.schema("find-fix").callees, BTreeSet::from(["find".to_string(), "fix".to_string()]));
    }

    #[test]
    fn improve_schema_callees_is_self() {
        let set = load(include_str!("../../../programs/improve.poaps"));
        let reg = stock();
        let schemas = build_schemas(&set, "improve", &reg).unwrap();
        assert_eq!(schemas.defs.len(), 1);
        assert_eq!(
            schemas.schema("improve").callees,
            BTreeSet::from(["improve".to_string()])
        );
    }

    #[test]
    fn unified_spaces_keep_distinct_storage() {
        // worse-text and better-text swap positions through the recursion, so
        // their spaces unify, but each still owns its own frame slot.
        let set = load(include_str!("../../../programs/ffv.poaps"));
        let reg = stock();
        let schemas = build_schemas(&set, "ffv", &reg).unwrap();
        let schema = schemas.schema("ffv");
        assert_eq!(schema.args[0].space, schema.args[1].space);
        assert_ne!(schema.param_slot[0], schema.param_slot[1]);
    }

    #[test]
    fn missing_callee_is_an_error() {
        let set = load("(define (f x) (g x))");
        let reg = stock();
        assert!(matches!(
            build_schemas(&set, "f", &reg),
            Err(AnalysisError::UnknownFunction(_))
        ));
        assert!(matches!(
            build_schemas(&set, "nope", &reg),
            Err(AnalysisError::MissingEntry(_))
        ));
    }

    #[test]
    fn inference_is_a_fixpoint() {
        let set = load(include_str!("../../../programs/iterative_improvement.poaps"));
        let reg = stock();
        let first = infer_arg_spaces(&set, "it-i", &reg).unwrap();
        let second = infer_arg_spaces(&set, "it-i", &reg).unwrap();
        assert_eq!(first, second);
        // image reaches crowd-vote's difficulty slot through vote-better?
        assert_eq!(first["it-i"][0].space, SpaceDesc::UnitGrid { bins: 10 });
    }

    #[test]
    fn rocksample_args_all_observed() {
        let set = load(include_str!("../../../programs/rocksample.poaps"));
        let reg = stock();
        let schemas = build_schemas(&set, "r-s", &reg).unwrap();
        for arg in &schemas.schema("r-s").args {
            assert!(arg.observable, "{arg:?}");
        }
        assert!(schemas.defs.contains_key("move"));
        assert!(schemas.defs.contains_key("find-good-rock"));
    }
}
