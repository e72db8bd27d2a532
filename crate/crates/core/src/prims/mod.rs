//! Primitives: a callable function paired with a hidden-state model.
//!
//! Each primitive couples the function users see (over ordinary values) with
//! a model of what the call does to hidden state: domain and range spaces, a
//! transition distribution, an observation distribution, per-argument
//! observability flags, and a cost in cents. Trivial primitives (`+`, `>`,
//! string and list helpers, desk-scale movement) have hidden behavior
//! identical to their visible behavior: observed spaces, zero cost, a
//! deterministic transition mirroring the function, and an identity
//! observation.

mod manifest;
mod space;

pub use manifest::{ManifestError, ModelParams, PrimParams};
pub use space::{PoapsValue, SpaceDesc};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use statrs::distribution::{Beta, ContinuousCDF};
use thiserror::Error;

use crate::runtime::WorldAdapter;
use crate::value::Value;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("primitive `{0}` is already registered")]
    Duplicate(String),
    #[error("primitive `{name}`: {detail}")]
    Normalization { name: String, detail: String },
    #[error("primitive `{name}`: argument outside its domain: {detail}")]
    OutOfSpace { name: String, detail: String },
    #[error("primitive `{name}` takes {expected} arguments, got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("primitive `{name}`: {msg}")]
    BadArgs { name: String, msg: String },
    #[error("unknown primitive `{0}`")]
    Unknown(String),
    #[error("primitive `{name}`: {msg}")]
    Invalid { name: String, msg: String },
}

pub type PureFn = fn(&[Value]) -> Result<Value, String>;

/// The function half of a primitive: either a pure computation, or a call
/// routed through the world adapter (a crowd platform, or its simulation).
#[derive(Clone)]
pub enum UserFn {
    Pure(PureFn),
    World,
}

impl std::fmt::Debug for UserFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UserFn::Pure(_) => write!(f, "Pure"),
            UserFn::World => write!(f, "World"),
        }
    }
}

/// The hidden-transition half of a primitive.
#[derive(Debug, Clone)]
pub enum Model {
    /// Deterministic mirror of the user function (trivial primitives).
    Mirror,
    /// One worker vote: correct with probability `(1 + (1 - d)^gamma) / 2`
    /// where `d` is the question difficulty and the correct answer is
    /// whichever candidate has the higher hidden quality (ties favor the
    /// first).
    CrowdVote { gamma: f64, bins: u32 },
    /// Quality after one improvement pass: a Beta distribution with mean
    /// `min(0.95, q + delta * (1 - q))` and concentration `nu`, discretized
    /// onto the quality grid. Row `q` of `rows` is that distribution.
    CImp { rows: Arc<Vec<Vec<f64>>>, bins: u32 },
    /// One worker marks an interval needing attention: uniform over intervals
    /// whose hidden need-bit is set, else uniform over all.
    CFind { intervals: u32 },
    /// Fixed support regardless of domain point (tests and custom models).
    Fixed(Vec<(PoapsValue, f64)>),
}

/// A primitive: name, domain/range/observation spaces, observability flags,
/// cost, hidden model, and user function.
#[derive(Debug, Clone)]
pub struct Primitive {
    pub name: String,
    pub domain: Vec<SpaceDesc>,
    pub range: SpaceDesc,
    /// `None` means the call emits no observation.
    pub observations: Option<SpaceDesc>,
    /// One flag per parameter: is that argument's hidden value observable?
    pub observable: Vec<bool>,
    pub cost_cents: f64,
    pub model: Model,
    pub user_fn: UserFn,
}

impl Primitive {
    pub fn trivial(name: &str, arity: usize, f: PureFn) -> Primitive {
        Primitive {
            name: name.to_string(),
            domain: vec![SpaceDesc::Observed; arity],
            range: SpaceDesc::Observed,
            observations: Some(SpaceDesc::Observed),
            observable: vec![true; arity],
            cost_cents: 0.0,
            model: Model::Mirror,
            user_fn: UserFn::Pure(f),
        }
    }

    pub fn arity(&self) -> usize {
        self.domain.len()
    }

    pub fn is_trivial(&self) -> bool {
        matches!(self.model, Model::Mirror)
    }

    /// Cost of one call. The signature admits state-dependent cost; every
    /// stock primitive charges a constant.
    pub fn cost(&self, _domain_point: &[PoapsValue]) -> f64 {
        self.cost_cents
    }

    /// The exact support of `T(d, ·)`: every range point with its probability.
    pub fn transition_support(&self, d: &[PoapsValue]) -> Result<Vec<(PoapsValue, f64)>, ModelError> {
        if d.len() != self.domain.len() {
            return Err(ModelError::Arity {
                name: self.name.clone(),
                expected: self.domain.len(),
                got: d.len(),
            });
        }
        let projected: Vec<PoapsValue> = d
            .iter()
            .zip(&self.domain)
            .map(|(v, sp)| {
                v.project(sp).ok_or_else(|| ModelError::OutOfSpace {
                    name: self.name.clone(),
                    detail: format!("{v:?} not in {sp}"),
                })
            })
            .collect::<Result<_, _>>()?;
        match &self.model {
            Model::Mirror => {
                let args: Vec<Value> = projected
                    .iter()
                    .map(|v| {
                        v.as_obs().cloned().ok_or_else(|| ModelError::OutOfSpace {
                            name: self.name.clone(),
                            detail: "trivial primitive applied to a hidden value".to_string(),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                let f = match self.user_fn {
                    UserFn::Pure(f) => f,
                    UserFn::World => {
                        return Err(ModelError::Invalid {
                            name: self.name.clone(),
                            msg: "mirror model requires a pure user function".to_string(),
                        })
                    }
                };
                let result = f(&args).map_err(|msg| ModelError::BadArgs {
                    name: self.name.clone(),
                    msg,
                })?;
                Ok(vec![(PoapsValue::obs(result), 1.0)])
            }
            Model::CrowdVote { gamma, bins } => {
                let (db, q0, q1) = match &projected[..] {
                    [PoapsValue::Bin(d), PoapsValue::Bin(q0), PoapsValue::Bin(q1)] => (*d, *q0, *q1),
                    _ => {
                        return Err(ModelError::OutOfSpace {
                            name: self.name.clone(),
                            detail: format!("{projected:?}"),
                        })
                    }
                };
                let acc = crowd_accuracy(SpaceDesc::grid_center(*bins, db), *gamma);
                let truth_first = q0 >= q1;
                // En(0) = true ("first answer is better"), En(1) = false.
                let (t_idx, f_idx) = if truth_first { (0, 1) } else { (1, 0) };
                Ok(vec![
                    (PoapsValue::En(t_idx), acc),
                    (PoapsValue::En(f_idx), 1.0 - acc),
                ])
            }
            Model::CImp { rows, .. } => {
                let q = match &projected[..] {
                    [PoapsValue::Bin(q)] => *q as usize,
                    _ => {
                        return Err(ModelError::OutOfSpace {
                            name: self.name.clone(),
                            detail: format!("{projected:?}"),
                        })
                    }
                };
                Ok(rows[q]
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(j, p)| (PoapsValue::Bin(j as u16), *p))
                    .collect())
            }
            Model::CFind { intervals } => {
                let mask = match &projected[..] {
                    [PoapsValue::Prod(parts)] => match &parts[..] {
                        [PoapsValue::Bin(_), PoapsValue::En(mask)] => *mask as u32,
                        _ => {
                            return Err(ModelError::OutOfSpace {
                                name: self.name.clone(),
                                detail: format!("{projected:?}"),
                            })
                        }
                    },
                    _ => {
                        return Err(ModelError::OutOfSpace {
                            name: self.name.clone(),
                            detail: format!("{projected:?}"),
                        })
                    }
                };
                let marked: Vec<u16> = (0..*intervals as u16).filter(|i| mask >> i & 1 == 1).collect();
                let pool = if marked.is_empty() {
                    (0..*intervals as u16).collect::<Vec<_>>()
                } else {
                    marked
                };
                let p = 1.0 / pool.len() as f64;
                Ok(pool.into_iter().map(|i| (PoapsValue::En(i), p)).collect())
            }
            Model::Fixed(support) => Ok(support.clone()),
        }
    }

    pub fn transition_prob(&self, d: &[PoapsValue], r: &PoapsValue) -> Result<f64, ModelError> {
        Ok(self
            .transition_support(d)?
            .into_iter()
            .filter(|(point, _)| point == r)
            .map(|(_, p)| p)
            .sum())
    }

    /// `O(r, omega)`. Every stock primitive with observations has `Omega = R`
    /// and an identity observation function.
    pub fn observation_prob(&self, r: &PoapsValue, omega: &PoapsValue) -> Result<f64, ModelError> {
        match &self.observations {
            None => Err(ModelError::Invalid {
                name: self.name.clone(),
                msg: "no observation space".to_string(),
            }),
            Some(_) => Ok(if r == omega { 1.0 } else { 0.0 }),
        }
    }

    /// Draw `r ~ T(d, ·)` and, when the primitive observes, `omega ~ O(r, ·)`.
    /// Deterministic given the rng state.
    pub fn sample_transition(
        &self,
        d: &[PoapsValue],
        rng: &mut impl Rng,
    ) -> Result<(PoapsValue, Option<PoapsValue>), ModelError> {
        let support = self.transition_support(d)?;
        let r = sample_from(&support, rng);
        let omega = self.observations.as_ref().map(|_| r.clone());
        Ok((r, omega))
    }
}

pub(crate) fn sample_from(support: &[(PoapsValue, f64)], rng: &mut impl Rng) -> PoapsValue {
    let total: f64 = support.iter().map(|(_, p)| p).sum();
    let mut target = rng.random::<f64>() * total;
    for (v, p) in support {
        target -= p;
        if target <= 0.0 {
            return v.clone();
        }
    }
    support.last().expect("nonempty support").0.clone()
}

pub fn crowd_accuracy(difficulty: f64, gamma: f64) -> f64 {
    0.5 * (1.0 + (1.0 - difficulty).powf(gamma))
}

fn beta_rows(delta: f64, nu: f64, bins: u32) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(bins as usize);
    for q_bin in 0..bins {
        let q = SpaceDesc::grid_center(bins, q_bin as u16);
        let mu = (q + delta * (1.0 - q)).min(0.95);
        let dist = Beta::new(mu * nu, (1.0 - mu) * nu).expect("valid Beta parameters");
        let mut row = Vec::with_capacity(bins as usize);
        for j in 0..bins {
            let lo = j as f64 / bins as f64;
            let hi = (j + 1) as f64 / bins as f64;
            row.push(dist.cdf(hi) - dist.cdf(lo));
        }
        let total: f64 = row.iter().sum();
        for p in &mut row {
            *p /= total;
        }
        rows.push(row);
    }
    rows
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// All registered primitives. Built once at startup, read-only afterwards.
#[derive(Debug, Default)]
pub struct Registry {
    prims: BTreeMap<String, Primitive>,
}

/// Enumerable-domain sizes beyond this are not exhaustively checked at
/// registration.
const NORMALIZATION_CHECK_CAP: usize = 100_000;
const NORMALIZATION_TOL: f64 = 1e-9;

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.prims.contains_key(name)
    }

    pub fn lookup(&self, name: &str) -> Option<&Primitive> {
        self.prims.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.prims.keys().map(|s| s.as_str())
    }

    /// Cheapest strictly positive cost among registered primitives, if any.
    pub fn min_positive_cost(&self) -> Option<f64> {
        self.prims
            .values()
            .map(|p| p.cost_cents)
            .filter(|c| *c > 0.0)
            .min_by(|a, b| a.total_cmp(b))
    }

    pub fn register(&mut self, p: Primitive) -> Result<(), ModelError> {
        if self.prims.contains_key(&p.name) {
            return Err(ModelError::Duplicate(p.name.clone()));
        }
        if p.observable.len() != p.domain.len() {
            return Err(ModelError::Invalid {
                name: p.name.clone(),
                msg: format!(
                    "observability vector has {} flags for {} parameters",
                    p.observable.len(),
                    p.domain.len()
                ),
            });
        }
        self.check_normalization(&p)?;
        self.prims.insert(p.name.clone(), p);
        Ok(())
    }

    fn check_normalization(&self, p: &Primitive) -> Result<(), ModelError> {
        let domain_space = SpaceDesc::Product(p.domain.clone());
        let enumerable = domain_space
            .size()
            .map(|n| n <= NORMALIZATION_CHECK_CAP)
            .unwrap_or(false);
        if !enumerable {
            return Ok(());
        }
        for point in domain_space.enumerate().expect("enumerable domain") {
            let d = match point {
                PoapsValue::Prod(parts) => parts,
                single => vec![single],
            };
            let support = p.transition_support(&d)?;
            let sum: f64 = support.iter().map(|(_, pr)| pr).sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(ModelError::Normalization {
                    name: p.name.clone(),
                    detail: format!("T({d:?}, .) sums to {sum}"),
                });
            }
            if support.iter().any(|(r, _)| !p.range.contains(r)) {
                return Err(ModelError::Normalization {
                    name: p.name.clone(),
                    detail: format!("T({d:?}, .) leaves the range space"),
                });
            }
        }
        Ok(())
    }

    /// Apply the user-function half: pure computation for trivial primitives,
    /// a world call for crowd primitives. Returns the Normal result and the
    /// real observation, if the primitive emits one.
    pub fn user_apply(
        &self,
        name: &str,
        args: &[Value],
        world: &mut dyn WorldAdapter,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Value, Option<Value>), ModelError> {
        let p = self.lookup(name).ok_or_else(|| ModelError::Unknown(name.to_string()))?;
        if args.len() != p.arity() {
            return Err(ModelError::Arity {
                name: name.to_string(),
                expected: p.arity(),
                got: args.len(),
            });
        }
        match p.user_fn {
            UserFn::Pure(f) => {
                let result = f(args).map_err(|msg| ModelError::BadArgs {
                    name: name.to_string(),
                    msg,
                })?;
                let obs = p.observations.as_ref().map(|_| result.clone());
                Ok((result, obs))
            }
            UserFn::World => world
                .execute_primitive(name, args, rng)
                .map_err(|msg| ModelError::BadArgs {
                    name: name.to_string(),
                    msg,
                }),
        }
    }

    /// The stock library used by every bundled program, with manifest
    /// overrides applied.
    pub fn standard(params: &ModelParams) -> Result<Registry, ModelError> {
        let mut reg = Registry::new();

        let cv = params.get("crowd-vote");
        let cv_bins = cv.bins.unwrap_or(10);
        let grid = SpaceDesc::UnitGrid { bins: cv_bins };
        reg.register(Primitive {
            name: "crowd-vote".to_string(),
            domain: vec![grid.clone(), grid.clone(), grid],
            range: SpaceDesc::bool_space(),
            observations: Some(SpaceDesc::bool_space()),
            observable: vec![false, false, false],
            cost_cents: cv.cost_cents.unwrap_or(1.0),
            model: Model::CrowdVote {
                gamma: cv.gamma.unwrap_or(1.0),
                bins: cv_bins,
            },
            user_fn: UserFn::World,
        })?;

        let ci = params.get("c-imp");
        let ci_bins = ci.bins.unwrap_or(10);
        let rows = beta_rows(ci.delta.unwrap_or(0.3), ci.nu.unwrap_or(10.0), ci_bins);
        let grid = SpaceDesc::UnitGrid { bins: ci_bins };
        reg.register(Primitive {
            name: "c-imp".to_string(),
            domain: vec![grid.clone()],
            range: grid,
            observations: None,
            observable: vec![false],
            cost_cents: ci.cost_cents.unwrap_or(5.0),
            model: Model::CImp {
                rows: Arc::new(rows),
                bins: ci_bins,
            },
            user_fn: UserFn::World,
        })?;

        let cf = params.get("c-find");
        let cf_bins = cf.bins.unwrap_or(10);
        let intervals = cf.intervals.unwrap_or(4);
        reg.register(Primitive {
            name: "c-find".to_string(),
            domain: vec![SpaceDesc::Product(vec![
                SpaceDesc::UnitGrid { bins: cf_bins },
                SpaceDesc::int_range(1 << intervals),
            ])],
            range: SpaceDesc::int_range(intervals),
            observations: Some(SpaceDesc::int_range(intervals)),
            observable: vec![false],
            cost_cents: cf.cost_cents.unwrap_or(2.0),
            model: Model::CFind { intervals },
            user_fn: UserFn::World,
        })?;

        let mut trivial = |name: &str, arity: usize, f: PureFn| -> Result<(), ModelError> {
            let mut p = Primitive::trivial(name, arity, f);
            if let Some(cost) = params.get(name).cost_cents {
                p.cost_cents = cost;
            }
            reg.register(p)
        };

        trivial("+", 2, pure_add)?;
        trivial(">", 2, pure_gt)?;
        trivial("=", 2, pure_eq)?;
        trivial("get-relevant-text", 2, pure_get_relevant_text)?;
        trivial("replace-text", 3, pure_replace_text)?;
        trivial("merge", 2, pure_merge)?;
        trivial("remove", 2, pure_remove)?;
        trivial("move-north", 1, pure_move_north)?;
        trivial("move-south", 1, pure_move_south)?;
        trivial("move-east", 1, pure_move_east)?;
        trivial("move-west", 1, pure_move_west)?;

        // Sampling a rock is observed-identity on the position but costs real
        // money, unlike the movement primitives (which default to free and are
        // usually given a per-step cost by a manifest).
        let mut sample = Primitive::trivial("sample", 1, pure_identity);
        sample.cost_cents = params.get("sample").cost_cents.unwrap_or(10.0);
        reg.register(sample)?;

        Ok(reg)
    }
}

// ---------------------------------------------------------------------------
// Stock pure functions
// ---------------------------------------------------------------------------

/// Side length of the desk-scale movement grid: positions are `y * 2 + x`.
pub const DESK_GRID_SIDE: i64 = 2;

fn want_int(v: &Value) -> Result<i64, String> {
    v.as_int().ok_or_else(|| format!("expected an integer, got {v}"))
}

fn want_str(v: &Value) -> Result<&str, String> {
    match v {
        Value::Str(s) => Ok(s),
        other => Err(format!("expected a string, got {other}")),
    }
}

fn want_list(v: &Value) -> Result<&[Value], String> {
    v.as_list().ok_or_else(|| format!("expected a list, got {v}"))
}

fn pure_add(args: &[Value]) -> Result<Value, String> {
    Ok(Value::Int(want_int(&args[0])? + want_int(&args[1])?))
}

fn pure_gt(args: &[Value]) -> Result<Value, String> {
    Ok(Value::Bool(want_int(&args[0])? > want_int(&args[1])?))
}

fn pure_eq(args: &[Value]) -> Result<Value, String> {
    Ok(Value::Bool(args[0] == args[1]))
}

fn pure_get_relevant_text(args: &[Value]) -> Result<Value, String> {
    let text = want_str(&args[0])?;
    let interval = want_int(&args[1])?;
    Ok(Value::Str(format!("{text}[{interval}]")))
}

fn pure_replace_text(args: &[Value]) -> Result<Value, String> {
    let text = want_str(&args[0])?;
    let interval = want_int(&args[1])?;
    let replacement = want_str(&args[2])?;
    Ok(Value::Str(format!("{text}[{interval}:={replacement}]")))
}

fn pure_merge(args: &[Value]) -> Result<Value, String> {
    let item = &args[0];
    let list = want_list(&args[1])?;
    let mut out = list.to_vec();
    if !out.contains(item) {
        out.push(item.clone());
    }
    Ok(Value::List(out))
}

fn pure_remove(args: &[Value]) -> Result<Value, String> {
    let item = &args[0];
    let list = want_list(&args[1])?;
    let mut out = list.to_vec();
    if let Some(pos) = out.iter().position(|v| v == item) {
        out.remove(pos);
    }
    Ok(Value::List(out))
}

fn desk_move(args: &[Value], dx: i64, dy: i64) -> Result<Value, String> {
    let pos = want_int(&args[0])?;
    if !(0..DESK_GRID_SIDE * DESK_GRID_SIDE).contains(&pos) {
        return Err(format!("position {pos} outside the desk grid"));
    }
    let (x, y) = (pos % DESK_GRID_SIDE, pos / DESK_GRID_SIDE);
    let (nx, ny) = (x + dx, y + dy);
    if (0..DESK_GRID_SIDE).contains(&nx) && (0..DESK_GRID_SIDE).contains(&ny) {
        Ok(Value::Int(ny * DESK_GRID_SIDE + nx))
    } else {
        Ok(Value::Int(pos)) // bump against the wall
    }
}

fn pure_move_north(args: &[Value]) -> Result<Value, String> {
    desk_move(args, 0, 1)
}

fn pure_move_south(args: &[Value]) -> Result<Value, String> {
    desk_move(args, 0, -1)
}

fn pure_move_east(args: &[Value]) -> Result<Value, String> {
    desk_move(args, 1, 0)
}

fn pure_move_west(args: &[Value]) -> Result<Value, String> {
    desk_move(args, -1, 0)
}

fn pure_identity(args: &[Value]) -> Result<Value, String> {
    Ok(args[0].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stock() -> Registry {
        Registry::standard(&ModelParams::default()).unwrap()
    }

    #[test]
    fn register_then_lookup() {
        let reg = stock();
        let p = reg.lookup("crowd-vote").unwrap();
        assert_eq!(p.arity(), 3);
        assert_eq!(p.cost_cents, 1.0);
        assert!(reg.contains("+"));
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut reg = stock();
        let err = reg.register(Primitive::trivial("+", 2, pure_add)).unwrap_err();
        assert!(matches!(err, ModelError::Duplicate(_)));
    }

    #[test]
    fn unnormalized_model_rejected_at_register() {
        let mut reg = Registry::new();
        let bad = Primitive {
            name: "bad".to_string(),
            domain: vec![SpaceDesc::bool_space()],
            range: SpaceDesc::bool_space(),
            observations: None,
            observable: vec![false],
            cost_cents: 0.0,
            model: Model::Fixed(vec![(PoapsValue::En(0), 0.45), (PoapsValue::En(1), 0.45)]),
            user_fn: UserFn::World,
        };
        let err = reg.register(bad).unwrap_err();
        assert!(matches!(err, ModelError::Normalization { .. }), "{err}");
    }

    #[test]
    fn observability_vector_length_checked() {
        let mut reg = Registry::new();
        let mut p = Primitive::trivial("f", 2, pure_add);
        p.observable = vec![true];
        assert!(matches!(reg.register(p), Err(ModelError::Invalid { .. })));
    }

    #[test]
    fn crowd_vote_transition_matches_accuracy_formula() {
        // difficulty bin 0 of 10 has center 0.05, so accuracy is
        // (1 + 0.95) / 2 = 0.975; q0 = 0.75 >= q1 = 0.25 makes "true" correct.
        let reg = stock();
        let p = reg.lookup("crowd-vote").unwrap();
        let d = vec![PoapsValue::Bin(0), PoapsValue::Bin(7), PoapsValue::Bin(2)];
        let expected = crowd_accuracy(0.05, 1.0);
        assert!((expected - 0.975).abs() < 1e-12);
        assert!((p.transition_prob(&d, &PoapsValue::En(0)).unwrap() - expected).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let (r, omega) = p.sample_transition(&d, &mut rng).unwrap();
            assert_eq!(omega, Some(r.clone()), "identity observation");
            if r == PoapsValue::En(0) {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - expected).abs() <= 0.01, "freq {freq} vs {expected}");
    }

    #[test]
    fn crowd_vote_rows_normalized() {
        let reg = stock();
        let p = reg.lookup("crowd-vote").unwrap();
        let d = vec![PoapsValue::Bin(4), PoapsValue::Bin(1), PoapsValue::Bin(8)];
        let total: f64 = p
            .transition_support(&d)
            .unwrap()
            .iter()
            .map(|(_, pr)| pr)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crowd_vote_observation_is_identity() {
        let reg = stock();
        let p = reg.lookup("crowd-vote").unwrap();
        let t = PoapsValue::En(0);
        let f = PoapsValue::En(1);
        assert_eq!(p.observation_prob(&t, &t).unwrap(), 1.0);
        assert_eq!(p.observation_prob(&t, &f).unwrap(), 0.0);
    }

    /// Independent quadrature for the improvement model: Simpson's rule over
    /// the unnormalized Beta density, bin mass divided by total mass. No
    /// gamma functions, no shared code with the implementation.
    fn simpson_beta_row(q_center: f64, delta: f64, nu: f64, bins: u32) -> Vec<f64> {
        let mu = (q_center + delta * (1.0 - q_center)).min(0.95);
        let (a, b) = (mu * nu, (1.0 - mu) * nu);
        let density = |x: f64| -> f64 {
            if x <= 0.0 || x >= 1.0 {
                0.0
            } else {
                x.powf(a - 1.0) * (1.0 - x).powf(b - 1.0)
            }
        };
        let integrate = |lo: f64, hi: f64| -> f64 {
            let n = 2000; // even
            let h = (hi - lo) / n as f64;
            let mut sum = density(lo) + density(hi);
            for i in 1..n {
                let x = lo + i as f64 * h;
                sum += density(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            sum * h / 3.0
        };
        let masses: Vec<f64> = (0..bins)
            .map(|j| integrate(j as f64 / bins as f64, (j + 1) as f64 / bins as f64))
            .collect();
        let total: f64 = masses.iter().sum();
        masses.into_iter().map(|m| m / total).collect()
    }

    #[test]
    fn c_imp_row_matches_quadrature_oracle() {
        let reg = stock();
        let p = reg.lookup("c-imp").unwrap();
        for q_bin in [0u16, 4, 9] {
            let oracle = simpson_beta_row(SpaceDesc::grid_center(10, q_bin), 0.3, 10.0, 10);
            for (j, expected) in oracle.iter().enumerate() {
                let got = p
                    .transition_prob(&[PoapsValue::Bin(q_bin)], &PoapsValue::Bin(j as u16))
                    .unwrap();
                assert!(
                    (got - expected).abs() < 1e-6,
                    "row {q_bin} bin {j}: {got} vs oracle {expected}"
                );
            }
        }
    }

    #[test]
    fn c_imp_sampled_mean_near_target() {
        // From the 0.45 bin the target mean is 0.45 + 0.3 * 0.55 = 0.615.
        let reg = stock();
        let p = reg.lookup("c-imp").unwrap();
        let d = vec![PoapsValue::Bin(4)];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let (r, omega) = p.sample_transition(&d, &mut rng).unwrap();
            assert!(omega.is_none(), "c-imp emits no observation");
            match r {
                PoapsValue::Bin(j) => sum += SpaceDesc::grid_center(10, j),
                other => panic!("{other:?}"),
            }
        }
        let mean = sum / n as f64;
        assert!((mean - 0.615).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn c_find_prefers_marked_intervals() {
        let reg = stock();
        let p = reg.lookup("c-find").unwrap();
        // mask 0b0101 marks intervals 0 and 2
        let d = vec![PoapsValue::Prod(vec![PoapsValue::Bin(5), PoapsValue::En(0b0101)])];
        let support = p.transition_support(&d).unwrap();
        assert_eq!(support, vec![(PoapsValue::En(0), 0.5), (PoapsValue::En(2), 0.5)]);
        // empty mask falls back to uniform over all intervals
        let d = vec![PoapsValue::Prod(vec![PoapsValue::Bin(5), PoapsValue::En(0)])];
        assert_eq!(p.transition_support(&d).unwrap().len(), 4);
    }

    #[test]
    fn trivial_add_mirrors_function() {
        let reg = stock();
        let p = reg.lookup("+").unwrap();
        let d = vec![PoapsValue::obs(Value::Int(2)), PoapsValue::obs(Value::Int(3))];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, omega) = p.sample_transition(&d, &mut rng).unwrap();
        assert_eq!(r, PoapsValue::obs(Value::Int(5)));
        assert_eq!(omega, Some(r));
        assert_eq!(p.cost(&d), 0.0);
    }

    #[test]
    fn stock_costs() {
        let reg = stock();
        assert_eq!(reg.lookup("c-imp").unwrap().cost_cents, 5.0);
        assert_eq!(reg.lookup("crowd-vote").unwrap().cost_cents, 1.0);
        assert_eq!(reg.lookup("c-find").unwrap().cost_cents, 2.0);
        assert_eq!(reg.lookup("+").unwrap().cost_cents, 0.0);
        assert_eq!(reg.lookup("sample").unwrap().cost_cents, 10.0);
        assert_eq!(reg.min_positive_cost(), Some(1.0));
    }

    #[test]
    fn manifest_overrides_apply() {
        let params = ModelParams::parse(
            "[primitive crowd-vote]\nbins = 2\ngamma = 1.5\ncost_cents = 2\n[primitive move-north]\ncost_cents = 1\n",
        )
        .unwrap();
        let reg = Registry::standard(&params).unwrap();
        let cv = reg.lookup("crowd-vote").unwrap();
        assert_eq!(cv.domain[0], SpaceDesc::UnitGrid { bins: 2 });
        assert_eq!(cv.cost_cents, 2.0);
        assert_eq!(reg.lookup("move-north").unwrap().cost_cents, 1.0);
    }

    #[test]
    fn desk_moves_clamp_at_walls() {
        let m = |f: PureFn, pos: i64| f(&[Value::Int(pos)]).unwrap().as_int().unwrap();
        assert_eq!(m(pure_move_north, 0), 2);
        assert_eq!(m(pure_move_north, 2), 2);
        assert_eq!(m(pure_move_east, 0), 1);
        assert_eq!(m(pure_move_east, 1), 1);
        assert_eq!(m(pure_move_south, 3), 1);
        assert_eq!(m(pure_move_west, 3), 2);
    }

    proptest! {
        /// Trivial primitives: the hidden result always equals the Normal
        /// result, whatever the inputs.
        #[test]
        fn trivial_poaps_equals_normal(a in -1000i64..1000, b in -1000i64..1000) {
            let reg = stock();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for name in ["+", ">", "="] {
                let p = reg.lookup(name).unwrap();
                let args = [Value::Int(a), Value::Int(b)];
                let d = vec![PoapsValue::obs(args[0].clone()), PoapsValue::obs(args[1].clone())];
                let (r, omega) = p.sample_transition(&d, &mut rng).unwrap();
                let normal = match p.user_fn {
                    UserFn::Pure(f) => f(&args).unwrap(),
                    UserFn::World => unreachable!(),
                };
                prop_assert_eq!(r.as_obs().unwrap(), &normal);
                prop_assert_eq!(omega.unwrap().as_obs().unwrap(), &normal);
            }
        }
    }
}
