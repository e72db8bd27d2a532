//! State spaces for hidden values, and the values that inhabit them.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::value::Value;

/// Description of the space a hidden value ranges over.
///
/// `Observed` is special: a slot with this space carries no distribution at
/// all — its hidden value always mirrors the Normal value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpaceDesc {
    Observed,
    /// `bins` cells covering the unit interval, centers at `(i + 0.5) / bins`.
    UnitGrid { bins: u32 },
    Enumerated(Vec<Value>),
    Product(Vec<SpaceDesc>),
}

impl SpaceDesc {
    pub fn bool_space() -> SpaceDesc {
        SpaceDesc::Enumerated(vec![Value::Bool(true), Value::Bool(false)])
    }

    pub fn int_range(n: u32) -> SpaceDesc {
        SpaceDesc::Enumerated((0..n as i64).map(Value::Int).collect())
    }

    pub fn is_observed(&self) -> bool {
        matches!(self, SpaceDesc::Observed)
    }

    /// Number of points, when finite. `Observed` spaces are unbounded.
    pub fn size(&self) -> Option<usize> {
        match self {
            SpaceDesc::Observed => None,
            SpaceDesc::UnitGrid { bins } => Some(*bins as usize),
            SpaceDesc::Enumerated(vs) => Some(vs.len()),
            SpaceDesc::Product(fs) => fs.iter().map(|f| f.size()).try_fold(1usize, |a, b| Some(a * b?)),
        }
    }

    pub fn grid_center(bins: u32, idx: u16) -> f64 {
        (idx as f64 + 0.5) / bins as f64
    }

    /// All points of a finite space, in a fixed order.
    pub fn enumerate(&self) -> Option<Vec<PoapsValue>> {
        match self {
            SpaceDesc::Observed => None,
            SpaceDesc::UnitGrid { bins } => {
                Some((0..*bins as u16).map(PoapsValue::Bin).collect())
            }
            SpaceDesc::Enumerated(vs) => Some((0..vs.len() as u16).map(PoapsValue::En).collect()),
            SpaceDesc::Product(fs) => {
                let mut acc: Vec<Vec<PoapsValue>> = vec![Vec::new()];
                for f in fs {
                    let pts = f.enumerate()?;
                    let mut next = Vec::with_capacity(acc.len() * pts.len());
                    for prefix in &acc {
                        for p in &pts {
                            let mut row = prefix.clone();
                            row.push(p.clone());
                            next.push(row);
                        }
                    }
                    acc = next;
                }
                Some(acc.into_iter().map(PoapsValue::product).collect())
            }
        }
    }

    pub fn uniform_sample(&self, rng: &mut impl Rng) -> Option<PoapsValue> {
        match self {
            SpaceDesc::Observed => None,
            SpaceDesc::UnitGrid { bins } => Some(PoapsValue::Bin(rng.random_range(0..*bins) as u16)),
            SpaceDesc::Enumerated(vs) => Some(PoapsValue::En(rng.random_range(0..vs.len()) as u16)),
            SpaceDesc::Product(fs) => {
                let parts = fs
                    .iter()
                    .map(|f| f.uniform_sample(rng))
                    .collect::<Option<Vec<_>>>()?;
                Some(PoapsValue::product(parts))
            }
        }
    }

    pub fn contains(&self, v: &PoapsValue) -> bool {
        match (self, v) {
            (SpaceDesc::Observed, PoapsValue::Obs(_)) => true,
            (SpaceDesc::UnitGrid { bins }, PoapsValue::Bin(i)) => (*i as u32) < *bins,
            (SpaceDesc::Enumerated(vs), PoapsValue::En(i)) => (*i as usize) < vs.len(),
            (SpaceDesc::Product(fs), PoapsValue::Prod(ps)) => {
                fs.len() == ps.len() && fs.iter().zip(ps.iter()).all(|(f, p)| f.contains(p))
            }
            _ => false,
        }
    }

    /// Convert a point of this space to the Normal-level value it denotes.
    /// Grid bins denote their center.
    pub fn value_of(&self, v: &PoapsValue) -> Option<Value> {
        match (self, v) {
            (_, PoapsValue::Obs(val)) => Some((**val).clone()),
            (SpaceDesc::UnitGrid { bins }, PoapsValue::Bin(i)) => {
                Some(Value::Float(SpaceDesc::grid_center(*bins, *i)))
            }
            (SpaceDesc::Enumerated(vs), PoapsValue::En(i)) => vs.get(*i as usize).cloned(),
            (SpaceDesc::Product(fs), PoapsValue::Prod(ps)) => {
                let items = fs
                    .iter()
                    .zip(ps.iter())
                    .map(|(f, p)| f.value_of(p))
                    .collect::<Option<Vec<_>>>()?;
                Some(Value::List(items))
            }
            _ => None,
        }
    }

    /// Find the point of this space denoted by a Normal value (used to match
    /// real-world observations against the model's observation space).
    pub fn point_of_value(&self, v: &Value) -> Option<PoapsValue> {
        match self {
            SpaceDesc::Observed => Some(PoapsValue::obs(v.clone())),
            SpaceDesc::Enumerated(vs) => vs
                .iter()
                .position(|atom| atom == v)
                .map(|i| PoapsValue::En(i as u16)),
            _ => None,
        }
    }

    /// Least upper bound of two space demands. `Observed` imposes nothing; a
    /// product extends the space it prefixes (primitives that declared only
    /// the prefix read the leading factors).
    pub fn join(&self, other: &SpaceDesc) -> Result<SpaceDesc, (SpaceDesc, SpaceDesc)> {
        if self == other {
            return Ok(self.clone());
        }
        match (self, other) {
            (SpaceDesc::Observed, x) | (x, SpaceDesc::Observed) => Ok(x.clone()),
            (SpaceDesc::Product(fs), x) if fs.first() == Some(x) => Ok(self.clone()),
            (x, SpaceDesc::Product(fs)) if fs.first() == Some(x) => Ok(other.clone()),
            (SpaceDesc::Product(fs), SpaceDesc::Product(gs)) => {
                if fs.len() < gs.len() && gs[..fs.len()] == fs[..] {
                    Ok(other.clone())
                } else if gs.len() < fs.len() && fs[..gs.len()] == gs[..] {
                    Ok(self.clone())
                } else {
                    Err((self.clone(), other.clone()))
                }
            }
            _ => Err((self.clone(), other.clone())),
        }
    }
}

impl fmt::Display for SpaceDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceDesc::Observed => write!(f, "observed"),
            SpaceDesc::UnitGrid { bins } => write!(f, "grid[{bins}]"),
            SpaceDesc::Enumerated(vs) => {
                if vs.len() == 2 && vs[0] == Value::Bool(true) {
                    return write!(f, "bool");
                }
                write!(f, "enum[{}]", vs.len())
            }
            SpaceDesc::Product(fs) => {
                write!(f, "(")?;
                for (i, part) in fs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " x ")?;
                    }
                    write!(f, "{part}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// A hidden (second-level) value: a point in some [`SpaceDesc`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PoapsValue {
    /// Index into a `UnitGrid`.
    Bin(u16),
    /// Index into an `Enumerated` space.
    En(u16),
    Prod(Vec<PoapsValue>),
    /// Mirrors the Normal value (for `Observed` spaces).
    Obs(Arc<Value>),
}

impl PoapsValue {
    pub fn obs(v: Value) -> PoapsValue {
        PoapsValue::Obs(Arc::new(v))
    }

    pub fn product(parts: Vec<PoapsValue>) -> PoapsValue {
        PoapsValue::Prod(parts)
    }

    pub fn as_obs(&self) -> Option<&Value> {
        match self {
            PoapsValue::Obs(v) => Some(v),
            _ => None,
        }
    }

    /// Interpret as a boolean for `if` routing. Enumerated booleans come from
    /// primitives like crowd-vote; observed booleans from trivial primitives.
    pub fn as_bool_in(&self, space: &SpaceDesc) -> Option<bool> {
        match self {
            PoapsValue::Obs(v) => v.as_bool(),
            PoapsValue::En(i) => match space {
                SpaceDesc::Enumerated(vs) => vs.get(*i as usize)?.as_bool(),
                _ => None,
            },
            _ => None,
        }
    }

    /// View this value through the (possibly narrower) space a primitive
    /// declared: products project onto their leading factors.
    pub fn project(&self, declared: &SpaceDesc) -> Option<PoapsValue> {
        if declared.contains(self) {
            return Some(self.clone());
        }
        match (self, declared) {
            (PoapsValue::Prod(ps), SpaceDesc::Product(fs)) if ps.len() > fs.len() => {
                let head = ps[..fs.len()].to_vec();
                let v = PoapsValue::Prod(head);
                declared.contains(&v).then_some(v)
            }
            (PoapsValue::Prod(ps), _) => ps.first().and_then(|p| p.project(declared)),
            _ => None,
        }
    }

    /// Deterministic byte encoding, used for belief keys.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            PoapsValue::Bin(i) => {
                out.push(0);
                out.extend_from_slice(&i.to_le_bytes());
            }
            PoapsValue::En(i) => {
                out.push(1);
                out.extend_from_slice(&i.to_le_bytes());
            }
            PoapsValue::Prod(ps) => {
                out.push(2);
                out.push(ps.len() as u8);
                for p in ps {
                    p.encode_into(out);
                }
            }
            PoapsValue::Obs(v) => {
                out.push(3);
                let s = v.to_string();
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grid_centers() {
        assert_eq!(SpaceDesc::grid_center(10, 0), 0.05);
        assert_eq!(SpaceDesc::grid_center(10, 9), 0.95);
        assert_eq!(SpaceDesc::grid_center(2, 0), 0.25);
        assert_eq!(SpaceDesc::grid_center(2, 1), 0.75);
    }

    #[test]
    fn join_rules() {
        let grid = SpaceDesc::UnitGrid { bins: 10 };
        let prod = SpaceDesc::Product(vec![grid.clone(), SpaceDesc::int_range(16)]);
        assert_eq!(SpaceDesc::Observed.join(&grid).unwrap(), grid);
        assert_eq!(grid.join(&grid).unwrap(), grid);
        assert_eq!(grid.join(&prod).unwrap(), prod);
        assert_eq!(prod.join(&grid).unwrap(), prod);
        let other = SpaceDesc::UnitGrid { bins: 5 };
        assert!(grid.join(&other).is_err());
    }

    #[test]
    fn enumerate_product() {
        let sp = SpaceDesc::Product(vec![SpaceDesc::UnitGrid { bins: 2 }, SpaceDesc::bool_space()]);
        let pts = sp.enumerate().unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(sp.size(), Some(4));
        for p in &pts {
            assert!(sp.contains(p));
        }
    }

    #[test]
    fn project_product_prefix() {
        let grid = SpaceDesc::UnitGrid { bins: 10 };
        let v = PoapsValue::Prod(vec![PoapsValue::Bin(3), PoapsValue::En(7)]);
        assert_eq!(v.project(&grid), Some(PoapsValue::Bin(3)));
        assert_eq!(PoapsValue::Bin(3).project(&grid), Some(PoapsValue::Bin(3)));
        assert_eq!(PoapsValue::Bin(11).project(&grid), None);
    }

    #[test]
    fn uniform_sampling_stays_in_space() {
        let sp = SpaceDesc::Product(vec![SpaceDesc::UnitGrid { bins: 4 }, SpaceDesc::int_range(3)]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = sp.uniform_sample(&mut rng).unwrap();
            assert!(sp.contains(&v));
        }
    }
}
