//! Weighted-particle beliefs over control states.
//!
//! Every particle shares one machine configuration (the stack of active
//! machines and their current states), so a belief factors into a shared
//! part — observed slot values, equal across all worlds — and a per-particle
//! part holding the hidden slot values.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::ham::StateId;
use crate::prims::PoapsValue;
use crate::value::Value;

/// Index into a [`super::GenerativeModel`]'s compiled definitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DefId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MachineFrame {
    pub def: DefId,
    pub state: StateId,
}

/// Observed slot storage for one activation.
pub type SharedFrame = Vec<Option<Arc<Value>>>;

/// Hidden slot storage for one activation of one particle.
pub type HiddenFrame = Vec<Option<PoapsValue>>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Particle {
    pub frames: Vec<HiddenFrame>,
}

#[derive(Debug, Clone)]
pub struct Belief {
    pub machine: Vec<MachineFrame>,
    pub shared: Vec<SharedFrame>,
    pub particles: Vec<Particle>,
    pub weights: Vec<f64>,
    pub cum_cost_cents: f64,
}

pub const WEIGHT_TOL: f64 = 1e-9;

impl Belief {
    pub fn particle_count(&self) -> usize {
        self.particles.len()
    }

    pub fn depth(&self) -> usize {
        self.machine.len()
    }

    pub fn top(&self) -> MachineFrame {
        *self.machine.last().expect("nonempty stack")
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn normalize(&mut self) -> f64 {
        let total = self.total_weight();
        if total > 0.0 {
            for w in &mut self.weights {
                *w /= total;
            }
        }
        total
    }

    /// Drop zero-weight particles.
    pub fn prune(&mut self) {
        if self.weights.iter().all(|w| *w > 0.0) {
            return;
        }
        let mut particles = Vec::with_capacity(self.particles.len());
        let mut weights = Vec::with_capacity(self.weights.len());
        for (p, w) in self.particles.drain(..).zip(self.weights.drain(..)) {
            if w > 0.0 {
                particles.push(p);
                weights.push(w);
            }
        }
        self.particles = particles;
        self.weights = weights;
    }

    /// Merge particles with identical hidden state, summing weights.
    pub fn dedup(&mut self) {
        if self.particles.len() < 2 {
            return;
        }
        let mut index: HashMap<Particle, usize> = HashMap::with_capacity(self.particles.len());
        let mut particles = Vec::with_capacity(self.particles.len());
        let mut weights: Vec<f64> = Vec::with_capacity(self.weights.len());
        for (p, w) in self.particles.drain(..).zip(self.weights.drain(..)) {
            match index.entry(p) {
                std::collections::hash_map::Entry::Occupied(e) => weights[*e.get()] += w,
                std::collections::hash_map::Entry::Vacant(e) => {
                    particles.push(e.key().clone());
                    weights.push(w);
                    e.insert(particles.len() - 1);
                }
            }
        }
        self.particles = particles;
        self.weights = weights;
    }

    /// `1 / sum(w^2)` for normalized weights.
    pub fn effective_sample_size(&self) -> f64 {
        let sq: f64 = self.weights.iter().map(|w| w * w).sum();
        if sq > 0.0 {
            1.0 / sq
        } else {
            0.0
        }
    }

    /// Systematic resampling back to `target` equally weighted particles,
    /// followed by a merge of duplicates. Weights must be normalized.
    pub fn resample(&mut self, target: usize, rng: &mut impl Rng) {
        debug_assert!((self.total_weight() - 1.0).abs() < 1e-6);
        let offset: f64 = rng.random::<f64>() / target as f64;
        let mut particles = Vec::with_capacity(target);
        let mut cum = 0.0;
        let mut i = 0usize;
        for k in 0..target {
            let point = offset + k as f64 / target as f64;
            while i < self.particles.len() && cum + self.weights[i] < point {
                cum += self.weights[i];
                i += 1;
            }
            let idx = i.min(self.particles.len() - 1);
            particles.push(self.particles[idx].clone());
        }
        self.particles = particles;
        self.weights = vec![1.0 / target as f64; target];
        self.dedup();
    }

    /// Per-hidden-slot marginal histograms: for each activation and slot, the
    /// total weight on each value.
    pub fn hidden_marginals(&self) -> Vec<Vec<HashMap<PoapsValue, f64>>> {
        let mut out: Vec<Vec<HashMap<PoapsValue, f64>>> = self
            .particles
            .first()
            .map(|p| {
                p.frames
                    .iter()
                    .map(|f| vec![HashMap::new(); f.len()])
                    .collect()
            })
            .unwrap_or_default();
        for (p, w) in self.particles.iter().zip(&self.weights) {
            for (fi, frame) in p.frames.iter().enumerate() {
                for (si, slot) in frame.iter().enumerate() {
                    if let Some(v) = slot {
                        *out[fi][si].entry(v.clone()).or_insert(0.0) += w;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn particle(v: u16) -> Particle {
        Particle {
            frames: vec![vec![Some(PoapsValue::Bin(v))]],
        }
    }

    fn belief(bins: &[(u16, f64)]) -> Belief {
        Belief {
            machine: vec![MachineFrame {
                def: DefId(0),
                state: 0,
            }],
            shared: vec![Vec::new()],
            particles: bins.iter().map(|(v, _)| particle(*v)).collect(),
            weights: bins.iter().map(|(_, w)| *w).collect(),
            cum_cost_cents: 0.0,
        }
    }

    #[test]
    fn dedup_merges_equal_hidden_state() {
        let mut b = belief(&[(1, 0.25), (2, 0.25), (1, 0.5)]);
        b.dedup();
        assert_eq!(b.particle_count(), 2);
        assert!((b.total_weight() - 1.0).abs() < WEIGHT_TOL);
        let w1 = b
            .particles
            .iter()
            .zip(&b.weights)
            .find(|(p, _)| **p == particle(1))
            .unwrap()
            .1;
        assert!((w1 - 0.75).abs() < WEIGHT_TOL);
    }

    #[test]
    fn resample_concentrates_on_heavy_particles() {
        let mut b = belief(&[(1, 0.98), (2, 0.01), (3, 0.01)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        b.resample(100, &mut rng);
        assert!((b.total_weight() - 1.0).abs() < WEIGHT_TOL);
        let heavy = b
            .particles
            .iter()
            .zip(&b.weights)
            .find(|(p, _)| **p == particle(1))
            .map(|(_, w)| *w)
            .unwrap_or(0.0);
        assert!(heavy > 0.9, "heavy particle kept weight {heavy}");
    }

    #[test]
    fn ess_of_uniform_weights_is_count() {
        let b = belief(&[(1, 0.25), (2, 0.25), (3, 0.25), (4, 0.25)]);
        assert!((b.effective_sample_size() - 4.0).abs() < 1e-12);
    }
}
