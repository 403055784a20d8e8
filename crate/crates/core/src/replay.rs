//! Prioritized experience memory.
//!
//! A ring buffer of whole epochs with a sum tree over `priority^alpha` for
//! proportional sampling. Stored experiences are immutable behind `Arc`, so
//! the simulation can keep running while the trainer holds samples.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasibility::FeasibleSet;
use crate::fleet::VehicleState;
use crate::valuefn::StateFeatures;

/// One decision epoch as seen at collection time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub epoch: u32,
    /// Pre-decision vehicle states.
    pub vehicles: Vec<VehicleState>,
    /// Per-vehicle feasible sets, null action first.
    pub feasible: Vec<FeasibleSet>,
    pub batch_requests: u32,
    pub nearby: Vec<u32>,
    /// Post-decision features per vehicle per action, exactly as scored.
    /// Entry 0 of each row is the null action.
    pub features: Vec<Vec<StateFeatures>>,
    /// Per vehicle, the post-decision features of the action it took in the
    /// previous epoch, exactly as scored then. This is the regression input
    /// whose target is computed from this epoch's decision.
    pub previous: Vec<StateFeatures>,
}

impl Experience {
    pub fn validate(&self) -> Result<()> {
        let n = self.vehicles.len();
        if self.feasible.len() != n || self.features.len() != n || self.nearby.len() != n || self.previous.len() != n {
            return Err(Error::Replay("experience rows disagree on vehicle count".into()));
        }
        for (set, feats) in self.feasible.iter().zip(&self.features) {
            if set.actions.first().is_none_or(|a| !a.is_null()) {
                return Err(Error::Replay(format!(
                    "vehicle {} feasible set lacks its null action",
                    set.vehicle_id.0
                )));
            }
            if feats.len() != set.actions.len() {
                return Err(Error::Replay("feature row length differs from its feasible set".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Floor added to every updated priority.
    pub epsilon: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 2000,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            epsilon: 1e-2,
        }
    }
}

impl ReplayConfig {
    /// Importance exponent after `progress` (0 to 1) of training.
    pub fn beta(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.beta_start + (self.beta_end - self.beta_start) * p
    }
}

/// Binary tree of partial sums; leaves hold sampling masses.
#[derive(Debug, Clone)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, slot: usize) -> f64 {
        self.nodes[self.leaves + slot]
    }

    fn set(&mut self, slot: usize, mass: f64) {
        let mut i = self.leaves + slot;
        self.nodes[i] = mass;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose cumulative range contains `u`; never lands on a zero leaf.
    fn find(&self, mut u: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = self.nodes[2 * i];
            let right = self.nodes[2 * i + 1];
            if (u < left && left > 0.0) || right <= 0.0 {
                i *= 2;
            } else {
                u -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

/// Handle returned by `sample`; goes stale once its slot is overwritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub slot: usize,
    pub serial: u64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub experiences: Vec<Arc<Experience>>,
    pub weights: Vec<f64>,
    pub indices: Vec<SampleIndex>,
}

#[derive(Debug, Clone)]
struct Slot {
    experience: Arc<Experience>,
    serial: u64,
    priority: f64,
}

#[derive(Debug, Clone)]
pub struct ReplayMemory {
    cfg: ReplayConfig,
    slots: Vec<Option<Slot>>,
    tree: SumTree,
    next: usize,
    len: usize,
    pushes: u64,
    evictions: u64,
    max_priority: f64,
    stale_updates: u64,
}

impl ReplayMemory {
    pub fn new(cfg: ReplayConfig) -> Result<Self> {
        if cfg.capacity == 0 {
            return Err(Error::Replay("capacity must be positive".into()));
        }
        if !(cfg.epsilon > 0.0) || !(cfg.alpha >= 0.0) {
            return Err(Error::Replay("epsilon must be positive and alpha non-negative".into()));
        }
        Ok(Self {
            cfg,
            slots: vec![None; cfg.capacity],
            tree: SumTree::new(cfg.capacity),
            next: 0,
            len: 0,
            pushes: 0,
            evictions: 0,
            max_priority: 1.0,
            stale_updates: 0,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    /// Raw priority of the experience in `slot`, if occupied.
    pub fn priority(&self, slot: usize) -> Option<f64> {
        self.slots.get(slot)?.as_ref().map(|s| s.priority)
    }

    /// Current sampling probability of `slot`.
    pub fn probability(&self, slot: usize) -> f64 {
        let total = self.tree.total();
        if slot >= self.cfg.capacity || total <= 0.0 {
            0.0
        } else {
            self.tree.get(slot) / total
        }
    }

    /// Stores `e` at the current maximum priority, evicting the oldest entry
    /// when full. Returns the slot used.
    pub fn push(&mut self, e: Experience) -> usize {
        let slot = self.next;
        if self.slots[slot].is_some() {
            self.evictions += 1;
        } else {
            self.len += 1;
        }
        let priority = self.max_priority;
        self.slots[slot] = Some(Slot {
            experience: Arc::new(e),
            serial: self.pushes,
            priority,
        });
        self.tree.set(slot, priority.powf(self.cfg.alpha));
        self.pushes += 1;
        self.next = (self.next + 1) % self.cfg.capacity;
        slot
    }

    /// `n` independent proportional draws with importance weights
    /// `(N P(j))^-beta`, normalised by the largest weight in the draw.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, beta: f64, rng: &mut R) -> Result<Sample> {
        if n == 0 || self.len < n {
            return Err(Error::Replay(format!(
                "cannot sample {n} experiences from a memory of {}",
                self.len
            )));
        }
        let total = self.tree.total();
        let mut out = Sample {
            experiences: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
            indices: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let u = rng.gen::<f64>() * total;
            let slot = self.tree.find(u);
            let s = self.slots[slot]
                .as_ref()
                .ok_or_else(|| Error::Replay(format!("sum tree pointed at empty slot {slot}")))?;
            let p = self.tree.get(slot) / total;
            out.weights.push((self.len as f64 * p).powf(-beta));
            out.experiences.push(s.experience.clone());
            out.indices.push(SampleIndex {
                slot,
                serial: s.serial,
            });
        }
        let max = out.weights.iter().cloned().fold(0.0f64, f64::max);
        for w in &mut out.weights {
            *w /= max;
        }
        Ok(out)
    }

    /// Sets priority `|td| + epsilon` for each still-live index; stale ones
    /// are skipped and counted.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_errors: &[f64]) {
        for (ix, td) in indices.iter().zip(td_errors) {
            let live = matches!(&self.slots.get(ix.slot), Some(Some(s)) if s.serial == ix.serial);
            if !live {
                self.stale_updates += 1;
                continue;
            }
            let p = td.abs() + self.cfg.epsilon;
            let p = if p.is_finite() { p } else { self.max_priority };
            if let Some(Some(s)) = self.slots.get_mut(ix.slot) {
                s.priority = p;
            }
            self.tree.set(ix.slot, p.powf(self.cfg.alpha));
            self.max_priority = self.max_priority.max(p);
        }
    }
}
