//! Off-policy value training: double-Q Bellman targets from stored epochs,
//! importance-weighted squared loss, Adam, a hard-copied target network and
//! a decaying exploration noise scale.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::net::Cache;
use super::{StateFeatures, ValueNetParams};
use crate::assign::{solve, AssignmentInstance, LimitPolicy, SolveOptions};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::replay::Experience;

/// Linear decay from `start` to `end` over `decay_epochs`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_epochs: u64,
    pub elapsed: u64,
}

impl NoiseSchedule {
    pub fn new(start: f64, end: f64, decay_epochs: u64) -> Self {
        Self {
            start,
            end,
            decay_epochs,
            elapsed: 0,
        }
    }

    pub fn constant(sigma: f64) -> Self {
        Self::new(sigma, sigma, 0)
    }

    pub fn sigma(&self) -> f64 {
        if self.elapsed >= self.decay_epochs {
            return self.end;
        }
        let f = self.elapsed as f64 / self.decay_epochs as f64;
        self.start + (self.end - self.start) * f
    }

    pub fn advance(&mut self) {
        self.elapsed += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    /// Gradient steps between hard copies of the online weights.
    pub target_update_every: u64,
    pub noise: NoiseSchedule,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            learning_rate: 1e-3,
            target_update_every: 1000,
            noise: NoiseSchedule::new(0.5, 0.02, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub online: ValueNetParams,
    pub target: ValueNetParams,
    pub adam: Adam,
    pub gamma: f64,
    pub noise: NoiseSchedule,
    pub steps: u64,
    pub target_update_every: u64,
    pub skipped_steps: u64,
    /// Assignment options for target computation. Not persisted.
    pub solve: SolveOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Weighted loss before the update.
    pub loss: f64,
    /// Mean absolute TD error per experience, in batch order.
    pub td_errors: Vec<f64>,
    /// False when the gradient was not finite and the step was skipped.
    pub applied: bool,
}

impl TrainerState {
    pub fn new(online: ValueNetParams, cfg: &TrainerConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.gamma) {
            return Err(Error::Contract(format!("gamma {} must lie in [0, 1)", cfg.gamma)));
        }
        if cfg.target_update_every == 0 {
            return Err(Error::Contract("target_update_every must be positive".into()));
        }
        if !(cfg.noise.start >= 0.0 && cfg.noise.end >= 0.0) {
            return Err(Error::Contract("noise scales must be non-negative".into()));
        }
        if online.theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("initial weights are not finite".into()));
        }
        Ok(Self {
            target: online.clone(),
            adam: Adam::new(online.len(), cfg.learning_rate),
            online,
            gamma: cfg.gamma,
            noise: cfg.noise,
            steps: 0,
            target_update_every: cfg.target_update_every,
            skipped_steps: 0,
            solve: SolveOptions {
                on_limit: LimitPolicy::GreedyFallback,
                ..SolveOptions::default()
            },
        })
    }

    pub fn sigma(&self) -> f64 {
        self.noise.sigma()
    }

    /// Adds zero-mean Gaussian noise with the current scale to each value.
    pub fn explore_noise<R: Rng + ?Sized>(&self, values: &mut [f64], rng: &mut R) {
        let sigma = self.sigma();
        if sigma <= 0.0 {
            return;
        }
        let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
        for v in values {
            *v += normal.sample(rng);
        }
    }

    /// One Adam step on the importance-weighted squared Bellman error of
    /// every vehicle in every sampled experience.
    pub fn train_step(&mut self, batch: &[(&Experience, f64)]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::Contract("empty minibatch".into()));
        }
        let mut rows: Vec<(&StateFeatures, f64, f64)> = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        for (e, w) in batch {
            let targets = bellman_targets(self, e)?;
            let start = rows.len();
            for (prev, y) in e.previous.iter().zip(targets) {
                rows.push((prev, y, *w));
            }
            spans.push(start..rows.len());
        }
        let n = rows.len().max(1) as f64;
        let mut grad = vec![0.0; self.online.len()];
        let mut cache = Cache::default();
        let mut loss = 0.0;
        let mut abs_td = Vec::with_capacity(rows.len());
        for (f, y, w) in &rows {
            let v = self.online.forward(f, &mut cache)?;
            let r = y - v;
            loss += w * r * r / n;
            abs_td.push(r.abs());
            self.online.backward(&cache, -2.0 * w * r / n, &mut grad);
        }
        let td_errors = spans
            .into_iter()
            .map(|s| {
                if s.is_empty() {
                    0.0
                } else {
                    let k = s.len() as f64;
                    abs_td[s].iter().sum::<f64>() / k
                }
            })
            .collect();
        let applied = grad.iter().all(|g| g.is_finite());
        if applied {
            self.adam.step(&mut self.online.theta, &grad);
            self.steps += 1;
            if self.steps.is_multiple_of(self.target_update_every) {
                self.target.theta.clone_from(&self.online.theta);
            }
        } else {
            self.skipped_steps += 1;
            log::warn!(
                "skipping gradient step {}: non-finite gradient (loss {loss})",
                self.steps
            );
        }
        Ok(StepOutcome {
            loss,
            td_errors,
            applied,
        })
    }
}

/// Per-vehicle targets for one stored epoch: actions are re-selected by the
/// online network through the assignment solver and the chosen post-decision
/// states are valued by the target network.
pub fn bellman_targets(trainer: &TrainerState, e: &Experience) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(e.feasible.len());
    for (set, feats) in e.feasible.iter().zip(&e.features) {
        let row = set
            .actions
            .iter()
            .zip(feats)
            .map(|(a, f)| Ok(a.immediate_reward + trainer.online.value(f)?))
            .collect::<Result<Vec<f64>>>()?;
        scores.push(row);
    }
    let inst = AssignmentInstance::from_sets(&e.feasible, &scores)?;
    let chosen = solve(&inst, &trainer.solve)?;
    e.feasible
        .iter()
        .zip(&e.features)
        .zip(&chosen.choice)
        .map(|((set, feats), &a)| {
            let future = if trainer.gamma == 0.0 {
                0.0
            } else {
                trainer.gamma * trainer.target.value(&feats[a])?
            };
            Ok(set.actions[a].immediate_reward + future)
        })
        .collect()
}

/// Weighted mean squared error of `params` on `(features, target, weight)`
/// rows, with its gradient.
pub fn mean_squared_loss(params: &ValueNetParams, rows: &[(&StateFeatures, f64, f64)]) -> Result<(f64, Vec<f64>)> {
    let n = rows.len().max(1) as f64;
    let mut grad = vec![0.0; params.len()];
    let mut cache = Cache::default();
    let mut loss = 0.0;
    for (f, y, w) in rows {
        let v = params.forward(f, &mut cache)?;
        let r = y - v;
        loss += w * r * r / n;
        params.backward(&cache, -2.0 * w * r / n, &mut grad);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::demand::RequestId;
    use crate::feasibility::{FeasibleAction, FeasibleSet};
    use crate::fleet::{fingerprint, VehicleId, VehicleState};
    use crate::roadnet::{LocationEmbedding, LocationId, ProxyWeights};
    use crate::valuefn::{FeatureScales, NetShape, StopFeature};

    fn emb() -> Arc<LocationEmbedding> {
        Arc::new(LocationEmbedding {
            dim: 2,
            table: (0..8).map(|i| (i as f64 * 0.9).cos()).collect(),
            proxy: ProxyWeights {
                hidden: 0,
                w1: vec![],
                b1: vec![],
                w2: vec![],
                b2: 0.0,
            },
            time_scale: 1.0,
        })
    }

    fn shape() -> NetShape {
        NetShape {
            emb_dim: 2,
            hidden: 3,
            head1: 4,
            head2: 3,
        }
    }

    fn feats(loc: u32, stops: usize) -> StateFeatures {
        StateFeatures {
            stops: (0..stops)
                .map(|k| StopFeature {
                    location: LocationId(((loc as usize + k) % 4) as u32),
                    remaining_delay: 100.0 * (k + 1) as f64,
                })
                .collect(),
            current: LocationId(loc),
            epoch_scalar: 0.5,
            nearby_vehicles: 1,
            batch_requests: 2,
        }
    }

    /// One vehicle with a null action and a one-request action.
    fn single_vehicle_experience() -> Experience {
        let v = VehicleState::idle(VehicleId(0), 2, LocationId(0), 0.0);
        let mut act = FeasibleAction::null(&v);
        act.request_ids = vec![RequestId(7)];
        act.immediate_reward = 1.0;
        Experience {
            epoch: 0,
            vehicles: vec![v.clone()],
            feasible: vec![FeasibleSet {
                vehicle_id: v.id,
                actions: vec![FeasibleAction::null(&v), act],
            }],
            batch_requests: 1,
            nearby: vec![0],
            features: vec![vec![feats(0, 0), feats(1, 2)]],
            previous: vec![feats(2, 1)],
        }
    }

    fn trainer(seed: Option<u64>, gamma: f64) -> TrainerState {
        let params = match seed {
            Some(s) => ValueNetParams::random(shape(), FeatureScales::default(), emb(), s).unwrap(),
            None => ValueNetParams::zeros(shape(), FeatureScales::default(), emb()).unwrap(),
        };
        TrainerState::new(
            params,
            &TrainerConfig {
                gamma,
                learning_rate: 1e-2,
                target_update_every: 3,
                noise: NoiseSchedule::new(0.5, 0.02, 10),
            },
        )
        .unwrap()
    }

    #[test]
    fn degenerate_experience_targets_one() {
        let t = trainer(None, 0.9);
        assert_eq!(bellman_targets(&t, &single_vehicle_experience()).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_gamma_targets_immediate_reward() {
        let t = trainer(Some(5), 0.0);
        let e = single_vehicle_experience();
        let y = bellman_targets(&t, &e).unwrap();
        assert!(y == vec![0.0] || y == vec![1.0]);
        assert_eq!(y, bellman_targets(&t, &e).unwrap());
    }

    #[test]
    fn targets_use_target_network_for_evaluation() {
        let mut t = trainer(Some(5), 0.5);
        let e = single_vehicle_experience();
        t.target.theta.iter_mut().for_each(|x| *x = 0.0);
        let y = bellman_targets(&t, &e).unwrap();
        assert!(y == vec![0.0] || y == vec![1.0]);
    }

    #[test]
    fn bad_gamma_is_rejected() {
        let params = ValueNetParams::zeros(shape(), FeatureScales::default(), emb()).unwrap();
        let cfg = TrainerConfig {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(TrainerState::new(params, &cfg).is_err());
    }

    #[test]
    fn matched_targets_leave_parameters_fixed() {
        let mut t = trainer(None, 0.0);
        let v = VehicleState::idle(VehicleId(0), 2, LocationId(0), 0.0);
        let e = Experience {
            epoch: 0,
            vehicles: vec![v.clone()],
            feasible: vec![FeasibleSet::null_only(&v)],
            batch_requests: 0,
            nearby: vec![0],
            features: vec![vec![feats(0, 1)]],
            previous: vec![feats(0, 1)],
        };
        let before = t.online.theta.clone();
        let out = t.train_step(&[(&e, 1.0)]).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(t.online.theta, before);
    }

    #[test]
    fn overfitting_one_batch_decreases_loss() {
        let p = ValueNetParams::random(shape(), FeatureScales::default(), emb(), 11).unwrap();
        let fs: Vec<StateFeatures> = (0..4).map(|k| feats(k, k as usize)).collect();
        let rows: Vec<(&StateFeatures, f64, f64)> =
            fs.iter().enumerate().map(|(k, f)| (f, k as f64 * 0.5 - 0.7, 1.0)).collect();
        let mut params = p.clone();
        let mut adam = Adam::new(params.len(), 1e-2);
        let mut last = f64::INFINITY;
        for _ in 0..25 {
            let (loss, grad) = mean_squared_loss(&params, &rows).unwrap();
            assert!(loss < last, "loss {loss} after {last}");
            last = loss;
            adam.step(&mut params.theta, &grad);
        }
    }

    #[test]
    fn target_copies_only_on_schedule() {
        let mut t = trainer(Some(2), 0.9);
        let e = single_vehicle_experience();
        let h0 = fingerprint(&t.target.theta);
        t.train_step(&[(&e, 1.0)]).unwrap();
        t.train_step(&[(&e, 1.0)]).unwrap();
        assert_eq!(fingerprint(&t.target.theta), h0);
        assert_ne!(t.online.theta, t.target.theta);
        t.train_step(&[(&e, 1.0)]).unwrap();
        assert_eq!(t.online.theta, t.target.theta);
        assert_eq!(t.steps, 3);
    }

    #[test]
    fn noise_schedule_and_sampling() {
        let mut t = trainer(None, 0.9);
        assert_eq!(t.sigma(), 0.5);
        for _ in 0..5 {
            t.noise.advance();
        }
        assert!((t.sigma() - 0.26).abs() < 1e-12);
        for _ in 0..10 {
            t.noise.advance();
        }
        assert_eq!(t.sigma(), 0.02);

        t.noise = NoiseSchedule::constant(0.0);
        let mut v = vec![1.0, 2.0];
        t.explore_noise(&mut v, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(v, vec![1.0, 2.0]);

        t.noise = NoiseSchedule::constant(1.0);
        let n = 100_000;
        let mut xs = vec![0.0; n];
        t.explore_noise(&mut xs, &mut ChaCha8Rng::seed_from_u64(4));
        let mean_abs = xs.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        let expect = (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean_abs - expect).abs() < 3.0 / (n as f64).sqrt());
        let mut again = vec![0.0; n];
        t.explore_noise(&mut again, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(xs, again);
    }
}
