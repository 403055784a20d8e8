//! Whole-day episodes, value training and multi-day evaluation.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Dispatcher, EpochMetrics, EpochTimings, Policy, Purpose, Scenario};
use crate::demand::DemandStream;
use crate::error::{Error, Result};
use crate::fleet::VehicleState;
use crate::replay::ReplayMemory;
use crate::roadnet::{train_embeddings, EmbeddingConfig};
use crate::valuefn::{save_checkpoint, FeatureScales, TrainerState, ValueNetParams};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub metrics: Vec<EpochMetrics>,
    pub timings: Vec<EpochTimings>,
    pub generated: usize,
    pub served: usize,
    pub dropped: usize,
    pub vehicles: Vec<VehicleState>,
    /// Chosen action index per vehicle, per epoch.
    pub choices: Vec<Vec<usize>>,
}

impl EpisodeResult {
    pub fn service_rate(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            self.served as f64 / self.generated as f64
        }
    }
}

/// Plays one day without exploration noise.
pub fn run_episode(
    scenario: &Scenario,
    purpose: Purpose,
    day: u64,
    stream: &DemandStream,
    vehicles: Vec<VehicleState>,
    policy: Policy<'_>,
) -> Result<EpisodeResult> {
    let mut dispatcher = Dispatcher::new(scenario, purpose, day)?;
    // Never drawn from: the policy carries no exploration.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = match policy {
        Policy::Learned { params, .. } => Policy::Learned { params, explore: None },
        p => p,
    };
    let mut out = EpisodeResult {
        metrics: Vec::new(),
        timings: Vec::new(),
        generated: 0,
        served: 0,
        dropped: 0,
        vehicles,
        choices: Vec::new(),
    };
    for epoch in 0..scenario.cfg.timing.horizon {
        let batch = stream.batch(epoch);
        let step = dispatcher.run_epoch(&out.vehicles, &batch, policy, &mut rng, false)?;
        out.generated += step.metrics.requests_seen;
        out.served += step.metrics.requests_served;
        out.dropped += step.metrics.requests_dropped;
        out.vehicles = step.vehicles;
        out.metrics.push(step.metrics);
        out.timings.push(step.timings);
        out.choices.push(step.choice);
    }
    let in_horizon: usize = stream.batches.iter().take(scenario.cfg.timing.horizon as usize).map(|b| b.requests.len()).sum();
    if out.served + out.dropped != in_horizon || out.generated != in_horizon {
        return Err(Error::Integrity(format!(
            "served {} + dropped {} does not match {in_horizon} generated",
            out.served, out.dropped
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub day: u64,
    pub generated: usize,
    pub served: usize,
    pub dropped: usize,
    pub service_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rows: Vec<SeedRow>,
    pub mean_served: f64,
    pub sd_served: f64,
    pub mean_service_rate: f64,
    pub sd_service_rate: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunSummary {
    pub fn from_rows(rows: Vec<SeedRow>) -> Self {
        let served: Vec<f64> = rows.iter().map(|r| r.served as f64).collect();
        let rates: Vec<f64> = rows.iter().map(|r| r.service_rate).collect();
        let (mean_served, sd_served) = mean_sd(&served);
        let (mean_service_rate, sd_service_rate) = mean_sd(&rates);
        Self {
            rows,
            mean_served,
            sd_served,
            mean_service_rate,
            sd_service_rate,
        }
    }
}

/// Noise-free rollouts over `cfg.evaluation.days` evaluation days. With no
/// parameters the myopic policy is used. Each epoch's metrics are written as
/// one JSON line to `metrics` and its timings to `timings`.
pub fn evaluate(
    scenario: &Scenario,
    params: Option<&ValueNetParams>,
    mut metrics: Option<&mut dyn Write>,
    mut timings: Option<&mut dyn Write>,
) -> Result<RunSummary> {
    if let Some(p) = params {
        if p.shape != scenario.cfg.value.shape() {
            return Err(Error::Checkpoint(format!(
                "checkpoint network {:?} does not match configured {:?}",
                p.shape,
                scenario.cfg.value.shape()
            )));
        }
        if p.embedding.rows() != scenario.net.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint embeds {} locations but the network has {}",
                p.embedding.rows(),
                scenario.net.len()
            )));
        }
    }
    let policy = match params {
        Some(params) => Policy::Learned { params, explore: None },
        None => Policy::Myopic,
    };
    let ev = &scenario.cfg.evaluation;
    let mut rows = Vec::with_capacity(ev.days);
    for d in 0..ev.days as u64 {
        let day = ev.first_day + d;
        let stream = scenario.stream(Purpose::Evaluation, day)?;
        let vehicles = scenario.placement(Purpose::Evaluation, day);
        let res = run_episode(scenario, Purpose::Evaluation, day, &stream, vehicles, policy)?;
        if let Some(w) = metrics.as_deref_mut() {
            for m in &res.metrics {
                serde_json::to_writer(&mut *w, m)?;
                w.write_all(b"\n")?;
            }
        }
        if let Some(w) = timings.as_deref_mut() {
            for t in &res.timings {
                serde_json::to_writer(&mut *w, t)?;
                w.write_all(b"\n")?;
            }
        }
        rows.push(SeedRow {
            day,
            generated: res.generated,
            served: res.served,
            dropped: res.dropped,
            service_rate: res.service_rate(),
        });
    }
    Ok(RunSummary::from_rows(rows))
}

/// Embeddings trained on the scenario's network and a freshly initialised
/// value network, all from the training seed.
pub fn initial_trainer(scenario: &Scenario) -> Result<TrainerState> {
    build_trainer(scenario, false)
}

/// As [`initial_trainer`] but with every network weight zero, which makes the
/// learned policy coincide with the myopic one.
pub fn zero_trainer(scenario: &Scenario) -> Result<TrainerState> {
    build_trainer(scenario, true)
}

fn build_trainer(scenario: &Scenario, zero: bool) -> Result<TrainerState> {
    let cfg = &scenario.cfg;
    let v = &cfg.value;
    let (emb, report) = train_embeddings(
        &scenario.net,
        &EmbeddingConfig {
            dim: v.emb_dim,
            hidden: v.embedding_hidden,
            steps: v.embedding_steps,
            lr: v.embedding_lr,
            seed: derive_seed(cfg.seeds.training, 1, 0),
            ..Default::default()
        },
    )?;
    log::info!(
        "location embeddings: final proxy loss {:.3e} (target mean square {:.3e})",
        report.final_loss,
        report.mean_sq_target
    );
    let limits = cfg.limits();
    let scales = FeatureScales {
        seconds: limits.tau + limits.lambda,
        vehicles: cfg.fleet.vehicles as f64,
        requests: scenario.mean_batch(),
    };
    let emb = Arc::new(emb);
    let params = if zero {
        ValueNetParams::zeros(v.shape(), scales, emb)?
    } else {
        ValueNetParams::random(v.shape(), scales, emb, derive_seed(cfg.seeds.training, 0, 0))?
    };
    TrainerState::new(params, &cfg.trainer())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub generated: usize,
    pub served: usize,
    pub service_rate: f64,
    pub validation_service_rate: f64,
    pub gradient_steps: u64,
    pub mean_loss: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: TrainerState,
    pub log: Vec<EpisodeLog>,
}

/// Value training over `cfg.training.episodes` simulated days. Each epoch is
/// played with exploration noise and stored; every `update_every` epochs a
/// prioritized minibatch is replayed. Checkpoints go to `out` when given.
pub fn train(scenario: &Scenario, mut trainer: TrainerState, out: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = &scenario.cfg;
    let tc = &cfg.training;
    let horizon = cfg.timing.horizon;
    let total_epochs = (tc.episodes as u64 * horizon as u64).max(1);
    let mut memory = ReplayMemory::new(cfg.replay())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds.training, 2, 0));
    let mut log = Vec::with_capacity(tc.episodes);
    let mut high_loss = 0usize;
    let mut global = 0u64;
    let save = |t: &TrainerState, name: &str| -> Result<()> {
        if let Some(dir) = out {
            save_checkpoint(t, &dir.join(name))?;
        }
        Ok(())
    };
    let validation_stream = scenario.stream(Purpose::Validation, 0)?;
    for episode in 0..tc.episodes {
        let stream = scenario.stream(Purpose::Training, episode as u64)?;
        let mut vehicles = scenario.placement(Purpose::Training, episode as u64);
        let mut dispatcher = Dispatcher::new(scenario, Purpose::Training, episode as u64)?.with_snapshot_dir(out);
        let (mut losses, mut steps) = (0.0, 0u64);
        for epoch in 0..horizon {
            let batch = stream.batch(epoch);
            let policy = Policy::Learned {
                params: &trainer.online,
                explore: Some(&trainer),
            };
            let step = dispatcher.run_epoch(&vehicles, &batch, policy, &mut rng, true)?;
            vehicles = step.vehicles;
            if let Some(e) = step.experience {
                memory.push(e);
            }
            trainer.noise.advance();
            global += 1;
            if (epoch + 1) % tc.update_every != 0 || memory.len() < tc.minibatch {
                continue;
            }
            let beta = memory.config().beta(global as f64 / total_epochs as f64);
            let sample = memory.sample(tc.minibatch, beta, &mut rng)?;
            let batch: Vec<_> = sample.experiences.iter().map(|e| &**e).zip(sample.weights.iter().copied()).collect();
            let outcome = trainer.train_step(&batch)?;
            memory.update_priorities(&sample.indices, &outcome.td_errors);
            if outcome.applied {
                losses += outcome.loss;
                steps += 1;
            }
            if !(outcome.loss <= tc.divergence_threshold) {
                high_loss += 1;
                if high_loss >= tc.divergence_patience {
                    save(&trainer, "diverged.ckpt")?;
                    return Err(Error::Diverged(format!(
                        "loss {} above {} for {high_loss} consecutive steps (episode {episode}, epoch {epoch})",
                        outcome.loss, tc.divergence_threshold
                    )));
                }
            } else {
                high_loss = 0;
            }
        }
        let (seen, served) = dispatcher.totals();
        let validation = run_episode(
            scenario,
            Purpose::Validation,
            0,
            &validation_stream,
            scenario.placement(Purpose::Validation, 0),
            Policy::Learned {
                params: &trainer.online,
                explore: None,
            },
        )?;
        let entry = EpisodeLog {
            episode,
            generated: seen,
            served,
            service_rate: if seen == 0 { 0.0 } else { served as f64 / seen as f64 },
            validation_service_rate: validation.service_rate(),
            gradient_steps: steps,
            mean_loss: if steps == 0 { 0.0 } else { losses / steps as f64 },
            sigma: trainer.sigma(),
        };
        log::info!(
            "episode {episode}: train service {:.4}, validation {:.4}, {} steps, mean loss {:.4e}",
            entry.service_rate,
            entry.validation_service_rate,
            entry.gradient_steps,
            entry.mean_loss
        );
        log.push(entry);
        if tc.checkpoint_every > 0 && (episode + 1) % tc.checkpoint_every == 0 {
            save(&trainer, &format!("episode-{:04}.ckpt", episode + 1))?;
        }
    }
    save(&trainer, "final.ckpt")?;
    Ok(TrainOutcome { trainer, log })
}
