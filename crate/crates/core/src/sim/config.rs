//! Run configuration: one TOML document with a section per concern.
//! Every key has a default, unknown keys are rejected, and the resolved form
//! (defaults filled in, detour limit made explicit) can be written back out
//! and reloaded to reproduce a run.

use serde::{Deserialize, Serialize};

use crate::demand::DelayLimits;
use crate::error::{Error, Result};
use crate::replay::ReplayConfig;
use crate::valuefn::{NetShape, NoiseSchedule, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Evaluate,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    #[default]
    Grid,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemandKind {
    #[default]
    Synthetic,
    Trips,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    pub rows: usize,
    pub cols: usize,
    pub edge_seconds: f64,
    /// Edge list for `kind = "file"`.
    pub path: String,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            kind: NetworkKind::Grid,
            rows: 10,
            cols: 10,
            edge_seconds: 60.0,
            path: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemandConfig {
    pub kind: DemandKind,
    /// Trip CSV for `kind = "trips"`.
    pub path: String,
    /// Mean requests per epoch outside the peak.
    pub base_rate: f64,
    /// Mean requests per epoch inside `[peak_start, peak_end)`.
    pub peak_rate: f64,
    pub peak_start: u32,
    pub peak_end: u32,
    /// External node ids that attract origins. Empty means uniform.
    pub hotspots: Vec<u64>,
    /// Travel seconds over which a hotspot's pull decays.
    pub hotspot_spread: f64,
    /// Baseline weight every node keeps.
    pub hotspot_floor: f64,
    /// Share of destination weight spread uniformly.
    pub destination_uniform: f64,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self {
            kind: DemandKind::Synthetic,
            path: String::new(),
            base_rate: 3.0,
            peak_rate: 8.0,
            peak_start: 40,
            peak_end: 100,
            hotspots: Vec::new(),
            hotspot_spread: 120.0,
            hotspot_floor: 0.1,
            destination_uniform: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    pub vehicles: usize,
    pub capacity: u32,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            vehicles: 20,
            capacity: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub epoch_seconds: f64,
    /// Maximum pickup delay.
    pub tau: f64,
    /// Maximum detour delay; twice `tau` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Epochs per simulated day.
    pub horizon: u32,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            epoch_seconds: 60.0,
            tau: 300.0,
            lambda: None,
            horizon: 180,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DispatchConfig {
    /// Closest vehicles kept per request.
    pub candidates: usize,
    /// Route checks per vehicle per epoch.
    pub eval_cap: usize,
    pub node_limit: u64,
    /// Use the greedy assignment instead of failing when the node limit hits.
    pub greedy_fallback: bool,
    pub rebalance: bool,
    pub rebalance_sample: usize,
    /// Threads for feasible-set generation; 0 or 1 runs inline.
    pub workers: usize,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        Self {
            candidates: crate::feasibility::DEFAULT_CANDIDATES,
            eval_cap: crate::feasibility::DEFAULT_EVAL_CAP,
            node_limit: 5_000_000,
            greedy_fallback: true,
            rebalance: true,
            rebalance_sample: crate::rebalance::DEFAULT_SAMPLE,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    pub emb_dim: usize,
    pub embedding_hidden: usize,
    pub embedding_steps: usize,
    pub embedding_lr: f64,
    pub hidden: usize,
    pub head1: usize,
    pub head2: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub target_update_every: u64,
    pub noise_start: f64,
    pub noise_end: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            emb_dim: 16,
            embedding_hidden: 32,
            embedding_steps: 3000,
            embedding_lr: 1e-2,
            hidden: 64,
            head1: 64,
            head2: 32,
            gamma: 0.9,
            learning_rate: 1e-3,
            target_update_every: 1000,
            noise_start: 0.5,
            noise_end: 0.02,
        }
    }
}

impl ValueConfig {
    pub fn shape(&self) -> NetShape {
        NetShape {
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            head1: self.head1,
            head2: self.head2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub episodes: usize,
    /// Epochs between gradient steps.
    pub update_every: u32,
    pub minibatch: usize,
    pub replay_capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub priority_epsilon: f64,
    /// Episodes between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Loss above this counts toward divergence.
    pub divergence_threshold: f64,
    /// Consecutive high-loss steps that abort training.
    pub divergence_patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let replay = ReplayConfig::default();
        Self {
            episodes: 10,
            update_every: 1,
            minibatch: 32,
            replay_capacity: replay.capacity,
            alpha: replay.alpha,
            beta_start: replay.beta_start,
            beta_end: replay.beta_end,
            priority_epsilon: replay.epsilon,
            checkpoint_every: 5,
            divergence_threshold: 1e6,
            divergence_patience: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Number of evaluation days.
    pub days: usize,
    /// Index of the first evaluation day; days are distinct demand samples.
    pub first_day: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { days: 5, first_day: 0 }
    }
}

/// The three sources of randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub demand: u64,
    pub placement: u64,
    pub training: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            demand: 1,
            placement: 2,
            training: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub network: NetworkConfig,
    pub demand: DemandConfig,
    pub fleet: FleetConfig,
    pub timing: TimingConfig,
    pub dispatch: DispatchConfig,
    pub value: ValueConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub seeds: Seeds,
}

fn require(ok: bool, key: &str, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!("{key}: {what}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: "config".into(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text`, then applies `key=value` overrides such as
    /// `timing.tau=120`. Values are read as TOML and fall back to a bare
    /// string. Unknown keys are rejected.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let base = Self::from_toml_str(text)?;
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut root = toml::Table::try_from(&base)
            .map_err(|e| Error::Contract(format!("config does not serialise: {e}")))?;
        for (k, item) in overrides.iter().enumerate() {
            let bad = |msg: String| Error::Parse {
                path: "--set".into(),
                line: k + 1,
                msg,
            };
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| bad(format!("`{item}` is not of the form key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed table has the key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let parts: Vec<&str> = key.split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(bad(format!("malformed key `{key}`")));
            }
            let mut table = &mut root;
            for p in &parts[..parts.len() - 1] {
                table = match table.get_mut(*p) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(bad(format!("unknown config section `{p}` in `{key}`"))),
                };
            }
            let last = parts[parts.len() - 1];
            // Optional keys are absent from the serialised defaults.
            let optional = key == "timing.lambda";
            if !table.contains_key(last) && !optional {
                return Err(bad(format!("unknown config key `{key}`")));
            }
            table.insert(last.to_string(), value);
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse {
                path: "--set".into(),
                line: 0,
                msg: e.message().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("config does not serialise: {e}")))
    }

    pub fn limits(&self) -> DelayLimits {
        DelayLimits {
            tau: self.timing.tau,
            lambda: self.timing.lambda.unwrap_or(2.0 * self.timing.tau),
        }
    }

    /// Copy with every implicit default made explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.timing.lambda = Some(self.limits().lambda);
        c
    }

    pub fn replay(&self) -> ReplayConfig {
        let t = &self.training;
        ReplayConfig {
            capacity: t.replay_capacity,
            alpha: t.alpha,
            beta_start: t.beta_start,
            beta_end: t.beta_end,
            epsilon: t.priority_epsilon,
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        let v = &self.value;
        let total = self.training.episodes as u64 * self.timing.horizon as u64;
        TrainerConfig {
            gamma: v.gamma,
            learning_rate: v.learning_rate,
            target_update_every: v.target_update_every,
            noise: NoiseSchedule::new(v.noise_start, v.noise_end, total / 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.timing;
        require(t.tau > 0.0 && t.tau.is_finite(), "timing.tau", "must be positive")?;
        require(t.epoch_seconds > 0.0 && t.epoch_seconds.is_finite(), "timing.epoch_seconds", "must be positive")?;
        require(t.lambda.is_none_or(|l| l >= 0.0 && l.is_finite()), "timing.lambda", "must be non-negative")?;
        require(t.horizon >= 1, "timing.horizon", "must be at least 1")?;
        require(self.fleet.capacity >= 1, "fleet.capacity", "must be at least 1")?;
        require(self.fleet.vehicles >= 1, "fleet.vehicles", "must be at least 1")?;
        let n = &self.network;
        match n.kind {
            NetworkKind::Grid => {
                require(n.rows >= 1 && n.cols >= 1, "network.rows/cols", "must be at least 1")?;
                require(n.edge_seconds > 0.0, "network.edge_seconds", "must be positive")?;
            }
            NetworkKind::File => require(!n.path.is_empty(), "network.path", "required for file networks")?,
        }
        let d = &self.demand;
        match d.kind {
            DemandKind::Synthetic => {
                require(d.base_rate >= 0.0 && d.peak_rate >= 0.0, "demand.base_rate/peak_rate", "must be non-negative")?;
                require(d.peak_start <= d.peak_end, "demand.peak_start", "must not exceed peak_end")?;
                require(d.hotspot_spread > 0.0, "demand.hotspot_spread", "must be positive")?;
                require(d.hotspot_floor >= 0.0, "demand.hotspot_floor", "must be non-negative")?;
                require((0.0..=1.0).contains(&d.destination_uniform), "demand.destination_uniform", "must lie in [0, 1]")?;
            }
            DemandKind::Trips => require(!d.path.is_empty(), "demand.path", "required for trip files")?,
        }
        require(self.dispatch.candidates >= 1, "dispatch.candidates", "must be at least 1")?;
        require(self.dispatch.node_limit >= 1, "dispatch.node_limit", "must be at least 1")?;
        let v = &self.value;
        require(v.emb_dim >= 2, "value.emb_dim", "must be at least 2")?;
        require(v.embedding_hidden >= 1 && v.hidden >= 1 && v.head1 >= 1 && v.head2 >= 1, "value.hidden/head1/head2", "must be at least 1")?;
        require(v.embedding_steps >= 1, "value.embedding_steps", "must be at least 1")?;
        require((0.0..1.0).contains(&v.gamma), "value.gamma", "must lie in [0, 1)")?;
        require(v.learning_rate > 0.0, "value.learning_rate", "must be positive")?;
        require(v.target_update_every >= 1, "value.target_update_every", "must be at least 1")?;
        require(v.noise_start >= 0.0 && v.noise_end >= 0.0, "value.noise_start/noise_end", "must be non-negative")?;
        let tr = &self.training;
        require(tr.update_every >= 1, "training.update_every", "must be at least 1")?;
        require(tr.minibatch >= 1, "training.minibatch", "must be at least 1")?;
        require(tr.replay_capacity >= tr.minibatch, "training.replay_capacity", "must hold at least one minibatch")?;
        require(tr.alpha >= 0.0, "training.alpha", "must be non-negative")?;
        require(tr.priority_epsilon > 0.0, "training.priority_epsilon", "must be positive")?;
        require(tr.divergence_patience >= 1, "training.divergence_patience", "must be at least 1")?;
        Ok(())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.resolved().to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c.resolved());
        assert_eq!(back.limits().lambda, 600.0);
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::from_toml_str("mode = \"baseline\"\n[timing]\ntau = 120\n[fleet]\ncapacity = 2\n").unwrap();
        assert_eq!(c.mode, Mode::Baseline);
        assert_eq!(c.limits(), DelayLimits { tau: 120.0, lambda: 240.0 });
        assert_eq!(c.fleet.capacity, 2);
        assert_eq!(c.fleet.vehicles, 20);
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let err = RunConfig::from_toml_str("[fleet]\nvehicles = 3\nwheels = 4\n").unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("wheels"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_replace_values_and_reject_unknown_keys() {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let c = RunConfig::from_toml_with_overrides(
            "[fleet]\nvehicles = 3\n",
            &set(&["timing.tau=120", "mode=baseline", "timing.lambda=50", "demand.hotspots=[1, 2]"]),
        )
        .unwrap();
        assert_eq!((c.fleet.vehicles, c.timing.tau, c.timing.lambda), (3, 120.0, Some(50.0)));
        assert_eq!(c.mode, Mode::Baseline);
        assert_eq!(c.demand.hotspots, vec![1, 2]);
        for bad in ["fleet.wheels=4", "nosuch.key=1", "fleet.vehicles", "fleet.capacity=\"x\""] {
            assert!(RunConfig::from_toml_with_overrides("", &set(&[bad])).is_err(), "{bad}");
        }
        match RunConfig::from_toml_with_overrides("", &set(&["timing.tau=1", "fleet.wheels=4"])).unwrap_err() {
            Error::Parse { line, msg, .. } => assert_eq!(line, 2, "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariants_are_checked() {
        assert!(RunConfig::from_toml_str("[timing]\ntau = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[fleet]\ncapacity = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[value]\ngamma = 1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[timing]\nlambda = -1\n").is_err());
    }
}
