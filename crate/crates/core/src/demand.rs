//! Passenger requests, trip-file ingestion and synthetic demand.

use std::fmt;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadnet::{LocationId, RoadNetwork};
use crate::Seconds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

/// Hard quality constraints: maximum pickup wait and maximum detour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayLimits {
    pub tau: Seconds,
    pub lambda: Seconds,
}

impl DelayLimits {
    /// Detour allowance defaults to twice the pickup allowance.
    pub fn with_default_detour(tau: Seconds) -> Self {
        Self {
            tau,
            lambda: 2.0 * tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub origin: LocationId,
    pub destination: LocationId,
    pub arrival_epoch: u32,
    pub direct_time: Seconds,
    pub pickup_deadline: Seconds,
    pub dropoff_deadline: Seconds,
}

impl Request {
    /// Deadlines are measured from the boundary of the epoch the request is
    /// batched into (`arrival_epoch * epoch_seconds`).
    pub fn new(
        id: RequestId,
        origin: LocationId,
        destination: LocationId,
        arrival_epoch: u32,
        net: &RoadNetwork,
        epoch_seconds: Seconds,
        limits: DelayLimits,
    ) -> Result<Self> {
        if origin == destination {
            return Err(Error::Contract(format!("{id}: origin equals destination")));
        }
        let direct_time = net.travel_time(origin, destination)?;
        if direct_time <= 0.0 {
            return Err(Error::Contract(format!("{id}: zero direct travel time")));
        }
        let release = arrival_epoch as f64 * epoch_seconds;
        Ok(Self {
            id,
            origin,
            destination,
            arrival_epoch,
            direct_time,
            pickup_deadline: release + limits.tau,
            dropoff_deadline: release + limits.tau + direct_time + limits.lambda,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochBatch {
    pub epoch: u32,
    pub requests: Vec<Request>,
}

/// A demand sample path: one batch per epoch, indexed by epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemandStream {
    pub batches: Vec<EpochBatch>,
}

impl DemandStream {
    /// Batch for `epoch`; epochs past the end of the stream are empty.
    pub fn batch(&self, epoch: u32) -> EpochBatch {
        self.batches
            .get(epoch as usize)
            .cloned()
            .unwrap_or(EpochBatch {
                epoch,
                requests: Vec::new(),
            })
    }

    pub fn total_requests(&self) -> usize {
        self.batches.iter().map(|b| b.requests.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub stream: DemandStream,
    pub rows: usize,
    pub malformed: usize,
    pub degenerate: usize,
}

/// Reads a `pickup_time_s,origin_node,dest_node` CSV. Node ids removed from
/// the network snap to their nearest kept node. Malformed rows and trips
/// whose endpoints coincide after snapping are skipped and counted.
pub fn ingest_trips(
    path: &Path,
    net: &RoadNetwork,
    epoch_seconds: Seconds,
    limits: DelayLimits,
) -> Result<IngestReport> {
    let text = std::fs::read_to_string(path)?;
    parse_trips(&text, net, epoch_seconds, limits)
}

pub fn parse_trips(
    text: &str,
    net: &RoadNetwork,
    epoch_seconds: Seconds,
    limits: DelayLimits,
) -> Result<IngestReport> {
    if !(epoch_seconds > 0.0) {
        return Err(Error::Contract("epoch duration must be positive".into()));
    }
    let mut report = IngestReport::default();
    let mut batches: Vec<EpochBatch> = Vec::new();
    let mut next_id = 0u64;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("pickup_time")) {
            continue;
        }
        report.rows += 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = (fields.len() == 3)
            .then(|| {
                Some((
                    fields[0].parse::<f64>().ok().filter(|t| t.is_finite() && *t >= 0.0)?,
                    fields[1].parse::<u64>().ok()?,
                    fields[2].parse::<u64>().ok()?,
                ))
            })
            .flatten();
        let Some((pickup, o, d)) = parsed else {
            report.malformed += 1;
            continue;
        };
        let (Some(origin), Some(destination)) = (net.nearest(o), net.nearest(d)) else {
            report.malformed += 1;
            continue;
        };
        if origin == destination {
            report.degenerate += 1;
            continue;
        }
        let epoch = (pickup / epoch_seconds).floor() as u32;
        while batches.len() <= epoch as usize {
            batches.push(EpochBatch {
                epoch: batches.len() as u32,
                requests: Vec::new(),
            });
        }
        let req = Request::new(
            RequestId(next_id),
            origin,
            destination,
            epoch,
            net,
            epoch_seconds,
            limits,
        )?;
        next_id += 1;
        batches[epoch as usize].requests.push(req);
    }
    report.stream = DemandStream { batches };
    Ok(report)
}

pub fn format_trips(trips: &[(Seconds, u64, u64)]) -> String {
    let mut out = String::from("pickup_time_s,origin_node,dest_node\n");
    for (t, o, d) in trips {
        out.push_str(&format!("{t},{o},{d}\n"));
    }
    out
}

/// Mean arrivals per epoch, piecewise constant over half-open epoch ranges.
/// Epochs outside every range have rate zero; the first matching range wins.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RateProfile {
    pub ranges: Vec<RateRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRange {
    pub start: u32,
    pub end: u32,
    pub rate: f64,
}

impl RateProfile {
    pub fn constant(horizon: u32, rate: f64) -> Self {
        Self {
            ranges: vec![RateRange {
                start: 0,
                end: horizon,
                rate,
            }],
        }
    }

    pub fn rate(&self, epoch: u32) -> f64 {
        self.ranges
            .iter()
            .find(|r| epoch >= r.start && epoch < r.end)
            .map_or(0.0, |r| r.rate)
    }

    pub fn mean_rate(&self, horizon: u32) -> f64 {
        if horizon == 0 {
            return 0.0;
        }
        (0..horizon).map(|e| self.rate(e)).sum::<f64>() / horizon as f64
    }
}

/// Relative weights for drawing request origins and destinations.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    pub origin: Vec<f64>,
    pub destination: Vec<f64>,
}

impl SpatialWeights {
    pub fn uniform(n: usize) -> Self {
        Self {
            origin: vec![1.0; n],
            destination: vec![1.0; n],
        }
    }

    /// `floor + sum_k exp(-(t(center_k, x) / spread)^2)` for origins;
    /// destinations mix the same shape with a uniform share `dest_uniform`.
    pub fn hotspots(
        net: &RoadNetwork,
        centers: &[LocationId],
        spread: Seconds,
        floor: f64,
        dest_uniform: f64,
    ) -> Self {
        let shape: Vec<f64> = net
            .locations()
            .map(|x| {
                floor
                    + centers
                        .iter()
                        .map(|&c| {
                            let z = net.time(c, x) / spread.max(1e-9);
                            (-z * z).exp()
                        })
                        .sum::<f64>()
            })
            .collect();
        let mean = shape.iter().sum::<f64>() / shape.len().max(1) as f64;
        let destination = shape
            .iter()
            .map(|w| (1.0 - dest_uniform) * w + dest_uniform * mean)
            .collect();
        Self {
            origin: shape,
            destination,
        }
    }
}

fn epoch_seed(seed: u64, epoch: u32) -> u64 {
    // splitmix64 finaliser over (seed, epoch)
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Poisson arrivals per epoch with profiled means. Each epoch draws from its
/// own generator derived from `(seed, epoch)`, and ids are `epoch << 20 | k`.
pub fn generate_demand(
    net: &RoadNetwork,
    horizon: u32,
    profile: &RateProfile,
    spatial: &SpatialWeights,
    epoch_seconds: Seconds,
    limits: DelayLimits,
    seed: u64,
) -> Result<DemandStream> {
    let n = net.len();
    let mut batches = Vec::with_capacity(horizon as usize);
    let origin_dist = WeightedIndex::new(&spatial.origin).ok();
    let dest_dist = WeightedIndex::new(&spatial.destination).ok();
    for epoch in 0..horizon {
        let mut requests = Vec::new();
        let rate = profile.rate(epoch);
        if rate > 0.0 && n > 1 {
            let (Some(od), Some(dd)) = (&origin_dist, &dest_dist) else {
                return Err(Error::Contract("spatial weights must be positive somewhere".into()));
            };
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
            let poisson = Poisson::new(rate)
                .map_err(|e| Error::Contract(format!("bad arrival rate {rate}: {e}")))?;
            let count = poisson.sample(&mut rng) as u64;
            for k in 0..count {
                let origin = LocationId(od.sample(&mut rng) as u32);
                let mut destination = LocationId(dd.sample(&mut rng) as u32);
                let mut tries = 0;
                while destination == origin && tries < 64 {
                    destination = LocationId(dd.sample(&mut rng) as u32);
                    tries += 1;
                }
                if destination == origin {
                    continue;
                }
                requests.push(Request::new(
                    RequestId(((epoch as u64) << 20) | k),
                    origin,
                    destination,
                    epoch,
                    net,
                    epoch_seconds,
                    limits,
                )?);
            }
        }
        batches.push(EpochBatch { epoch, requests });
    }
    Ok(DemandStream { batches })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits() -> DelayLimits {
        DelayLimits::with_default_detour(300.0)
    }

    #[test]
    fn deadlines_follow_tau_and_lambda() {
        let net = RoadNetwork::grid(3, 3, 60.0).unwrap();
        let r = Request::new(RequestId(1), LocationId(0), LocationId(8), 2, &net, 60.0, limits()).unwrap();
        assert_eq!(r.direct_time, 240.0);
        assert_eq!(r.pickup_deadline, 120.0 + 300.0);
        assert_eq!(r.dropoff_deadline, 120.0 + 300.0 + 240.0 + 600.0);
        assert!(Request::new(RequestId(2), LocationId(3), LocationId(3), 0, &net, 60.0, limits()).is_err());
    }

    #[test]
    fn pickup_time_floors_into_epochs() {
        let net = RoadNetwork::grid(3, 3, 60.0).unwrap();
        let rep = parse_trips("pickup_time_s,origin_node,dest_node\n125,0,4\n", &net, 60.0, limits()).unwrap();
        assert_eq!(rep.stream.batches.len(), 3);
        assert_eq!(rep.stream.batches[2].requests[0].arrival_epoch, 2);
    }

    #[test]
    fn degenerate_and_malformed_rows_are_counted() {
        let net = RoadNetwork::grid(3, 3, 60.0).unwrap();
        let text = "pickup_time_s,origin_node,dest_node\n0,4,4\nabc,1,2\n10,1\n5,0,1\n";
        let rep = parse_trips(text, &net, 60.0, limits()).unwrap();
        assert_eq!(rep.degenerate, 1);
        assert_eq!(rep.malformed, 2);
        assert_eq!(rep.stream.total_requests(), 1);
    }

    #[test]
    fn fixture_file_batches_with_gaps() {
        let net = RoadNetwork::grid(3, 3, 60.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trips.csv");
        std::fs::write(&path, format_trips(&[(0.0, 0, 8), (30.0, 1, 7), (300.0, 2, 6)])).unwrap();
        let rep = ingest_trips(&path, &net, 60.0, limits()).unwrap();
        let sizes: Vec<usize> = rep.stream.batches.iter().map(|b| b.requests.len()).collect();
        assert_eq!(sizes, vec![2, 0, 0, 0, 0, 1]);
        assert!(rep.stream.batches.iter().enumerate().all(|(i, b)| b.epoch == i as u32));
        assert!(ingest_trips(&dir.path().join("missing.csv"), &net, 60.0, limits()).is_err());
    }

    #[test]
    fn zero_rate_gives_empty_batches() {
        let net = RoadNetwork::grid(4, 4, 60.0).unwrap();
        let s = generate_demand(&net, 50, &RateProfile::constant(50, 0.0), &SpatialWeights::uniform(16), 60.0, limits(), 3).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.total_requests(), 0);
    }

    #[test]
    fn poisson_mean_within_lln_bound() {
        let net = RoadNetwork::grid(4, 4, 60.0).unwrap();
        let s = generate_demand(&net, 1000, &RateProfile::constant(1000, 10.0), &SpatialWeights::uniform(16), 60.0, limits(), 11).unwrap();
        let mean = s.total_requests() as f64 / 1000.0;
        assert!((mean - 10.0).abs() <= 3.0 * (10.0f64 / 1000.0).sqrt(), "mean {mean}");
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let net = RoadNetwork::grid(4, 4, 60.0).unwrap();
        let sp = SpatialWeights::hotspots(&net, &[LocationId(5)], 120.0, 0.05, 0.5);
        let gen = |seed| generate_demand(&net, 40, &RateProfile::constant(40, 4.0), &sp, 60.0, limits(), seed).unwrap();
        let (a, b) = (gen(5), gen(5));
        assert_eq!(a, b);
        assert_ne!(a, gen(6));
        let mut ids = std::collections::HashSet::new();
        for batch in &a.batches {
            for r in &batch.requests {
                assert_eq!(r.arrival_epoch, batch.epoch);
                assert_ne!(r.origin, r.destination);
                assert!(r.direct_time > 0.0 && r.pickup_deadline < r.dropoff_deadline);
                assert!(ids.insert(r.id));
            }
        }
    }

    #[test]
    fn rate_profile_lookup() {
        let p = RateProfile {
            ranges: vec![
                RateRange { start: 0, end: 10, rate: 1.0 },
                RateRange { start: 10, end: 20, rate: 5.0 },
            ],
        };
        assert_eq!(p.rate(0), 1.0);
        assert_eq!(p.rate(10), 5.0);
        assert_eq!(p.rate(25), 0.0);
        assert_eq!(p.mean_rate(20), 3.0);
    }
}
