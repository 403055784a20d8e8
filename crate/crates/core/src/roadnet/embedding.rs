//! Location embeddings learned by regressing shortest travel times through a
//! two-layer proxy network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LocationId, RoadNetwork};
use crate::error::{Error, Result};
use crate::nn::{self, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyWeights {
    pub hidden: usize,
    /// `hidden x 2*dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationEmbedding {
    pub dim: usize,
    /// One row of `dim` values per location, row-major.
    pub table: Vec<f64>,
    pub proxy: ProxyWeights,
    /// Travel-time scale the proxy targets were divided by.
    pub time_scale: f64,
}

impl LocationEmbedding {
    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.table.len() / self.dim
        }
    }

    pub fn row(&self, loc: LocationId) -> Result<&[f64]> {
        let i = loc.index();
        if i >= self.rows() {
            return Err(Error::UnknownLocation(loc.0 as u64));
        }
        Ok(&self.table[i * self.dim..(i + 1) * self.dim])
    }

    /// Proxy estimate of the normalised travel time from `a` to `b`.
    pub fn proxy_estimate(&self, a: LocationId, b: LocationId) -> Result<f64> {
        let mut x = Vec::with_capacity(2 * self.dim);
        x.extend_from_slice(self.row(a)?);
        x.extend_from_slice(self.row(b)?);
        let mut h = vec![0.0; self.proxy.hidden];
        nn::affine(&self.proxy.w1, &self.proxy.b1, &x, &mut h);
        for v in &mut h {
            *v = v.max(0.0);
        }
        Ok(nn::dot(&self.proxy.w2, &h) + self.proxy.b2)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Number of evaluation checkpoints recorded over the run (at least 5).
    pub checkpoints: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            hidden: 32,
            steps: 3000,
            batch: 64,
            lr: 1e-2,
            seed: 0,
            checkpoints: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingReport {
    /// Mean squared proxy error on the evaluation pairs after training.
    pub final_loss: f64,
    /// Mean squared target value on the evaluation pairs.
    pub mean_sq_target: f64,
    /// Evaluation loss at evenly spaced checkpoints; the last equals `final_loss`.
    pub checkpoint_losses: Vec<f64>,
}

/// Parameter layout inside the flat vector handed to Adam.
struct Layout {
    n: usize,
    dim: usize,
    hidden: usize,
}

impl Layout {
    fn table(&self) -> std::ops::Range<usize> {
        0..self.n * self.dim
    }
    fn w1(&self) -> std::ops::Range<usize> {
        let s = self.n * self.dim;
        s..s + self.hidden * 2 * self.dim
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.w1().end;
        s..s + self.hidden
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2().end
    }
    fn len(&self) -> usize {
        self.b2() + 1
    }
}

/// Squared error of one pair; when `grad` is given the gradient is accumulated into it.
fn pair_loss(
    lay: &Layout,
    p: &[f64],
    a: usize,
    b: usize,
    target: f64,
    x: &mut [f64],
    h: &mut [f64],
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let d = lay.dim;
    x[..d].copy_from_slice(&p[a * d..(a + 1) * d]);
    x[d..].copy_from_slice(&p[b * d..(b + 1) * d]);
    let w1 = &p[lay.w1()];
    nn::affine(w1, &p[lay.b1()], x, h);
    for v in h.iter_mut() {
        *v = v.max(0.0);
    }
    let w2 = &p[lay.w2()];
    let y = nn::dot(w2, h) + p[lay.b2()];
    let err = y - target;
    if let Some((g, scale)) = grad {
        let dy = 2.0 * err * scale;
        g[lay.b2()] += dy;
        let w2s = lay.w2().start;
        let b1s = lay.b1().start;
        let w1s = lay.w1().start;
        let cols = 2 * d;
        for r in 0..lay.hidden {
            g[w2s + r] += dy * h[r];
            if h[r] <= 0.0 {
                continue;
            }
            let dh = dy * w2[r];
            g[b1s + r] += dh;
            for c in 0..cols {
                g[w1s + r * cols + c] += dh * x[c];
                let dx = dh * w1[r * cols + c];
                if c < d {
                    g[a * d + c] += dx;
                } else {
                    g[b * d + (c - d)] += dx;
                }
            }
        }
    }
    err * err
}

/// Trains embeddings so the proxy reproduces shortest travel times divided by
/// the network diameter. Pairs are drawn uniformly from all ordered location
/// pairs. Deterministic for a given `cfg.seed`.
pub fn train_embeddings(
    net: &RoadNetwork,
    cfg: &EmbeddingConfig,
) -> Result<(LocationEmbedding, EmbeddingReport)> {
    if cfg.dim < 2 {
        return Err(Error::Contract(format!("embedding dim must be >= 2, got {}", cfg.dim)));
    }
    if cfg.steps < 1 {
        return Err(Error::Contract("embedding training needs at least one step".into()));
    }
    let n = net.len();
    let lay = Layout {
        n,
        dim: cfg.dim,
        hidden: cfg.hidden.max(1),
    };
    let scale = net.diameter().max(1.0);
    let target = |a: usize, b: usize| net.time(LocationId(a as u32), LocationId(b as u32)) / scale;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = vec![0.0; lay.len()];
    for v in &mut params[lay.table()] {
        *v = rng.gen_range(-0.5..0.5);
    }
    nn::glorot(&mut rng, &mut params[lay.w1()], 2 * lay.dim, lay.hidden);
    nn::glorot(&mut rng, &mut params[lay.w2()], lay.hidden, 1);

    let eval_pairs: Vec<(usize, usize)> = if n * n <= 4096 {
        (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect()
    } else {
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
        (0..4096)
            .map(|_| (erng.gen_range(0..n), erng.gen_range(0..n)))
            .collect()
    };
    let eval_targets: Vec<f64> = eval_pairs.iter().map(|&(a, b)| target(a, b)).collect();
    let mut x = vec![0.0; 2 * lay.dim];
    let mut h = vec![0.0; lay.hidden];
    let mut evaluate = |p: &[f64]| {
        let total: f64 = eval_pairs
            .iter()
            .zip(&eval_targets)
            .map(|(&(a, b), &t)| pair_loss(&lay, p, a, b, t, &mut x, &mut h, None))
            .sum();
        total / eval_pairs.len() as f64
    };

    let checkpoints = cfg.checkpoints.max(5);
    let mut marks: Vec<usize> = (1..=checkpoints)
        .map(|k| (k * cfg.steps).div_ceil(checkpoints).max(1))
        .collect();
    marks.dedup();

    let mut adam = Adam::new(lay.len(), cfg.lr);
    let mut grad = vec![0.0; lay.len()];
    let mut bx = vec![0.0; 2 * lay.dim];
    let mut bh = vec![0.0; lay.hidden];
    let mut losses = Vec::with_capacity(marks.len());
    let batch = cfg.batch.max(1);
    let mut next_mark = 0;
    for step in 1..=cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..batch {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let t = target(a, b);
            pair_loss(&lay, &params, a, b, t, &mut bx, &mut bh, Some((&mut grad, 1.0 / batch as f64)));
        }
        // Linear decay to a tenth of the base rate smooths the late checkpoints.
        let frac = step as f64 / cfg.steps as f64;
        adam.step_with_lr(&mut params, &grad, cfg.lr * (1.0 - 0.9 * frac));
        if next_mark < marks.len() && step == marks[next_mark] {
            losses.push(evaluate(&params));
            next_mark += 1;
        }
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embedding training produced non-finite weights".into()));
    }
    let final_loss = *losses.last().expect("at least one checkpoint");
    let mean_sq_target =
        eval_targets.iter().map(|t| t * t).sum::<f64>() / eval_targets.len() as f64;

    let emb = LocationEmbedding {
        dim: lay.dim,
        table: params[lay.table()].to_vec(),
        proxy: ProxyWeights {
            hidden: lay.hidden,
            w1: params[lay.w1()].to_vec(),
            b1: params[lay.b1()].to_vec(),
            w2: params[lay.w2()].to_vec(),
            b2: params[lay.b2()],
        },
        time_scale: scale,
    };
    Ok((
        emb,
        EmbeddingReport {
            final_loss,
            mean_sq_target,
            checkpoint_losses: losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64, steps: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            dim: 4,
            hidden: 16,
            steps,
            batch: 32,
            lr: 1e-2,
            seed,
            checkpoints: 5,
        }
    }

    #[test]
    fn single_location_fits_exactly() {
        let net = RoadNetwork::build(&[3], &[]).unwrap();
        let (emb, report) = train_embeddings(&net, &quick(1, 400)).unwrap();
        assert_eq!(emb.rows(), 1);
        assert!(report.final_loss < 1e-6, "loss {}", report.final_loss);
    }

    #[test]
    fn two_locations_fit_below_one_percent() {
        let net = RoadNetwork::build(&[0, 1], &[(0, 1, 30.0), (1, 0, 30.0)]).unwrap();
        let (_, report) = train_embeddings(&net, &quick(2, 1500)).unwrap();
        // Targets are {0, 0, 1, 1}.
        assert!((report.mean_sq_target - 0.5).abs() < 1e-12);
        assert!(report.final_loss < 0.01 * report.mean_sq_target);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let net = RoadNetwork::grid(3, 3, 10.0).unwrap();
        let (a, _) = train_embeddings(&net, &quick(9, 200)).unwrap();
        let (b, _) = train_embeddings(&net, &quick(9, 200)).unwrap();
        let bits = |e: &LocationEmbedding| e.table.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn loss_trend_is_monotone_up_to_one_inversion() {
        let net = RoadNetwork::grid(5, 5, 10.0).unwrap();
        let (emb, report) = train_embeddings(&net, &quick(4, 2000)).unwrap();
        assert_eq!(emb.rows(), net.len());
        assert!(report.checkpoint_losses.len() >= 5);
        let inversions = report
            .checkpoint_losses
            .windows(2)
            .filter(|w| w[1] > w[0])
            .count();
        assert!(inversions <= 1, "{:?}", report.checkpoint_losses);
        assert!(emb.table.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_preconditions() {
        let net = RoadNetwork::build(&[0], &[]).unwrap();
        assert!(train_embeddings(&net, &EmbeddingConfig { dim: 1, ..quick(0, 1) }).is_err());
        assert!(train_embeddings(&net, &EmbeddingConfig { steps: 0, ..quick(0, 1) }).is_err());
    }
}
