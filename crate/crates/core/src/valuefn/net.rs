//! Value network: a gated recurrent encoder over the post-decision stop
//! sequence, concatenated with the current location embedding and three
//! context scalars, followed by two ReLU layers and a linear output.
//!
//! All weights live in one flat vector so the optimiser, the target copy and
//! the checkpoint format can treat them uniformly.

use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StateFeatures;
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid};
use crate::roadnet::LocationEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub emb_dim: usize,
    pub hidden: usize,
    pub head1: usize,
    pub head2: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            emb_dim: 16,
            hidden: 64,
            head1: 64,
            head2: 32,
        }
    }
}

/// Divisors applied to raw features before they enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScales {
    /// Seconds, normally `tau + lambda`.
    pub seconds: f64,
    /// Vehicle counts, normally the fleet size.
    pub vehicles: f64,
    /// Request counts, normally the mean batch size.
    pub requests: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self {
            seconds: 900.0,
            vehicles: 1.0,
            requests: 1.0,
        }
    }
}

/// Named slices of the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub input: usize,
    pub hidden: usize,
    pub head_in: usize,
    pub head1: usize,
    pub head2: usize,
    pub wz: Range<usize>,
    pub uz: Range<usize>,
    pub bz: Range<usize>,
    pub wr: Range<usize>,
    pub ur: Range<usize>,
    pub br: Range<usize>,
    pub wn: Range<usize>,
    pub un: Range<usize>,
    pub bn: Range<usize>,
    pub bhn: Range<usize>,
    pub h0: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(s: &NetShape) -> Self {
        let input = s.emb_dim + 1;
        let h = s.hidden;
        let head_in = h + s.emb_dim + 3;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let wz = take(h * input);
        let uz = take(h * h);
        let bz = take(h);
        let wr = take(h * input);
        let ur = take(h * h);
        let br = take(h);
        let wn = take(h * input);
        let un = take(h * h);
        let bn = take(h);
        let bhn = take(h);
        let h0 = take(h);
        let w1 = take(s.head1 * head_in);
        let b1 = take(s.head1);
        let w2 = take(s.head2 * s.head1);
        let b2 = take(s.head2);
        let w3 = take(s.head2);
        let b3 = take(1).start;
        Self {
            input,
            hidden: h,
            head_in,
            head1: s.head1,
            head2: s.head2,
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wn,
            un,
            bn,
            bhn,
            h0,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + 1,
        }
    }
}

/// Weights plus the frozen location embedding the stop sequence is read
/// through.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNetParams {
    pub shape: NetShape,
    pub scales: FeatureScales,
    pub theta: Vec<f64>,
    pub embedding: Arc<LocationEmbedding>,
}

/// Intermediate activations kept for backpropagation.
#[derive(Debug, Default)]
pub(crate) struct Cache {
    xs: Vec<f64>,
    hs: Vec<f64>,
    zs: Vec<f64>,
    rs: Vec<f64>,
    ns: Vec<f64>,
    uhn: Vec<f64>,
    u: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    steps: usize,
}

impl ValueNetParams {
    pub fn zeros(shape: NetShape, scales: FeatureScales, embedding: Arc<LocationEmbedding>) -> Result<Self> {
        if embedding.dim != shape.emb_dim {
            return Err(Error::Contract(format!(
                "embedding has dim {} but the network expects {}",
                embedding.dim, shape.emb_dim
            )));
        }
        let len = Layout::new(&shape).len;
        Ok(Self {
            shape,
            scales,
            theta: vec![0.0; len],
            embedding,
        })
    }

    /// Glorot weights, zero biases and zero initial recurrent state.
    pub fn random(
        shape: NetShape,
        scales: FeatureScales,
        embedding: Arc<LocationEmbedding>,
        seed: u64,
    ) -> Result<Self> {
        let lay = Layout::new(&shape);
        let mut p = Self::zeros(shape, scales, embedding)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, h) = (lay.input, lay.hidden);
        for r in [&lay.wz, &lay.wr, &lay.wn] {
            nn::glorot(&mut rng, &mut p.theta[r.clone()], i, h);
        }
        for r in [&lay.uz, &lay.ur, &lay.un] {
            nn::glorot(&mut rng, &mut p.theta[r.clone()], h, h);
        }
        nn::glorot(&mut rng, &mut p.theta[lay.w1.clone()], lay.head_in, lay.head1);
        nn::glorot(&mut rng, &mut p.theta[lay.w2.clone()], lay.head1, lay.head2);
        nn::glorot(&mut rng, &mut p.theta[lay.w3.clone()], lay.head2, 1);
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.shape)
    }

    /// Scalar value of one post-decision vehicle state.
    pub fn value(&self, f: &StateFeatures) -> Result<f64> {
        let mut cache = Cache::default();
        self.forward(f, &mut cache)
    }

    pub(crate) fn forward(&self, f: &StateFeatures, c: &mut Cache) -> Result<f64> {
        let lay = self.layout();
        let th = &self.theta;
        let (h, input) = (lay.hidden, lay.input);
        let steps = f.stops.len();
        c.steps = steps;
        c.xs.clear();
        for s in &f.stops {
            c.xs.extend_from_slice(self.embedding.row(s.location)?);
            c.xs.push(s.remaining_delay / self.scales.seconds);
        }
        c.hs.clear();
        c.hs.extend_from_slice(&th[lay.h0.clone()]);
        for buf in [&mut c.zs, &mut c.rs, &mut c.ns, &mut c.uhn] {
            buf.clear();
            buf.resize(steps * h, 0.0);
        }
        let mut tmp = vec![0.0; h];
        for t in 0..steps {
            let x = &c.xs[t * input..(t + 1) * input];
            let hp = c.hs[t * h..(t + 1) * h].to_vec();
            let zs = &mut c.zs[t * h..(t + 1) * h];
            nn::affine(&th[lay.wz.clone()], &th[lay.bz.clone()], x, zs);
            nn::matvec_acc(&th[lay.uz.clone()], &hp, zs);
            zs.iter_mut().for_each(|v| *v = sigmoid(*v));
            let rs = &mut c.rs[t * h..(t + 1) * h];
            nn::affine(&th[lay.wr.clone()], &th[lay.br.clone()], x, rs);
            nn::matvec_acc(&th[lay.ur.clone()], &hp, rs);
            rs.iter_mut().for_each(|v| *v = sigmoid(*v));
            let uhn = &mut c.uhn[t * h..(t + 1) * h];
            nn::affine(&th[lay.un.clone()], &th[lay.bhn.clone()], &hp, uhn);
            nn::affine(&th[lay.wn.clone()], &th[lay.bn.clone()], x, &mut tmp);
            let ns = &mut c.ns[t * h..(t + 1) * h];
            for k in 0..h {
                ns[k] = (tmp[k] + c.rs[t * h + k] * c.uhn[t * h + k]).tanh();
            }
            for k in 0..h {
                let z = c.zs[t * h + k];
                let next = (1.0 - z) * c.ns[t * h + k] + z * hp[k];
                c.hs.push(next);
            }
        }
        c.u.clear();
        c.u.extend_from_slice(&c.hs[steps * h..(steps + 1) * h]);
        c.u.extend_from_slice(self.embedding.row(f.current)?);
        c.u.push(f.epoch_scalar);
        c.u.push(f.nearby_vehicles as f64 / self.scales.vehicles);
        c.u.push(f.batch_requests as f64 / self.scales.requests);
        c.a1.resize(lay.head1, 0.0);
        nn::affine(&th[lay.w1.clone()], &th[lay.b1.clone()], &c.u, &mut c.a1);
        c.a1.iter_mut().for_each(|v| *v = v.max(0.0));
        c.a2.resize(lay.head2, 0.0);
        nn::affine(&th[lay.w2.clone()], &th[lay.b2.clone()], &c.a1, &mut c.a2);
        c.a2.iter_mut().for_each(|v| *v = v.max(0.0));
        let v = nn::dot(&th[lay.w3.clone()], &c.a2) + th[lay.b3];
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "value is {v} for a {steps}-stop sequence (max |theta| = {:.3e})",
                th.iter().fold(0.0f64, |m, x| m.max(x.abs()))
            )));
        }
        Ok(v)
    }

    /// Accumulates `dvalue * d value / d theta` into `grad` using the
    /// activations of the last `forward` call on `c`.
    pub(crate) fn backward(&self, c: &Cache, dvalue: f64, grad: &mut [f64]) {
        let lay = self.layout();
        let th = &self.theta;
        let (h, input, steps) = (lay.hidden, lay.input, c.steps);

        grad[lay.b3] += dvalue;
        let mut da2 = vec![0.0; lay.head2];
        for k in 0..lay.head2 {
            grad[lay.w3.start + k] += dvalue * c.a2[k];
            da2[k] = if c.a2[k] > 0.0 { dvalue * th[lay.w3.start + k] } else { 0.0 };
        }
        for k in 0..lay.head2 {
            grad[lay.b2.start + k] += da2[k];
        }
        let mut da1 = vec![0.0; lay.head1];
        nn::matvec_backward(&th[lay.w2.clone()], &c.a1, &da2, &mut grad[lay.w2.clone()], &mut da1);
        for k in 0..lay.head1 {
            if c.a1[k] <= 0.0 {
                da1[k] = 0.0;
            }
            grad[lay.b1.start + k] += da1[k];
        }
        let mut du = vec![0.0; lay.head_in];
        nn::matvec_backward(&th[lay.w1.clone()], &c.u, &da1, &mut grad[lay.w1.clone()], &mut du);

        let mut dh: Vec<f64> = du[..h].to_vec();
        let mut daz = vec![0.0; h];
        let mut dar = vec![0.0; h];
        let mut dan = vec![0.0; h];
        let mut duhn = vec![0.0; h];
        for t in (0..steps).rev() {
            let x = &c.xs[t * input..(t + 1) * input];
            let hp = &c.hs[t * h..(t + 1) * h];
            let z = &c.zs[t * h..(t + 1) * h];
            let r = &c.rs[t * h..(t + 1) * h];
            let n = &c.ns[t * h..(t + 1) * h];
            let uhn = &c.uhn[t * h..(t + 1) * h];
            let mut dprev = vec![0.0; h];
            for k in 0..h {
                let dn = dh[k] * (1.0 - z[k]);
                let dz = dh[k] * (hp[k] - n[k]);
                dprev[k] = dh[k] * z[k];
                dan[k] = dn * (1.0 - n[k] * n[k]);
                duhn[k] = dan[k] * r[k];
                let dr = dan[k] * uhn[k];
                daz[k] = dz * z[k] * (1.0 - z[k]);
                dar[k] = dr * r[k] * (1.0 - r[k]);
            }
            let mut dx = vec![0.0; input];
            nn::matvec_backward(&th[lay.wn.clone()], x, &dan, &mut grad[lay.wn.clone()], &mut dx);
            nn::matvec_backward(&th[lay.wz.clone()], x, &daz, &mut grad[lay.wz.clone()], &mut dx);
            nn::matvec_backward(&th[lay.wr.clone()], x, &dar, &mut grad[lay.wr.clone()], &mut dx);
            nn::matvec_backward(&th[lay.un.clone()], hp, &duhn, &mut grad[lay.un.clone()], &mut dprev);
            nn::matvec_backward(&th[lay.uz.clone()], hp, &daz, &mut grad[lay.uz.clone()], &mut dprev);
            nn::matvec_backward(&th[lay.ur.clone()], hp, &dar, &mut grad[lay.ur.clone()], &mut dprev);
            for k in 0..h {
                grad[lay.bn.start + k] += dan[k];
                grad[lay.bhn.start + k] += duhn[k];
                grad[lay.bz.start + k] += daz[k];
                grad[lay.br.start + k] += dar[k];
            }
            dh = dprev;
        }
        for k in 0..h {
            grad[lay.h0.start + k] += dh[k];
        }
    }

    /// Value and its full parameter gradient.
    pub fn value_and_grad(&self, f: &StateFeatures) -> Result<(f64, Vec<f64>)> {
        let mut cache = Cache::default();
        let v = self.forward(f, &mut cache)?;
        let mut grad = vec![0.0; self.len()];
        self.backward(&cache, 1.0, &mut grad);
        Ok((v, grad))
    }
}
