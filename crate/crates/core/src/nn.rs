//! Small dense-math helpers shared by the embedding proxy and the value network.

use rand::Rng;

/// `out = W x + b` for a row-major `rows x cols` matrix.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + dot(row, x);
    }
}

/// `out += W x` for a row-major `rows x cols` matrix.
pub fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Backward of `y = W x`: accumulates `dW += dy x^T` and `dx += W^T dy`.
pub fn matvec_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], dx: &mut [f64]) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            drow[c] += g * x[c];
            dx[c] += g * row[c];
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Uniform Glorot initialisation.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    for w in out {
        *w = rng.gen_range(-limit..limit);
    }
}

/// Adam with the usual default moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step_with_lr(params, grads, self.lr);
    }

    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - self.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[1.0, -1.0]);
        assert!(p[0] < 1.0 && p[1] > -1.0);
        // First bias-corrected step has magnitude lr.
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn matvec_backward_matches_definition() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = [1.0, -1.0, 0.5];
        let dy = [2.0, -1.0];
        let mut dw = [0.0; 6];
        let mut dx = [0.0; 3];
        matvec_backward(&w, &x, &dy, &mut dw, &mut dx);
        assert_eq!(dw, [2.0, -2.0, 1.0, -1.0, 1.0, -0.5]);
        assert_eq!(dx, [2.0 - 4.0, 4.0 - 5.0, 6.0 - 6.0]);
    }
}
