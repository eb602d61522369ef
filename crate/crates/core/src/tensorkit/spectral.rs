use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;

/// Power-iteration state for one weight matrix viewed as `(out, rest)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PowerIteration {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    /// Last estimate of the largest singular value.
    pub sigma: f32,
    /// Sign of `u^T W v` behind `sigma`.
    #[serde(default = "positive")]
    pub sign: f32,
}

fn positive() -> f32 {
    1.0
}

const NORM_EPS: f32 = 1e-12;

fn normalize(x: &mut [f32]) {
    let norm = x.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt() as f32;
    let inv = 1.0 / norm.max(NORM_EPS);
    x.iter_mut().for_each(|a| *a *= inv);
}

impl PowerIteration {
    pub fn new(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<f32> = (0..rows).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut v: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        normalize(&mut u);
        normalize(&mut v);
        PowerIteration { u, v, sigma: 1.0, sign: 1.0 }
    }

    pub fn rows(&self) -> usize {
        self.u.len()
    }

    pub fn cols(&self) -> usize {
        self.v.len()
    }

    /// One step: `v <- W^T u / |W^T u|`, `u <- W v / |W v|`.
    pub fn step(&mut self, w: &[f32]) {
        let (rows, cols) = (self.rows(), self.cols());
        debug_assert_eq!(w.len(), rows * cols);
        let mut v = vec![0.0f32; cols];
        for (r, &ur) in self.u.iter().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            for (vc, &wc) in v.iter_mut().zip(row) {
                *vc += ur * wc;
            }
        }
        normalize(&mut v);
        let mut u = vec![0.0f32; rows];
        for (r, ur) in u.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            *ur = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        normalize(&mut u);
        self.u = u;
        self.v = v;
    }

    /// `u^T W v` for the current vectors.
    pub fn estimate(&self, w: &[f32]) -> f32 {
        let cols = self.cols();
        self.u
            .iter()
            .enumerate()
            .map(|(r, &ur)| {
                let row = &w[r * cols..(r + 1) * cols];
                ur * row.iter().zip(&self.v).map(|(a, b)| a * b).sum::<f32>()
            })
            .sum()
    }

    /// Optionally refreshes `(u, v)`, then returns `W / sigma`.
    pub fn normalized(&mut self, w: &Tensor, refresh: bool) -> Tensor {
        if refresh {
            self.step(w.data());
        }
        let s = self.estimate(w.data());
        self.sign = if s < 0.0 { -1.0 } else { 1.0 };
        self.sigma = s.abs().max(NORM_EPS);
        w.scale(1.0 / self.sigma)
    }

    /// Maps a gradient with respect to `W / sigma` back to `W`, treating
    /// `(u, v)` as constants: `(G - sign <G, W/sigma> u v^T) / sigma`.
    pub fn backward(&self, w: &Tensor, grad_normalized: &Tensor) -> Tensor {
        let cols = self.cols();
        let sigma = self.sigma;
        let inner: f64 = grad_normalized
            .data()
            .iter()
            .zip(w.data())
            .map(|(&g, &x)| g as f64 * (x / sigma) as f64)
            .sum();
        let inner = self.sign * inner as f32;
        let mut out = grad_normalized.clone();
        for (i, g) in out.data_mut().iter_mut().enumerate() {
            let (r, c) = (i / cols, i % cols);
            *g = (*g - inner * self.u[r] * self.v[c]) / sigma;
        }
        out
    }
}

/// One power-iteration step on `weight` (viewed as `(shape[0], rest)`),
/// returning the spectrally normalized weight.
pub fn spectral_normalize(weight: &Tensor, state: &mut PowerIteration) -> Tensor {
    state.normalized(weight, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn top_singular(w: &Tensor, state: &mut PowerIteration, iters: usize) -> f32 {
        let mut out = w.clone();
        for _ in 0..iters {
            out = spectral_normalize(w, state);
        }
        // spectral norm of the normalized weight, estimated with a fresh long run
        let mut check = PowerIteration::new(state.rows(), state.cols(), &mut ChaCha8Rng::seed_from_u64(99));
        for _ in 0..200 {
            check.step(out.data());
        }
        check.estimate(out.data()).abs()
    }

    #[test]
    fn diagonal_matrix_converges_to_largest_entry() {
        let w = Tensor::from_vec(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut state = PowerIteration::new(2, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let norm = top_singular(&w, &mut state, 50);
        assert!((state.sigma - 3.0).abs() < 1e-3, "sigma = {}", state.sigma);
        assert!((norm - 1.0).abs() < 1e-3);
    }

    #[test]
    fn identity_is_unchanged() {
        let w = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut state = PowerIteration::new(3, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let out = spectral_normalize(&w, &mut state);
        for (a, b) in out.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scaling_invariance_at_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w5 = w.scale(5.0);
        let mut s1 = PowerIteration::new(4, 6, &mut ChaCha8Rng::seed_from_u64(4));
        let mut s2 = s1.clone();
        let (mut a, mut b) = (w.clone(), w5.clone());
        for _ in 0..100 {
            a = spectral_normalize(&w, &mut s1);
            b = spectral_normalize(&w5, &mut s2);
        }
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
