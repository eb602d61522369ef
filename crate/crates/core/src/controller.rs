//! REINFORCE controller: an LSTM policy over a sequence of categorical
//! decisions, and the reward pipeline that turns raw metrics into rewards.
//!
//! At step `t` the LSTM reads an input embedding (a learned start vector for
//! `t = 0`, otherwise a learned embedding of the previous choice), and a
//! per-position head maps its hidden state to option probabilities
//! `softmax(2.5 * tanh(0.2 * (W h + b)))`.
//!
//! All policy arithmetic is `f64`. Parameters live in one flat vector so the
//! optimizer, checkpoints and gradient checks can treat them uniformly.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::check_decisions;

pub const HIDDEN_UNITS: usize = 100;
pub const TANH_CONSTANT: f64 = 2.5;
/// `1 / temperature` with a sampling temperature of 5.0.
pub const LOGIT_SCALE: f64 = 0.2;
pub const CONTROLLER_LR: f64 = 3.5e-4;
pub const EMA_DECAY: f64 = 0.95;
pub const ENTROPY_COEF: f64 = 1e-4;
const INIT_RANGE: f64 = 0.1;

/// Offsets of each parameter group inside the flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layout {
    hidden: usize,
    lstm_w: usize,
    lstm_b: usize,
    start: usize,
    /// Embedding table for position `t >= 1`, indexed by the choice at `t - 1`.
    emb: Vec<usize>,
    head_w: Vec<usize>,
    head_b: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(dims: &[usize], hidden: usize) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let lstm_w = take(4 * hidden * 2 * hidden);
        let lstm_b = take(4 * hidden);
        let start = take(hidden);
        let emb = (1..dims.len()).map(|t| take(dims[t - 1] * hidden)).collect();
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for &d in dims {
            head_w.push(take(d * hidden));
            head_b.push(take(d));
        }
        Layout {
            hidden,
            lstm_w,
            lstm_b,
            start,
            emb,
            head_w,
            head_b,
            total: off,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct AdamF64 {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamF64 {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - Self::BETA1.powi(t);
        let bc2 = 1.0 - Self::BETA2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + Self::EPS);
        }
    }
}

/// The trainable policy `pi_theta` plus its optimizer state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Controller {
    dims: Vec<usize>,
    layout: Layout,
    params: Vec<f64>,
    adam: AdamF64,
    pub lr: f64,
    updates: u64,
}

/// One sampled decision sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub decisions: Vec<usize>,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Cached activations of one LSTM step.
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    tanh_pre: Vec<f64>,
    probs: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
}

impl Controller {
    /// Fresh policy with weights drawn uniformly from `[-0.1, 0.1]`.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        Self::with_hidden(dims, HIDDEN_UNITS, seed)
    }

    pub fn with_hidden(dims: &[usize], hidden: usize, seed: u64) -> Self {
        assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0), "decision dims must be positive");
        let layout = Layout::new(dims, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..layout.total)
            .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        Controller {
            dims: dims.to_vec(),
            layout,
            params,
            adam: AdamF64::default(),
            lr: CONTROLLER_LR,
            updates: 0,
        }
    }

    /// Zeroes every projection head, making each decision uniform.
    pub fn zero_heads(&mut self) {
        for t in 0..self.dims.len() {
            let (w, b) = (self.layout.head_w[t], self.layout.head_b[t]);
            let d = self.dims[t];
            self.params[w..w + d * self.layout.hidden].fill(0.0);
            self.params[b..b + d].fill(0.0);
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn lstm_step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64], t: usize) -> StepCache {
        let hd = self.layout.hidden;
        let p = &self.params;
        let w = &p[self.layout.lstm_w..self.layout.lstm_w + 4 * hd * 2 * hd];
        let b = &p[self.layout.lstm_b..self.layout.lstm_b + 4 * hd];
        let mut pre = b.to_vec();
        for (r, pr) in pre.iter_mut().enumerate() {
            let row = &w[r * 2 * hd..(r + 1) * 2 * hd];
            *pr += row[..hd].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                + row[hd..].iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
        }
        let i: Vec<f64> = pre[..hd].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = pre[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = pre[2 * hd..3 * hd].iter().map(|v| v.tanh()).collect();
        let o: Vec<f64> = pre[3 * hd..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..hd).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let h: Vec<f64> = (0..hd).map(|k| o[k] * c[k].tanh()).collect();

        let d = self.dims[t];
        let hw = &p[self.layout.head_w[t]..self.layout.head_w[t] + d * hd];
        let hb = &p[self.layout.head_b[t]..self.layout.head_b[t] + d];
        let tanh_pre: Vec<f64> = (0..d)
            .map(|j| {
                let z = hb[j] + hw[j * hd..(j + 1) * hd].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
                (LOGIT_SCALE * z).tanh()
            })
            .collect();
        let logits: Vec<f64> = tanh_pre.iter().map(|t| TANH_CONSTANT * t).collect();
        let probs = softmax(&logits);
        StepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            c,
            h,
            tanh_pre,
            probs,
        }
    }

    fn input_for(&self, t: usize, prev_choice: Option<usize>) -> Vec<f64> {
        let hd = self.layout.hidden;
        let off = match prev_choice {
            None => self.layout.start,
            Some(c) => self.layout.emb[t - 1] + c * hd,
        };
        self.params[off..off + hd].to_vec()
    }

    /// Runs the policy along `decisions` (teacher forcing), or samples
    /// decisions when `rng` is given.
    fn unroll(&self, decisions: Option<&[usize]>, mut rng: Option<&mut dyn rand::RngCore>) -> (Vec<usize>, Vec<StepCache>) {
        let hd = self.layout.hidden;
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut prev = None;
        let mut chosen = Vec::with_capacity(self.dims.len());
        let mut caches = Vec::with_capacity(self.dims.len());
        for t in 0..self.dims.len() {
            let x = self.input_for(t, prev);
            let step = self.lstm_step(&x, &h, &c, t);
            let choice = match (decisions, rng.as_deref_mut()) {
                (Some(d), _) => d[t],
                (None, Some(r)) => WeightedIndex::new(&step.probs)
                    .expect("softmax output is a valid distribution")
                    .sample(r),
                (None, None) => unreachable!("unroll needs decisions or an rng"),
            };
            h = step.h.clone();
            c = step.c.clone();
            chosen.push(choice);
            prev = Some(choice);
            caches.push(step);
        }
        (chosen, caches)
    }

    fn summarize(decisions: Vec<usize>, caches: &[StepCache]) -> PolicySample {
        let log_prob = caches.iter().zip(&decisions).map(|(s, &c)| s.probs[c].ln()).sum();
        let entropy = caches.iter().map(|s| entropy_of(&s.probs)).sum();
        PolicySample { decisions, log_prob, entropy }
    }

    /// Samples one decision sequence.
    pub fn sample(&self, rng: &mut impl Rng) -> PolicySample {
        let (decisions, caches) = self.unroll(None, Some(rng));
        Self::summarize(decisions, &caches)
    }

    /// Log-probability and path entropy of a given decision sequence.
    pub fn evaluate(&self, decisions: &[usize]) -> Result<PolicySample> {
        self.check(decisions)?;
        let (d, caches) = self.unroll(Some(decisions), None);
        Ok(Self::summarize(d, &caches))
    }

    /// Per-step probability vectors along `decisions`.
    pub fn step_probs(&self, decisions: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check(decisions)?;
        let (_, caches) = self.unroll(Some(decisions), None);
        Ok(caches.into_iter().map(|s| s.probs).collect())
    }

    /// Greedy decode: the most likely option at every step.
    pub fn argmax(&self) -> Vec<usize> {
        let hd = self.layout.hidden;
        let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
        let mut prev = None;
        let mut out = Vec::new();
        for t in 0..self.dims.len() {
            let step = self.lstm_step(&self.input_for(t, prev), &h, &c, t);
            let best = step
                .probs
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (j, &p)| if p > acc.1 { (j, p) } else { acc })
                .0;
            h = step.h;
            c = step.c;
            out.push(best);
            prev = Some(best);
        }
        out
    }

    fn check(&self, decisions: &[usize]) -> Result<()> {
        check_decisions(&self.dims, decisions).map_err(|e| match e {
            Error::InvalidGenome(m) => Error::ShapeMismatch {
                name: format!("controller decisions: {m}"),
                expected: self.dims.clone(),
                actual: decisions.to_vec(),
            },
            other => other,
        })
    }

    /// `log pi(decisions)` and its gradient with respect to every parameter.
    pub fn log_prob_grad(&self, decisions: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check(decisions)?;
        let (_, caches) = self.unroll(Some(decisions), None);
        let hd = self.layout.hidden;
        let mut grad = vec![0.0; self.params.len()];
        let log_prob = caches.iter().zip(decisions).map(|(s, &c)| s.probs[c].ln()).sum();
        let lw = self.layout.lstm_w;
        let lb = self.layout.lstm_b;
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        for t in (0..caches.len()).rev() {
            let s = &caches[t];
            let d = self.dims[t];
            // d log p[c] / d logits = onehot - p
            let hw_off = self.layout.head_w[t];
            let hb_off = self.layout.head_b[t];
            let mut dh = dh_next.clone();
            for j in 0..d {
                let dlogit = (if j == decisions[t] { 1.0 } else { 0.0 }) - s.probs[j];
                let dz = dlogit * TANH_CONSTANT * (1.0 - s.tanh_pre[j] * s.tanh_pre[j]) * LOGIT_SCALE;
                grad[hb_off + j] += dz;
                for k in 0..hd {
                    grad[hw_off + j * hd + k] += dz * s.h[k];
                    dh[k] += dz * self.params[hw_off + j * hd + k];
                }
            }
            let mut dpre = vec![0.0; 4 * hd];
            let mut dc_prev = vec![0.0; hd];
            for k in 0..hd {
                let tc = s.c[k].tanh();
                let d_o = dh[k] * tc;
                let dc = dc_next[k] + dh[k] * s.o[k] * (1.0 - tc * tc);
                let di = dc * s.g[k];
                let dg = dc * s.i[k];
                let df = dc * s.c_prev[k];
                dc_prev[k] = dc * s.f[k];
                dpre[k] = di * s.i[k] * (1.0 - s.i[k]);
                dpre[hd + k] = df * s.f[k] * (1.0 - s.f[k]);
                dpre[2 * hd + k] = dg * (1.0 - s.g[k] * s.g[k]);
                dpre[3 * hd + k] = d_o * s.o[k] * (1.0 - s.o[k]);
            }
            let mut dx = vec![0.0; hd];
            let mut dh_prev = vec![0.0; hd];
            for (r, &dp) in dpre.iter().enumerate() {
                if dp == 0.0 {
                    continue;
                }
                grad[lb + r] += dp;
                let row = lw + r * 2 * hd;
                for k in 0..hd {
                    grad[row + k] += dp * s.x[k];
                    grad[row + hd + k] += dp * s.h_prev[k];
                    dx[k] += dp * self.params[row + k];
                    dh_prev[k] += dp * self.params[row + hd + k];
                }
            }
            let x_off = if t == 0 {
                self.layout.start
            } else {
                self.layout.emb[t - 1] + decisions[t - 1] * hd
            };
            for k in 0..hd {
                grad[x_off + k] += dx[k];
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        Ok((log_prob, grad))
    }

    /// One REINFORCE step: Adam descent on `-reward * log pi(decisions)`,
    /// with the log-probability recomputed under the current parameters.
    pub fn reinforce_update(&mut self, decisions: &[usize], reward: f64) -> Result<()> {
        let (_, mut grad) = self.log_prob_grad(decisions)?;
        for g in &mut grad {
            *g *= -reward;
        }
        let lr = self.lr;
        self.adam.apply(&mut self.params, &grad, lr);
        self.updates += 1;
        if !self.is_finite() {
            return Err(Error::Diverged("controller parameters became non-finite".into()));
        }
        Ok(())
    }
}

/// Whether larger raw metric values are better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSense {
    Maximize,
    Minimize,
}

/// Running min/max normalization, EMA baseline and entropy bonus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardPipeline {
    pub sense: MetricSense,
    pub running_min: Option<f64>,
    pub running_max: Option<f64>,
    pub baseline: f64,
    pub decay: f64,
    pub entropy_coef: f64,
    pub samples: u64,
}

/// Intermediate values of one reward computation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub normalized: f64,
    pub advantage: f64,
    pub reward: f64,
}

impl RewardPipeline {
    pub fn new(sense: MetricSense) -> Self {
        RewardPipeline {
            sense,
            running_min: None,
            running_max: None,
            baseline: 0.0,
            decay: EMA_DECAY,
            entropy_coef: ENTROPY_COEF,
            samples: 0,
        }
    }

    fn finish(&mut self, normalized: f64, entropy: f64) -> RewardBreakdown {
        let advantage = normalized - self.baseline;
        self.baseline = self.decay * self.baseline + (1.0 - self.decay) * normalized;
        self.samples += 1;
        RewardBreakdown {
            normalized,
            advantage,
            reward: advantage + self.entropy_coef * entropy,
        }
    }

    /// Folds `raw_metric` into the running range and returns the reward.
    pub fn compute_reward(&mut self, raw_metric: f64, entropy: f64) -> Result<RewardBreakdown> {
        if !raw_metric.is_finite() {
            return Err(Error::NonFiniteMetric(raw_metric));
        }
        let value = match self.sense {
            MetricSense::Maximize => raw_metric,
            MetricSense::Minimize => -raw_metric,
        };
        let lo = self.running_min.map_or(value, |m| m.min(value));
        let hi = self.running_max.map_or(value, |m| m.max(value));
        self.running_min = Some(lo);
        self.running_max = Some(hi);
        let normalized = if hi == lo { 0.5 } else { (value - lo) / (hi - lo) };
        Ok(self.finish(normalized, entropy))
    }

    /// Reward for an evaluation that failed: the worst normalized score (0),
    /// without touching the running range.
    pub fn failure_reward(&mut self, entropy: f64) -> RewardBreakdown {
        self.finish(0.0, entropy)
    }
}
