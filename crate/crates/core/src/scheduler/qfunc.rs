use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Approximator, RLConfig};
use super::env::{valid_actions, SchedEnvState, FEATURES_PER_DEVICE};
use crate::error::{invalid, Result};

/// Anything that scores every action of a state.
pub trait ActionValues {
    fn num_actions(&self) -> usize;

    /// One value per device id.
    fn action_values(&self, state: &SchedEnvState) -> Vec<f64>;

    /// Highest-valued action over all ids; ties go to the lowest id.
    fn greedy_action(&self, state: &SchedEnvState) -> usize {
        argmax(&self.action_values(state))
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One recorded step of experience.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: SchedEnvState,
    pub action: usize,
    pub reward: f64,
    pub next: SchedEnvState,
    pub terminal: bool,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const HUBER_DELTA: f64 = 1.0;

/// Two-layer ReLU network `7N → hidden → N` trained with Adam on the Huber
/// loss, with a target copy used for bootstrap values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseQ {
    inputs: usize,
    hidden: usize,
    outputs: usize,
    /// Flat parameters: `W1 (hidden × inputs)`, `b1`, `W2 (outputs × hidden)`, `b2`.
    params: Vec<f64>,
    target: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
    learn_rate: f64,
}

impl DenseQ {
    pub fn new<R: Rng>(num_devices: usize, hidden: usize, learn_rate: f64, rng: &mut R) -> Self {
        let inputs = FEATURES_PER_DEVICE * num_devices;
        let outputs = num_devices;
        let len = hidden * inputs + hidden + outputs * hidden + outputs;
        let mut params = vec![0.0; len];
        let a1 = 1.0 / (inputs as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let w2_start = hidden * inputs + hidden;
        for p in &mut params[..hidden * inputs] {
            *p = rng.random_range(-a1..a1);
        }
        for p in &mut params[w2_start..w2_start + outputs * hidden] {
            *p = rng.random_range(-a2..a2);
        }
        Self {
            inputs,
            hidden,
            outputs,
            target: params.clone(),
            adam_m: vec![0.0; len],
            adam_v: vec![0.0; len],
            adam_t: 0,
            params,
            learn_rate,
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.inputs;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.outputs * self.hidden;
        (b1, w2, b2)
    }

    fn forward(&self, params: &[f64], x: &[f64], hidden_out: &mut [f64]) -> Vec<f64> {
        let (b1, w2, b2) = self.offsets();
        for j in 0..self.hidden {
            let row = &params[j * self.inputs..(j + 1) * self.inputs];
            let z = params[b1 + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            hidden_out[j] = z.max(0.0);
        }
        (0..self.outputs)
            .map(|a| {
                let row = &params[w2 + a * self.hidden..w2 + (a + 1) * self.hidden];
                params[b2 + a] + row.iter().zip(hidden_out.iter()).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect()
    }

    fn values_with(&self, params: &[f64], state: &SchedEnvState) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden];
        self.forward(params, &state.encode(), &mut h)
    }

    pub fn target_values(&self, state: &SchedEnvState) -> Vec<f64> {
        self.values_with(&self.target, state)
    }

    pub fn sync_target(&mut self) {
        self.target.copy_from_slice(&self.params);
    }

    /// Gradient of the mean Huber loss of `(state, action) → target` pairs.
    fn loss_grad(&self, batch: &[(&SchedEnvState, usize, f64)]) -> Vec<f64> {
        let (b1, w2, b2) = self.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let mut h = vec![0.0; self.hidden];
        let scale = 1.0 / batch.len() as f64;
        for &(state, action, y) in batch {
            let x = state.encode();
            let out = self.forward(&self.params, &x, &mut h);
            let d = (out[action] - y).clamp(-HUBER_DELTA, HUBER_DELTA) * scale;
            let w2_row = w2 + action * self.hidden;
            for j in 0..self.hidden {
                grad[w2_row + j] += d * h[j];
                if h[j] > 0.0 {
                    let dh = d * self.params[w2_row + j];
                    grad[b1 + j] += dh;
                    let row = j * self.inputs;
                    for (i, &xi) in x.iter().enumerate() {
                        if xi != 0.0 {
                            grad[row + i] += dh * xi;
                        }
                    }
                }
            }
            grad[b2 + action] += d;
        }
        grad
    }

    /// One Adam step on the mean Huber loss of `(state, action) → target`.
    pub fn fit(&mut self, batch: &[(&SchedEnvState, usize, f64)]) {
        if batch.is_empty() {
            return;
        }
        let grad = self.loss_grad(batch);
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let c1 = 1.0 - ADAM_B1.powi(t);
        let c2 = 1.0 - ADAM_B2.powi(t);
        for k in 0..self.params.len() {
            let g = grad[k];
            self.adam_m[k] = ADAM_B1 * self.adam_m[k] + (1.0 - ADAM_B1) * g;
            self.adam_v[k] = ADAM_B2 * self.adam_v[k] + (1.0 - ADAM_B2) * g * g;
            let m = self.adam_m[k] / c1;
            let v = self.adam_v[k] / c2;
            self.params[k] -= self.learn_rate * m / (v.sqrt() + ADAM_EPS);
        }
    }
}

/// Exact lookup table; unseen entries are 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    outputs: usize,
    alpha: f64,
    table: HashMap<String, Vec<f64>>,
}

impl TabularQ {
    pub fn new(num_devices: usize, alpha: f64) -> Self {
        Self { outputs: num_devices, alpha, table: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, state: &SchedEnvState) -> Vec<f64> {
        self.table.get(&state.key()).cloned().unwrap_or_else(|| vec![0.0; self.outputs])
    }

    pub fn set(&mut self, state: &SchedEnvState, action: usize, value: f64) {
        let n = self.outputs;
        self.table.entry(state.key()).or_insert_with(|| vec![0.0; n])[action] = value;
    }

    fn update(&mut self, state: &SchedEnvState, action: usize, target: f64) {
        let old = self.get(state)[action];
        self.set(state, action, old + self.alpha * (target - old));
    }
}

/// Q-value function of the chain scheduler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QFunction {
    Dense(DenseQ),
    Tabular(TabularQ),
}

impl QFunction {
    pub fn new<R: Rng>(num_devices: usize, cfg: &RLConfig, rng: &mut R) -> Result<Self> {
        if num_devices < 2 {
            return Err(invalid("a Q function needs at least 2 devices"));
        }
        Ok(match cfg.approximator {
            Approximator::Dense => Self::Dense(DenseQ::new(num_devices, cfg.hidden, cfg.learn_rate, rng)),
            Approximator::Tabular => Self::Tabular(TabularQ::new(num_devices, cfg.tabular_alpha)),
        })
    }

    /// Bootstrap value `max_a' Q_target(s', a')` over the valid actions of
    /// `s'`, or 0 when `s'` is terminal.
    fn bootstrap(&self, next: &SchedEnvState, terminal: bool) -> f64 {
        if terminal {
            return 0.0;
        }
        let values = match self {
            Self::Dense(q) => q.target_values(next),
            Self::Tabular(q) => q.get(next),
        };
        valid_actions(next).into_iter().map(|a| values[a]).reduce(f64::max).unwrap_or(0.0)
    }

    /// One learning update on a batch of transitions.
    pub fn learn(&mut self, batch: &[&Transition], discount: f64) {
        let targets: Vec<f64> = batch
            .iter()
            .map(|t| t.reward + discount * self.bootstrap(&t.next, t.terminal))
            .collect();
        match self {
            Self::Dense(q) => {
                let items: Vec<(&SchedEnvState, usize, f64)> =
                    batch.iter().zip(&targets).map(|(t, &y)| (&t.state, t.action, y)).collect();
                q.fit(&items);
            }
            Self::Tabular(q) => {
                for (t, &y) in batch.iter().zip(&targets) {
                    q.update(&t.state, t.action, y);
                }
            }
        }
    }

    pub fn sync_target(&mut self) {
        if let Self::Dense(q) = self {
            q.sync_target();
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, Self::Tabular(_))
    }
}

impl ActionValues for QFunction {
    fn num_actions(&self) -> usize {
        match self {
            Self::Dense(q) => q.outputs,
            Self::Tabular(q) => q.outputs,
        }
    }

    fn action_values(&self, state: &SchedEnvState) -> Vec<f64> {
        match self {
            Self::Dense(q) => q.values_with(&q.params, state),
            Self::Tabular(q) => q.get(state),
        }
    }
}
