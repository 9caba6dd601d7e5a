use serde::{Deserialize, Serialize};

use super::config::RLConfig;
use super::plan::Pair;
use crate::error::{invalid, Result};
use crate::resource::DeviceState;

/// How the last step ended an episode, if it did.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Running,
    Completed,
    Invalid,
    ExceedsLimits,
}

/// Per-device features in the encoded state: a one-hot device state,
/// the normalised aggregation count and the pending-sender flag.
pub const FEATURES_PER_DEVICE: usize = DeviceState::ALL.len() + 2;

/// Reward for the episode-ending step that completes the reduce.
pub const COMPLETED_REWARD: f64 = 1.0;
/// Reward for an invalid action or for running past the step budget.
pub const TERMINATION_PENALTY: f64 = -1.0;

/// State of the scheduling MDP.
///
/// An aggregation takes two actions: the first names the sender, the second
/// the receiver. After the second action the sender is `Done` and the
/// receiver is back to `Free` (or still `Busy`) with its count incremented.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchedEnvState {
    pub states: Vec<DeviceState>,
    pub n_agg: Vec<u32>,
    pub step: usize,
    pub pending: Option<usize>,
    /// Devices that were busy when the episode started.
    pub busy: Vec<bool>,
    /// Completed pairs in selection order.
    pub pairs: Vec<Pair>,
    pub outcome: Outcome,
}

impl SchedEnvState {
    /// Start-of-episode state from one busy bit per device.
    pub fn new(busy: &[bool]) -> Result<Self> {
        if busy.is_empty() {
            return Err(invalid("environment needs at least one device"));
        }
        let n = busy.len();
        let outcome = if n == 1 { Outcome::Completed } else { Outcome::Running };
        Ok(Self {
            states: busy.iter().map(|&b| DeviceState::reset(b)).collect(),
            n_agg: vec![0; n],
            step: 0,
            pending: None,
            busy: busy.to_vec(),
            pairs: Vec::new(),
            outcome,
        })
    }

    /// All devices Free.
    pub fn all_free(n: usize) -> Result<Self> {
        Self::new(&vec![false; n])
    }

    /// Start-of-episode state from reported device states; anything other
    /// than `Busy` counts as Free.
    pub fn from_states(states: &[DeviceState]) -> Result<Self> {
        let busy: Vec<bool> = states.iter().map(|&s| s == DeviceState::Busy).collect();
        Self::new(&busy)
    }

    pub fn num_devices(&self) -> usize {
        self.states.len()
    }

    /// Busy bits at the start of the episode.
    pub fn busy_bits(&self) -> &[bool] {
        &self.busy
    }

    /// Fresh episode over the same busy bits.
    pub fn restart(&self) -> Self {
        Self::new(&self.busy).expect("state has at least one device")
    }

    pub fn is_terminal(&self) -> bool {
        self.outcome != Outcome::Running
    }

    /// Step budget of a complete episode, `2(N − 1)`.
    pub fn step_limit(&self) -> usize {
        2 * (self.num_devices() - 1)
    }

    /// Devices that still hold a contribution.
    pub fn holders(&self) -> usize {
        self.states.iter().filter(|&&s| s != DeviceState::Done).count()
    }

    /// Flat feature vector of length `FEATURES_PER_DEVICE · N`.
    pub fn encode(&self) -> Vec<f64> {
        let n = self.num_devices();
        let scale = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let mut x = vec![0.0; FEATURES_PER_DEVICE * n];
        for d in 0..n {
            let row = &mut x[d * FEATURES_PER_DEVICE..(d + 1) * FEATURES_PER_DEVICE];
            row[self.states[d].index()] = 1.0;
            row[5] = self.n_agg[d] as f64 / scale;
            row[6] = if self.pending == Some(d) { 1.0 } else { 0.0 };
        }
        x
    }

    /// Compact exact key used by the tabular approximator.
    pub fn key(&self) -> String {
        let mut k = String::with_capacity(3 * self.num_devices() + 4);
        for (s, c) in self.states.iter().zip(&self.n_agg) {
            k.push(s.as_str().as_bytes()[0] as char);
            k.push_str(&c.to_string());
            k.push(',');
        }
        if let Some(p) = self.pending {
            k.push('p');
            k.push_str(&p.to_string());
        }
        k
    }
}

/// Devices that may be named by the next action: Free or Busy, and not the
/// pending sender. Empty once the episode is over.
pub fn valid_actions(state: &SchedEnvState) -> Vec<usize> {
    if state.is_terminal() {
        return Vec::new();
    }
    (0..state.num_devices())
        .filter(|&d| {
            matches!(state.states[d], DeviceState::Free | DeviceState::Busy) && state.pending != Some(d)
        })
        .collect()
}

/// Reward of a Free device becoming the sender.
pub fn send_reward(n_agg: u32, cfg: &RLConfig) -> f64 {
    cfg.alpha + cfg.beta * n_agg as f64
}

/// Reward of a Free device becoming the receiver.
pub fn get_reward(n_agg: u32, cfg: &RLConfig) -> f64 {
    cfg.alpha - cfg.beta * n_agg as f64
}

/// Penalty for naming a Busy device at step `t` in an `n`-device episode.
pub fn busy_reward(t: usize, n: usize, cfg: &RLConfig) -> f64 {
    let span = 2.0 * (n.max(2) - 1) as f64;
    cfg.rho + t as f64 * cfg.rho / span
}

/// Applies one action and returns the next state, its reward and whether
/// the episode ended.
pub fn env_step(state: &SchedEnvState, action: usize, cfg: &RLConfig) -> (SchedEnvState, f64, bool) {
    let mut next = state.clone();
    let reward = step_in_place(&mut next, action, cfg);
    let done = next.is_terminal();
    (next, reward, done)
}

/// In-place form of [`env_step`].
pub fn step_in_place(s: &mut SchedEnvState, action: usize, cfg: &RLConfig) -> f64 {
    if s.is_terminal() {
        s.outcome = Outcome::Invalid;
        return TERMINATION_PENALTY;
    }
    let n = s.num_devices();
    let t = s.step;
    s.step += 1;
    if t >= s.step_limit() {
        s.outcome = Outcome::ExceedsLimits;
        return TERMINATION_PENALTY;
    }
    let selectable = action < n
        && matches!(s.states[action], DeviceState::Free | DeviceState::Busy)
        && s.pending != Some(action);
    if !selectable {
        s.outcome = Outcome::Invalid;
        return TERMINATION_PENALTY;
    }
    let is_busy = s.states[action] == DeviceState::Busy;
    match s.pending {
        None => {
            let reward = if is_busy { busy_reward(t, n, cfg) } else { send_reward(s.n_agg[action], cfg) };
            s.states[action] = DeviceState::Send;
            s.pending = Some(action);
            reward
        }
        Some(sender) => {
            let reward = if is_busy { busy_reward(t, n, cfg) } else { get_reward(s.n_agg[action], cfg) };
            s.states[sender] = DeviceState::Done;
            s.n_agg[action] += 1;
            s.pending = None;
            s.pairs.push(Pair::new(sender, action));
            if s.holders() == 1 {
                s.outcome = Outcome::Completed;
                COMPLETED_REWARD
            } else {
                reward
            }
        }
    }
}
