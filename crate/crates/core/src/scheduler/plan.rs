use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One directed pair aggregation: `sender` ships its (Δw, θ) to `receiver`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub sender: usize,
    pub receiver: usize,
}

impl Pair {
    pub fn new(sender: usize, receiver: usize) -> Self {
        Self { sender, receiver }
    }

    pub fn touches(&self, d: usize) -> bool {
        self.sender == d || self.receiver == d
    }
}

/// Chain-directed aggregation schedule.
///
/// `rounds` run in order, pairs within a round concurrently. `deferred`
/// pairs involve devices that were busy at planning time; they form a chain
/// that ends at the survivor of `rounds` and runs once those devices free up.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub rounds: Vec<Vec<Pair>>,
    pub deferred: Vec<Pair>,
}

impl SchedulePlan {
    /// All pairs in execution order: rounds first, then deferred.
    pub fn pairs(&self) -> impl Iterator<Item = Pair> + '_ {
        self.rounds.iter().flatten().copied().chain(self.deferred.iter().copied())
    }

    pub fn num_pairs(&self) -> usize {
        self.rounds.iter().map(Vec::len).sum::<usize>() + self.deferred.len()
    }

    /// Communication rounds; the deferred chain is sequential.
    pub fn num_rounds(&self) -> usize {
        self.rounds.len() + self.deferred.len()
    }

    /// Receiver of the last pair, which holds the reduced value in a valid
    /// plan. `None` for an empty plan.
    pub fn survivor(&self) -> Option<usize> {
        self.pairs().last().map(|p| p.receiver)
    }

    /// Number of incoming aggregations per device id (indexed up to the
    /// largest id in the plan).
    pub fn receive_counts(&self, num_devices: usize) -> Vec<usize> {
        let mut counts = vec![0; num_devices];
        for p in self.pairs() {
            if let Some(c) = counts.get_mut(p.receiver) {
                *c += 1;
            }
        }
        counts
    }

    /// Checks the structural invariants against the participating devices
    /// and returns the survivor:
    ///
    /// * exactly `N - 1` pairs, every device but one sends exactly once;
    /// * pairs within a round are vertex-disjoint;
    /// * no device receives after it has sent (the pairs form a forest
    ///   reducing to a single root).
    pub fn validate(&self, devices: &[usize]) -> Result<usize> {
        let err = |m: String| Error::Scheduling(m);
        if devices.is_empty() {
            return Err(err("no devices".into()));
        }
        if devices.len() == 1 {
            return if self.num_pairs() == 0 {
                Ok(devices[0])
            } else {
                Err(err("single device plan must be empty".into()))
            };
        }
        if self.num_pairs() != devices.len() - 1 {
            return Err(err(format!(
                "{} pairs for {} devices",
                self.num_pairs(),
                devices.len()
            )));
        }
        for round in &self.rounds {
            let mut seen = std::collections::HashSet::new();
            for p in round {
                if !seen.insert(p.sender) || !seen.insert(p.receiver) {
                    return Err(err(format!("round {round:?} is not vertex-disjoint")));
                }
            }
        }
        let mut sent = std::collections::HashSet::new();
        for p in self.pairs() {
            if p.sender == p.receiver {
                return Err(err(format!("self pair {p:?}")));
            }
            if !devices.contains(&p.sender) || !devices.contains(&p.receiver) {
                return Err(err(format!("pair {p:?} references an unknown device")));
            }
            if sent.contains(&p.receiver) {
                return Err(err(format!("device {} receives after sending", p.receiver)));
            }
            if !sent.insert(p.sender) {
                return Err(err(format!("device {} sends twice", p.sender)));
            }
        }
        let mut left = devices.iter().filter(|d| !sent.contains(d));
        let survivor = *left.next().ok_or_else(|| err("no survivor".into()))?;
        if left.next().is_some() {
            return Err(err("more than one survivor".into()));
        }
        Ok(survivor)
    }
}

fn need_two(devices: &[usize]) -> Result<()> {
    if devices.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "a schedule needs at least 2 devices, got {}",
            devices.len()
        )));
    }
    Ok(())
}

/// `d1 → d2 → … → dN`, one pair per round.
pub fn ring_plan(devices: &[usize]) -> Result<SchedulePlan> {
    need_two(devices)?;
    let rounds = devices
        .windows(2)
        .map(|w| vec![Pair::new(w[0], w[1])])
        .collect();
    Ok(SchedulePlan { rounds, deferred: Vec::new() })
}

/// Pairwise halving; an odd survivor carries over to the next round.
pub fn tree_plan(devices: &[usize]) -> Result<SchedulePlan> {
    need_two(devices)?;
    let mut alive = devices.to_vec();
    let mut rounds = Vec::new();
    while alive.len() > 1 {
        let mut round = Vec::new();
        let mut next = Vec::with_capacity(alive.len().div_ceil(2));
        for chunk in alive.chunks(2) {
            if let [keep, send] = *chunk {
                round.push(Pair::new(send, keep));
            }
            next.push(chunk[0]);
        }
        rounds.push(round);
        alive = next;
    }
    Ok(SchedulePlan { rounds, deferred: Vec::new() })
}

/// Packs an ordered pair sequence into rounds: a pair joins the current
/// round when it shares no device with it, otherwise opens a new round.
pub fn pack_rounds(pairs: &[Pair]) -> Vec<Vec<Pair>> {
    let mut rounds: Vec<Vec<Pair>> = Vec::new();
    for &p in pairs {
        match rounds.last_mut() {
            Some(r) if !r.iter().any(|q| q.touches(p.sender) || q.touches(p.receiver)) => r.push(p),
            _ => rounds.push(vec![p]),
        }
    }
    rounds
}

/// `⌈log₂ n⌉` for `n ≥ 1`.
pub fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}
