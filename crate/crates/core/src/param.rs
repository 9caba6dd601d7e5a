//! Parameter / gradient vectors and the aggregation rules.
//!
//! Three ways of turning local gradients into a global one are provided:
//!
//! * [`central_aggregate`]: the parameter-server mean, `(1/N) Σ Δw_i`.
//! * [`neighbor_aggregate`]: one fixed-graph neighbourhood term,
//!   `(Σ_i Δw_i + m Δw_j) / 2m`. [`neighbor_sgd`] applies it over a whole graph.
//! * [`pair_aggregate`]: the θ-weighted pair merge. Any sequence of `N - 1`
//!   merges that reduces `N` unit-weight gradients to one vector yields the
//!   central mean with `θ = N`.
//!
//! A global gradient produced by a full pair reduce is used as-is: its θ
//! already normalises it to the mean, so no extra `(N - 1)` factor is applied.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Flat parameter or gradient vector with its aggregation weight θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<T> {
    values: Vec<T>,
    theta: T,
}

impl<T: Scalar> ParamVector<T> {
    /// A fresh local vector, θ = 1.
    pub fn new(values: Vec<T>) -> Self {
        Self { values, theta: T::one() }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![T::zero(); len])
    }

    pub fn with_theta(values: Vec<T>, theta: T) -> Result<Self> {
        check_theta(theta)?;
        Ok(Self { values, theta })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same values, θ back to 1 (start of the next aggregation round).
    pub fn reset_theta(mut self) -> Self {
        self.theta = T::one();
        self
    }

    /// Elementwise scaling; θ is kept.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            values: self.values.iter().map(|&v| v * factor).collect(),
            theta: self.theta,
        }
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }
}

fn check_theta<T: Scalar>(theta: T) -> Result<()> {
    if theta < T::one() {
        return Err(Error::Invariant(format!("theta must be >= 1, got {theta:?}")));
    }
    Ok(())
}

/// Message on the data channel: one gradient and its θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientMessage<T> {
    pub sender_id: usize,
    pub gradient: ParamVector<T>,
    pub iteration: u64,
}

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub eta: f64,
    pub epochs: usize,
    /// Aggregation rounds per epoch (e.g. `1-E20` means 1 round, 20 epochs).
    pub agg_rounds_per_epoch: usize,
    pub batch_size: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            eta: 0.1,
            epochs: 20,
            agg_rounds_per_epoch: 1,
            batch_size: 10,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if self.agg_rounds_per_epoch == 0 {
            return Err(invalid("agg_rounds_per_epoch must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Parameter-server mean of all local gradients; θ of the result is `N`.
pub fn central_aggregate<T: Scalar>(gradients: &[ParamVector<T>]) -> Result<ParamVector<T>> {
    let first = gradients
        .first()
        .ok_or_else(|| invalid("central_aggregate needs at least one gradient"))?;
    let mut sum = vec![T::zero(); first.len()];
    for g in gradients {
        first.check_len(g)?;
        for (acc, &v) in sum.iter_mut().zip(g.values()) {
            *acc = *acc + v;
        }
    }
    let n = T::from_count(gradients.len());
    Ok(ParamVector {
        values: sum.into_iter().map(|s| s / n).collect(),
        theta: n,
    })
}

/// One neighbourhood term: `(Σ neighbors + m·own) / 2m`.
///
/// The caller averages these terms over the aggregating devices. θ of the
/// result is 1: this rule does not track contribution counts.
pub fn neighbor_aggregate<T: Scalar>(
    own: &ParamVector<T>,
    neighbors: &[ParamVector<T>],
    m: usize,
) -> Result<ParamVector<T>> {
    if m == 0 || m != neighbors.len() {
        return Err(invalid(format!(
            "neighbor count m={m} does not match {} neighbor gradients",
            neighbors.len()
        )));
    }
    let mt = T::from_count(m);
    let mut acc: Vec<T> = own.values().iter().map(|&v| mt * v).collect();
    for nb in neighbors {
        own.check_len(nb)?;
        for (a, &v) in acc.iter_mut().zip(nb.values()) {
            *a = *a + v;
        }
    }
    let denom = mt + mt;
    Ok(ParamVector::new(acc.into_iter().map(|a| a / denom).collect()))
}

/// Full neighbour rule over a fixed directed graph.
///
/// `in_neighbors[j]` lists the devices that send to `j`. Devices without
/// in-neighbours do not aggregate; the outer average runs over the `n`
/// devices that do.
pub fn neighbor_sgd<T: Scalar>(
    gradients: &[ParamVector<T>],
    in_neighbors: &[Vec<usize>],
) -> Result<ParamVector<T>> {
    if gradients.is_empty() || gradients.len() != in_neighbors.len() {
        return Err(invalid("neighbor_sgd needs one neighbour list per gradient"));
    }
    let mut terms = Vec::new();
    for (j, nbrs) in in_neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let mut incoming = Vec::with_capacity(nbrs.len());
        for &i in nbrs {
            let g = gradients
                .get(i)
                .ok_or_else(|| invalid(format!("neighbor {i} out of range")))?;
            incoming.push(g.clone());
        }
        terms.push(neighbor_aggregate(&gradients[j], &incoming, nbrs.len())?);
    }
    if terms.is_empty() {
        return Err(invalid("graph has no aggregating device"));
    }
    central_aggregate(&terms).map(ParamVector::reset_theta)
}

/// θ-weighted pair merge: `(θ_i Δw_i + θ_j Δw_j) / (θ_i + θ_j)`, θ' = θ_i + θ_j.
pub fn pair_aggregate<T: Scalar>(
    receiver: &ParamVector<T>,
    incoming: &ParamVector<T>,
) -> Result<ParamVector<T>> {
    receiver.check_len(incoming)?;
    check_theta(receiver.theta)?;
    check_theta(incoming.theta)?;
    let theta = receiver.theta + incoming.theta;
    let values = receiver
        .values
        .iter()
        .zip(&incoming.values)
        .map(|(&a, &b)| (receiver.theta * a + incoming.theta * b) / theta)
        .collect();
    Ok(ParamVector { values, theta })
}

/// `w - η Δw`; θ of the result is 1.
pub fn sgd_step<T: Scalar>(
    weights: &ParamVector<T>,
    global_gradient: &ParamVector<T>,
    eta: T,
) -> Result<ParamVector<T>> {
    weights.check_len(global_gradient)?;
    if !(eta > T::zero()) {
        return Err(invalid(format!("eta must be positive, got {eta:?}")));
    }
    let values = weights
        .values
        .iter()
        .zip(&global_gradient.values)
        .map(|(&w, &g)| w - eta * g)
        .collect();
    Ok(ParamVector::new(values))
}

/// Runs a sequence of directed merges `(sender, receiver)` over `holders`.
///
/// Each sender must still hold a value and gives it up; the receiver keeps
/// the merged vector. Returns the index and vector of the single survivor.
pub fn reduce_pairs<T: Scalar>(
    gradients: &[ParamVector<T>],
    pairs: &[(usize, usize)],
) -> Result<(usize, ParamVector<T>)> {
    let mut holders: Vec<Option<ParamVector<T>>> = gradients.iter().cloned().map(Some).collect();
    for &(s, r) in pairs {
        if s == r {
            return Err(invalid(format!("self pair on {s}")));
        }
        let incoming = holders
            .get_mut(s)
            .and_then(Option::take)
            .ok_or_else(|| invalid(format!("sender {s} holds no value")))?;
        let slot = holders
            .get_mut(r)
            .ok_or_else(|| invalid(format!("receiver {r} out of range")))?;
        let merged = match slot.as_ref() {
            Some(current) => pair_aggregate(current, &incoming)?,
            None => return Err(invalid(format!("receiver {r} already sent"))),
        };
        *slot = Some(merged);
    }
    let mut left = holders.into_iter().enumerate().filter_map(|(i, h)| h.map(|h| (i, h)));
    let survivor = left.next().ok_or_else(|| invalid("no survivor"))?;
    if left.next().is_some() {
        return Err(invalid("pairs do not reduce to a single survivor"));
    }
    Ok(survivor)
}
