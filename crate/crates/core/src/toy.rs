//! Synthetic classification data and a small dense network with exact
//! gradients, so simulated devices produce real gradients and accuracy.

use std::io::{Read, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::param::{sgd_step, ParamVector, TrainHyper};
use crate::scalar::Real;

/// Fraction of samples used for training; the rest is the test split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub dim: usize,
    pub seed: u64,
    /// Samples `[..split]` are the training set, `[split..]` the test set.
    pub split: usize,
}

impl SyntheticDataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.split]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.split..]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("f{k}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|x| format!("{x:?}")).collect();
            row.push(s.label.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`write_csv`](Self::write_csv). The split is
    /// recomputed with [`TRAIN_FRACTION`].
    pub fn read_csv<R: Read>(reader: R, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let dim = r.headers()?.len().checked_sub(1).ok_or_else(|| invalid("empty header"))?;
        let mut samples = Vec::new();
        let mut num_classes = 0;
        for rec in r.records() {
            let rec = rec?;
            let mut features = Vec::with_capacity(dim);
            for k in 0..dim {
                features.push(
                    rec[k]
                        .parse::<f64>()
                        .map_err(|e| invalid(format!("bad feature {:?}: {e}", &rec[k])))?,
                );
            }
            let label: usize = rec[dim]
                .parse()
                .map_err(|e| invalid(format!("bad label {:?}: {e}", &rec[dim])))?;
            num_classes = num_classes.max(label + 1);
            samples.push(Sample { features, label });
        }
        if samples.is_empty() {
            return Err(invalid("dataset csv has no rows"));
        }
        let split = train_split(samples.len());
        Ok(Self { samples, num_classes, dim, seed, split })
    }
}

fn train_split(n: usize) -> usize {
    ((n as f64 * TRAIN_FRACTION).floor() as usize).clamp(1, n)
}

/// One Gaussian cluster per class, shuffled, with an 80/20 split.
///
/// Class centres sit on a fixed pattern of radius 2 so the difficulty is set
/// by `spread` alone.
pub fn generate_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(invalid("generate_blobs needs positive counts"));
    }
    if !(spread > 0.0) {
        return Err(invalid("spread must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let phase = std::f64::consts::TAU * c as f64 / num_classes as f64;
        let center: Vec<f64> = (0..dim)
            .map(|k| 2.0 * (phase + k as f64 * std::f64::consts::PI / dim as f64).cos())
            .collect();
        for _ in 0..per_class {
            let features = center
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spread * z
                })
                .collect();
            samples.push(Sample { features, label: c });
        }
    }
    samples.shuffle(&mut rng);
    let split = train_split(samples.len());
    Ok(SyntheticDataset { samples, num_classes, dim, seed, split })
}

/// Device shards over the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Permutation of training-sample indices.
    pub order: Vec<usize>,
    /// `shards[d]` is a range into `order`.
    pub shards: Vec<Range<usize>>,
}

impl Partition {
    pub fn shard(&self, device: usize) -> &[usize] {
        &self.order[self.shards[device].clone()]
    }
}

/// Seeded shuffle of the training indices, then contiguous shards whose
/// sizes differ by at most one (the first `n mod d` shards get the extra).
pub fn partition_dataset(ds: &SyntheticDataset, num_devices: usize) -> Result<Partition> {
    let n = ds.split;
    if num_devices == 0 {
        return Err(invalid("num_devices must be >= 1"));
    }
    if num_devices > n {
        return Err(invalid(format!("{num_devices} devices but only {n} training samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ds.seed ^ 0x5eed_5a4d);
    order.shuffle(&mut rng);
    let base = n / num_devices;
    let extra = n % num_devices;
    let mut shards = Vec::with_capacity(num_devices);
    let mut start = 0;
    for d in 0..num_devices {
        let len = base + usize::from(d < extra);
        shards.push(start..start + len);
        start += len;
    }
    Ok(Partition { order, shards })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Layout {
    pub fn param_count(&self) -> usize {
        self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.num_classes
            + self.num_classes
    }

    // offsets of W1, b1, W2, b2
    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.input_dim * self.hidden_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.hidden_dim * self.num_classes;
        (b1, w2, b2)
    }
}

/// Dense → ReLU → dense → softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel<T> {
    pub weights: ParamVector<T>,
    pub layout: Layout,
}

impl<T: Real> ToyModel<T> {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            weights: ParamVector::zeros(layout.param_count()),
            layout,
        }
    }

    /// Uniform fan-in initialisation, biases zero.
    pub fn init(layout: Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b1, w2, b2) = layout.offsets();
        let mut values = vec![T::zero(); layout.param_count()];
        let lim1 = (6.0 / layout.input_dim as f64).sqrt();
        let lim2 = (6.0 / layout.hidden_dim as f64).sqrt();
        for v in &mut values[..b1] {
            *v = T::from_f64_lossy(rng.random_range(-lim1..lim1));
        }
        for v in &mut values[w2..b2] {
            *v = T::from_f64_lossy(rng.random_range(-lim2..lim2));
        }
        Self {
            weights: ParamVector::new(values),
            layout,
        }
    }

    pub fn from_weights(layout: Layout, weights: ParamVector<T>) -> Result<Self> {
        if weights.len() != layout.param_count() {
            return Err(Error::Dimension {
                expected: layout.param_count(),
                actual: weights.len(),
            });
        }
        Ok(Self { weights, layout })
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.layout.input_dim {
            return Err(Error::Dimension {
                expected: self.layout.input_dim,
                actual: s.features.len(),
            });
        }
        if s.label >= self.layout.num_classes {
            return Err(invalid(format!("label {} out of range", s.label)));
        }
        Ok(())
    }

    /// Hidden pre-activations and logits for one sample.
    fn forward(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let l = self.layout;
        let w = self.weights.values();
        let (b1, w2, b2) = l.offsets();
        let pre: Vec<T> = (0..l.hidden_dim)
            .map(|h| {
                let row = &w[h * l.input_dim..(h + 1) * l.input_dim];
                row.iter().zip(x).fold(w[b1 + h], |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        let logits = (0..l.num_classes)
            .map(|c| {
                let row = &w[w2 + c * l.hidden_dim..w2 + (c + 1) * l.hidden_dim];
                row.iter()
                    .zip(&pre)
                    .fold(w[b2 + c], |acc, (&a, &p)| acc + a * p.max(T::zero()))
            })
            .collect();
        (pre, logits)
    }

    pub fn logits(&self, features: &[f64]) -> Vec<T> {
        let x: Vec<T> = features.iter().map(|&f| T::from_f64_lossy(f)).collect();
        self.forward(&x).1
    }

    /// Argmax class; ties go to the lowest index.
    pub fn predict(&self, features: &[f64]) -> usize {
        let logits = self.logits(features);
        let mut best = 0;
        for (c, &z) in logits.iter().enumerate().skip(1) {
            if z > logits[best] {
                best = c;
            }
        }
        best
    }
}

fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().copied().fold(T::zero(), |a, b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy over `batch` and its exact gradient (θ = 1).
pub fn forward_loss_grad<T: Real>(
    model: &ToyModel<T>,
    batch: &[&Sample],
) -> Result<(T, ParamVector<T>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let l = model.layout;
    let (b1, w2, b2) = l.offsets();
    let w = model.weights.values();
    let mut grad = vec![T::zero(); l.param_count()];
    let mut loss = T::zero();
    for s in batch {
        model.check_sample(s)?;
        let x: Vec<T> = s.features.iter().map(|&f| T::from_f64_lossy(f)).collect();
        let (pre, logits) = model.forward(&x);
        let p = softmax(&logits);
        loss = loss - p[s.label].max(T::min_positive_value()).ln();
        let dz: Vec<T> = p
            .iter()
            .enumerate()
            .map(|(c, &pc)| if c == s.label { pc - T::one() } else { pc })
            .collect();
        for c in 0..l.num_classes {
            grad[b2 + c] = grad[b2 + c] + dz[c];
            for h in 0..l.hidden_dim {
                let idx = w2 + c * l.hidden_dim + h;
                grad[idx] = grad[idx] + dz[c] * pre[h].max(T::zero());
            }
        }
        for h in 0..l.hidden_dim {
            if pre[h] <= T::zero() {
                continue;
            }
            let dh = (0..l.num_classes).fold(T::zero(), |acc, c| acc + w[w2 + c * l.hidden_dim + h] * dz[c]);
            grad[b1 + h] = grad[b1 + h] + dh;
            for k in 0..l.input_dim {
                let idx = h * l.input_dim + k;
                grad[idx] = grad[idx] + dh * x[k];
            }
        }
    }
    let n = T::from_count(batch.len());
    Ok((loss / n, ParamVector::new(grad.into_iter().map(|g| g / n).collect())))
}

/// Fraction of argmax-correct predictions.
pub fn evaluate<T: Real>(model: &ToyModel<T>, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(invalid("empty test slice"));
    }
    let correct = test
        .iter()
        .filter(|s| model.predict(&s.features) == s.label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean loss over a sample slice (no gradient).
pub fn mean_loss<T: Real>(model: &ToyModel<T>, samples: &[Sample]) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    Ok(forward_loss_grad(model, &refs)?.0.to_f64_lossy())
}

/// Number of minibatches every device runs per epoch: set by the smallest
/// shard so that no device ever has an empty batch.
pub fn batches_per_epoch(partition: &Partition, batch_size: usize) -> usize {
    let min_len = partition.shards.iter().map(|r| r.len()).min().unwrap_or(0);
    min_len.div_ceil(batch_size.max(1)).max(1)
}

/// Splits one device's shard for one epoch into aggregation windows.
///
/// The shard is shuffled with the device's RNG, cut into `batches`
/// near-equal minibatches, and consecutive groups of
/// `⌈batches / agg_rounds⌉` minibatches form one window. Every device gets
/// the same number of windows, one per synchronous iteration.
pub fn epoch_windows<R: Rng>(
    shard: &[usize],
    batches: usize,
    agg_rounds: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut idx = shard.to_vec();
    idx.shuffle(rng);
    let len = idx.len();
    let per_window = batches.div_ceil(agg_rounds.max(1)).max(1);
    let mut windows = Vec::new();
    let mut b = 0;
    while b < batches {
        let end_b = (b + per_window).min(batches);
        let lo = b * len / batches;
        let hi = end_b * len / batches;
        windows.push(idx[lo..hi].to_vec());
        b = end_b;
    }
    windows
}

/// Iterations per epoch produced by [`epoch_windows`].
pub fn windows_per_epoch(batches: usize, agg_rounds: usize) -> usize {
    let per_window = batches.div_ceil(agg_rounds.max(1)).max(1);
    batches.div_ceil(per_window)
}

/// Per-epoch snapshot of a synchronous training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord<T> {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub weights: ParamVector<T>,
}

/// Synchronous data-parallel training without any network timing.
///
/// Each iteration every shard computes its window gradient at the shared
/// weights, `aggregate` turns them into the global gradient, and one SGD
/// step is taken. `aggregate` decides the protocol (central mean, pair
/// reduce, neighbour rule).
pub fn train_synchronous<T, F>(
    ds: &SyntheticDataset,
    partition: &Partition,
    layout: Layout,
    hyper: &TrainHyper,
    seed: u64,
    mut aggregate: F,
) -> Result<Vec<EpochRecord<T>>>
where
    T: Real,
    F: FnMut(&[ParamVector<T>]) -> Result<ParamVector<T>>,
{
    hyper.validate()?;
    let mut model = ToyModel::<T>::init(layout, seed);
    let n = partition.shards.len();
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|d| device_rng(seed, DATA_STREAM, d)).collect();
    let batches = batches_per_epoch(partition, hyper.batch_size);
    let train = ds.train();
    let eta = T::from_f64_lossy(hyper.eta);
    let mut records = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let windows: Vec<Vec<Vec<usize>>> = (0..n)
            .map(|d| epoch_windows(partition.shard(d), batches, hyper.agg_rounds_per_epoch, &mut rngs[d]))
            .collect();
        for it in 0..windows[0].len() {
            let mut grads = Vec::with_capacity(n);
            for w in &windows {
                let batch: Vec<&Sample> = w[it].iter().map(|&i| &train[i]).collect();
                grads.push(forward_loss_grad(&model, &batch)?.1);
            }
            let global = aggregate(&grads)?;
            model.weights = sgd_step(&model.weights, &global, eta)?;
        }
        records.push(EpochRecord {
            epoch,
            train_loss: mean_loss(&model, train)?,
            test_accuracy: evaluate(&model, ds.test())?,
            weights: model.weights.clone(),
        });
    }
    Ok(records)
}

/// RNG stream ids derived from one run seed.
pub const DATA_STREAM: u64 = 1;
pub const BUSY_STREAM: u64 = 2;
pub const TRAIN_TIME_STREAM: u64 = 3;
pub const REPORT_STREAM: u64 = 4;
pub const AGENT_STREAM: u64 = 5;

/// Independent per-device stream: `(seed, kind, device)` → ChaCha stream.
pub fn device_rng(seed: u64, kind: u64, device: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 32) | device as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::param::central_aggregate;
    use proptest::prelude::*;

    fn layout(d: usize, h: usize, c: usize) -> Layout {
        Layout { input_dim: d, hidden_dim: h, num_classes: c }
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let ds = generate_blobs(3, 100, 2, 0.5, 42).unwrap();
        assert_eq!(ds.samples.len(), 300);
        for c in 0..3 {
            assert_eq!(ds.samples.iter().filter(|s| s.label == c).count(), 100);
        }
        assert_eq!(ds.split, 240);
        assert_eq!(ds, generate_blobs(3, 100, 2, 0.5, 42).unwrap());
        assert_ne!(ds, generate_blobs(3, 100, 2, 0.5, 43).unwrap());
        assert!(generate_blobs(0, 1, 1, 1.0, 0).is_err());
        assert!(generate_blobs(2, 1, 1, 0.0, 0).is_err());
    }

    #[test]
    fn central_baseline_separates_blobs() {
        let ds = generate_blobs(2, 200, 2, 0.1, 7).unwrap();
        let part = partition_dataset(&ds, 1).unwrap();
        let hyper = TrainHyper { eta: 0.1, epochs: 20, agg_rounds_per_epoch: 32, batch_size: 10 };
        let recs = train_synchronous::<f64, _>(&ds, &part, layout(2, 16, 2), &hyper, 7, |g| {
            central_aggregate(g)
        })
        .unwrap();
        let last = recs.last().unwrap();
        assert!(last.test_accuracy >= 0.95, "accuracy {}", last.test_accuracy);
        assert!(last.train_loss < recs[0].train_loss);
    }

    #[test]
    fn uniform_logits_loss_is_ln2() {
        let m = ToyModel::<f64>::zeros(layout(3, 4, 2));
        let s = Sample { features: vec![0.3, -1.0, 2.0], label: 1 };
        let (loss, grad) = forward_loss_grad(&m, &[&s]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(grad.theta(), 1.0);
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_grad() {
        let m = ToyModel::<f64>::init(layout(3, 5, 3), 9);
        let a = Sample { features: vec![0.1, 0.2, -0.7], label: 2 };
        let b = Sample { features: vec![1.1, -0.4, 0.3], label: 0 };
        let (l1, g1) = forward_loss_grad(&m, &[&a, &b]).unwrap();
        let (l2, g2) = forward_loss_grad(&m, &[&a, &b, &a, &b]).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (x, y) in g1.values().iter().zip(g2.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let l = layout(3, 6, 4);
            let m = ToyModel::<f64>::init(l, trial);
            let mut m = m;
            for v in m.weights.values_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
            let batch: Vec<Sample> = (0..5)
                .map(|_| Sample {
                    features: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    label: rng.random_range(0..4),
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (_, g) = forward_loss_grad(&m, &refs).unwrap();
            let h = 1e-5;
            for k in 0..l.param_count() {
                let mut plus = m.clone();
                plus.weights.values_mut()[k] += h;
                let mut minus = m.clone();
                minus.weights.values_mut()[k] -= h;
                let fd = (forward_loss_grad(&plus, &refs).unwrap().0
                    - forward_loss_grad(&minus, &refs).unwrap().0)
                    / (2.0 * h);
                let an = g.values()[k];
                let scale = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / scale < 1e-4,
                    "trial {trial} coord {k}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = ToyModel::<f64>::zeros(layout(2, 3, 2));
        assert!(forward_loss_grad(&m, &[]).is_err());
        let s = Sample { features: vec![1.0], label: 0 };
        assert!(matches!(forward_loss_grad(&m, &[&s]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn evaluate_extremes() {
        // Constant prediction on a balanced 4-class set.
        let l = layout(2, 3, 4);
        let samples: Vec<Sample> = (0..40)
            .map(|i| Sample { features: vec![i as f64, -(i as f64)], label: i % 4 })
            .collect();
        let mut m = ToyModel::<f64>::zeros(l);
        assert_eq!(evaluate(&m, &samples).unwrap(), 0.25);
        let n = l.param_count();
        m.weights.values_mut()[n - 2] = 1.0;
        assert_eq!(evaluate(&m, &samples).unwrap(), 0.25);
        assert!(evaluate(&m, &[]).is_err());

        // A network trained to memorise a tiny separable set.
        let ds = generate_blobs(2, 10, 2, 0.05, 3).unwrap();
        let part = partition_dataset(&ds, 1).unwrap();
        let hyper = TrainHyper { eta: 0.5, epochs: 30, agg_rounds_per_epoch: 4, batch_size: 4 };
        let recs = train_synchronous::<f64, _>(&ds, &part, layout(2, 8, 2), &hyper, 1, |g| {
            central_aggregate(g)
        })
        .unwrap();
        let model = ToyModel::from_weights(layout(2, 8, 2), recs.last().unwrap().weights.clone()).unwrap();
        assert_eq!(evaluate(&model, ds.train()).unwrap(), 1.0);
    }

    #[test]
    fn f32_model_runs() {
        let m = ToyModel::<f32>::zeros(layout(2, 2, 2));
        let s = Sample { features: vec![1.0, 2.0], label: 0 };
        let (loss, _) = forward_loss_grad(&m, &[&s]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn partition_sizes() {
        let ds = generate_blobs(1, 13, 1, 1.0, 0).unwrap(); // 10 training samples
        assert_eq!(ds.split, 10);
        let p = partition_dataset(&ds, 2).unwrap();
        assert_eq!(p.shards.iter().map(|r| r.len()).collect::<Vec<_>>(), vec![5, 5]);
        let p = partition_dataset(&ds, 3).unwrap();
        assert_eq!(p.shards.iter().map(|r| r.len()).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert!(partition_dataset(&ds, 11).is_err());
        assert!(partition_dataset(&ds, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_blobs(3, 7, 4, 0.3, 12).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = SyntheticDataset::read_csv(buf.as_slice(), 12).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn windows_cover_shard() {
        let shard: Vec<usize> = (100..137).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for rounds in 1..6 {
            let w = epoch_windows(&shard, 4, rounds, &mut rng);
            assert_eq!(w.len(), windows_per_epoch(4, rounds));
            let mut all: Vec<usize> = w.concat();
            all.sort();
            assert_eq!(all, shard);
            assert!(w.iter().all(|x| !x.is_empty()));
        }
    }

    proptest! {
        #[test]
        fn shards_are_disjoint_and_cover(n in 1usize..200, d in 1usize..20, seed in any::<u64>()) {
            prop_assume!(d <= n);
            let samples = (0..n).map(|i| Sample { features: vec![i as f64], label: 0 }).collect();
            let ds = SyntheticDataset { samples, num_classes: 1, dim: 1, seed, split: n };
            let p = partition_dataset(&ds, d).unwrap();
            let mut seen = vec![false; n];
            let sizes: Vec<usize> = p.shards.iter().map(|r| r.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for dev in 0..d {
                for &i in p.shard(dev) {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.into_iter().all(|s| s));
        }
    }
}
