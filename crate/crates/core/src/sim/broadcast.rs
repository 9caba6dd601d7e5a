use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::resource::ResourceReport;

use super::queue::EventQueue;

/// Orders devices by resource condition: battery descending, free memory
/// descending, CPU load ascending, then id. Devices without a report go
/// last.
pub fn resource_order(devices: &[usize], reports: &[Option<ResourceReport>]) -> Vec<usize> {
    let mut out = devices.to_vec();
    out.sort_by(|&a, &b| {
        let ra = reports.get(a).and_then(Option::as_ref);
        let rb = reports.get(b).and_then(Option::as_ref);
        match (ra, rb) {
            (Some(x), Some(y)) => y
                .battery_pct
                .total_cmp(&x.battery_pct)
                .then(y.free_memory_mb.total_cmp(&x.free_memory_mb))
                .then(x.cpu_pct.total_cmp(&y.cpu_pct)),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
        .then(a.cmp(&b))
    });
    out
}

/// Binomial forwarding tree. Rank 0 is the root; rank `r` forwards to
/// `r + 2^k` for every `2^k > r`, in increasing `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BroadcastTree {
    pub root: usize,
    /// Device at each rank.
    pub ranks: Vec<usize>,
    /// `children[d]`: devices `d` forwards to, in send order.
    pub children: Vec<Vec<usize>>,
}

impl BroadcastTree {
    /// `root` followed by `recipients` sorted by resource condition.
    pub fn build(root: usize, recipients: &[usize], reports: &[Option<ResourceReport>], num_devices: usize) -> Result<Self> {
        if root >= num_devices || recipients.iter().any(|&d| d >= num_devices || d == root) {
            return Err(invalid("broadcast recipients out of range"));
        }
        let mut ranks = vec![root];
        ranks.extend(resource_order(recipients, reports));
        let mut seen = vec![false; num_devices];
        for &d in &ranks {
            if std::mem::replace(&mut seen[d], true) {
                return Err(invalid(format!("device {d} listed twice in broadcast")));
            }
        }
        let n = ranks.len();
        let mut children = vec![Vec::new(); num_devices];
        for (r, &d) in ranks.iter().enumerate() {
            // Smallest power of two above r.
            let mut step = if r == 0 { 1 } else { (r + 1).next_power_of_two() };
            while r + step < n {
                children[d].push(ranks[r + step]);
                step *= 2;
            }
        }
        Ok(Self { root, ranks, children })
    }

    /// Sends the root makes itself.
    pub fn direct_sends(&self) -> usize {
        self.children[self.root].len()
    }
}

/// One copy delivered to a device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub device: usize,
    /// Sender of the copy; `None` for the root's own copy.
    pub from: Option<usize>,
    pub time: f64,
    /// Delivered through the root after the planned parent was unreachable.
    pub retried: bool,
}

/// Broadcast log from [`broadcast_global`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BroadcastLog {
    pub tree: BroadcastTree,
    pub deliveries: Vec<Delivery>,
    /// Sends that reached a dropped device.
    pub lost: Vec<usize>,
    /// Sends made by the root, including retries.
    pub root_sends: usize,
    pub finish: f64,
}

#[derive(Debug)]
struct Hop {
    from: usize,
    to: usize,
    retried: bool,
}

/// Runs a binomial broadcast from `root` over `recipients`, one hop costing
/// `hop_ms`, and each device sending its copies one after another.
///
/// Devices in `dropped` never receive: a copy sent to one is lost and the
/// root re-sends to each of its children once its own queue is free.
pub fn broadcast_global(
    root: usize,
    recipients: &[usize],
    reports: &[Option<ResourceReport>],
    dropped: &[usize],
    hop_ms: f64,
    num_devices: usize,
) -> Result<BroadcastLog> {
    if !(hop_ms > 0.0) {
        return Err(invalid("hop time must be positive"));
    }
    let tree = BroadcastTree::build(root, recipients, reports, num_devices)?;
    let mut dead = vec![false; num_devices];
    for &d in dropped {
        if d == root {
            return Err(invalid("the broadcast root cannot drop"));
        }
        *dead.get_mut(d).ok_or_else(|| invalid("dropped device out of range"))? = true;
    }
    let mut queue = EventQueue::default();
    let mut deliveries = vec![Delivery { device: root, from: None, time: 0.0, retried: false }];
    let mut lost = Vec::new();
    let mut root_free = 0.0;
    let mut root_sends = 0;
    for (i, &c) in tree.children[root].iter().enumerate() {
        queue.push(hop_ms * (i + 1) as f64, Hop { from: root, to: c, retried: false });
        root_free = hop_ms * (i + 1) as f64;
        root_sends += 1;
    }
    let mut finish: f64 = 0.0;
    while let Some((now, hop)) = queue.pop() {
        finish = finish.max(now);
        if dead[hop.to] {
            lost.push(hop.to);
            for &c in &tree.children[hop.to] {
                root_free = root_free.max(now) + hop_ms;
                queue.push(root_free, Hop { from: root, to: c, retried: true });
                root_sends += 1;
            }
            continue;
        }
        deliveries.push(Delivery { device: hop.to, from: Some(hop.from), time: now, retried: hop.retried });
        for (i, &c) in tree.children[hop.to].iter().enumerate() {
            queue.push(now + hop_ms * (i + 1) as f64, Hop { from: hop.to, to: c, retried: false });
        }
    }
    Ok(BroadcastLog { tree, deliveries, lost, root_sends, finish })
}
