//! In-process coordination between simulated ranks.
//!
//! Planning traffic flows along a machine/group tree rooted at global rank 0
//! (the coordinator). Load-time tensor exchange uses per-rank mailboxes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use crate::error::{Error, Result};

/// Tree of ranks; `parent[r]` is `None` only for the coordinator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub world_size: u32,
    pub workers_per_machine: u32,
    pub group_size: u32,
    pub parent: Vec<Option<u32>>,
    /// Number of grouping rounds above the machine level.
    pub levels: u32,
}

impl Topology {
    pub fn edges(&self) -> Vec<(u32, u32)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (c as u32, p)))
            .collect()
    }

    pub fn children(&self, rank: u32) -> Vec<u32> {
        self.parent
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == Some(rank))
            .map(|(c, _)| c as u32)
            .collect()
    }

    pub fn fan_in(&self, rank: u32) -> usize {
        self.parent.iter().filter(|p| **p == Some(rank)).count()
    }

    pub fn max_fan_in(&self) -> usize {
        (0..self.world_size).map(|r| self.fan_in(r)).max().unwrap_or(0)
    }

    pub fn depth(&self, mut rank: u32) -> u32 {
        let mut d = 0;
        while let Some(p) = self.parent[rank as usize] {
            rank = p;
            d += 1;
        }
        d
    }

    /// `rank` and all of its descendants.
    pub fn subtree(&self, rank: u32) -> BTreeSet<u32> {
        (0..self.world_size)
            .filter(|&r| {
                let mut cur = Some(r);
                while let Some(c) = cur {
                    if c == rank {
                        return true;
                    }
                    cur = self.parent[c as usize];
                }
                false
            })
            .collect()
    }

    /// Ranks ordered deepest first, so children precede their parents.
    fn bottom_up(&self) -> Vec<u32> {
        let mut order: Vec<u32> = (0..self.world_size).collect();
        order.sort_by_key(|&r| (std::cmp::Reverse(self.depth(r)), r));
        order
    }

    /// Fan-in at the coordinator if every rank talked to it directly.
    pub fn flat_fan_in(&self) -> usize {
        self.world_size.saturating_sub(1) as usize
    }
}

/// Builds the hierarchical topology: workers parent to their machine's local
/// rank 0, then machine roots are grouped `group_size` at a time (lowest rank
/// leads) until a single root remains.
pub fn build_topology(world_size: u32, workers_per_machine: u32, group_size: u32) -> Topology {
    let world_size = world_size.max(1);
    let per_machine = workers_per_machine.max(1);
    let group = group_size.max(2);
    let mut parent = vec![None; world_size as usize];
    let mut roots = Vec::new();
    for machine_root in (0..world_size).step_by(per_machine as usize) {
        roots.push(machine_root);
        for r in machine_root + 1..(machine_root + per_machine).min(world_size) {
            parent[r as usize] = Some(machine_root);
        }
    }
    let mut levels = 0;
    while roots.len() > 1 {
        levels += 1;
        roots = roots
            .chunks(group as usize)
            .map(|chunk| {
                for &r in &chunk[1..] {
                    parent[r as usize] = Some(chunk[0]);
                }
                chunk[0]
            })
            .collect();
    }
    Topology {
        world_size,
        workers_per_machine: per_machine,
        group_size: group,
        parent,
        levels,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CommCounters {
    pub gather_messages: u64,
    pub scatter_messages: u64,
    pub barrier_messages: u64,
    pub exchange_messages: u64,
}

impl CommCounters {
    pub fn planning_messages(&self) -> u64 {
        self.gather_messages + self.scatter_messages
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery<T> {
    pub delivered: BTreeMap<u32, T>,
    pub missing: BTreeSet<u32>,
}

/// Communicator over a [`Topology`] with message accounting and rank-kill
/// fault injection.
#[derive(Debug)]
pub struct Comm {
    topology: Topology,
    dead: Mutex<BTreeSet<u32>>,
    gather_messages: AtomicU64,
    scatter_messages: AtomicU64,
    barrier_messages: AtomicU64,
    exchange_messages: Arc<AtomicU64>,
}

impl Comm {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            dead: Mutex::new(BTreeSet::new()),
            gather_messages: AtomicU64::new(0),
            scatter_messages: AtomicU64::new(0),
            barrier_messages: AtomicU64::new(0),
            exchange_messages: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Eight workers per machine, pairs of machines per group.
    pub fn for_world(world_size: u32) -> Self {
        Self::new(build_topology(world_size, 8, 2))
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn kill(&self, rank: u32) {
        self.dead.lock().unwrap().insert(rank);
    }

    pub fn revive_all(&self) {
        self.dead.lock().unwrap().clear();
    }

    pub fn counters(&self) -> CommCounters {
        CommCounters {
            gather_messages: self.gather_messages.load(Ordering::Relaxed),
            scatter_messages: self.scatter_messages.load(Ordering::Relaxed),
            barrier_messages: self.barrier_messages.load(Ordering::Relaxed),
            exchange_messages: self.exchange_messages.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn count_barrier_message(&self) {
        self.barrier_messages.fetch_add(1, Ordering::Relaxed);
    }

    /// Moves every rank's payload up the tree to the coordinator. Each live
    /// non-root rank sends exactly one message (its subtree bundle) to its
    /// parent; a dead rank drops its whole subtree.
    pub fn tree_gather<T>(&self, mut payloads: BTreeMap<u32, T>) -> Delivery<T> {
        let dead = self.dead.lock().unwrap().clone();
        let mut bundles: Vec<BTreeMap<u32, T>> = (0..self.topology.world_size).map(|_| BTreeMap::new()).collect();
        for rank in self.topology.bottom_up() {
            let mut bundle = std::mem::take(&mut bundles[rank as usize]);
            if dead.contains(&rank) {
                continue;
            }
            if let Some(p) = payloads.remove(&rank) {
                bundle.insert(rank, p);
            }
            match self.topology.parent[rank as usize] {
                Some(parent) => {
                    self.gather_messages.fetch_add(1, Ordering::Relaxed);
                    bundles[parent as usize].extend(bundle);
                }
                None => bundles[rank as usize] = bundle,
            }
        }
        let delivered = std::mem::take(&mut bundles[0]);
        let missing = (0..self.topology.world_size)
            .filter(|r| !delivered.contains_key(r))
            .collect();
        Delivery { delivered, missing }
    }

    /// Mirror of [`Comm::tree_gather`]: the coordinator pushes per-rank
    /// payloads down the tree, one message per edge into a live child.
    pub fn tree_scatter<T>(&self, mut payloads: BTreeMap<u32, T>) -> Delivery<T> {
        let dead = self.dead.lock().unwrap().clone();
        let mut delivered = BTreeMap::new();
        let mut order = self.topology.bottom_up();
        order.reverse();
        let mut reached = BTreeSet::new();
        for rank in order {
            let reachable = match self.topology.parent[rank as usize] {
                None => !dead.contains(&rank),
                Some(p) => {
                    let ok = reached.contains(&p);
                    if ok {
                        self.scatter_messages.fetch_add(1, Ordering::Relaxed);
                    }
                    ok && !dead.contains(&rank)
                }
            };
            if reachable {
                reached.insert(rank);
                if let Some(p) = payloads.remove(&rank) {
                    delivered.insert(rank, p);
                }
            }
        }
        let missing = (0..self.topology.world_size).filter(|r| !reached.contains(r)).collect();
        Delivery { delivered, missing }
    }

    /// Creates an all-to-all mailbox set for `world_size` ranks.
    pub fn exchange(&self, world_size: u32, deadline: Duration) -> Vec<ExchangeEndpoint> {
        let (senders, receivers): (Vec<_>, Vec<_>) = (0..world_size).map(|_| unbounded()).unzip();
        receivers
            .into_iter()
            .enumerate()
            .map(|(rank, inbox)| ExchangeEndpoint {
                rank: rank as u32,
                senders: senders.clone(),
                inbox,
                deadline,
                counter: self.exchange_messages.clone(),
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct ExchangeMessage {
    pub from: u32,
    pub item_id: usize,
    pub bytes: Arc<Vec<u8>>,
}

/// One rank's side of the all-to-all exchange.
#[derive(Debug)]
pub struct ExchangeEndpoint {
    pub rank: u32,
    senders: Vec<Sender<ExchangeMessage>>,
    inbox: Receiver<ExchangeMessage>,
    deadline: Duration,
    counter: Arc<AtomicU64>,
}

impl ExchangeEndpoint {
    pub fn send(&self, to: u32, item_id: usize, bytes: Arc<Vec<u8>>) -> Result<()> {
        self.counter.fetch_add(1, Ordering::Relaxed);
        self.senders[to as usize]
            .send(ExchangeMessage {
                from: self.rank,
                item_id,
                bytes,
            })
            .map_err(|_| Error::Timeout(format!("rank {to} is no longer receiving")))
    }

    /// Waits for the next message. `waiting_on` names the peers still owing
    /// data, for the timeout error.
    pub fn recv(&self, waiting_on: &BTreeSet<u32>) -> Result<ExchangeMessage> {
        match self.inbox.recv_timeout(self.deadline) {
            Ok(m) => Ok(m),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => Err(Error::Timeout(format!(
                "rank {} gave up waiting for exchange data from ranks {:?}",
                self.rank,
                waiting_on.iter().collect::<Vec<_>>()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_ranks_two_machines() {
        let t = build_topology(8, 4, 2);
        let mut edges = t.edges();
        edges.sort();
        assert_eq!(edges, vec![(1, 0), (2, 0), (3, 0), (4, 0), (5, 4), (6, 4), (7, 4)]);
        assert_eq!(t.max_fan_in(), 4);
        assert_eq!(t.children(0), vec![1, 2, 3, 4]);
        assert_eq!(t.levels, 1);
    }

    #[test]
    fn single_rank_has_no_edges() {
        let t = build_topology(1, 4, 2);
        assert!(t.edges().is_empty());
        let c = Comm::new(t);
        let d = c.tree_gather(BTreeMap::from([(0, "x")]));
        assert_eq!(d.delivered[&0], "x");
        assert_eq!(c.counters().gather_messages, 0);
    }

    #[test]
    fn sixteen_ranks_two_levels() {
        let t = build_topology(16, 4, 2);
        assert_eq!(t.levels, 2);
        assert_eq!(t.parent[0], None);
        assert_eq!(t.parent[4], Some(0));
        assert_eq!(t.parent[12], Some(8));
        assert_eq!(t.parent[8], Some(0));
        assert_eq!(t.edges().len(), 15);
    }

    #[test]
    fn gather_counts_edges_and_reduces_fan_in() {
        let c = Comm::new(build_topology(8, 4, 2));
        let payloads: BTreeMap<u32, u32> = (0..8).map(|r| (r, r * 10)).collect();
        let d = c.tree_gather(payloads.clone());
        assert_eq!(d.delivered, payloads);
        assert!(d.missing.is_empty());
        assert_eq!(c.counters().gather_messages, 7);
        assert!(c.topology().max_fan_in() < c.topology().flat_fan_in());
    }

    #[test]
    fn scatter_after_gather_round_trips() {
        let c = Comm::new(build_topology(8, 4, 2));
        let payloads: BTreeMap<u32, String> = (0..8).map(|r| (r, format!("slot-{r}"))).collect();
        let gathered = c.tree_gather(payloads.clone()).delivered;
        let scattered = c.tree_scatter(gathered);
        assert_eq!(scattered.delivered, payloads);
        assert_eq!(c.counters().scatter_messages, 7);
    }

    #[test]
    fn dead_leaf_is_reported_missing() {
        let c = Comm::new(build_topology(8, 4, 2));
        c.kill(5);
        let d = c.tree_gather((0..8).map(|r| (r, r)).collect());
        assert_eq!(d.missing, BTreeSet::from([5]));
        assert_eq!(d.delivered.len(), 7);
    }

    #[test]
    fn dead_machine_root_drops_subtree() {
        let c = Comm::new(build_topology(8, 4, 2));
        c.kill(4);
        let d = c.tree_gather((0..8).map(|r| (r, r)).collect());
        assert_eq!(d.missing, c.topology().subtree(4));
        let s = c.tree_scatter((0..8).map(|r| (r, r)).collect());
        assert_eq!(s.missing, BTreeSet::from([4, 5, 6, 7]));
    }

    #[test]
    fn exchange_times_out_naming_peer() {
        let c = Comm::for_world(2);
        let eps = c.exchange(2, Duration::from_millis(20));
        eps[0].send(1, 3, Arc::new(vec![1, 2])).unwrap();
        let m = eps[1].recv(&BTreeSet::from([0])).unwrap();
        assert_eq!((m.from, m.item_id), (0, 3));
        let err = eps[1].recv(&BTreeSet::from([0])).unwrap_err();
        assert!(err.to_string().contains("[0]"));
        assert_eq!(c.counters().exchange_messages, 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gather_uses_one_message_per_edge(world in 1u32..=64, per in 1u32..=9, group in 2u32..=5) {
                let c = Comm::new(build_topology(world, per, group));
                let d = c.tree_gather((0..world).map(|r| (r, r)).collect());
                prop_assert_eq!(d.delivered.len() as u32, world);
                prop_assert_eq!(c.counters().gather_messages, world as u64 - 1);
                let t = c.topology();
                prop_assert_eq!(t.edges().len() as u32, world - 1);
                prop_assert!(t.max_fan_in() as u32 <= (per - 1) + t.levels * (group - 1));
                prop_assert!(t.max_fan_in() <= t.flat_fan_in());
                // once some rank is two hops away the root no longer sees everyone
                if (0..world).any(|r| t.depth(r) >= 2) {
                    prop_assert!(t.max_fan_in() < t.flat_fan_in());
                }
            }

            #[test]
            fn gather_scatter_identity(values in prop::collection::vec(any::<u16>(), 1..40)) {
                let world = values.len() as u32;
                let c = Comm::new(build_topology(world, 4, 3));
                let payloads: BTreeMap<u32, u16> = values.iter().enumerate().map(|(i, v)| (i as u32, *v)).collect();
                let back = c.tree_scatter(c.tree_gather(payloads.clone()).delivered).delivered;
                prop_assert_eq!(back, payloads);
            }
        }
    }
}
