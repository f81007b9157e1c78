//! The execution support: execution frameworks, channels, and the
//! precomputed all-pairs shortest channel chains between them.
//!
//! Topology values are immutable snapshots; applying an event produces a new
//! snapshot so dead elements can later be restored with their original ids.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of an execution framework (EF), the unit of deployment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EfId(pub String);

impl EfId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for EfId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An execution framework: one deployment target in the machine/host/EF
/// hierarchy, with an abstract memory capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionFramework {
    pub id: EfId,
    pub machine: String,
    pub host: String,
    pub memory_capacity: u64,
    pub alive: bool,
}

/// Normalized identity of a channel: the unordered pair of its endpoint EFs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId(EfId, EfId);

impl ChannelId {
    /// Builds the normalized id; endpoint order does not matter.
    pub fn new(a: EfId, b: EfId) -> Self {
        if a <= b {
            Self(a, b)
        } else {
            Self(b, a)
        }
    }

    pub fn endpoints(&self) -> (&EfId, &EfId) {
        (&self.0, &self.1)
    }

    pub fn touches(&self, ef: &EfId) -> bool {
        &self.0 == ef || &self.1 == ef
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}~{}", self.0, self.1)
    }
}

/// A direct connection between two EFs. `cost` drives path selection;
/// `latency` drives simulated delivery time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub id: ChannelId,
    pub cost: f64,
    pub latency: u64,
    pub alive: bool,
}

impl Channel {
    pub fn new(a: EfId, b: EfId) -> Self {
        Self {
            id: ChannelId::new(a, b),
            cost: 1.0,
            latency: 1,
            alive: true,
        }
    }
}

/// The execution graph: EFs as vertices, channels as undirected edges.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Topology {
    efs: BTreeMap<EfId, ExecutionFramework>,
    channels: BTreeMap<ChannelId, Channel>,
}

/// A runtime change to the execution support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "kebab-case")]
pub enum TopologyEvent {
    EfDown { ef: EfId },
    EfUp { ef: EfId },
    ChannelDown { channel: ChannelId },
    ChannelUp { channel: ChannelId },
    EfAdded { ef: ExecutionFramework },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("unknown execution framework {0}")]
    UnknownEf(EfId),
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
    #[error("duplicate execution framework {0}")]
    DuplicateEf(EfId),
    #[error("duplicate channel {0}")]
    DuplicateChannel(ChannelId),
    #[error("channel {0} endpoints are not distinct")]
    SelfLoop(ChannelId),
    #[error("channel {0} has non-positive cost")]
    NonPositiveCost(ChannelId),
}

impl Topology {
    /// Builds a topology, rejecting duplicate ids, dangling channel
    /// endpoints, self-loops, and non-positive costs.
    pub fn new(
        efs: Vec<ExecutionFramework>,
        channels: Vec<Channel>,
    ) -> Result<Self, TopologyError> {
        let mut t = Topology::default();
        for ef in efs {
            if t.efs.contains_key(&ef.id) {
                return Err(TopologyError::DuplicateEf(ef.id));
            }
            t.efs.insert(ef.id.clone(), ef);
        }
        for ch in channels {
            let (a, b) = ch.id.endpoints();
            if a == b {
                return Err(TopologyError::SelfLoop(ch.id));
            }
            if !t.efs.contains_key(a) {
                return Err(TopologyError::UnknownEf(a.clone()));
            }
            if !t.efs.contains_key(b) {
                return Err(TopologyError::UnknownEf(b.clone()));
            }
            if !(ch.cost > 0.0) {
                return Err(TopologyError::NonPositiveCost(ch.id));
            }
            if t.channels.contains_key(&ch.id) {
                return Err(TopologyError::DuplicateChannel(ch.id));
            }
            t.channels.insert(ch.id.clone(), ch);
        }
        Ok(t)
    }

    pub fn ef(&self, id: &EfId) -> Option<&ExecutionFramework> {
        self.efs.get(id)
    }

    pub fn channel(&self, id: &ChannelId) -> Option<&Channel> {
        self.channels.get(id)
    }

    pub fn efs(&self) -> impl Iterator<Item = &ExecutionFramework> {
        self.efs.values()
    }

    pub fn channels(&self) -> impl Iterator<Item = &Channel> {
        self.channels.values()
    }

    pub fn ef_alive(&self, id: &EfId) -> bool {
        self.efs.get(id).map(|e| e.alive).unwrap_or(false)
    }

    pub fn channel_alive(&self, id: &ChannelId) -> bool {
        self.channels.get(id).map(|c| c.alive).unwrap_or(false)
    }

    /// Alive EF ids in sorted order.
    pub fn alive_efs(&self) -> Vec<EfId> {
        self.efs
            .values()
            .filter(|e| e.alive)
            .map(|e| e.id.clone())
            .collect()
    }

    /// Channels usable for routing: alive, with both endpoint EFs alive.
    pub fn usable_channels(&self) -> Vec<&Channel> {
        self.channels
            .values()
            .filter(|c| {
                let (a, b) = c.id.endpoints();
                c.alive && self.ef_alive(a) && self.ef_alive(b)
            })
            .collect()
    }

    /// Applies a runtime event, returning the updated snapshot. Any path
    /// table computed from the previous snapshot is stale afterwards.
    pub fn apply_event(&self, event: &TopologyEvent) -> Result<Topology, TopologyError> {
        let mut next = self.clone();
        match event {
            TopologyEvent::EfDown { ef } => {
                next.efs
                    .get_mut(ef)
                    .ok_or_else(|| TopologyError::UnknownEf(ef.clone()))?
                    .alive = false;
            }
            TopologyEvent::EfUp { ef } => {
                next.efs
                    .get_mut(ef)
                    .ok_or_else(|| TopologyError::UnknownEf(ef.clone()))?
                    .alive = true;
            }
            TopologyEvent::ChannelDown { channel } => {
                next.channels
                    .get_mut(channel)
                    .ok_or_else(|| TopologyError::UnknownChannel(channel.clone()))?
                    .alive = false;
            }
            TopologyEvent::ChannelUp { channel } => {
                next.channels
                    .get_mut(channel)
                    .ok_or_else(|| TopologyError::UnknownChannel(channel.clone()))?
                    .alive = true;
            }
            TopologyEvent::EfAdded { ef } => {
                if next.efs.contains_key(&ef.id) {
                    return Err(TopologyError::DuplicateEf(ef.id.clone()));
                }
                next.efs.insert(ef.id.clone(), ef.clone());
            }
        }
        Ok(next)
    }

    /// True when the alive EFs form one connected component under usable
    /// channels (vacuously true when no EF is alive).
    pub fn alive_subgraph_connected(&self) -> bool {
        let alive = self.alive_efs();
        let Some(start) = alive.first() else {
            return true;
        };
        let mut reached = std::collections::BTreeSet::new();
        reached.insert(start.clone());
        let mut frontier = vec![start.clone()];
        while let Some(ef) = frontier.pop() {
            for ch in self.usable_channels() {
                if ch.id.touches(&ef) {
                    let (a, b) = ch.id.endpoints();
                    let other = if a == &ef { b } else { a };
                    if reached.insert(other.clone()) {
                        frontier.push(other.clone());
                    }
                }
            }
        }
        reached.len() == alive.len()
    }
}

/// A minimal-cost route between two alive EFs: the total cost and the
/// explicit EF sequence, starting at the origin and ending at the target.
/// The sequence for a pair (e, e) is just [e] with cost zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEntry {
    pub cost: f64,
    pub route: Vec<EfId>,
}

impl PathEntry {
    /// The channel hops along the route.
    pub fn hops(&self) -> Vec<ChannelId> {
        self.route
            .windows(2)
            .map(|w| ChannelId::new(w[0].clone(), w[1].clone()))
            .collect()
    }
}

/// All-pairs shortest channel chains over the alive subgraph, computed with
/// the Floyd-Warshall recurrence. Cost ties are broken toward the
/// lexicographically smallest EF route, so two computations on equal
/// topologies are identical chain for chain. Unreachable pairs are absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PathTable {
    entries: BTreeMap<(EfId, EfId), PathEntry>,
}

impl PathTable {
    pub fn compute(topology: &Topology) -> PathTable {
        let efs = topology.alive_efs();
        let n = efs.len();
        let index: BTreeMap<&EfId, usize> = efs.iter().enumerate().map(|(i, e)| (e, i)).collect();

        // dist[i][j] holds (cost, route-as-indices). Indices are assigned in
        // sorted EF order, so comparing index sequences is comparing routes.
        let mut dist: Vec<Vec<Option<(f64, Vec<usize>)>>> = vec![vec![None; n]; n];
        for i in 0..n {
            dist[i][i] = Some((0.0, vec![i]));
        }
        for ch in topology.usable_channels() {
            let (a, b) = ch.id.endpoints();
            let (i, j) = (index[a], index[b]);
            dist[i][j] = Some((ch.cost, vec![i, j]));
            dist[j][i] = Some((ch.cost, vec![j, i]));
        }

        for k in 0..n {
            for i in 0..n {
                if i == k {
                    continue;
                }
                let Some((c_ik, r_ik)) = dist[i][k].clone() else {
                    continue;
                };
                for j in 0..n {
                    if j == k || j == i {
                        continue;
                    }
                    let Some((c_kj, r_kj)) = dist[k][j].clone() else {
                        continue;
                    };
                    let cand_cost = c_ik + c_kj;
                    let better = match &dist[i][j] {
                        None => true,
                        Some((cur_cost, cur_route)) => {
                            if cand_cost < *cur_cost {
                                true
                            } else if cand_cost > *cur_cost {
                                false
                            } else {
                                // Cost tie: take the lexicographically
                                // smaller route. Both candidates are simple
                                // because all channel costs are positive.
                                let mut cand_route = r_ik.clone();
                                cand_route.extend_from_slice(&r_kj[1..]);
                                cand_route < *cur_route
                            }
                        }
                    };
                    if better {
                        let mut route = r_ik.clone();
                        route.extend_from_slice(&r_kj[1..]);
                        dist[i][j] = Some((cand_cost, route));
                    }
                }
            }
        }

        let mut entries = BTreeMap::new();
        for i in 0..n {
            for j in 0..n {
                if let Some((_, route_idx)) = &dist[i][j] {
                    let route: Vec<EfId> = route_idx.iter().map(|&x| efs[x].clone()).collect();
                    // Recorded cost is the hop-by-hop sum along the route so
                    // it matches a left-to-right reconstruction exactly.
                    let cost = route
                        .windows(2)
                        .map(|w| {
                            topology
                                .channel(&ChannelId::new(w[0].clone(), w[1].clone()))
                                .map(|c| c.cost)
                                .unwrap_or(f64::INFINITY)
                        })
                        .sum();
                    entries.insert((efs[i].clone(), efs[j].clone()), PathEntry { cost, route });
                }
            }
        }
        PathTable { entries }
    }

    pub fn entry(&self, from: &EfId, to: &EfId) -> Option<&PathEntry> {
        self.entries.get(&(from.clone(), to.clone()))
    }

    pub fn cost(&self, from: &EfId, to: &EfId) -> Option<f64> {
        self.entry(from, to).map(|e| e.cost)
    }

    pub fn route(&self, from: &EfId, to: &EfId) -> Option<&[EfId]> {
        self.entry(from, to).map(|e| e.route.as_slice())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(EfId, EfId), &PathEntry)> {
        self.entries.iter()
    }
}
