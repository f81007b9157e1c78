//! Configuration selection: assigning fusion nodes to execution frameworks
//! under eligibility, memory, and path constraints.
//!
//! Two solvers share one deterministic search order (nodes sorted by id,
//! candidate EFs sorted by id): `find_first_admissible` returns the first
//! assignment that satisfies every constraint, `find_optimal` runs
//! branch-and-bound over the same order and minimizes the configuration
//! cost C = w_d * C_d + w_c * C_c, breaking ties toward the
//! lexicographically smallest assignment. Replays are bit-stable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::process::{FusionProcess, ImplId, Link, NodeId};
use crate::topology::{ChannelId, EfId, PathTable, Topology};

/// Weights for the default cost composition h(C_d, C_c) = w_d*C_d + w_c*C_c.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub distribution: f64,
    pub communication: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            distribution: 1.0,
            communication: 1.0,
        }
    }
}

/// A deployable mapping: every fusion node assigned to one EF, every link
/// mapped onto the shortest channel chain between its endpoint EFs, and the
/// implementation chosen for each node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Configuration {
    pub assignment: BTreeMap<NodeId, EfId>,
    pub impls: BTreeMap<NodeId, ImplId>,
    /// EF route per link; a single-element route means co-located endpoints.
    pub link_paths: BTreeMap<Link, Vec<EfId>>,
    /// Stamped by whoever installs the configuration; strictly increasing.
    pub generation: u64,
}

impl Configuration {
    pub fn ef_of(&self, node: &NodeId) -> Option<&EfId> {
        self.assignment.get(node)
    }

    /// Channel hops of one link's route.
    pub fn hops_of(&self, link: &Link) -> Vec<ChannelId> {
        self.link_paths
            .get(link)
            .map(|route| {
                route
                    .windows(2)
                    .map(|w| ChannelId::new(w[0].clone(), w[1].clone()))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// True when both configurations deploy the same placement, ignoring
    /// the generation stamp.
    pub fn same_placement(&self, other: &Configuration) -> bool {
        self.assignment == other.assignment
            && self.impls == other.impls
            && self.link_paths == other.link_paths
    }

    pub fn with_generation(mut self, generation: u64) -> Self {
        self.generation = generation;
        self
    }
}

/// One admissibility constraint violation.
#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[serde(tag = "constraint", rename_all = "kebab-case")]
pub enum AdmissibilityViolation {
    #[error("node {node} is not assigned to any EF")]
    Unassigned { node: NodeId },
    #[error("node {node} assigned outside its eligibility set ({ef})")]
    Eligibility { node: NodeId, ef: EfId },
    #[error("node {node} assigned to dead or unknown EF {ef}")]
    DeadEf { node: NodeId, ef: EfId },
    #[error("memory exceeded on {ef}: demand {demand} > capacity {capacity}")]
    Memory { ef: EfId, demand: u64, capacity: u64 },
    #[error("no usable channel chain for link {link}")]
    NoPath { link: Link },
    #[error("link {link} is not mapped onto the current shortest chain")]
    WrongChain { link: Link },
    #[error("node {node} uses implementation {impl_id} not in its impl set")]
    UnknownImpl { node: NodeId, impl_id: ImplId },
}

/// Outcome of an admissibility check; admissible iff no violations.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AdmissibilityReport {
    pub violations: Vec<AdmissibilityViolation>,
}

impl AdmissibilityReport {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for AdmissibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_admissible() {
            return f.write_str("admissible");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlacementError {
    #[error("eligibility references unknown node {0}")]
    UnknownNode(NodeId),
    #[error("channel weight must be positive for {0}")]
    NonPositiveWeight(ChannelId),
    #[error("cost weights must be non-negative")]
    NegativeCostWeight,
}

/// The configuration-selection problem: the process to place, a topology
/// snapshot with its path table, per-node eligibility over alive EFs, and
/// the cost model.
#[derive(Debug, Clone)]
pub struct PlacementProblem {
    pub process: FusionProcess,
    pub topology: Topology,
    pub paths: PathTable,
    /// Per node, the alive EFs it may be assigned to (already filtered).
    pub eligibility: BTreeMap<NodeId, BTreeSet<EfId>>,
    /// Per-channel cost weight alpha; channels absent from the map weigh 1.
    pub channel_weights: BTreeMap<ChannelId, f64>,
    pub weights: CostWeights,
}

impl PlacementProblem {
    /// Builds the problem for the given topology snapshot, recomputing the
    /// path table and restricting eligibility sets to alive EFs.
    pub fn new(
        process: FusionProcess,
        topology: Topology,
        eligibility: BTreeMap<NodeId, BTreeSet<EfId>>,
        channel_weights: BTreeMap<ChannelId, f64>,
        weights: CostWeights,
    ) -> Result<Self, PlacementError> {
        for node in eligibility.keys() {
            if process.node(node).is_none() {
                return Err(PlacementError::UnknownNode(node.clone()));
            }
        }
        for (ch, w) in &channel_weights {
            if !(*w > 0.0) {
                return Err(PlacementError::NonPositiveWeight(ch.clone()));
            }
        }
        if weights.distribution < 0.0 || weights.communication < 0.0 {
            return Err(PlacementError::NegativeCostWeight);
        }
        let paths = PathTable::compute(&topology);
        let eligibility = eligibility
            .into_iter()
            .map(|(node, efs)| {
                let alive: BTreeSet<EfId> =
                    efs.into_iter().filter(|e| topology.ef_alive(e)).collect();
                (node, alive)
            })
            .collect();
        Ok(Self {
            process,
            topology,
            paths,
            eligibility,
            channel_weights,
            weights,
        })
    }

    fn alpha(&self, channel: &ChannelId) -> f64 {
        self.channel_weights.get(channel).copied().unwrap_or(1.0)
    }

    fn eligible(&self, node: &NodeId) -> Vec<EfId> {
        self.eligibility
            .get(node)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Checks eligibility, memory, assignment totality, and path constraints.
    pub fn admissibility(&self, config: &Configuration) -> AdmissibilityReport {
        let mut violations = Vec::new();
        let mut usage: BTreeMap<EfId, u64> = BTreeMap::new();

        let mut nodes: Vec<_> = self.process.nodes.iter().collect();
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        for node in &nodes {
            let Some(ef) = config.ef_of(&node.id) else {
                violations.push(AdmissibilityViolation::Unassigned {
                    node: node.id.clone(),
                });
                continue;
            };
            if !self.topology.ef_alive(ef) {
                violations.push(AdmissibilityViolation::DeadEf {
                    node: node.id.clone(),
                    ef: ef.clone(),
                });
            }
            if !self
                .eligibility
                .get(&node.id)
                .map(|s| s.contains(ef))
                .unwrap_or(false)
            {
                violations.push(AdmissibilityViolation::Eligibility {
                    node: node.id.clone(),
                    ef: ef.clone(),
                });
            }
            if let Some(impl_id) = config.impls.get(&node.id) {
                if !node.impls.contains(impl_id) {
                    violations.push(AdmissibilityViolation::UnknownImpl {
                        node: node.id.clone(),
                        impl_id: impl_id.clone(),
                    });
                }
            }
            *usage.entry(ef.clone()).or_default() += node.memory_demand;
        }

        for (ef, demand) in &usage {
            let capacity = self
                .topology
                .ef(ef)
                .map(|e| e.memory_capacity)
                .unwrap_or(0);
            if *demand > capacity {
                violations.push(AdmissibilityViolation::Memory {
                    ef: ef.clone(),
                    demand: *demand,
                    capacity,
                });
            }
        }

        let mut links: Vec<_> = self.process.links.iter().collect();
        links.sort();
        for link in links {
            let (Some(from_ef), Some(to_ef)) =
                (config.ef_of(&link.from.node), config.ef_of(&link.to.node))
            else {
                continue; // already reported as Unassigned
            };
            match self.paths.route(from_ef, to_ef) {
                None => violations.push(AdmissibilityViolation::NoPath { link: link.clone() }),
                Some(route) => {
                    if config.link_paths.get(link).map(|r| r.as_slice()) != Some(route) {
                        violations
                            .push(AdmissibilityViolation::WrongChain { link: link.clone() });
                    }
                }
            }
        }

        AdmissibilityReport { violations }
    }

    pub fn is_admissible(&self, config: &Configuration) -> bool {
        self.admissibility(config).is_admissible()
    }

    /// Distribution cost C_d: the spread max n(e) - min n(e) of node counts
    /// over all alive EFs (EFs hosting nothing count zero).
    pub fn cost_distribution(&self, config: &Configuration) -> u64 {
        let mut counts: BTreeMap<EfId, u64> =
            self.topology.alive_efs().into_iter().map(|e| (e, 0)).collect();
        for ef in config.assignment.values() {
            if let Some(c) = counts.get_mut(ef) {
                *c += 1;
            }
        }
        let max = counts.values().max().copied().unwrap_or(0);
        let min = counts.values().min().copied().unwrap_or(0);
        max - min
    }

    /// Communication cost C_c: the alpha-weighted count of links crossing
    /// each channel, summed over channels.
    pub fn cost_communication(&self, config: &Configuration) -> f64 {
        let mut total = 0.0;
        for link in &self.process.links {
            for hop in config.hops_of(link) {
                total += self.alpha(&hop);
            }
        }
        total
    }

    /// Total configuration cost with the default weighted-sum composition.
    pub fn total_cost(&self, config: &Configuration) -> f64 {
        self.total_cost_with(config, |c_d, c_c| {
            self.weights.distribution * c_d + self.weights.communication * c_c
        })
    }

    /// Total cost under a caller-supplied composition of (C_d, C_c).
    pub fn total_cost_with(&self, config: &Configuration, h: impl Fn(f64, f64) -> f64) -> f64 {
        h(
            self.cost_distribution(config) as f64,
            self.cost_communication(config),
        )
    }

    /// Route cost of assigning `link` between two EFs, None when no chain
    /// exists in the current path table.
    fn link_route_alpha(&self, from: &EfId, to: &EfId) -> Option<f64> {
        let entry = self.paths.entry(from, to)?;
        Some(entry.hops().iter().map(|h| self.alpha(h)).sum())
    }

    fn build_configuration(&self, assignment: BTreeMap<NodeId, EfId>) -> Configuration {
        let mut impls = BTreeMap::new();
        for node in &self.process.nodes {
            if let Some(impl_id) = node.default_impl() {
                impls.insert(node.id.clone(), impl_id.clone());
            }
        }
        let mut link_paths = BTreeMap::new();
        for link in &self.process.links {
            if let (Some(from_ef), Some(to_ef)) = (
                assignment.get(&link.from.node),
                assignment.get(&link.to.node),
            ) {
                if let Some(route) = self.paths.route(from_ef, to_ef) {
                    link_paths.insert(link.clone(), route.to_vec());
                }
            }
        }
        Configuration {
            assignment,
            impls,
            link_paths,
            generation: 0,
        }
    }

    /// Returns the first admissible configuration in the fixed search order,
    /// or None when no admissible configuration exists.
    pub fn find_first_admissible(&self) -> Option<Configuration> {
        self.search(false)
    }

    /// Returns a minimal-cost admissible configuration (ties broken toward
    /// the lexicographically smallest assignment), or None when infeasible.
    pub fn find_optimal(&self) -> Option<Configuration> {
        self.search(true)
    }

    fn search(&self, optimize: bool) -> Option<Configuration> {
        let mut nodes: Vec<&NodeId> = self.process.nodes.iter().map(|n| &n.id).collect();
        nodes.sort();
        let demands: Vec<u64> = nodes
            .iter()
            .map(|id| self.process.node(id).map(|n| n.memory_demand).unwrap_or(0))
            .collect();
        let candidates: Vec<Vec<EfId>> = nodes.iter().map(|id| self.eligible(id)).collect();
        // Links between node positions, resolved once up front.
        let pos: BTreeMap<&NodeId, usize> =
            nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut edges: Vec<(usize, usize)> = self
            .process
            .links
            .iter()
            .filter_map(|l| Some((*pos.get(&l.from.node)?, *pos.get(&l.to.node)?)))
            .collect();
        edges.sort();

        let mut search = Search {
            problem: self,
            nodes: &nodes,
            demands: &demands,
            candidates: &candidates,
            edges: &edges,
            optimize,
            assignment: vec![None; nodes.len()],
            usage: BTreeMap::new(),
            fixed_comm: 0.0,
            best: None,
        };
        search.descend(0);
        let best = search.best.take()?;
        Some(self.build_configuration(
            nodes.iter().cloned().cloned().zip(best.1).collect(),
        ))
    }
}

struct Search<'a> {
    problem: &'a PlacementProblem,
    nodes: &'a [&'a NodeId],
    demands: &'a [u64],
    candidates: &'a [Vec<EfId>],
    edges: &'a [(usize, usize)],
    optimize: bool,
    assignment: Vec<Option<EfId>>,
    usage: BTreeMap<EfId, u64>,
    /// Weighted communication cost of links with both endpoints fixed.
    fixed_comm: f64,
    best: Option<(f64, Vec<EfId>)>,
}

impl Search<'_> {
    /// True when the search is complete (first-admissible mode stops at the
    /// first full assignment).
    fn descend(&mut self, depth: usize) -> bool {
        if depth == self.nodes.len() {
            let assignment: Vec<EfId> =
                self.assignment.iter().map(|e| e.clone().unwrap()).collect();
            if self.optimize {
                let config = self.problem.build_configuration(
                    self.nodes.iter().cloned().cloned().zip(assignment.clone()).collect(),
                );
                let cost = self.problem.total_cost(&config);
                if self.best.as_ref().map(|(b, _)| cost < *b).unwrap_or(true) {
                    self.best = Some((cost, assignment));
                }
                return false;
            }
            self.best = Some((0.0, assignment));
            return true;
        }

        let demand = self.demands[depth];
        for ef in &self.candidates[depth] {
            let capacity = self
                .problem
                .topology
                .ef(ef)
                .map(|e| e.memory_capacity)
                .unwrap_or(0);
            let used = self.usage.get(ef).copied().unwrap_or(0);
            if used + demand > capacity {
                continue;
            }

            // Path existence and communication contribution of every link
            // that becomes fully fixed by this assignment.
            let mut delta = 0.0;
            let mut routable = true;
            for (from, to) in self.edges {
                let other = if *from == depth && *to < depth {
                    Some((ef, self.assignment[*to].as_ref().unwrap(), false))
                } else if *to == depth && *from < depth {
                    Some((self.assignment[*from].as_ref().unwrap(), ef, true))
                } else if *from == depth && *to == depth {
                    Some((ef, ef, false))
                } else {
                    None
                };
                if let Some((a, b, _)) = other {
                    match self.problem.link_route_alpha(a, b) {
                        Some(alpha) => delta += alpha,
                        None => {
                            routable = false;
                            break;
                        }
                    }
                }
            }
            if !routable {
                continue;
            }

            if self.optimize {
                // Lower bound: communication of fixed links only; C_d and
                // the unfixed links bound below by zero.
                let lb = self.problem.weights.communication * (self.fixed_comm + delta);
                if let Some((best, _)) = &self.best {
                    if lb >= *best {
                        continue;
                    }
                }
            }

            self.assignment[depth] = Some(ef.clone());
            *self.usage.entry(ef.clone()).or_default() += demand;
            self.fixed_comm += delta;
            let done = self.descend(depth + 1);
            self.fixed_comm -= delta;
            if let Some(u) = self.usage.get_mut(ef) {
                *u -= demand;
            }
            self.assignment[depth] = None;
            if done {
                return true;
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{FusionNodeSpec, PortRef};
    use crate::topology::{Channel, ExecutionFramework};

    fn node(id: &str, inputs: &[&str], outputs: &[&str], demand: u64) -> FusionNodeSpec {
        FusionNodeSpec {
            id: NodeId::new(id),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params: vec![],
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            impls: vec![ImplId::new("identity")],
            memory_demand: demand,
        }
    }

    fn ef(id: &str, capacity: u64) -> ExecutionFramework {
        ExecutionFramework {
            id: EfId::new(id),
            machine: "m".into(),
            host: "h".into(),
            memory_capacity: capacity,
            alive: true,
        }
    }

    fn full_eligibility(process: &FusionProcess, efs: &[&str]) -> BTreeMap<NodeId, BTreeSet<EfId>> {
        process
            .nodes
            .iter()
            .map(|n| {
                (
                    n.id.clone(),
                    efs.iter().map(|e| EfId::new(*e)).collect(),
                )
            })
            .collect()
    }

    /// Two linked nodes, two EFs joined by one channel.
    fn pair_problem(weights: CostWeights) -> PlacementProblem {
        let process = FusionProcess {
            nodes: vec![node("n1", &[], &["out"], 1), node("n2", &["in"], &[], 1)],
            links: vec![Link {
                from: PortRef::new("n1", "out"),
                to: PortRef::new("n2", "in"),
            }],
        };
        let topology = Topology::new(
            vec![ef("e1", 10), ef("e2", 10)],
            vec![Channel::new(EfId::new("e1"), EfId::new("e2"))],
        )
        .unwrap();
        let eligibility = full_eligibility(&process, &["e1", "e2"]);
        PlacementProblem::new(process, topology, eligibility, BTreeMap::new(), weights).unwrap()
    }

    #[test]
    fn communication_weight_colocates_on_lowest_ef() {
        let p = pair_problem(CostWeights {
            distribution: 0.0,
            communication: 1.0,
        });
        let c = p.find_optimal().unwrap();
        assert_eq!(c.ef_of(&NodeId::new("n1")), Some(&EfId::new("e1")));
        assert_eq!(c.ef_of(&NodeId::new("n2")), Some(&EfId::new("e1")));
        assert_eq!(p.cost_communication(&c), 0.0);
    }

    #[test]
    fn distribution_weight_spreads_nodes() {
        let p = pair_problem(CostWeights {
            distribution: 1.0,
            communication: 0.0,
        });
        let c = p.find_optimal().unwrap();
        assert_eq!(p.cost_distribution(&c), 0);
        assert_eq!(c.ef_of(&NodeId::new("n1")), Some(&EfId::new("e1")));
        assert_eq!(c.ef_of(&NodeId::new("n2")), Some(&EfId::new("e2")));
    }

    #[test]
    fn memory_violation_is_reported() {
        let process = FusionProcess {
            nodes: vec![node("a", &[], &["o"], 3), node("b", &[], &["o"], 3)],
            links: vec![],
        };
        let topology = Topology::new(vec![ef("e1", 5)], vec![]).unwrap();
        let eligibility = full_eligibility(&process, &["e1"]);
        let p = PlacementProblem::new(
            process,
            topology,
            eligibility,
            BTreeMap::new(),
            CostWeights::default(),
        )
        .unwrap();
        let mut assignment = BTreeMap::new();
        assignment.insert(NodeId::new("a"), EfId::new("e1"));
        assignment.insert(NodeId::new("b"), EfId::new("e1"));
        let c = p.build_configuration(assignment);
        let report = p.admissibility(&c);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, AdmissibilityViolation::Memory { demand: 6, capacity: 5, .. })));
        assert!(p.find_first_admissible().is_none());
    }

    #[test]
    fn eligibility_violation_is_reported() {
        let p = pair_problem(CostWeights::default());
        let mut assignment = BTreeMap::new();
        assignment.insert(NodeId::new("n1"), EfId::new("e1"));
        assignment.insert(NodeId::new("n2"), EfId::new("e1"));
        let mut c = p.build_configuration(assignment);
        c.assignment.insert(NodeId::new("n2"), EfId::new("e9"));
        c.link_paths.clear();
        let report = p.admissibility(&c);
        assert!(!report.is_admissible());
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, AdmissibilityViolation::Eligibility { .. })));
    }

    #[test]
    fn forced_single_candidate_is_returned() {
        let process = FusionProcess {
            nodes: vec![node("a", &[], &["o"], 1)],
            links: vec![],
        };
        let topology = Topology::new(vec![ef("e1", 1), ef("e2", 1)], vec![]).unwrap();
        let mut eligibility = BTreeMap::new();
        eligibility.insert(
            NodeId::new("a"),
            [EfId::new("e2")].into_iter().collect::<BTreeSet<_>>(),
        );
        let p = PlacementProblem::new(
            process,
            topology,
            eligibility,
            BTreeMap::new(),
            CostWeights::default(),
        )
        .unwrap();
        let c = p.find_first_admissible().unwrap();
        assert_eq!(c.ef_of(&NodeId::new("a")), Some(&EfId::new("e2")));
        assert!(p.is_admissible(&c));
    }

    #[test]
    fn costs_match_hand_tally() {
        // One link over a 2-channel chain, alpha = 1 everywhere.
        let process = FusionProcess {
            nodes: vec![node("a", &[], &["o"], 1), node("b", &["i"], &[], 1)],
            links: vec![Link {
                from: PortRef::new("a", "o"),
                to: PortRef::new("b", "i"),
            }],
        };
        let topology = Topology::new(
            vec![ef("e1", 10), ef("e2", 10), ef("e3", 10)],
            vec![
                Channel::new(EfId::new("e1"), EfId::new("e2")),
                Channel::new(EfId::new("e2"), EfId::new("e3")),
            ],
        )
        .unwrap();
        let eligibility = full_eligibility(&process, &["e1", "e2", "e3"]);
        let p = PlacementProblem::new(
            process,
            topology,
            eligibility,
            BTreeMap::new(),
            CostWeights::default(),
        )
        .unwrap();
        let mut assignment = BTreeMap::new();
        assignment.insert(NodeId::new("a"), EfId::new("e1"));
        assignment.insert(NodeId::new("b"), EfId::new("e3"));
        let c = p.build_configuration(assignment);
        assert_eq!(p.cost_communication(&c), 2.0);
        // Counts: e1=1, e2=0, e3=1 over three alive EFs.
        assert_eq!(p.cost_distribution(&c), 1);
        assert_eq!(
            p.total_cost_with(&c, |d, m| d + 2.0 * m),
            1.0 + 2.0 * 2.0
        );
    }

    #[test]
    fn optimal_cost_never_exceeds_first_admissible() {
        let p = pair_problem(CostWeights::default());
        let first = p.find_first_admissible().unwrap();
        let best = p.find_optimal().unwrap();
        assert!(p.total_cost(&best) <= p.total_cost(&first));
        assert!(p.is_admissible(&first));
        assert!(p.is_admissible(&best));
    }
}
