//! The fusion process model: a discrete dataflow graph of fusion nodes.
//!
//! A fusion node computes a tuple of output values from a tuple of input
//! values and a vector of latched parameters. Inputs are consumed one item
//! per computation; parameters are sustained until explicitly modified.
//! Links connect output ports to input ports; every input port is fed by
//! exactly one link, while output ports may fan out.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::Value;

/// Identifier of a fusion node within a process.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifier of one implementation of a fusion function.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImplId(pub String);

impl ImplId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for ImplId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A parameter port together with the value latched at deployment time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub default: Value,
}

/// Static description of one fusion node: its ports, the implementations
/// available for its function, and its abstract memory demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNodeSpec {
    pub id: NodeId,
    /// Ordered input port names. A node with no inputs is a source.
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Ordered parameter ports with mandatory defaults, so a freshly
    /// deployed container has latched values before any set_parameter call.
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    /// Ordered output port names. A node with no outputs is a sink.
    #[serde(default)]
    pub outputs: Vec<String>,
    /// Available implementations of the fusion function; never empty.
    pub impls: Vec<ImplId>,
    /// Abstract memory units consumed on the hosting execution framework.
    #[serde(default)]
    pub memory_demand: u64,
}

impl FusionNodeSpec {
    pub fn is_source(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn is_sink(&self) -> bool {
        self.outputs.is_empty()
    }

    /// The lexicographically first implementation, used as the canonical
    /// choice when a solver builds a configuration.
    pub fn default_impl(&self) -> Option<&ImplId> {
        self.impls.iter().min()
    }
}

/// One endpoint of a link: a node and one of its ports.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PortRef {
    pub node: NodeId,
    pub port: String,
}

impl PortRef {
    pub fn new(node: impl Into<String>, port: impl Into<String>) -> Self {
        Self {
            node: NodeId::new(node),
            port: port.into(),
        }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.node, self.port)
    }
}

/// A directed edge from an output port to an input port.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub from: PortRef,
    pub to: PortRef,
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.from, self.to)
    }
}

/// The information fusion process: nodes plus the links wiring their ports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionProcess {
    pub nodes: Vec<FusionNodeSpec>,
    pub links: Vec<Link>,
}

/// A single invariant violation found by [`FusionProcess::validate`].
/// Violations are data, not failures; a process is valid iff none exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[serde(tag = "violation", rename_all = "kebab-case")]
pub enum Violation {
    #[error("duplicate node id {node}")]
    DuplicateNode { node: NodeId },
    #[error("node {node}: duplicate {kind} port {port}")]
    DuplicatePort {
        node: NodeId,
        kind: String,
        port: String,
    },
    #[error("node {node} declares no implementations")]
    NoImplementations { node: NodeId },
    #[error("node {node} has neither inputs nor outputs")]
    PortlessNode { node: NodeId },
    #[error("link {link} references unknown node {node}")]
    UnknownNode { link: Link, node: NodeId },
    #[error("link {link}: source is not an output port")]
    NotAnOutputPort { link: Link },
    #[error("link {link}: target is not an input port")]
    NotAnInputPort { link: Link },
    #[error("fan-in > 1 on input port {node}.{port}")]
    FanIn { node: NodeId, port: String },
    #[error("input port {node}.{port} is fed by no link")]
    UnfedInput { node: NodeId, port: String },
    #[error("cycle through nodes {nodes:?}")]
    Cycle { nodes: Vec<NodeId> },
    #[error("node {node} is unreachable from any source")]
    Unreachable { node: NodeId },
}

/// The outcome of validating a process: every violation found, with the
/// offending node or link identity. Empty means valid.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return f.write_str("valid");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FusionProcess {
    pub fn node(&self, id: &NodeId) -> Option<&FusionNodeSpec> {
        self.nodes.iter().find(|n| &n.id == id)
    }

    /// Node ids with no input ports, in sorted order.
    pub fn sources(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.is_source())
            .map(|n| n.id.clone())
            .collect();
        ids.sort();
        ids
    }

    /// Node ids with no output ports, in sorted order.
    pub fn sinks(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.is_sink())
            .map(|n| n.id.clone())
            .collect();
        ids.sort();
        ids
    }

    /// Links leaving any output port of `id`, in stable (sorted) order.
    pub fn links_from(&self, id: &NodeId) -> Vec<&Link> {
        let mut out: Vec<&Link> = self.links.iter().filter(|l| &l.from.node == id).collect();
        out.sort();
        out
    }

    /// Links feeding any input port of `id`, in stable (sorted) order.
    pub fn links_to(&self, id: &NodeId) -> Vec<&Link> {
        let mut out: Vec<&Link> = self.links.iter().filter(|l| &l.to.node == id).collect();
        out.sort();
        out
    }

    /// Checks every structural invariant and returns the full list of
    /// violations. Pure and idempotent: equal processes yield equal reports.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();

        // Node-local invariants and duplicate ids.
        let mut seen = BTreeSet::new();
        for node in &self.nodes {
            if !seen.insert(node.id.clone()) {
                violations.push(Violation::DuplicateNode {
                    node: node.id.clone(),
                });
            }
            for (kind, ports) in [
                ("input", node.inputs.clone()),
                (
                    "param",
                    node.params.iter().map(|p| p.name.clone()).collect(),
                ),
                ("output", node.outputs.clone()),
            ] {
                let mut names = BTreeSet::new();
                for port in ports {
                    if !names.insert(port.clone()) {
                        violations.push(Violation::DuplicatePort {
                            node: node.id.clone(),
                            kind: kind.to_owned(),
                            port,
                        });
                    }
                }
            }
            if node.impls.is_empty() {
                violations.push(Violation::NoImplementations {
                    node: node.id.clone(),
                });
            }
            if node.inputs.is_empty() && node.outputs.is_empty() {
                violations.push(Violation::PortlessNode {
                    node: node.id.clone(),
                });
            }
        }

        // Link endpoints must name existing ports of the correct kind.
        let by_id: BTreeMap<&NodeId, &FusionNodeSpec> =
            self.nodes.iter().map(|n| (&n.id, n)).collect();
        let mut wired: Vec<&Link> = Vec::new();
        for link in &self.links {
            let mut ok = true;
            match by_id.get(&link.from.node) {
                None => {
                    violations.push(Violation::UnknownNode {
                        link: link.clone(),
                        node: link.from.node.clone(),
                    });
                    ok = false;
                }
                Some(n) if !n.outputs.contains(&link.from.port) => {
                    violations.push(Violation::NotAnOutputPort { link: link.clone() });
                    ok = false;
                }
                _ => {}
            }
            match by_id.get(&link.to.node) {
                None => {
                    violations.push(Violation::UnknownNode {
                        link: link.clone(),
                        node: link.to.node.clone(),
                    });
                    ok = false;
                }
                Some(n) if !n.inputs.contains(&link.to.port) => {
                    violations.push(Violation::NotAnInputPort { link: link.clone() });
                    ok = false;
                }
                _ => {}
            }
            if ok {
                wired.push(link);
            }
        }

        // Fan-in exactly one per input port.
        let mut fed: BTreeMap<(NodeId, String), usize> = BTreeMap::new();
        for link in &wired {
            *fed.entry((link.to.node.clone(), link.to.port.clone()))
                .or_default() += 1;
        }
        for ((node, port), count) in &fed {
            if *count > 1 {
                violations.push(Violation::FanIn {
                    node: node.clone(),
                    port: port.clone(),
                });
            }
        }
        for node in &self.nodes {
            for port in &node.inputs {
                if !fed.contains_key(&(node.id.clone(), port.clone())) {
                    violations.push(Violation::UnfedInput {
                        node: node.id.clone(),
                        port: port.clone(),
                    });
                }
            }
        }

        // Acyclicity: peel nodes with no remaining predecessors; whatever
        // survives participates in a cycle.
        let mut preds: BTreeMap<NodeId, BTreeSet<NodeId>> = self
            .nodes
            .iter()
            .map(|n| (n.id.clone(), BTreeSet::new()))
            .collect();
        let mut succs: BTreeMap<NodeId, BTreeSet<NodeId>> = preds.clone();
        for link in &wired {
            preds
                .get_mut(&link.to.node)
                .map(|s| s.insert(link.from.node.clone()));
            succs
                .get_mut(&link.from.node)
                .map(|s| s.insert(link.to.node.clone()));
        }
        let mut ready: VecDeque<NodeId> = preds
            .iter()
            .filter(|(_, p)| p.is_empty())
            .map(|(n, _)| n.clone())
            .collect();
        let mut peeled = BTreeSet::new();
        while let Some(n) = ready.pop_front() {
            peeled.insert(n.clone());
            for succ in succs.get(&n).cloned().unwrap_or_default() {
                if let Some(p) = preds.get_mut(&succ) {
                    p.remove(&n);
                    if p.is_empty() && !peeled.contains(&succ) {
                        ready.push_back(succ);
                    }
                }
            }
        }
        let cyclic: Vec<NodeId> = preds
            .keys()
            .filter(|n| !peeled.contains(*n))
            .cloned()
            .collect();
        if !cyclic.is_empty() {
            violations.push(Violation::Cycle { nodes: cyclic });
        }

        // Every non-source node must be reachable from some source.
        let mut reached: BTreeSet<NodeId> = self.sources().into_iter().collect();
        let mut frontier: VecDeque<NodeId> = reached.iter().cloned().collect();
        while let Some(n) = frontier.pop_front() {
            for succ in succs.get(&n).cloned().unwrap_or_default() {
                if reached.insert(succ.clone()) {
                    frontier.push_back(succ);
                }
            }
        }
        for node in &self.nodes {
            if !node.is_source() && !reached.contains(&node.id) {
                violations.push(Violation::Unreachable {
                    node: node.id.clone(),
                });
            }
        }

        ValidationReport { violations }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, inputs: &[&str], outputs: &[&str]) -> FusionNodeSpec {
        FusionNodeSpec {
            id: NodeId::new(id),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params: vec![],
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            impls: vec![ImplId::new("identity")],
            memory_demand: 1,
        }
    }

    fn link(from: (&str, &str), to: (&str, &str)) -> Link {
        Link {
            from: PortRef::new(from.0, from.1),
            to: PortRef::new(to.0, to.1),
        }
    }

    #[test]
    fn single_source_no_links_is_valid() {
        let p = FusionProcess {
            nodes: vec![node("src", &[], &["out"])],
            links: vec![],
        };
        assert!(p.validate().is_valid());
    }

    #[test]
    fn fan_in_two_links_on_one_input_is_reported() {
        let p = FusionProcess {
            nodes: vec![
                node("a", &[], &["out"]),
                node("b", &[], &["out"]),
                node("c", &["in"], &[]),
            ],
            links: vec![link(("a", "out"), ("c", "in")), link(("b", "out"), ("c", "in"))],
        };
        let report = p.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::FanIn { node, port } if node.0 == "c" && port == "in")));
    }

    #[test]
    fn two_node_cycle_is_reported() {
        let p = FusionProcess {
            nodes: vec![node("a", &["in"], &["out"]), node("b", &["in"], &["out"])],
            links: vec![link(("a", "out"), ("b", "in")), link(("b", "out"), ("a", "in"))],
        };
        let report = p.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle { .. })));
    }

    #[test]
    fn isolated_portless_nodes_are_invalid() {
        let p = FusionProcess {
            nodes: vec![node("a", &[], &[]), node("b", &[], &[]), node("c", &[], &[])],
            links: vec![],
        };
        let report = p.validate();
        assert_eq!(
            report
                .violations
                .iter()
                .filter(|v| matches!(v, Violation::PortlessNode { .. }))
                .count(),
            3
        );
    }

    #[test]
    fn unfed_input_is_reported() {
        let p = FusionProcess {
            nodes: vec![node("a", &[], &["out"]), node("b", &["in", "in2"], &[])],
            links: vec![link(("a", "out"), ("b", "in"))],
        };
        let report = p.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::UnfedInput { node, port } if node.0 == "b" && port == "in2")));
    }

    #[test]
    fn sources_and_sinks_of_a_chain() {
        let p = FusionProcess {
            nodes: vec![
                node("src", &[], &["out"]),
                node("f", &["in"], &["out"]),
                node("disp", &["in"], &[]),
            ],
            links: vec![link(("src", "out"), ("f", "in")), link(("f", "out"), ("disp", "in"))],
        };
        assert!(p.validate().is_valid());
        assert_eq!(p.sources(), vec![NodeId::new("src")]);
        assert_eq!(p.sinks(), vec![NodeId::new("disp")]);
    }

    #[test]
    fn passerby_shape_has_two_sinks() {
        let p = FusionProcess {
            nodes: vec![
                node("cam", &[], &["video"]),
                node("filter", &["in"], &["out"]),
                node("disp-raw", &["in"], &[]),
                node("disp-filtered", &["in"], &[]),
            ],
            links: vec![
                link(("cam", "video"), ("filter", "in")),
                link(("cam", "video"), ("disp-raw", "in")),
                link(("filter", "out"), ("disp-filtered", "in")),
            ],
        };
        assert!(p.validate().is_valid());
        assert_eq!(p.sinks().len(), 2);
    }

    #[test]
    fn validate_is_idempotent() {
        let p = FusionProcess {
            nodes: vec![node("a", &["in"], &["out"]), node("b", &["in"], &["out"])],
            links: vec![link(("a", "out"), ("b", "in")), link(("b", "out"), ("a", "in"))],
        };
        assert_eq!(p.validate(), p.validate());
    }
}
