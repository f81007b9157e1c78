//! Deterministic virtual-time execution of a deployed configuration.
//!
//! Every fusion node runs inside a container holding one FIFO queue per
//! input port and the latched parameter values. A node fires when no input
//! queue is empty and, to the best of the controller's knowledge, the
//! results can reach all consumers; firing consumes exactly one token per
//! queue. Produced tokens travel their link's channel chain hop by hop,
//! one latency tick at a time. The loop is single-threaded: equal inputs
//! yield identical event logs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::events::{ErrorKind, EventKind, EventLog, EventRecord, SkipReason};
use crate::functions::FunctionRegistry;
use crate::placement::Configuration;
use crate::process::{FusionProcess, ImplId, Link, NodeId};
use crate::topology::{ChannelId, EfId, Topology};
use crate::value::Value;
use crate::Time;

/// A discrete data item travelling through the deployed process. Fan-out
/// mints one token per outgoing link, so every token has a single consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct DataToken {
    pub id: u64,
    pub payload: Value,
    pub produced_at: Time,
    pub origin: (NodeId, String),
}

/// Runtime wrapper of one fusion node on its assigned EF.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeContainer {
    pub node: NodeId,
    pub ef: EfId,
    pub impl_id: ImplId,
    /// One strictly FIFO queue per input port.
    pub input_queues: BTreeMap<String, VecDeque<DataToken>>,
    /// Always total over the node's parameter list.
    pub latched_params: BTreeMap<String, Value>,
    /// Injected faults pending: the next firings fail with an internal error.
    pub fail_next: u32,
    pub last_fire: Option<Time>,
    pub prev_fire: Option<Time>,
}

impl NodeContainer {
    pub fn queued_tokens(&self) -> u64 {
        self.input_queues.values().map(|q| q.len() as u64).sum()
    }
}

/// A token in transit: currently crossing the channel from `at` toward
/// `remaining[0]`, arriving there at `arrival`. `remaining` is always a
/// suffix of the link's configured route.
#[derive(Debug, Clone, PartialEq)]
pub struct InFlightToken {
    pub token: DataToken,
    pub link: Link,
    pub at: EfId,
    pub remaining: Vec<EfId>,
    pub arrival: Time,
}

/// The liveness knowledge the execution gates on. For EFs this is derived
/// from heartbeat ages at control passes, so it may lag reality; channels
/// are refreshed from topology events at the same passes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LivenessView {
    pub dead_efs: BTreeSet<EfId>,
    pub dead_channels: BTreeSet<ChannelId>,
}

impl LivenessView {
    pub fn ef_alive(&self, ef: &EfId) -> bool {
        !self.dead_efs.contains(ef)
    }

    pub fn channel_alive(&self, channel: &ChannelId) -> bool {
        !self.dead_channels.contains(channel)
    }
}

/// One scheduled source emission, fully expanded before the run starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub time: Time,
    /// Stable dispatch order among emissions at the same instant.
    pub key: u64,
    pub node: NodeId,
    pub payload: Value,
}

/// Token accounting. At every instant
/// produced == consumed + queued + in_flight + lost.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Ledger {
    pub produced: u64,
    pub consumed: u64,
    pub lost: u64,
}

/// A full ledger snapshot including the derived queue and transit counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerSnapshot {
    pub produced: u64,
    pub consumed: u64,
    pub queued: u64,
    pub in_flight: u64,
    pub lost: u64,
}

impl LedgerSnapshot {
    pub fn balanced(&self) -> bool {
        self.produced == self.consumed + self.queued + self.in_flight + self.lost
    }
}

/// Pure measurement snapshot taken by the software sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorReading {
    pub time: Time,
    /// Interval between the last two firings, per node that fired twice.
    pub inter_firing: BTreeMap<NodeId, Time>,
    pub queue_depths: BTreeMap<(NodeId, String), u64>,
    pub channel_traversals: BTreeMap<ChannelId, u64>,
    /// Ticks since each EF was last observed alive; EFs never observed
    /// alive are absent.
    pub heartbeat_age: BTreeMap<EfId, Time>,
}

impl SensorReading {
    pub fn total_queued(&self) -> u64 {
        self.queue_depths.values().sum()
    }
}

/// The complete mutable state of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeState {
    pub clock: Time,
    pub config: Configuration,
    pub containers: BTreeMap<NodeId, NodeContainer>,
    pub in_flight: Vec<InFlightToken>,
    /// Pending source emissions, sorted by (time, key).
    pub emissions: Vec<Emission>,
    pub view: LivenessView,
    /// Most recent explicitly set parameter values, re-latched onto moved
    /// containers in place of defaults.
    pub sticky_params: BTreeMap<(NodeId, String), Value>,
    pub ledger: Ledger,
    pub channel_traversals: BTreeMap<ChannelId, u64>,
    /// Last time each EF was observed alive at a control pass.
    pub ef_last_seen: BTreeMap<EfId, Time>,
    /// Internal node errors since the last control pass.
    pub pending_node_errors: Vec<ErrorKind>,
    pub log: EventLog,
    next_token: u64,
    next_emission_key: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("node {node} is not assigned to an EF")]
    Unassigned { node: NodeId },
    #[error("node {node} assigned to dead or unknown EF {ef}")]
    DeadEf { node: NodeId, ef: EfId },
    #[error("node {node} has no chosen implementation")]
    MissingImpl { node: NodeId },
    #[error("implementation {impl_id} of node {node} is not registered")]
    UnknownFunction { node: NodeId, impl_id: ImplId },
    #[error("link {link} has no configured channel chain")]
    MissingChain { link: Link },
    #[error("link {link} is configured over a dead channel chain")]
    DeadChain { link: Link },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown parameter {name} on node {node}")]
    UnknownParameter { node: NodeId, name: String },
}

/// Instantiates containers for an admissible configuration: empty queues,
/// parameters latched to their defaults, clock zero.
pub fn deploy(
    config: Configuration,
    process: &FusionProcess,
    topology: &Topology,
    registry: &FunctionRegistry,
    emissions: Vec<Emission>,
) -> Result<RuntimeState, EngineError> {
    let mut containers = BTreeMap::new();
    for node in &process.nodes {
        let ef = config
            .ef_of(&node.id)
            .ok_or_else(|| EngineError::Unassigned {
                node: node.id.clone(),
            })?
            .clone();
        if !topology.ef_alive(&ef) {
            return Err(EngineError::DeadEf {
                node: node.id.clone(),
                ef,
            });
        }
        let impl_id = config
            .impls
            .get(&node.id)
            .ok_or_else(|| EngineError::MissingImpl {
                node: node.id.clone(),
            })?
            .clone();
        if !registry.contains(&impl_id) {
            return Err(EngineError::UnknownFunction {
                node: node.id.clone(),
                impl_id,
            });
        }
        containers.insert(
            node.id.clone(),
            NodeContainer {
                node: node.id.clone(),
                ef,
                impl_id,
                input_queues: node
                    .inputs
                    .iter()
                    .map(|p| (p.clone(), VecDeque::new()))
                    .collect(),
                latched_params: node
                    .params
                    .iter()
                    .map(|p| (p.name.clone(), p.default.clone()))
                    .collect(),
                fail_next: 0,
                last_fire: None,
                prev_fire: None,
            },
        );
    }
    for link in &process.links {
        let Some(route) = config.link_paths.get(link) else {
            return Err(EngineError::MissingChain { link: link.clone() });
        };
        for hop in route.windows(2) {
            let id = ChannelId::new(hop[0].clone(), hop[1].clone());
            if !topology.channel_alive(&id) || !topology.ef_alive(&hop[0]) {
                return Err(EngineError::DeadChain { link: link.clone() });
            }
        }
    }

    let view = view_of(topology);
    let ef_last_seen = topology.alive_efs().into_iter().map(|e| (e, 0)).collect();
    let mut emissions = emissions;
    emissions.sort_by(|a, b| (a.time, a.key).cmp(&(b.time, b.key)));
    let next_emission_key = emissions.iter().map(|e| e.key + 1).max().unwrap_or(0);
    let mut rt = RuntimeState {
        clock: 0,
        config,
        containers,
        in_flight: Vec::new(),
        emissions,
        view,
        sticky_params: BTreeMap::new(),
        ledger: Ledger::default(),
        channel_traversals: BTreeMap::new(),
        ef_last_seen,
        pending_node_errors: Vec::new(),
        log: EventLog::default(),
        next_token: 0,
        next_emission_key,
    };
    let generation = rt.config.generation;
    rt.log.append(0, EventKind::Deploy { generation });
    Ok(rt)
}

/// The actual-liveness view of a topology snapshot.
pub fn view_of(topology: &Topology) -> LivenessView {
    LivenessView {
        dead_efs: topology
            .efs()
            .filter(|e| !e.alive)
            .map(|e| e.id.clone())
            .collect(),
        dead_channels: topology
            .channels()
            .filter(|c| !c.alive)
            .map(|c| c.id.clone())
            .collect(),
    }
}

impl RuntimeState {
    pub fn ledger_snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            produced: self.ledger.produced,
            consumed: self.ledger.consumed,
            queued: self
                .containers
                .values()
                .map(NodeContainer::queued_tokens)
                .sum(),
            in_flight: self.in_flight.len() as u64,
            lost: self.ledger.lost,
        }
    }

    pub fn sources_exhausted(&self) -> bool {
        self.emissions.is_empty()
    }

    /// Inserts a single emission, keeping the schedule sorted.
    pub fn push_emission(&mut self, time: Time, node: NodeId, payload: Value) {
        let key = self.next_emission_key;
        self.next_emission_key += 1;
        let emission = Emission {
            time,
            key,
            node,
            payload,
        };
        let idx = self
            .emissions
            .partition_point(|e| (e.time, e.key) <= (emission.time, emission.key));
        self.emissions.insert(idx, emission);
    }

    /// Queues an injected implementation fault: the node's next firing
    /// fails with an internal error.
    pub fn inject_impl_fault(&mut self, node: &NodeId) -> Result<(), EngineError> {
        let clock = self.clock;
        let container = self
            .containers
            .get_mut(node)
            .ok_or_else(|| EngineError::UnknownNode(node.clone()))?;
        container.fail_next += 1;
        self.log.append(
            clock,
            EventKind::FaultInjected {
                node: node.clone(),
            },
        );
        Ok(())
    }

    fn mint_token(&mut self, payload: Value, origin: (NodeId, String)) -> DataToken {
        let id = self.next_token;
        self.next_token += 1;
        self.ledger.produced += 1;
        DataToken {
            id,
            payload,
            produced_at: self.clock,
            origin,
        }
    }
}

/// Records a heartbeat for every EF currently alive in the topology.
/// Called at control passes; the resulting ages drive the liveness view.
pub fn record_heartbeats(rt: &mut RuntimeState, topology: &Topology) {
    for ef in topology.alive_efs() {
        rt.ef_last_seen.insert(ef, rt.clock);
    }
}

/// True when every consumer of `node` is reachable in the current liveness
/// view: the consumer's EF and every channel on the link's chain are alive.
pub fn consumers_reachable(rt: &RuntimeState, process: &FusionProcess, node: &NodeId) -> bool {
    for link in process.links_from(node) {
        let Some(consumer_ef) = rt.config.ef_of(&link.to.node) else {
            return false;
        };
        if !rt.view.ef_alive(consumer_ef) {
            return false;
        }
        for hop in rt.config.hops_of(link) {
            if !rt.view.channel_alive(&hop) {
                return false;
            }
        }
    }
    true
}

/// The firing rule: the container's own EF is actually alive, no input
/// queue is empty, and the results can be sent to all consumers as far as
/// the controller's (possibly stale) liveness view knows.
pub fn can_fire(
    rt: &RuntimeState,
    process: &FusionProcess,
    topology: &Topology,
    node: &NodeId,
) -> bool {
    let Some(container) = rt.containers.get(node) else {
        return false;
    };
    if !topology.ef_alive(&container.ef) {
        return false;
    }
    if container.input_queues.values().any(VecDeque::is_empty) {
        return false;
    }
    consumers_reachable(rt, process, node)
}

/// Sends one token along a link. Co-located endpoints deliver immediately;
/// otherwise the token enters in-flight transport toward the first hop.
fn send_token(rt: &mut RuntimeState, topology: &Topology, link: &Link, token: DataToken) {
    let route = rt
        .config
        .link_paths
        .get(link)
        .cloned()
        .unwrap_or_default();
    if route.len() <= 1 {
        deliver(rt, link, token);
        return;
    }
    let first = ChannelId::new(route[0].clone(), route[1].clone());
    let latency = topology.channel(&first).map(|c| c.latency).unwrap_or(1);
    let arrival = rt.clock + latency;
    rt.in_flight.push(InFlightToken {
        token,
        link: link.clone(),
        at: route[0].clone(),
        remaining: route[1..].to_vec(),
        arrival,
    });
}

fn deliver(rt: &mut RuntimeState, link: &Link, token: DataToken) {
    let clock = rt.clock;
    rt.log.append(
        clock,
        EventKind::Deliver {
            token: token.id,
            node: link.to.node.clone(),
            port: link.to.port.clone(),
        },
    );
    if let Some(container) = rt.containers.get_mut(&link.to.node) {
        if let Some(queue) = container.input_queues.get_mut(&link.to.port) {
            queue.push_back(token);
        }
    }
}

/// Completes every due hop: logs the channel traversal, and either delivers
/// the token or advances it onto the next channel of its chain.
pub fn deliver_due(rt: &mut RuntimeState, topology: &Topology) {
    loop {
        let due = rt
            .in_flight
            .iter()
            .enumerate()
            .filter(|(_, f)| f.arrival <= rt.clock)
            .min_by_key(|(_, f)| (f.arrival, f.token.id))
            .map(|(i, _)| i);
        let Some(idx) = due else {
            return;
        };
        let mut flight = rt.in_flight.remove(idx);
        let crossed = ChannelId::new(flight.at.clone(), flight.remaining[0].clone());
        let clock = rt.clock;
        rt.log.append(
            clock,
            EventKind::Hop {
                token: flight.token.id,
                channel: crossed.clone(),
            },
        );
        *rt.channel_traversals.entry(crossed).or_default() += 1;
        if flight.remaining.len() == 1 {
            deliver(rt, &flight.link.clone(), flight.token);
            continue;
        }
        flight.at = flight.remaining.remove(0);
        let next = ChannelId::new(flight.at.clone(), flight.remaining[0].clone());
        let latency = topology.channel(&next).map(|c| c.latency).unwrap_or(1);
        flight.arrival += latency;
        rt.in_flight.push(flight);
    }
}

/// Fires one container: consumes one token per input queue, runs the active
/// implementation on the inputs and latched parameters, and emits one token
/// per output port per outgoing link. An implementation failure is logged
/// as an intra-EF error; the consumed inputs count as lost.
pub fn fire(
    rt: &mut RuntimeState,
    process: &FusionProcess,
    topology: &Topology,
    registry: &FunctionRegistry,
    node: &NodeId,
) {
    let spec = process.node(node).expect("fired node exists in process");
    let clock = rt.clock;

    let (consumed, inputs, impl_id, params, injected) = {
        let container = rt.containers.get_mut(node).expect("container deployed");
        let mut consumed = Vec::new();
        let mut inputs = Vec::new();
        for port in &spec.inputs {
            let token = container
                .input_queues
                .get_mut(port)
                .and_then(VecDeque::pop_front)
                .expect("can_fire guarantees non-empty queues");
            inputs.push(token.payload.clone());
            consumed.push(token);
        }
        container.prev_fire = container.last_fire;
        container.last_fire = Some(clock);
        let injected = if container.fail_next > 0 {
            container.fail_next -= 1;
            true
        } else {
            false
        };
        (
            consumed,
            inputs,
            container.impl_id.clone(),
            container.latched_params.clone(),
            injected,
        )
    };

    let result = if injected {
        Err("injected implementation fault".to_owned())
    } else {
        let f = registry.get(&impl_id).expect("deploy validated impls");
        f(&inputs, &params).and_then(|outputs| {
            if outputs.len() == spec.outputs.len() {
                Ok(outputs)
            } else {
                Err(format!(
                    "implementation returned {} outputs, expected {}",
                    outputs.len(),
                    spec.outputs.len()
                ))
            }
        })
    };

    let consumed_ids: Vec<u64> = consumed.iter().map(|t| t.id).collect();
    match result {
        Err(detail) => {
            rt.ledger.lost += consumed.len() as u64;
            rt.log.append(
                clock,
                EventKind::NodeError {
                    node: node.clone(),
                    impl_id,
                    detail: detail.clone(),
                },
            );
            rt.pending_node_errors.push(ErrorKind::NodeInternal {
                node: node.clone(),
                detail,
            });
        }
        Ok(outputs) => {
            rt.ledger.consumed += consumed.len() as u64;
            let mut produced_ids = Vec::new();
            for (port, payload) in spec.outputs.iter().zip(outputs) {
                for link in process.links_from(node) {
                    if &link.from.port != port {
                        continue;
                    }
                    let token =
                        rt.mint_token(payload.clone(), (node.clone(), port.clone()));
                    produced_ids.push(token.id);
                    send_token(rt, topology, &link.clone(), token);
                }
            }
            rt.log.append(
                clock,
                EventKind::Fire {
                    node: node.clone(),
                    consumed: consumed_ids,
                    produced: produced_ids,
                },
            );
        }
    }
}

/// Dispatches a scheduled source emission. The emission is skipped (and the
/// skip logged) when the source's EF is actually dead or some consumer is
/// unreachable in the liveness view.
fn emit_source(
    rt: &mut RuntimeState,
    process: &FusionProcess,
    topology: &Topology,
    emission: &Emission,
) {
    let clock = rt.clock;
    let Some(container) = rt.containers.get(&emission.node) else {
        return;
    };
    if !topology.ef_alive(&container.ef) {
        rt.log.append(
            clock,
            EventKind::EmitSkipped {
                node: emission.node.clone(),
                reason: SkipReason::EfDown,
            },
        );
        return;
    }
    if !consumers_reachable(rt, process, &emission.node) {
        rt.log.append(
            clock,
            EventKind::EmitSkipped {
                node: emission.node.clone(),
                reason: SkipReason::ConsumersUnreachable,
            },
        );
        return;
    }
    let spec = process.node(&emission.node).expect("scenario validated");
    let mut produced_ids = Vec::new();
    for port in spec.outputs.clone() {
        for link in process.links_from(&emission.node) {
            if link.from.port != port {
                continue;
            }
            let token = rt.mint_token(
                emission.payload.clone(),
                (emission.node.clone(), port.clone()),
            );
            produced_ids.push(token.id);
            send_token(rt, topology, &link.clone(), token);
        }
    }
    rt.log.append(
        clock,
        EventKind::Emit {
            node: emission.node.clone(),
            tokens: produced_ids,
            payload: emission.payload.clone(),
        },
    );
}

/// Dispatches every emission due at or before the current clock.
pub fn dispatch_emissions(rt: &mut RuntimeState, process: &FusionProcess, topology: &Topology) {
    while rt
        .emissions
        .first()
        .map(|e| e.time <= rt.clock)
        .unwrap_or(false)
    {
        let emission = rt.emissions.remove(0);
        emit_source(rt, process, topology, &emission);
    }
}

/// Fires every fireable container in node-id order, re-checking the firing
/// rule after each firing, until a full sweep fires nothing. Source nodes
/// emit on their schedule only and never fire here.
pub fn fire_all(
    rt: &mut RuntimeState,
    process: &FusionProcess,
    topology: &Topology,
    registry: &FunctionRegistry,
) {
    let nodes: Vec<NodeId> = rt.containers.keys().cloned().collect();
    loop {
        deliver_due(rt, topology);
        let mut progressed = false;
        for node in &nodes {
            let is_source = process.node(node).map(|n| n.is_source()).unwrap_or(true);
            if !is_source && can_fire(rt, process, topology, node) {
                fire(rt, process, topology, registry, node);
                progressed = true;
            }
        }
        if !progressed {
            return;
        }
    }
}

/// The earliest pending engine event (scheduled emission or in-flight
/// arrival), if any.
pub fn next_event_time(rt: &RuntimeState) -> Option<Time> {
    let emission = rt.emissions.first().map(|e| e.time);
    let arrival = rt.in_flight.iter().map(|f| f.arrival).min();
    match (emission, arrival) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Advances the clock to the next scheduled event, delivers due tokens,
/// and fires all fireable containers. With no pending events the clock is
/// unchanged and no records are appended.
pub fn step(
    rt: &mut RuntimeState,
    process: &FusionProcess,
    topology: &Topology,
    registry: &FunctionRegistry,
) -> Vec<EventRecord> {
    let start = rt.log.len();
    let Some(t) = next_event_time(rt) else {
        return Vec::new();
    };
    rt.clock = rt.clock.max(t);
    deliver_due(rt, topology);
    dispatch_emissions(rt, process, topology);
    fire_all(rt, process, topology, registry);
    rt.log.records[start..].to_vec()
}

/// Steps until every event at or before `until` has been processed, then
/// leaves the clock at `until`.
pub fn run_until(
    rt: &mut RuntimeState,
    process: &FusionProcess,
    topology: &Topology,
    registry: &FunctionRegistry,
    until: Time,
) -> Vec<EventRecord> {
    let start = rt.log.len();
    while next_event_time(rt).map(|t| t <= until).unwrap_or(false) {
        step(rt, process, topology, registry);
    }
    rt.clock = rt.clock.max(until);
    rt.log.records[start..].to_vec()
}

/// Replaces a latched parameter value. Takes effect for all subsequent
/// firings, never retroactively.
pub fn set_parameter(
    rt: &mut RuntimeState,
    node: &NodeId,
    name: &str,
    value: Value,
) -> Result<(), EngineError> {
    let clock = rt.clock;
    let container = rt
        .containers
        .get_mut(node)
        .ok_or_else(|| EngineError::UnknownNode(node.clone()))?;
    if !container.latched_params.contains_key(name) {
        return Err(EngineError::UnknownParameter {
            node: node.clone(),
            name: name.to_owned(),
        });
    }
    container
        .latched_params
        .insert(name.to_owned(), value.clone());
    rt.sticky_params
        .insert((node.clone(), name.to_owned()), value.clone());
    rt.log.append(
        clock,
        EventKind::SetParam {
            node: node.clone(),
            name: name.to_owned(),
            value,
        },
    );
    Ok(())
}

/// Pure sensor snapshot; never perturbs the runtime state.
pub fn read_sensors(rt: &RuntimeState) -> SensorReading {
    let mut inter_firing = BTreeMap::new();
    let mut queue_depths = BTreeMap::new();
    for (node, container) in &rt.containers {
        if let (Some(last), Some(prev)) = (container.last_fire, container.prev_fire) {
            inter_firing.insert(node.clone(), last - prev);
        }
        for (port, queue) in &container.input_queues {
            queue_depths.insert((node.clone(), port.clone()), queue.len() as u64);
        }
    }
    let heartbeat_age = rt
        .ef_last_seen
        .iter()
        .map(|(ef, seen)| (ef.clone(), rt.clock - seen))
        .collect();
    SensorReading {
        time: rt.clock,
        inter_firing,
        queue_depths,
        channel_traversals: rt.channel_traversals.clone(),
        heartbeat_age,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placement::{CostWeights, PlacementProblem};
    use crate::process::{FusionNodeSpec, ParamSpec, PortRef};
    use crate::topology::{Channel, ExecutionFramework};
    use std::collections::BTreeSet;

    fn node(id: &str, inputs: &[&str], outputs: &[&str], impl_id: &str) -> FusionNodeSpec {
        FusionNodeSpec {
            id: NodeId::new(id),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params: vec![],
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            impls: vec![ImplId::new(impl_id)],
            memory_demand: 1,
        }
    }

    fn link(from: (&str, &str), to: (&str, &str)) -> Link {
        Link {
            from: PortRef::new(from.0, from.1),
            to: PortRef::new(to.0, to.1),
        }
    }

    fn ef(id: &str) -> ExecutionFramework {
        ExecutionFramework {
            id: EfId::new(id),
            machine: "m".into(),
            host: "h".into(),
            memory_capacity: 100,
            alive: true,
        }
    }

    /// src on e1 -> mid on e2 -> sink on e3, one channel per hop.
    fn chain_setup() -> (FusionProcess, Topology, PlacementProblem) {
        let process = FusionProcess {
            nodes: vec![
                node("a-src", &[], &["out"], "identity"),
                node("b-mid", &["in"], &["out"], "identity"),
                node("c-sink", &["in"], &[], "display"),
            ],
            links: vec![
                link(("a-src", "out"), ("b-mid", "in")),
                link(("b-mid", "out"), ("c-sink", "in")),
            ],
        };
        let topology = Topology::new(
            vec![ef("e1"), ef("e2"), ef("e3")],
            vec![
                Channel::new(EfId::new("e1"), EfId::new("e2")),
                Channel::new(EfId::new("e2"), EfId::new("e3")),
            ],
        )
        .unwrap();
        let eligibility = [
            (NodeId::new("a-src"), BTreeSet::from([EfId::new("e1")])),
            (NodeId::new("b-mid"), BTreeSet::from([EfId::new("e2")])),
            (NodeId::new("c-sink"), BTreeSet::from([EfId::new("e3")])),
        ]
        .into_iter()
        .collect();
        let problem = PlacementProblem::new(
            process.clone(),
            topology.clone(),
            eligibility,
            BTreeMap::new(),
            CostWeights::default(),
        )
        .unwrap();
        (process, topology, problem)
    }

    fn deployed(emissions: Vec<Emission>) -> (RuntimeState, FusionProcess, Topology) {
        let (process, topology, problem) = chain_setup();
        let config = problem.find_first_admissible().unwrap().with_generation(1);
        let rt = deploy(
            config,
            &process,
            &topology,
            &FunctionRegistry::builtin(),
            emissions,
        )
        .unwrap();
        (rt, process, topology)
    }

    fn emission(time: Time, key: u64, node: &str, payload: i64) -> Emission {
        Emission {
            time,
            key,
            node: NodeId::new(node),
            payload: Value::Int(payload),
        }
    }

    #[test]
    fn deploy_starts_with_empty_queues_at_clock_zero() {
        let (rt, _, _) = deployed(vec![]);
        assert_eq!(rt.clock, 0);
        let sensors = read_sensors(&rt);
        assert!(sensors.queue_depths.values().all(|&d| d == 0));
        assert!(sensors.inter_firing.is_empty());
    }

    #[test]
    fn redeploy_is_deterministic() {
        let (a, _, _) = deployed(vec![emission(1, 0, "a-src", 7)]);
        let (b, _, _) = deployed(vec![emission(1, 0, "a-src", 7)]);
        assert_eq!(a, b);
    }

    #[test]
    fn step_without_events_leaves_clock_unchanged() {
        let (mut rt, process, topology) = deployed(vec![]);
        let events = step(&mut rt, &process, &topology, &FunctionRegistry::builtin());
        assert!(events.is_empty());
        assert_eq!(rt.clock, 0);
    }

    #[test]
    fn one_hop_latency_arithmetic() {
        // Emission at t=1 travels one channel of latency 1: queued at t=2.
        let (mut rt, process, topology) = deployed(vec![emission(1, 0, "a-src", 7)]);
        let registry = FunctionRegistry::builtin();
        step(&mut rt, &process, &topology, &registry);
        assert_eq!(rt.clock, 1);
        assert_eq!(rt.ledger_snapshot().in_flight, 1);
        step(&mut rt, &process, &topology, &registry);
        assert_eq!(rt.clock, 2);
        // b-mid fired immediately on delivery and relayed onward.
        let fired: Vec<_> = rt
            .log
            .records
            .iter()
            .filter(|r| matches!(r.kind, EventKind::Fire { .. }))
            .collect();
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].time, 2);
    }

    #[test]
    fn identity_payload_flows_to_sink() {
        let (mut rt, process, topology) = deployed(vec![emission(1, 0, "a-src", 7)]);
        let registry = FunctionRegistry::builtin();
        run_until(&mut rt, &process, &topology, &registry, 10);
        let snapshot = rt.ledger_snapshot();
        assert!(snapshot.balanced());
        assert_eq!(snapshot.queued, 0);
        assert_eq!(snapshot.in_flight, 0);
        assert_eq!(snapshot.lost, 0);
        // src minted 1, mid minted 1; both consumed downstream.
        assert_eq!(snapshot.produced, 2);
        assert_eq!(snapshot.consumed, 2);
    }

    #[test]
    fn sum_node_adds_inputs() {
        let process = FusionProcess {
            nodes: vec![
                node("a1", &[], &["out"], "identity"),
                node("a2", &[], &["out"], "identity"),
                node("add", &["x", "y"], &["out"], "sum"),
                node("sink", &["in"], &[], "display"),
            ],
            links: vec![
                link(("a1", "out"), ("add", "x")),
                link(("a2", "out"), ("add", "y")),
                link(("add", "out"), ("sink", "in")),
            ],
        };
        let topology = Topology::new(vec![ef("e1")], vec![]).unwrap();
        let eligibility = process
            .nodes
            .iter()
            .map(|n| (n.id.clone(), BTreeSet::from([EfId::new("e1")])))
            .collect();
        let problem = PlacementProblem::new(
            process.clone(),
            topology.clone(),
            eligibility,
            BTreeMap::new(),
            CostWeights::default(),
        )
        .unwrap();
        let config = problem.find_first_admissible().unwrap();
        let registry = FunctionRegistry::builtin();
        let mut rt = deploy(
            config,
            &process,
            &topology,
            &registry,
            vec![emission(1, 0, "a1", 2), emission(1, 1, "a2", 3)],
        )
        .unwrap();
        run_until(&mut rt, &process, &topology, &registry, 5);
        let delivered_to_sink: Vec<_> = rt
            .log
            .records
            .iter()
            .filter_map(|r| match &r.kind {
                EventKind::Fire { node, consumed, .. } if node.0 == "add" => Some(consumed.len()),
                _ => None,
            })
            .collect();
        assert_eq!(delivered_to_sink, vec![2]);
        // The sum token carries 5: find it via the sink delivery.
        let add_fire = rt
            .log
            .records
            .iter()
            .find_map(|r| match &r.kind {
                EventKind::Fire { node, produced, .. } if node.0 == "add" => {
                    Some(produced.clone())
                }
                _ => None,
            })
            .unwrap();
        assert_eq!(add_fire.len(), 1);
    }

    #[test]
    fn impl_error_loses_inputs_and_emits_nothing() {
        let process = FusionProcess {
            nodes: vec![
                node("a", &[], &["out"], "identity"),
                node("bad", &["in"], &["out"], "overflow"),
                node("sink", &["in"], &[], "display"),
            ],
            links: vec![
                link(("a", "out"), ("bad", "in")),
                link(("bad", "out"), ("sink", "in")),
            ],
        };
        let topology = Topology::new(vec![ef("e1")], vec![]).unwrap();
        let eligibility = process
            .nodes
            .iter()
            .map(|n| (n.id.clone(), BTreeSet::from([EfId::new("e1")])))
            .collect();
        let problem = PlacementProblem::new(
            process.clone(),
            topology.clone(),
            eligibility,
            BTreeMap::new(),
            CostWeights::default(),
        )
        .unwrap();
        let config = problem.find_first_admissible().unwrap();
        let registry = FunctionRegistry::builtin();
        let mut rt = deploy(
            config,
            &process,
            &topology,
            &registry,
            vec![emission(1, 0, "a", 5)],
        )
        .unwrap();
        run_until(&mut rt, &process, &topology, &registry, 5);
        let snapshot = rt.ledger_snapshot();
        assert!(snapshot.balanced());
        assert_eq!(snapshot.lost, 1);
        assert!(rt
            .log
            .records
            .iter()
            .any(|r| matches!(&r.kind, EventKind::NodeError { node, .. } if node.0 == "bad")));
        // No fire event for the failing node, and the sink never fires.
        assert!(!rt
            .log
            .records
            .iter()
            .any(|r| matches!(&r.kind, EventKind::Fire { node, .. } if node.0 == "sink")));
    }

    #[test]
    fn set_parameter_latches_until_rewritten() {
        let mut spec = node("f", &["in"], &["out"], "filter");
        spec.params = vec![ParamSpec {
            name: "filter".into(),
            default: Value::Text("none".into()),
        }];
        let process = FusionProcess {
            nodes: vec![node("a", &[], &["out"], "identity"), spec, node("s", &["in"], &[], "display")],
            links: vec![link(("a", "out"), ("f", "in")), link(("f", "out"), ("s", "in"))],
        };
        let topology = Topology::new(vec![ef("e1")], vec![]).unwrap();
        let eligibility = process
            .nodes
            .iter()
            .map(|n| (n.id.clone(), BTreeSet::from([EfId::new("e1")])))
            .collect();
        let problem = PlacementProblem::new(
            process.clone(),
            topology.clone(),
            eligibility,
            BTreeMap::new(),
            CostWeights::default(),
        )
        .unwrap();
        let config = problem.find_first_admissible().unwrap();
        let registry = FunctionRegistry::builtin();
        let mut rt = deploy(
            config,
            &process,
            &topology,
            &registry,
            vec![
                emission(2, 0, "a", 1),
                emission(3, 1, "a", 2),
                emission(4, 2, "a", 3),
            ],
        )
        .unwrap();
        set_parameter(&mut rt, &NodeId::new("f"), "filter", Value::Text("blur".into())).unwrap();
        // Re-set immediately: last write wins.
        set_parameter(&mut rt, &NodeId::new("f"), "filter", Value::Text("sepia".into())).unwrap();
        run_until(&mut rt, &process, &topology, &registry, 10);
        let sepia_firings = rt
            .log
            .records
            .iter()
            .filter(|r| match &r.kind {
                EventKind::Deliver { node, .. } => node.0 == "s",
                _ => false,
            })
            .count();
        assert_eq!(sepia_firings, 3);
        assert_eq!(
            rt.containers[&NodeId::new("f")].latched_params["filter"],
            Value::Text("sepia".into())
        );
        assert!(matches!(
            set_parameter(&mut rt, &NodeId::new("f"), "nope", Value::Int(1)),
            Err(EngineError::UnknownParameter { .. })
        ));
    }

    #[test]
    fn dead_consumer_in_view_blocks_firing_and_queues_grow() {
        let (mut rt, process, topology) = deployed(vec![
            emission(1, 0, "a-src", 1),
            emission(2, 1, "a-src", 2),
            emission(3, 2, "a-src", 3),
        ]);
        let registry = FunctionRegistry::builtin();
        // Mark the sink's EF dead in the controller's view; b-mid must stop.
        rt.view.dead_efs.insert(EfId::new("e3"));
        run_until(&mut rt, &process, &topology, &registry, 10);
        let depth = rt.containers[&NodeId::new("b-mid")].queued_tokens();
        assert_eq!(depth, 3);
        assert!(!rt
            .log
            .records
            .iter()
            .any(|r| matches!(&r.kind, EventKind::Fire { node, .. } if node.0 == "b-mid")));
        assert!(rt.ledger_snapshot().balanced());
    }

    #[test]
    fn dead_source_ef_skips_emissions() {
        let (mut rt, process, topology) = deployed(vec![emission(1, 0, "a-src", 1)]);
        let registry = FunctionRegistry::builtin();
        let topology = topology
            .apply_event(&crate::topology::TopologyEvent::EfDown {
                ef: EfId::new("e1"),
            })
            .unwrap();
        run_until(&mut rt, &process, &topology, &registry, 5);
        assert!(rt
            .log
            .records
            .iter()
            .any(|r| matches!(&r.kind, EventKind::EmitSkipped { reason: SkipReason::EfDown, .. })));
        assert_eq!(rt.ledger_snapshot().produced, 0);
    }

    #[test]
    fn replaying_same_inputs_gives_identical_logs() {
        let emissions = vec![
            emission(1, 0, "a-src", 1),
            emission(2, 1, "a-src", 2),
            emission(5, 2, "a-src", 3),
        ];
        let registry = FunctionRegistry::builtin();
        let (mut a, process, topology) = deployed(emissions.clone());
        run_until(&mut a, &process, &topology, &registry, 20);
        let (mut b, _, _) = deployed(emissions);
        run_until(&mut b, &process, &topology, &registry, 20);
        assert_eq!(a.log.to_lines(), b.log.to_lines());
    }
}
