//! The control sub-system: senses the running system, detects and
//! classifies errors, recovers by re-solving the placement problem over the
//! surviving resources, improves the configuration when a significantly
//! cheaper one exists, and executes best-effort transitions.
//!
//! The controller runs inline with the simulation loop at virtual-time
//! boundaries. Errors are acknowledged once a recovery pass handles them:
//! an element that stays dead does not re-raise its error unless it comes
//! back up and fails again, so a system that recovered around a dead EF
//! reports `ok` rather than permanently `degraded`.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::engine::{self, LivenessView, RuntimeState};
use crate::events::{ErrorKind, EventKind, InstallTrigger, NodeDisposition};
use crate::placement::{Configuration, CostWeights, PlacementProblem};
use crate::process::{FusionProcess, NodeId};
use crate::topology::{ChannelId, EfId, Topology};
use crate::Time;

/// Thresholds and periods driving the control loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct ControllerPolicy {
    /// An EF unheard of for longer than this is reported unreachable.
    pub heartbeat_timeout: Time,
    /// An improvement search runs at least this often.
    pub improvement_period: Time,
    /// Minimum relative cost gain before a new configuration is adopted.
    pub epsilon: f64,
    /// Relative change in sensed load that triggers an early search.
    pub sensor_variation_threshold: f64,
}

impl Default for ControllerPolicy {
    fn default() -> Self {
        Self {
            heartbeat_timeout: 3,
            improvement_period: 25,
            epsilon: 0.1,
            sensor_variation_threshold: 0.2,
        }
    }
}

impl ControllerPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.heartbeat_timeout == 0 {
            return Err("heartbeat_timeout must be positive".into());
        }
        if self.improvement_period == 0 {
            return Err("improvement_period must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err("epsilon must lie in (0, 1]".into());
        }
        if !(self.sensor_variation_threshold > 0.0) {
            return Err("sensor_variation_threshold must be positive".into());
        }
        Ok(())
    }
}

/// A detected error with the instant it was first reported.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorEvent {
    pub time: Time,
    #[serde(flatten)]
    pub kind: ErrorKind,
}

/// Overall health as derived from the outstanding errors: failed when some
/// sink can no longer be produced under the current configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SystemStatus {
    Ok,
    Degraded { errors: Vec<ErrorKind> },
    Failed { sinks: Vec<NodeId> },
}

impl SystemStatus {
    pub fn state_name(&self) -> &'static str {
        match self {
            SystemStatus::Ok => "ok",
            SystemStatus::Degraded { .. } => "degraded",
            SystemStatus::Failed { .. } => "failed",
        }
    }

    pub fn failed_sinks(&self) -> Vec<NodeId> {
        match self {
            SystemStatus::Failed { sinks } => sinks.clone(),
            _ => Vec::new(),
        }
    }
}

/// Ledger of one transition: how each node was treated and how many queued
/// or in-flight tokens were preserved versus lost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionReport {
    pub old_generation: u64,
    pub new_generation: u64,
    pub dispositions: BTreeMap<NodeId, NodeDisposition>,
    pub tokens_preserved: u64,
    pub tokens_lost: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransitionError {
    #[error("target configuration is not admissible: {0}")]
    Inadmissible(String),
}

/// Classifies outstanding errors against a configuration: `failed` iff the
/// errors disconnect every producing path to some sink, `degraded` while
/// any error is outstanding, `ok` otherwise. Reachability is evaluated
/// over the process graph with links unusable when either endpoint's EF or
/// any chain channel is named dead by an error.
pub fn classify(
    errors: &[ErrorEvent],
    config: &Configuration,
    process: &FusionProcess,
) -> SystemStatus {
    if errors.is_empty() {
        return SystemStatus::Ok;
    }
    let dead_efs: BTreeSet<&EfId> = errors
        .iter()
        .filter_map(|e| match &e.kind {
            ErrorKind::EfUnreachable { ef } => Some(ef),
            _ => None,
        })
        .collect();
    let dead_channels: BTreeSet<&ChannelId> = errors
        .iter()
        .filter_map(|e| match &e.kind {
            ErrorKind::ChannelBroken { channel } => Some(channel),
            _ => None,
        })
        .collect();

    let node_usable = |node: &NodeId| -> bool {
        config
            .ef_of(node)
            .map(|ef| !dead_efs.contains(ef))
            .unwrap_or(false)
    };
    let link_usable = |link: &crate::process::Link| -> bool {
        node_usable(&link.from.node)
            && node_usable(&link.to.node)
            && config
                .hops_of(link)
                .iter()
                .all(|h| !dead_channels.contains(h))
    };

    let mut reached: BTreeSet<NodeId> = process
        .sources()
        .into_iter()
        .filter(node_usable)
        .collect();
    let mut frontier: Vec<NodeId> = reached.iter().cloned().collect();
    while let Some(node) = frontier.pop() {
        for link in process.links_from(&node) {
            if link_usable(link) && reached.insert(link.to.node.clone()) {
                frontier.push(link.to.node.clone());
            }
        }
    }

    let unproducible: Vec<NodeId> = process
        .sinks()
        .into_iter()
        .filter(|s| !reached.contains(s))
        .collect();
    if unproducible.is_empty() {
        SystemStatus::Degraded {
            errors: errors.iter().map(|e| e.kind.clone()).collect(),
        }
    } else {
        SystemStatus::Failed {
            sinks: unproducible,
        }
    }
}

/// Improvement decision: returns the optimal candidate only when it is at
/// least `epsilon` relatively cheaper than the current configuration and
/// actually different from it.
pub fn improve(
    current: &Configuration,
    problem: &PlacementProblem,
    epsilon: f64,
) -> Option<Configuration> {
    let candidate = problem.find_optimal()?;
    if candidate.same_placement(current) {
        return None;
    }
    let current_cost = problem.total_cost(current);
    let candidate_cost = problem.total_cost(&candidate);
    if candidate_cost <= (1.0 - epsilon) * current_cost {
        Some(candidate)
    } else {
        None
    }
}

/// Applies `target` to the running state under the best-effort policy:
/// containers staying on their EF keep their queues (swapping only the
/// implementation when it changed); moved containers are destroyed and
/// recreated empty, their queued tokens counted lost; in-flight tokens on
/// remapped chains are dropped. Parameters re-latch to their most recent
/// explicitly set values, not defaults.
pub fn transition(
    rt: &mut RuntimeState,
    process: &FusionProcess,
    problem: &PlacementProblem,
    target: Configuration,
) -> Result<TransitionReport, TransitionError> {
    let admissibility = problem.admissibility(&target);
    if !admissibility.is_admissible() {
        return Err(TransitionError::Inadmissible(admissibility.to_string()));
    }

    let old = rt.config.clone();
    let mut dispositions = BTreeMap::new();
    let mut preserved: u64 = 0;
    let mut lost: u64 = 0;

    let node_ids: BTreeSet<NodeId> = old
        .assignment
        .keys()
        .chain(target.assignment.keys())
        .cloned()
        .collect();
    for node in node_ids {
        let old_ef = old.ef_of(&node);
        let new_ef = target.ef_of(&node);
        let disposition = match (old_ef, new_ef) {
            (Some(a), Some(b)) if a == b => {
                let queued = rt
                    .containers
                    .get(&node)
                    .map(|c| c.queued_tokens())
                    .unwrap_or(0);
                preserved += queued;
                let old_impl = old.impls.get(&node);
                let new_impl = target.impls.get(&node);
                if old_impl == new_impl {
                    NodeDisposition::KeptInPlace
                } else {
                    // Queued data survives an in-place implementation swap.
                    if let (Some(container), Some(impl_id)) =
                        (rt.containers.get_mut(&node), new_impl)
                    {
                        container.impl_id = impl_id.clone();
                    }
                    NodeDisposition::ImplSwapped
                }
            }
            (Some(_), Some(new_ef)) => {
                // Cross-EF move: the container and its queued data are
                // destroyed and a fresh one starts empty on the new EF.
                let queued = rt
                    .containers
                    .get(&node)
                    .map(|c| c.queued_tokens())
                    .unwrap_or(0);
                lost += queued;
                let spec = process.node(&node).expect("node in process");
                let mut latched: BTreeMap<String, crate::value::Value> = spec
                    .params
                    .iter()
                    .map(|p| (p.name.clone(), p.default.clone()))
                    .collect();
                for (key, value) in &rt.sticky_params {
                    if key.0 == node && latched.contains_key(&key.1) {
                        latched.insert(key.1.clone(), value.clone());
                    }
                }
                rt.containers.insert(
                    node.clone(),
                    crate::engine::NodeContainer {
                        node: node.clone(),
                        ef: new_ef.clone(),
                        impl_id: target
                            .impls
                            .get(&node)
                            .cloned()
                            .unwrap_or_else(|| spec.impls[0].clone()),
                        input_queues: spec
                            .inputs
                            .iter()
                            .map(|p| (p.clone(), Default::default()))
                            .collect(),
                        latched_params: latched,
                        fail_next: 0,
                        last_fire: None,
                        prev_fire: None,
                    },
                );
                NodeDisposition::Moved
            }
            (Some(_), None) => {
                let queued = rt
                    .containers
                    .get(&node)
                    .map(|c| c.queued_tokens())
                    .unwrap_or(0);
                lost += queued;
                rt.containers.remove(&node);
                NodeDisposition::Dropped
            }
            (None, Some(_)) | (None, None) => continue,
        };
        dispositions.insert(node, disposition);
    }

    // In-flight tokens continue only on links whose chain is unchanged.
    let mut kept_in_flight = Vec::new();
    for flight in std::mem::take(&mut rt.in_flight) {
        let unchanged = old.link_paths.get(&flight.link) == target.link_paths.get(&flight.link);
        if unchanged {
            preserved += 1;
            kept_in_flight.push(flight);
        } else {
            lost += 1;
        }
    }
    rt.in_flight = kept_in_flight;
    rt.ledger.lost += lost;

    let report = TransitionReport {
        old_generation: old.generation,
        new_generation: target.generation,
        dispositions,
        tokens_preserved: preserved,
        tokens_lost: lost,
    };
    rt.config = target;
    let clock = rt.clock;
    rt.log.append(
        clock,
        EventKind::Transition {
            old_generation: report.old_generation,
            new_generation: report.new_generation,
            dispositions: report.dispositions.clone(),
            tokens_preserved: report.tokens_preserved,
            tokens_lost: report.tokens_lost,
        },
    );
    Ok(report)
}

/// Everything a control pass needs beyond the controller's own state.
pub struct ControlContext<'a> {
    pub process: &'a FusionProcess,
    pub topology: &'a Topology,
    pub eligibility: &'a BTreeMap<NodeId, BTreeSet<EfId>>,
    pub channel_weights: &'a BTreeMap<ChannelId, f64>,
    pub cost_weights: CostWeights,
}

/// What one control pass did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PassOutcome {
    pub new_errors: Vec<ErrorEvent>,
    pub installed: Option<u64>,
    pub recovery_failed: bool,
    pub reports: Vec<TransitionReport>,
}

/// The stateful controller driving one simulated system.
pub struct Controller {
    pub policy: ControllerPolicy,
    pub status: SystemStatus,
    outstanding: Vec<ErrorEvent>,
    /// Elements whose failure has already been reported (outstanding or
    /// acknowledged); re-armed when the element is observed alive again.
    known_dead_efs: BTreeSet<EfId>,
    known_dead_channels: BTreeSet<ChannelId>,
    last_alive_efs: BTreeSet<EfId>,
    growth_pending: bool,
    last_search: Time,
    baseline_load: u64,
    deadlock_reported: bool,
    next_generation: u64,
    pub errors_detected: u64,
}

impl Controller {
    pub fn new(policy: ControllerPolicy, topology: &Topology, installed_generation: u64) -> Self {
        Self {
            policy,
            status: SystemStatus::Ok,
            outstanding: Vec::new(),
            known_dead_efs: BTreeSet::new(),
            known_dead_channels: BTreeSet::new(),
            last_alive_efs: topology.alive_efs().into_iter().collect(),
            growth_pending: false,
            last_search: 0,
            baseline_load: 0,
            deadlock_reported: false,
            next_generation: installed_generation + 1,
            errors_detected: 0,
        }
    }

    pub fn outstanding(&self) -> &[ErrorEvent] {
        &self.outstanding
    }

    /// The next instant an improvement search becomes due with no other
    /// trigger; the simulation loop schedules a pass for it.
    pub fn next_improvement_due(&self) -> Time {
        self.last_search + self.policy.improvement_period
    }

    fn build_problem(&self, ctx: &ControlContext) -> PlacementProblem {
        PlacementProblem::new(
            ctx.process.clone(),
            ctx.topology.clone(),
            ctx.eligibility.clone(),
            ctx.channel_weights.clone(),
            ctx.cost_weights,
        )
        .expect("scenario-validated problem inputs")
    }

    /// Detection half of the pass: refresh heartbeats and the liveness
    /// view, prune errors whose condition reset, and report new ones.
    fn detect(&mut self, rt: &mut RuntimeState, ctx: &ControlContext) -> Vec<ErrorEvent> {
        let now = rt.clock;
        engine::record_heartbeats(rt, ctx.topology);

        // Liveness view: an EF is believed alive while its heartbeat age is
        // within the timeout; channels are read from the topology directly.
        let mut view = LivenessView::default();
        for ef in ctx.topology.efs() {
            let fresh = rt
                .ef_last_seen
                .get(&ef.id)
                .map(|seen| now - seen <= self.policy.heartbeat_timeout)
                .unwrap_or(false);
            if !fresh {
                view.dead_efs.insert(ef.id.clone());
            }
        }
        for ch in ctx.topology.channels() {
            if !ch.alive {
                view.dead_channels.insert(ch.id.clone());
            }
        }
        if view != rt.view {
            rt.log.append(
                now,
                EventKind::ViewChanged {
                    dead_efs: view.dead_efs.iter().cloned().collect(),
                    dead_channels: view.dead_channels.iter().cloned().collect(),
                },
            );
            rt.view = view.clone();
        }

        // Re-arm detection for elements that came back.
        self.known_dead_efs.retain(|ef| view.dead_efs.contains(ef));
        self.known_dead_channels
            .retain(|ch| view.dead_channels.contains(ch));
        self.outstanding.retain(|e| match &e.kind {
            ErrorKind::EfUnreachable { ef } => view.dead_efs.contains(ef),
            ErrorKind::ChannelBroken { channel } => view.dead_channels.contains(channel),
            _ => true,
        });

        // Topology growth triggers an improvement search.
        let alive: BTreeSet<EfId> = ctx.topology.alive_efs().into_iter().collect();
        if alive.difference(&self.last_alive_efs).next().is_some() {
            self.growth_pending = true;
        }
        self.last_alive_efs = alive;

        let mut new_errors = Vec::new();
        for ef in &view.dead_efs {
            if ctx.topology.ef(ef).is_some() && self.known_dead_efs.insert(ef.clone()) {
                new_errors.push(ErrorEvent {
                    time: now,
                    kind: ErrorKind::EfUnreachable { ef: ef.clone() },
                });
            }
        }
        for ch in &view.dead_channels {
            if self.known_dead_channels.insert(ch.clone()) {
                new_errors.push(ErrorEvent {
                    time: now,
                    kind: ErrorKind::ChannelBroken {
                        channel: ch.clone(),
                    },
                });
            }
        }
        for kind in std::mem::take(&mut rt.pending_node_errors) {
            new_errors.push(ErrorEvent { time: now, kind });
        }

        // Structural deadlock: quiescent with stranded data after the
        // sources are exhausted.
        let quiescent = rt.in_flight.is_empty()
            && rt
                .containers
                .keys()
                .all(|n| !engine::can_fire(rt, ctx.process, ctx.topology, n));
        let stranded: Vec<NodeId> = rt
            .containers
            .values()
            .filter(|c| c.queued_tokens() > 0)
            .map(|c| c.node.clone())
            .collect();
        if quiescent && rt.sources_exhausted() && !stranded.is_empty() {
            if !self.deadlock_reported {
                self.deadlock_reported = true;
                new_errors.push(ErrorEvent {
                    time: now,
                    kind: ErrorKind::Deadlock { stranded },
                });
            }
        } else {
            self.deadlock_reported = false;
        }

        for error in &new_errors {
            rt.log.append(
                now,
                EventKind::ErrorDetected {
                    error: error.kind.clone(),
                },
            );
        }
        self.errors_detected += new_errors.len() as u64;
        new_errors
    }

    /// One MAPE pass: sense, detect, classify, then recover on errors or
    /// search for an improvement when due, transitioning if a candidate
    /// exists. Appends a status record either way.
    pub fn control_step(&mut self, rt: &mut RuntimeState, ctx: &ControlContext) -> PassOutcome {
        let now = rt.clock;
        let mut outcome = PassOutcome::default();

        outcome.new_errors = self.detect(rt, ctx);
        self.outstanding.extend(outcome.new_errors.iter().cloned());
        self.status = classify(&self.outstanding, &rt.config, ctx.process);

        if !self.outstanding.is_empty() {
            // Recovery has priority; improvement waits for a healthy pass.
            let problem = self.build_problem(ctx);
            match problem.find_first_admissible() {
                Some(candidate) => {
                    if !candidate.same_placement(&rt.config) {
                        let generation = self.next_generation;
                        self.next_generation += 1;
                        let candidate = candidate.with_generation(generation);
                        let report = transition(rt, ctx.process, &problem, candidate)
                            .expect("first-admissible candidate is admissible");
                        self.log_install(rt, &problem, InstallTrigger::Recovery);
                        outcome.installed = Some(generation);
                        outcome.reports.push(report);
                    }
                    self.outstanding.clear();
                    self.status = SystemStatus::Ok;
                }
                None => {
                    let outstanding = self.outstanding.len();
                    rt.log
                        .append(now, EventKind::RecoveryFailed { outstanding });
                    outcome.recovery_failed = true;
                    // No configuration satisfies the constraints; surface as
                    // failure even if some sinks remain reachable for now.
                    if !matches!(self.status, SystemStatus::Failed { .. }) {
                        self.status = SystemStatus::Failed {
                            sinks: self.status.failed_sinks(),
                        };
                    }
                }
            }
        } else {
            let load = engine::read_sensors(rt).total_queued();
            let variation =
                (load.abs_diff(self.baseline_load)) as f64 / (self.baseline_load.max(1)) as f64;
            let due = now >= self.next_improvement_due()
                || self.growth_pending
                || variation > self.policy.sensor_variation_threshold;
            if due {
                self.last_search = now;
                self.growth_pending = false;
                self.baseline_load = load;
                let problem = self.build_problem(ctx);
                let current_cost = problem.total_cost(&rt.config);
                let candidate = improve(&rt.config, &problem, self.policy.epsilon);
                let candidate_cost = candidate.as_ref().map(|c| problem.total_cost(c));
                rt.log.append(
                    now,
                    EventKind::ImprovementSearched {
                        current_cost,
                        candidate_cost,
                        adopted: candidate.is_some(),
                    },
                );
                if let Some(candidate) = candidate {
                    let generation = self.next_generation;
                    self.next_generation += 1;
                    let candidate = candidate.with_generation(generation);
                    let report = transition(rt, ctx.process, &problem, candidate)
                        .expect("improvement candidate is admissible");
                    self.log_install(rt, &problem, InstallTrigger::Improvement);
                    outcome.installed = Some(generation);
                    outcome.reports.push(report);
                }
            }
        }

        let snapshot = rt.ledger_snapshot();
        rt.log.append(
            now,
            EventKind::Status {
                state: self.status.state_name().to_owned(),
                failed_sinks: self.status.failed_sinks(),
                outstanding: self.outstanding.len(),
                produced: snapshot.produced,
                consumed: snapshot.consumed,
                queued: snapshot.queued,
                in_flight: snapshot.in_flight,
                lost: snapshot.lost,
            },
        );
        outcome
    }

    fn log_install(
        &mut self,
        rt: &mut RuntimeState,
        problem: &PlacementProblem,
        trigger: InstallTrigger,
    ) {
        let clock = rt.clock;
        let record = EventKind::ConfigInstalled {
            generation: rt.config.generation,
            trigger,
            assignment: rt.config.assignment.clone(),
            cost_distribution: problem.cost_distribution(&rt.config),
            cost_communication: problem.cost_communication(&rt.config),
            cost_total: problem.total_cost(&rt.config),
        };
        rt.log.append(clock, record);
    }
}
