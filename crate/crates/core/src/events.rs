//! The line-delimited event log shared by the engine and the controller.
//!
//! One record per event, totally ordered by (time, seq). Field order is
//! fixed by declaration so serialized logs are diffable byte for byte.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::process::{ImplId, NodeId};
use crate::topology::{ChannelId, EfId, TopologyEvent};
use crate::value::Value;
use crate::Time;

/// Why a scheduled source emission was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    EfDown,
    ConsumersUnreachable,
}

/// What installed a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstallTrigger {
    Initial,
    Recovery,
    Improvement,
}

/// How one node was treated by a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeDisposition {
    KeptInPlace,
    ImplSwapped,
    Moved,
    Dropped,
}

/// A detected error, following the closed two-by-two taxonomy:
/// inter-EF (unreachable EF, broken channel) and intra-EF (internal node
/// error, deadlock).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "error", rename_all = "kebab-case")]
pub enum ErrorKind {
    EfUnreachable { ef: EfId },
    ChannelBroken { channel: ChannelId },
    NodeInternal { node: NodeId, detail: String },
    Deadlock { stranded: Vec<NodeId> },
}

impl ErrorKind {
    pub fn is_inter_ef(&self) -> bool {
        matches!(
            self,
            ErrorKind::EfUnreachable { .. } | ErrorKind::ChannelBroken { .. }
        )
    }
}

/// One log record body. The serialized form carries a `kind` tag first,
/// then the variant fields in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    Deploy {
        generation: u64,
    },
    ConfigInstalled {
        generation: u64,
        trigger: InstallTrigger,
        assignment: BTreeMap<NodeId, EfId>,
        cost_distribution: u64,
        cost_communication: f64,
        cost_total: f64,
    },
    Emit {
        node: NodeId,
        tokens: Vec<u64>,
        payload: Value,
    },
    EmitSkipped {
        node: NodeId,
        reason: SkipReason,
    },
    Hop {
        token: u64,
        channel: ChannelId,
    },
    Deliver {
        token: u64,
        node: NodeId,
        port: String,
    },
    Fire {
        node: NodeId,
        consumed: Vec<u64>,
        produced: Vec<u64>,
    },
    NodeError {
        node: NodeId,
        impl_id: ImplId,
        detail: String,
    },
    SetParam {
        node: NodeId,
        name: String,
        value: Value,
    },
    TopologyChanged {
        #[serde(flatten)]
        event: TopologyEvent,
    },
    FaultInjected {
        node: NodeId,
    },
    ViewChanged {
        dead_efs: Vec<EfId>,
        dead_channels: Vec<ChannelId>,
    },
    ErrorDetected {
        #[serde(flatten)]
        error: ErrorKind,
    },
    RecoveryFailed {
        outstanding: usize,
    },
    ImprovementSearched {
        current_cost: f64,
        candidate_cost: Option<f64>,
        adopted: bool,
    },
    Transition {
        old_generation: u64,
        new_generation: u64,
        dispositions: BTreeMap<NodeId, NodeDisposition>,
        tokens_preserved: u64,
        tokens_lost: u64,
    },
    Status {
        state: String,
        failed_sinks: Vec<NodeId>,
        outstanding: usize,
        produced: u64,
        consumed: u64,
        queued: u64,
        in_flight: u64,
        lost: u64,
    },
    RunEnd {
        state: String,
    },
}

/// A fully ordered log record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    pub time: Time,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl EventRecord {
    /// The canonical one-line JSON rendering used in log files.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event records always serialize")
    }
}

/// Append-only event log with monotonically increasing sequence numbers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
    next_seq: u64,
}

impl EventLog {
    pub fn append(&mut self, time: Time, kind: EventKind) -> &EventRecord {
        let record = EventRecord {
            time,
            seq: self.next_seq,
            kind,
        };
        self.next_seq += 1;
        self.records.push(record);
        self.records.last().expect("just pushed")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Renders the whole log as JSON lines.
    pub fn to_lines(&self) -> Vec<String> {
        self.records.iter().map(|r| r.to_line()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_serialize_with_stable_field_order() {
        let mut log = EventLog::default();
        log.append(
            3,
            EventKind::Fire {
                node: NodeId::new("f"),
                consumed: vec![1],
                produced: vec![2, 3],
            },
        );
        assert_eq!(
            log.to_lines()[0],
            r#"{"time":3,"seq":0,"kind":"fire","node":"f","consumed":[1],"produced":[2,3]}"#
        );
    }

    #[test]
    fn seq_is_monotonic() {
        let mut log = EventLog::default();
        log.append(0, EventKind::Deploy { generation: 1 });
        log.append(0, EventKind::Deploy { generation: 2 });
        assert_eq!(log.records[0].seq, 0);
        assert_eq!(log.records[1].seq, 1);
    }
}
