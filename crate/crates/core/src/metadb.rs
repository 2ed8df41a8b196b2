//! Run meta-database: authoritative run records with locations and lifecycle
//! status, plus read-only mirrors that apply the primary's oplog after a
//! fixed per-mirror lag.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;
use crate::topology::{RseId, RunId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceCategory {
    DarkMatter,
    Led,
    Cs137,
    Kr83m,
    Rn220,
    AmBe241,
    Th228,
    NeutronGenerator,
    MuonVeto,
}

impl SourceCategory {
    pub const ALL: [SourceCategory; 9] = [
        SourceCategory::DarkMatter,
        SourceCategory::Led,
        SourceCategory::Cs137,
        SourceCategory::Kr83m,
        SourceCategory::Rn220,
        SourceCategory::AmBe241,
        SourceCategory::Th228,
        SourceCategory::NeutronGenerator,
        SourceCategory::MuonVeto,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            SourceCategory::DarkMatter => "Dark Matter",
            SourceCategory::Led => "LED",
            SourceCategory::Cs137 => "Cs137",
            SourceCategory::Kr83m => "Kr83m",
            SourceCategory::Rn220 => "Rn220",
            SourceCategory::AmBe241 => "AmBe241",
            SourceCategory::Th228 => "Th228",
            SourceCategory::NeutronGenerator => "Neutron Generator",
            SourceCategory::MuonVeto => "MuonVeto",
        }
    }
}

/// Lifecycle status, strictly ordered; transitions only move forward.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Taking,
    OnBuffer,
    Distributing,
    Safe,
    Processed,
    PurgedFromLngs,
}

/// A data location as tracked for a run: a raw-data RSE, the tape copy, or
/// the processed copy at RCC. Minitrees are intentionally unrepresentable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Location {
    Rse(RseId),
    Tape,
    Rcc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: RunId,
    pub source: SourceCategory,
    pub science: bool,
    pub event_count: u64,
    pub size: u64,
    pub status: RunStatus,
    pub locations: BTreeSet<Location>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorState {
    pub lag: SimTime,
    pub last_applied: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetaDbError {
    #[error("UNKNOWN_RUN: {0}")]
    UnknownRun(RunId),
    #[error("ILLEGAL_TRANSITION: {from:?} -> {to:?} for {run}")]
    IllegalTransition {
        run: RunId,
        from: RunStatus,
        to: RunStatus,
    },
}

#[derive(Debug, Clone)]
enum MetaOp {
    Insert(RunRecord),
    AddLocation(RunId, Location),
    RemoveLocation(RunId, Location),
    SetStatus(RunId, RunStatus),
}

struct OplogEntry {
    seq: u64,
    committed_at: SimTime,
    op: MetaOp,
}

/// Which instance a query reads from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instance {
    Primary,
    Mirror(String),
}

pub struct MetaDb {
    primary: BTreeMap<RunId, RunRecord>,
    oplog: Vec<OplogEntry>,
    next_seq: u64,
    mirrors: BTreeMap<String, SimTime>,
}

impl MetaDb {
    pub fn new(mirrors: BTreeMap<String, SimTime>) -> Self {
        MetaDb {
            primary: BTreeMap::new(),
            oplog: Vec::new(),
            next_seq: 1,
            mirrors,
        }
    }

    fn commit(&mut self, op: MetaOp, now: SimTime) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        Self::apply(&mut self.primary, &op);
        self.oplog.push(OplogEntry {
            seq,
            committed_at: now,
            op,
        });
        seq
    }

    fn apply(view: &mut BTreeMap<RunId, RunRecord>, op: &MetaOp) {
        match op {
            MetaOp::Insert(rec) => {
                view.insert(rec.run_id.clone(), rec.clone());
            }
            MetaOp::AddLocation(run, loc) => {
                if let Some(rec) = view.get_mut(run) {
                    rec.locations.insert(loc.clone());
                }
            }
            MetaOp::RemoveLocation(run, loc) => {
                if let Some(rec) = view.get_mut(run) {
                    rec.locations.remove(loc);
                }
            }
            MetaOp::SetStatus(run, status) => {
                if let Some(rec) = view.get_mut(run) {
                    rec.status = *status;
                }
            }
        }
    }

    pub fn insert_run(&mut self, rec: RunRecord, now: SimTime) -> u64 {
        self.commit(MetaOp::Insert(rec), now)
    }

    /// Add a location on the primary; mirrors see it after their lag.
    /// Set semantics: re-adding an existing location is a no-op.
    pub fn upsert_location(
        &mut self,
        run_id: &RunId,
        location: Location,
        now: SimTime,
    ) -> Result<u64, MetaDbError> {
        let rec = self
            .primary
            .get(run_id)
            .ok_or_else(|| MetaDbError::UnknownRun(run_id.clone()))?;
        debug_assert!(
            location != Location::Rcc || rec.status >= RunStatus::Processed,
            "RCC location requires status >= PROCESSED"
        );
        if rec.locations.contains(&location) {
            return Ok(self.next_seq - 1);
        }
        Ok(self.commit(MetaOp::AddLocation(run_id.clone(), location), now))
    }

    pub fn remove_location(
        &mut self,
        run_id: &RunId,
        location: Location,
        now: SimTime,
    ) -> Result<u64, MetaDbError> {
        if !self.primary.contains_key(run_id) {
            return Err(MetaDbError::UnknownRun(run_id.clone()));
        }
        Ok(self.commit(MetaOp::RemoveLocation(run_id.clone(), location), now))
    }

    /// Advance the lifecycle status. Backward transitions are rejected;
    /// setting the current status again is a no-op.
    pub fn set_status(
        &mut self,
        run_id: &RunId,
        status: RunStatus,
        now: SimTime,
    ) -> Result<RunRecord, MetaDbError> {
        let rec = self
            .primary
            .get(run_id)
            .ok_or_else(|| MetaDbError::UnknownRun(run_id.clone()))?;
        if status < rec.status {
            return Err(MetaDbError::IllegalTransition {
                run: run_id.clone(),
                from: rec.status,
                to: status,
            });
        }
        if status > rec.status {
            self.commit(MetaOp::SetStatus(run_id.clone(), status), now);
        }
        Ok(self.primary[run_id].clone())
    }

    pub fn record(&self, run_id: &RunId) -> Result<&RunRecord, MetaDbError> {
        self.primary
            .get(run_id)
            .ok_or_else(|| MetaDbError::UnknownRun(run_id.clone()))
    }

    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.primary.values()
    }

    /// Query records from the chosen instance. Primary reads are
    /// linearizable; a mirror reflects all updates committed at or before
    /// `now - lag`.
    pub fn query<F>(&self, predicate: F, instance: Instance, now: SimTime) -> Vec<RunRecord>
    where
        F: Fn(&RunRecord) -> bool,
    {
        match instance {
            Instance::Primary => self
                .primary
                .values()
                .filter(|r| predicate(r))
                .cloned()
                .collect(),
            Instance::Mirror(id) => {
                let view = self.mirror_view(&id, now);
                view.into_values().filter(|r| predicate(r)).collect()
            }
        }
    }

    /// Materialize a mirror's view by replaying the oplog up to its horizon.
    pub fn mirror_view(&self, mirror_id: &str, now: SimTime) -> BTreeMap<RunId, RunRecord> {
        let lag = self.mirrors.get(mirror_id).copied().unwrap_or(0);
        let horizon = now.saturating_sub(lag);
        let mut view = BTreeMap::new();
        for entry in &self.oplog {
            if entry.committed_at > horizon {
                break;
            }
            Self::apply(&mut view, &entry.op);
        }
        view
    }

    pub fn mirror_state(&self, mirror_id: &str, now: SimTime) -> Option<MirrorState> {
        let lag = *self.mirrors.get(mirror_id)?;
        let horizon = now.saturating_sub(lag);
        let last_applied = self
            .oplog
            .iter()
            .take_while(|e| e.committed_at <= horizon)
            .map(|e| e.seq)
            .last()
            .unwrap_or(0);
        Some(MirrorState { lag, last_applied })
    }

    pub fn mirror_ids(&self) -> impl Iterator<Item = &String> {
        self.mirrors.keys()
    }

    pub fn primary_seq(&self) -> u64 {
        self.next_seq - 1
    }

    /// One JSON object per run record (for the `report runs` dump).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.primary.values() {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}
