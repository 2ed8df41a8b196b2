//! Independent tape-archive path. Archive, verify and restore are funnelled
//! through a single serialized entry point (one client, one queue) and never
//! depend on the replica catalog's rule engine.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::CORRUPTION_MASK;
use crate::sim::SimTime;
use crate::topology::{DatasetId, RseId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeRecord {
    pub dataset_id: DatasetId,
    pub checksum: u32,
    pub archived_at: SimTime,
    pub verified: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TapeError {
    #[error("ALREADY_ARCHIVED: {0}")]
    AlreadyArchived(DatasetId),
    #[error("SOURCE_MISSING: {0} has no AVAILABLE replica on the LNGS buffer")]
    SourceMissing(DatasetId),
    #[error("NOT_ARCHIVED: {0}")]
    NotArchived(DatasetId),
    #[error("NOT_VERIFIED: tape record of {0} failed its checksum test")]
    NotVerified(DatasetId),
    #[error("INSUFFICIENT_CAPACITY: {rse} cannot hold the restored replica")]
    InsufficientCapacity { rse: RseId },
}

/// A queued tape operation; the single TSM-style client performs one at a
/// time, FIFO.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TapeOp {
    Archive { dataset_id: DatasetId },
    Restore { dataset_id: DatasetId, dst: RseId },
}

#[derive(Default)]
pub struct TapeStore {
    records: BTreeMap<DatasetId, TapeRecord>,
    queue: VecDeque<TapeOp>,
    in_flight: Option<TapeOp>,
    /// Datasets queued or in flight for archive, to reject duplicates early.
    pending_archive: BTreeMap<DatasetId, ()>,
}

impl TapeStore {
    pub fn new() -> Self {
        TapeStore::default()
    }

    pub fn record(&self, dataset_id: &DatasetId) -> Option<&TapeRecord> {
        self.records.get(dataset_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &TapeRecord> {
        self.records.values()
    }

    /// Enqueue an archive request. The caller has checked the buffer source.
    pub fn request_archive(&mut self, dataset_id: &DatasetId) -> Result<(), TapeError> {
        if self.records.contains_key(dataset_id) || self.pending_archive.contains_key(dataset_id) {
            return Err(TapeError::AlreadyArchived(dataset_id.clone()));
        }
        self.pending_archive.insert(dataset_id.clone(), ());
        self.queue.push_back(TapeOp::Archive {
            dataset_id: dataset_id.clone(),
        });
        Ok(())
    }

    /// Enqueue a restore of a verified tape copy to `dst`.
    pub fn request_restore(&mut self, dataset_id: &DatasetId, dst: &RseId) -> Result<(), TapeError> {
        let rec = self
            .records
            .get(dataset_id)
            .ok_or_else(|| TapeError::NotArchived(dataset_id.clone()))?;
        if !rec.verified {
            return Err(TapeError::NotVerified(dataset_id.clone()));
        }
        self.queue.push_back(TapeOp::Restore {
            dataset_id: dataset_id.clone(),
            dst: dst.clone(),
        });
        Ok(())
    }

    /// Pop the next operation if the client is idle.
    pub fn next_op(&mut self) -> Option<TapeOp> {
        if self.in_flight.is_some() {
            return None;
        }
        let op = self.queue.pop_front()?;
        self.in_flight = Some(op.clone());
        Some(op)
    }

    pub fn idle(&self) -> bool {
        self.in_flight.is_none() && self.queue.is_empty()
    }

    /// The in-flight archive transfer finished; write the tape record.
    /// `corrupted` stores a flipped checksum so verification fails.
    pub fn finish_archive(
        &mut self,
        dataset_id: &DatasetId,
        canonical_checksum: u32,
        corrupted: bool,
        now: SimTime,
    ) -> TapeRecord {
        debug_assert!(matches!(
            self.in_flight,
            Some(TapeOp::Archive { dataset_id: ref d }) if d == dataset_id
        ));
        self.in_flight = None;
        self.pending_archive.remove(dataset_id);
        let checksum = if corrupted {
            canonical_checksum ^ CORRUPTION_MASK
        } else {
            canonical_checksum
        };
        let rec = TapeRecord {
            dataset_id: dataset_id.clone(),
            checksum,
            archived_at: now,
            verified: false,
        };
        self.records.insert(dataset_id.clone(), rec.clone());
        rec
    }

    pub fn finish_restore(&mut self, dataset_id: &DatasetId) {
        debug_assert!(matches!(
            self.in_flight,
            Some(TapeOp::Restore { dataset_id: ref d, .. }) if d == dataset_id
        ));
        self.in_flight = None;
    }

    /// Drop a corrupt record so the dataset can be re-archived.
    pub fn discard_record(&mut self, dataset_id: &DatasetId) {
        self.records.remove(dataset_id);
    }

    /// Checksum test against the dataset's canonical checksum; updates the
    /// record's `verified` flag and reports the outcome.
    pub fn verify(
        &mut self,
        dataset_id: &DatasetId,
        canonical_checksum: u32,
    ) -> Result<bool, TapeError> {
        let rec = self
            .records
            .get_mut(dataset_id)
            .ok_or_else(|| TapeError::NotArchived(dataset_id.clone()))?;
        rec.verified = rec.checksum == canonical_checksum;
        Ok(rec.verified)
    }

    /// Non-mutating verification status for reporting.
    pub fn is_verified(&self, dataset_id: &DatasetId) -> bool {
        self.records
            .get(dataset_id)
            .map(|r| r.verified)
            .unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SUM: u32 = 0x1234_5678;

    fn archived(store: &mut TapeStore, id: &DatasetId, corrupted: bool) {
        store.request_archive(id).unwrap();
        let op = store.next_op().unwrap();
        assert_eq!(op, TapeOp::Archive { dataset_id: id.clone() });
        store.finish_archive(id, SUM, corrupted, 100);
    }

    #[test]
    fn archive_then_verify_round_trip() {
        let mut store = TapeStore::new();
        let id: DatasetId = "run_000001:raw".into();
        archived(&mut store, &id, false);
        assert!(!store.record(&id).unwrap().verified);
        assert!(store.verify(&id, SUM).unwrap());
        assert!(store.record(&id).unwrap().verified);
    }

    #[test]
    fn double_archive_is_rejected() {
        let mut store = TapeStore::new();
        let id: DatasetId = "run_000001:raw".into();
        archived(&mut store, &id, false);
        assert_eq!(
            store.request_archive(&id),
            Err(TapeError::AlreadyArchived(id))
        );
    }

    #[test]
    fn queued_archive_also_counts_as_pending() {
        let mut store = TapeStore::new();
        let id: DatasetId = "run_000001:raw".into();
        store.request_archive(&id).unwrap();
        assert_eq!(
            store.request_archive(&id),
            Err(TapeError::AlreadyArchived(id))
        );
    }

    #[test]
    fn corrupted_record_fails_verification() {
        let mut store = TapeStore::new();
        let id: DatasetId = "run_000001:raw".into();
        archived(&mut store, &id, true);
        assert!(!store.verify(&id, SUM).unwrap());
        assert!(!store.is_verified(&id));
    }

    #[test]
    fn verify_without_record_errors() {
        let mut store = TapeStore::new();
        assert_eq!(
            store.verify(&"ghost:raw".into(), SUM),
            Err(TapeError::NotArchived("ghost:raw".into()))
        );
    }

    #[test]
    fn restore_requires_verified_record() {
        let mut store = TapeStore::new();
        let id: DatasetId = "run_000001:raw".into();
        assert_eq!(
            store.request_restore(&id, &"LNGS_BUFFER".into()),
            Err(TapeError::NotArchived(id.clone()))
        );
        archived(&mut store, &id, false);
        assert_eq!(
            store.request_restore(&id, &"LNGS_BUFFER".into()),
            Err(TapeError::NotVerified(id.clone()))
        );
        store.verify(&id, SUM).unwrap();
        store.request_restore(&id, &"LNGS_BUFFER".into()).unwrap();
        assert!(matches!(store.next_op(), Some(TapeOp::Restore { .. })));
    }

    #[test]
    fn single_entry_point_serializes_ops() {
        let mut store = TapeStore::new();
        let a: DatasetId = "a:raw".into();
        let b: DatasetId = "b:raw".into();
        store.request_archive(&a).unwrap();
        store.request_archive(&b).unwrap();
        let first = store.next_op().unwrap();
        assert_eq!(first, TapeOp::Archive { dataset_id: a.clone() });
        // Busy: nothing else starts until the first op finishes.
        assert!(store.next_op().is_none());
        store.finish_archive(&a, SUM, false, 10);
        let second = store.next_op().unwrap();
        assert_eq!(second, TapeOp::Archive { dataset_id: b });
    }
}
