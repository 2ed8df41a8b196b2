//! Data-safety classification and the purge gate — the only path by which a
//! replica is ever deleted.
//!
//! Science data demand a specific US copy, a copy in Europe and a verified
//! tape copy; non-science data drop the US requirement. Purging from the
//! buffer additionally requires the tape copy to be verified and at least
//! one AVAILABLE disk replica elsewhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, ReplicaState};
use crate::metadb::RunRecord;
use crate::tape::TapeStore;
use crate::topology::{DatasetId, Region, RseId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SafetyClass {
    Science,
    NonScience,
}

/// What a dataset must satisfy before it counts as safe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetySpec {
    /// Required specific RSE (the US dCache copy) — science data only.
    pub require_specific: Option<RseId>,
    pub require_region: Region,
    pub require_region_copies: u32,
    pub require_verified_tape: bool,
}

impl SafetySpec {
    pub fn for_class(class: SafetyClass, science_rse: &RseId) -> SafetySpec {
        SafetySpec {
            require_specific: match class {
                SafetyClass::Science => Some(science_rse.clone()),
                SafetyClass::NonScience => None,
            },
            require_region: Region::Europe,
            require_region_copies: 1,
            require_verified_tape: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MissingRequirement {
    SpecificCopy(RseId),
    RegionCopies {
        region: Region,
        have: u32,
        need: u32,
    },
    VerifiedTape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub dataset_id: DatasetId,
    pub satisfied: bool,
    pub missing: Vec<MissingRequirement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PurgeBlocker {
    TapeUnverified,
    NoOffsiteCopy,
    NoReplica,
}

impl PurgeBlocker {
    pub fn label(&self) -> &'static str {
        match self {
            PurgeBlocker::TapeUnverified => "TAPE_UNVERIFIED",
            PurgeBlocker::NoOffsiteCopy => "NO_OFFSITE_COPY",
            PurgeBlocker::NoReplica => "NO_REPLICA",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("UNKNOWN_DATASET: {0}")]
    UnknownDataset(DatasetId),
    #[error("NO_REPLICA_AT_RSE: {dataset} has no replica at {rse}")]
    NoReplicaAtRse { dataset: DatasetId, rse: RseId },
    #[error("PURGE_REFUSED: {reasons:?}")]
    PurgeRefused { reasons: Vec<PurgeBlocker> },
}

/// SCIENCE iff the run's science flag is set.
pub fn classify(run: &RunRecord) -> SafetyClass {
    if run.science {
        SafetyClass::Science
    } else {
        SafetyClass::NonScience
    }
}

/// Evaluate the safety spec against AVAILABLE replicas and verified tape.
/// CORRUPT replicas and unverified tape count as absent.
pub fn check_safety(
    dataset_id: &DatasetId,
    spec: &SafetySpec,
    catalog: &Catalog,
    tape: &TapeStore,
    topo: &Topology,
) -> Result<SafetyReport, PolicyError> {
    catalog
        .dataset(dataset_id)
        .map_err(|_| PolicyError::UnknownDataset(dataset_id.clone()))?;
    let mut missing = Vec::new();

    if let Some(rse) = &spec.require_specific {
        let ok = catalog
            .replica(dataset_id, rse)
            .map(|r| r.state == ReplicaState::Available)
            .unwrap_or(false);
        if !ok {
            missing.push(MissingRequirement::SpecificCopy(rse.clone()));
        }
    }

    let have = catalog
        .available_disk_replicas(dataset_id, topo)
        .into_iter()
        .filter(|rse| {
            topo.elements
                .get(rse)
                .map(|el| el.region == spec.require_region)
                .unwrap_or(false)
        })
        .count() as u32;
    if have < spec.require_region_copies {
        missing.push(MissingRequirement::RegionCopies {
            region: spec.require_region,
            have,
            need: spec.require_region_copies,
        });
    }

    if spec.require_verified_tape && !tape.is_verified(dataset_id) {
        missing.push(MissingRequirement::VerifiedTape);
    }

    Ok(SafetyReport {
        dataset_id: dataset_id.clone(),
        satisfied: missing.is_empty(),
        missing,
    })
}

/// The purge gate: a replica may be deleted only with a verified tape copy
/// and at least one AVAILABLE disk replica away from the LNGS buffer.
pub fn purge_eligible(
    dataset_id: &DatasetId,
    rse: &RseId,
    catalog: &Catalog,
    tape: &TapeStore,
    topo: &Topology,
) -> Result<(bool, Vec<PurgeBlocker>), PolicyError> {
    let replica = catalog
        .replica(dataset_id, rse)
        .filter(|r| r.state == ReplicaState::Available)
        .ok_or_else(|| PolicyError::NoReplicaAtRse {
            dataset: dataset_id.clone(),
            rse: rse.clone(),
        })?;
    let _ = replica;

    let mut blockers = Vec::new();
    if !tape.is_verified(dataset_id) {
        blockers.push(PurgeBlocker::TapeUnverified);
    }
    let buffer_id = topo.lngs_buffer().id.clone();
    let offsite = catalog
        .available_disk_replicas(dataset_id, topo)
        .into_iter()
        .any(|r| r != buffer_id && r != *rse);
    if !offsite {
        blockers.push(PurgeBlocker::NoOffsiteCopy);
    }
    Ok((blockers.is_empty(), blockers))
}

/// Gate re-check and deletion in one step (callers run it inside a single
/// event handler, so there is no interleaving window).
pub fn purge(
    dataset_id: &DatasetId,
    rse: &RseId,
    catalog: &mut Catalog,
    tape: &TapeStore,
    topo: &mut Topology,
) -> Result<crate::catalog::Replica, PolicyError> {
    let (ok, reasons) = match purge_eligible(dataset_id, rse, catalog, tape, topo) {
        Ok(v) => v,
        Err(PolicyError::NoReplicaAtRse { .. }) => {
            return Err(PolicyError::PurgeRefused {
                reasons: vec![PurgeBlocker::NoReplica],
            })
        }
        Err(e) => return Err(e),
    };
    if !ok {
        return Err(PolicyError::PurgeRefused { reasons });
    }
    catalog
        .mark_purged(dataset_id, rse, topo)
        .map_err(|e| match e {
            CatalogError::UnknownDataset(d) => PolicyError::UnknownDataset(d),
            _ => PolicyError::PurgeRefused {
                reasons: vec![PurgeBlocker::NoReplica],
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Dataset, RunTraits};
    use crate::metadb::{RunStatus, SourceCategory};
    use crate::topology::{StorageElement, StorageKind};
    use std::collections::BTreeSet;

    fn topo() -> Topology {
        let mut t = Topology::default();
        for (id, region, kind) in [
            ("LNGS_BUFFER", Region::Lngs, StorageKind::Buffer),
            ("UC_DCACHE", Region::Us, StorageKind::Disk),
            ("CNAF", Region::Europe, StorageKind::Disk),
            ("NIKHEF", Region::Europe, StorageKind::Disk),
            ("PDC_TAPE", Region::Nordic, StorageKind::Tape),
        ] {
            t.elements.insert(
                id.into(),
                StorageElement {
                    id: id.into(),
                    region,
                    kind,
                    capacity: 1_000_000_000,
                    used: 0,
                    available: true,
                },
            );
        }
        t
    }

    fn run_record(science: bool) -> RunRecord {
        RunRecord {
            run_id: "run_000001".into(),
            source: SourceCategory::DarkMatter,
            science,
            event_count: 100,
            size: 1_000,
            status: RunStatus::OnBuffer,
            locations: BTreeSet::new(),
        }
    }

    struct Fixture {
        topo: Topology,
        catalog: Catalog,
        tape: TapeStore,
        id: DatasetId,
    }

    fn fixture(replicas: &[&str], tape_verified: Option<bool>) -> Fixture {
        let mut topo = topo();
        let mut catalog = Catalog::new();
        let ds = Dataset::raw(&"run_000001".into(), 1_000, vec!["run_000001:c0000".into()]);
        let id = ds.id.clone();
        let checksum = ds.checksum;
        catalog
            .register(
                ds,
                RunTraits {
                    science: true,
                    source: SourceCategory::DarkMatter,
                },
                &"LNGS_BUFFER".into(),
                None,
                0,
                &mut topo,
            )
            .unwrap();
        for rse in replicas {
            catalog
                .start_copy(&id, &(*rse).into(), None, 0, &mut topo)
                .unwrap();
            catalog
                .complete_transfer(&id, &(*rse).into(), true, &mut topo)
                .unwrap();
        }
        let mut tape = TapeStore::new();
        if let Some(ok) = tape_verified {
            tape.request_archive(&id).unwrap();
            tape.next_op().unwrap();
            tape.finish_archive(&id, checksum, !ok, 10);
            tape.verify(&id, checksum).unwrap();
        }
        Fixture {
            topo,
            catalog,
            tape,
            id,
        }
    }

    #[test]
    fn classification_follows_the_science_flag() {
        assert_eq!(classify(&run_record(true)), SafetyClass::Science);
        assert_eq!(classify(&run_record(false)), SafetyClass::NonScience);
    }

    #[test]
    fn science_with_full_placement_is_satisfied() {
        let f = fixture(&["UC_DCACHE", "CNAF"], Some(true));
        let spec = SafetySpec::for_class(SafetyClass::Science, &"UC_DCACHE".into());
        let report = check_safety(&f.id, &spec, &f.catalog, &f.tape, &f.topo).unwrap();
        assert!(report.satisfied);
        assert!(report.missing.is_empty());
    }

    #[test]
    fn science_missing_us_copy_is_reported() {
        let f = fixture(&["CNAF"], Some(true));
        let spec = SafetySpec::for_class(SafetyClass::Science, &"UC_DCACHE".into());
        let report = check_safety(&f.id, &spec, &f.catalog, &f.tape, &f.topo).unwrap();
        assert!(!report.satisfied);
        assert_eq!(
            report.missing,
            vec![MissingRequirement::SpecificCopy("UC_DCACHE".into())]
        );
    }

    #[test]
    fn non_science_with_unverified_tape_is_reported() {
        let f = fixture(&["NIKHEF"], Some(false));
        let spec = SafetySpec::for_class(SafetyClass::NonScience, &"UC_DCACHE".into());
        let report = check_safety(&f.id, &spec, &f.catalog, &f.tape, &f.topo).unwrap();
        assert!(!report.satisfied);
        assert_eq!(report.missing, vec![MissingRequirement::VerifiedTape]);
    }

    #[test]
    fn adding_a_replica_never_shrinks_satisfaction() {
        // check_safety monotonicity on a concrete pair of states.
        let partial = fixture(&["CNAF"], Some(true));
        let spec = SafetySpec::for_class(SafetyClass::Science, &"UC_DCACHE".into());
        let before = check_safety(&partial.id, &spec, &partial.catalog, &partial.tape, &partial.topo)
            .unwrap();
        let full = fixture(&["CNAF", "UC_DCACHE"], Some(true));
        let after =
            check_safety(&full.id, &spec, &full.catalog, &full.tape, &full.topo).unwrap();
        assert!(after.missing.len() <= before.missing.len());
        assert!(after.satisfied);
    }

    #[test]
    fn purge_gate_passes_with_tape_and_offsite_copy() {
        let mut f = fixture(&["CNAF"], Some(true));
        let (ok, reasons) =
            purge_eligible(&f.id, &"LNGS_BUFFER".into(), &f.catalog, &f.tape, &f.topo).unwrap();
        assert!(ok, "{reasons:?}");
        let replica = purge(
            &f.id,
            &"LNGS_BUFFER".into(),
            &mut f.catalog,
            &f.tape,
            &mut f.topo,
        )
        .unwrap();
        assert_eq!(replica.state, ReplicaState::Purged);
        assert_eq!(f.topo.element(&"LNGS_BUFFER".into()).unwrap().used, 0);
    }

    #[test]
    fn purge_refused_without_offsite_copy() {
        let f = fixture(&[], Some(true));
        let (ok, reasons) =
            purge_eligible(&f.id, &"LNGS_BUFFER".into(), &f.catalog, &f.tape, &f.topo).unwrap();
        assert!(!ok);
        assert_eq!(reasons, vec![PurgeBlocker::NoOffsiteCopy]);
    }

    #[test]
    fn purge_refused_with_unverified_tape() {
        let f = fixture(&["CNAF"], Some(false));
        let (ok, reasons) =
            purge_eligible(&f.id, &"LNGS_BUFFER".into(), &f.catalog, &f.tape, &f.topo).unwrap();
        assert!(!ok);
        assert_eq!(reasons, vec![PurgeBlocker::TapeUnverified]);
    }

    #[test]
    fn purge_of_purged_replica_is_refused() {
        let mut f = fixture(&["CNAF"], Some(true));
        purge(
            &f.id,
            &"LNGS_BUFFER".into(),
            &mut f.catalog,
            &f.tape,
            &mut f.topo,
        )
        .unwrap();
        let err = purge(
            &f.id,
            &"LNGS_BUFFER".into(),
            &mut f.catalog,
            &f.tape,
            &mut f.topo,
        )
        .unwrap_err();
        assert_eq!(
            err,
            PolicyError::PurgeRefused {
                reasons: vec![PurgeBlocker::NoReplica]
            }
        );
    }

    #[test]
    fn ineligible_purge_leaves_replica_untouched() {
        let mut f = fixture(&[], Some(true));
        let err = purge(
            &f.id,
            &"LNGS_BUFFER".into(),
            &mut f.catalog,
            &f.tape,
            &mut f.topo,
        )
        .unwrap_err();
        assert!(matches!(err, PolicyError::PurgeRefused { .. }));
        let replica = f.catalog.replica(&f.id, &"LNGS_BUFFER".into()).unwrap();
        assert_eq!(replica.state, ReplicaState::Available);
        assert_eq!(f.topo.element(&"LNGS_BUFFER".into()).unwrap().used, 1_000);
    }
}
