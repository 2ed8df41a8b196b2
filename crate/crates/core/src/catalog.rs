//! Replica catalog and transfer-rule engine: tracks raw-data replicas across
//! storage elements, turns declarative rules into transfer requests and
//! surfaces lifetime expiry candidates.
//!
//! The catalog never deletes anything itself — deletion is exclusively the
//! purge gate's job (see `policy`).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metadb::SourceCategory;
use crate::sim::{fnv1a32, RngHub, SimTime};
use crate::topology::{DatasetId, Region, RseId, RunId, StorageKind, Topology};

/// Stream name used for the uniform "random RSE in region" pick.
pub const RSE_SELECT_STREAM: &str = "rse-select";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Raw,
    Processed,
    Minitree,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub id: DatasetId,
    pub run_id: RunId,
    pub stage: Stage,
    pub size: u64,
    pub chunk_ids: Vec<String>,
    pub checksum: u32,
}

impl Dataset {
    /// Canonical raw dataset for a run: `<run_id>:raw` with one chunk id per
    /// 100-event sub-file and a deterministic 32-bit content checksum.
    pub fn raw(run_id: &RunId, size: u64, chunk_ids: Vec<String>) -> Dataset {
        let id = DatasetId::new(format!("{run_id}:raw"));
        let checksum = dataset_checksum(run_id, &chunk_ids, size, 0);
        Dataset {
            id,
            run_id: run_id.clone(),
            stage: Stage::Raw,
            size,
            chunk_ids,
            checksum,
        }
    }
}

/// FNV-1a over (run id, chunk ids, size, generation nonce). The scheme only
/// needs a fixed deterministic 32-bit function; corruption injection stores a
/// flipped value so any mismatch is detectable.
pub fn dataset_checksum(run_id: &RunId, chunk_ids: &[String], size: u64, nonce: u32) -> u32 {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(run_id.as_str().as_bytes());
    for c in chunk_ids {
        buf.push(0);
        buf.extend_from_slice(c.as_bytes());
    }
    buf.extend_from_slice(&size.to_le_bytes());
    buf.extend_from_slice(&nonce.to_le_bytes());
    fnv1a32(&buf)
}

pub const CORRUPTION_MASK: u32 = 0xDEAD_BEEF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplicaState {
    Copying,
    Available,
    Corrupt,
    Purged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replica {
    pub dataset_id: DatasetId,
    pub rse: RseId,
    pub state: ReplicaState,
    pub checksum: u32,
    pub created_at: SimTime,
    pub lifetime: Option<SimTime>,
}

/// Which datasets a rule applies to; unset fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSelector {
    pub science: Option<bool>,
    pub source: Option<SourceCategory>,
}

impl RuleSelector {
    pub fn matches(&self, science: bool, source: SourceCategory) -> bool {
        self.science.map(|s| s == science).unwrap_or(true)
            && self.source.map(|c| c == source).unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleDestination {
    Specific(RseId),
    RandomInRegion(Region),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferRule {
    pub id: String,
    pub selector: RuleSelector,
    pub destination: RuleDestination,
    pub copies: u32,
    pub lifetime: Option<SimTime>,
}

/// One transfer the rule engine wants executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferRequest {
    pub dataset_id: DatasetId,
    pub rule_id: String,
    pub src: RseId,
    pub dst: RseId,
    pub lifetime: Option<SimTime>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("DUPLICATE_DATASET: {0} is already registered")]
    DuplicateDataset(DatasetId),
    #[error("INSUFFICIENT_CAPACITY: {rse} cannot hold {need} more bytes ({free} free)")]
    InsufficientCapacity { rse: RseId, need: u64, free: u64 },
    #[error("INVALID_RULE: {0}")]
    InvalidRule(String),
    #[error("NO_SOURCE_REPLICA: {0} has no AVAILABLE replica")]
    NoSourceReplica(DatasetId),
    #[error("NO_PENDING_TRANSFER: no COPYING replica of {dataset} at {rse}")]
    NoPendingTransfer { dataset: DatasetId, rse: RseId },
    #[error("UNKNOWN_DATASET: {0}")]
    UnknownDataset(DatasetId),
}

/// Metadata the rule engine needs about a dataset's run.
#[derive(Debug, Clone, Copy)]
pub struct RunTraits {
    pub science: bool,
    pub source: SourceCategory,
}

#[derive(Default)]
pub struct Catalog {
    datasets: BTreeMap<DatasetId, Dataset>,
    replicas: BTreeMap<(DatasetId, RseId), Replica>,
    rules: Vec<TransferRule>,
    traits: BTreeMap<DatasetId, RunTraits>,
    /// Pinned RANDOM_IN_REGION choices so evaluation stays idempotent
    /// between state changes: (dataset, rule) -> chosen destination.
    pinned: BTreeMap<(DatasetId, String), RseId>,
}

impl Catalog {
    pub fn new() -> Self {
        Catalog::default()
    }

    pub fn dataset(&self, id: &DatasetId) -> Result<&Dataset, CatalogError> {
        self.datasets
            .get(id)
            .ok_or_else(|| CatalogError::UnknownDataset(id.clone()))
    }

    pub fn datasets(&self) -> impl Iterator<Item = &Dataset> {
        self.datasets.values()
    }

    pub fn rules(&self) -> &[TransferRule] {
        &self.rules
    }

    pub fn run_traits(&self, id: &DatasetId) -> Option<RunTraits> {
        self.traits.get(id).copied()
    }

    /// Register a new raw dataset with an immediately AVAILABLE replica.
    pub fn register(
        &mut self,
        dataset: Dataset,
        traits: RunTraits,
        at_rse: &RseId,
        lifetime: Option<SimTime>,
        now: SimTime,
        topo: &mut Topology,
    ) -> Result<Replica, CatalogError> {
        debug_assert_eq!(dataset.stage, Stage::Raw, "only raw data enters the catalog");
        if self.datasets.contains_key(&dataset.id) {
            return Err(CatalogError::DuplicateDataset(dataset.id));
        }
        let el = topo
            .element(at_rse)
            .map_err(|_| CatalogError::InsufficientCapacity {
                rse: at_rse.clone(),
                need: dataset.size,
                free: 0,
            })?;
        if el.free() < dataset.size {
            return Err(CatalogError::InsufficientCapacity {
                rse: at_rse.clone(),
                need: dataset.size,
                free: el.free(),
            });
        }
        topo.reserve(at_rse, dataset.size).expect("element exists");
        let replica = Replica {
            dataset_id: dataset.id.clone(),
            rse: at_rse.clone(),
            state: ReplicaState::Available,
            checksum: dataset.checksum,
            created_at: now,
            lifetime,
        };
        self.replicas
            .insert((dataset.id.clone(), at_rse.clone()), replica.clone());
        self.traits.insert(dataset.id.clone(), traits);
        self.datasets.insert(dataset.id.clone(), dataset);
        Ok(replica)
    }

    /// Store a transfer rule after validating it against the topology.
    pub fn declare_rule(
        &mut self,
        rule: TransferRule,
        topo: &Topology,
    ) -> Result<String, CatalogError> {
        if rule.copies == 0 {
            return Err(CatalogError::InvalidRule("copies must be >= 1".into()));
        }
        if let RuleDestination::Specific(rse) = &rule.destination {
            match topo.elements.get(rse) {
                Some(el) if el.kind == StorageKind::Disk => {}
                Some(el) => {
                    return Err(CatalogError::InvalidRule(format!(
                        "destination {rse} has kind {:?}, rules only target disk RSEs",
                        el.kind
                    )))
                }
                None => {
                    return Err(CatalogError::InvalidRule(format!(
                        "destination {rse} is not a declared RSE"
                    )))
                }
            }
        }
        if self.rules.iter().any(|r| r.id == rule.id) {
            return Err(CatalogError::InvalidRule(format!(
                "duplicate rule id {}",
                rule.id
            )));
        }
        let id = rule.id.clone();
        self.rules.push(rule);
        Ok(id)
    }

    pub fn clear_rules(&mut self) {
        self.rules.clear();
        self.pinned.clear();
    }

    /// Evaluate every rule against one dataset and emit transfer requests for
    /// unmet copy counts. Satisfied rules emit nothing; repeated evaluation
    /// without an intervening replica state change returns the same list.
    pub fn evaluate_rules(
        &mut self,
        dataset_id: &DatasetId,
        topo: &Topology,
        rng: &mut RngHub,
    ) -> Result<Vec<TransferRequest>, CatalogError> {
        let dataset = self
            .datasets
            .get(dataset_id)
            .ok_or_else(|| CatalogError::UnknownDataset(dataset_id.clone()))?;
        let traits = self.traits[dataset_id];
        let sources = self.source_replicas(dataset_id);
        if sources.is_empty() {
            return Err(CatalogError::NoSourceReplica(dataset_id.clone()));
        }
        let lifetime_default = None;
        let _ = lifetime_default;

        let mut requests = Vec::new();
        let rules = self.rules.clone();
        for rule in &rules {
            if !rule.selector.matches(traits.science, traits.source) {
                continue;
            }
            let missing = self.unmet_copies(dataset_id, rule, topo);
            for _ in 0..missing {
                let dst = match &rule.destination {
                    RuleDestination::Specific(rse) => rse.clone(),
                    RuleDestination::RandomInRegion(region) => {
                        let key = (dataset_id.clone(), rule.id.clone());
                        if let Some(pinned) = self.pinned.get(&key) {
                            pinned.clone()
                        } else {
                            match self.pick_in_region(dataset_id, *region, topo, rng) {
                                Some(rse) => {
                                    self.pinned.insert(key, rse.clone());
                                    rse
                                }
                                None => break, // no candidate left in region
                            }
                        }
                    }
                };
                // Source: lexicographically first AVAILABLE replica with a
                // usable link to the destination.
                let src = sources
                    .iter()
                    .find(|s| topo.link_usable(s, &dst))
                    .or_else(|| sources.first())
                    .expect("sources non-empty")
                    .clone();
                requests.push(TransferRequest {
                    dataset_id: dataset_id.clone(),
                    rule_id: rule.id.clone(),
                    src,
                    dst,
                    lifetime: rule.lifetime,
                });
                // `missing` > 1 only happens for RANDOM_IN_REGION rules with
                // copies > 1; a single pinned pick per rule round keeps the
                // engine simple, the next round pins the next destination.
                break;
            }
        }
        let _ = dataset;
        Ok(requests)
    }

    /// Copies still owed to `rule` for this dataset. AVAILABLE and COPYING
    /// replicas both count toward the demand (in-flight transfers must not
    /// be duplicated); CORRUPT and PURGED count as absent.
    fn unmet_copies(&self, dataset_id: &DatasetId, rule: &TransferRule, topo: &Topology) -> u32 {
        let have: u32 = match &rule.destination {
            RuleDestination::Specific(rse) => self
                .replica(dataset_id, rse)
                .map(|r| matches!(r.state, ReplicaState::Available | ReplicaState::Copying))
                .unwrap_or(false) as u32,
            RuleDestination::RandomInRegion(region) => topo
                .disks_in_region(*region)
                .iter()
                .filter(|el| {
                    self.replica(dataset_id, &el.id)
                        .map(|r| {
                            matches!(r.state, ReplicaState::Available | ReplicaState::Copying)
                        })
                        .unwrap_or(false)
                })
                .count() as u32,
        };
        rule.copies.saturating_sub(have)
    }

    /// Uniform pick over the region's disk RSEs not already holding a live
    /// replica, via the seeded `rse-select` stream.
    fn pick_in_region(
        &self,
        dataset_id: &DatasetId,
        region: Region,
        topo: &Topology,
        rng: &mut RngHub,
    ) -> Option<RseId> {
        let candidates: Vec<RseId> = topo
            .disks_in_region(region)
            .iter()
            .filter(|el| {
                !self
                    .replica(dataset_id, &el.id)
                    .map(|r| matches!(r.state, ReplicaState::Available | ReplicaState::Copying))
                    .unwrap_or(false)
            })
            .map(|el| el.id.clone())
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let idx = rng.draw(RSE_SELECT_STREAM, candidates.len() as u64) as usize;
        Some(candidates[idx].clone())
    }

    /// AVAILABLE replicas usable as transfer sources, sorted by RSE id.
    pub fn source_replicas(&self, dataset_id: &DatasetId) -> Vec<RseId> {
        self.replicas
            .range((dataset_id.clone(), RseId::new(""))..)
            .take_while(|((d, _), _)| d == dataset_id)
            .filter(|(_, r)| r.state == ReplicaState::Available)
            .map(|((_, rse), _)| rse.clone())
            .collect()
    }

    /// Begin a transfer: create the COPYING replica at `dst` and reserve its
    /// bytes. The caller has already picked source and checked the link.
    pub fn start_copy(
        &mut self,
        dataset_id: &DatasetId,
        dst: &RseId,
        lifetime: Option<SimTime>,
        now: SimTime,
        topo: &mut Topology,
    ) -> Result<(), CatalogError> {
        let dataset = self.dataset(dataset_id)?.clone();
        let free = topo
            .element(dst)
            .map(|el| el.free())
            .map_err(|_| CatalogError::InsufficientCapacity {
                rse: dst.clone(),
                need: dataset.size,
                free: 0,
            })?;
        if free < dataset.size {
            return Err(CatalogError::InsufficientCapacity {
                rse: dst.clone(),
                need: dataset.size,
                free,
            });
        }
        let key = (dataset_id.clone(), dst.clone());
        match self.replicas.get(&key).map(|r| r.state) {
            Some(ReplicaState::Available) | Some(ReplicaState::Copying) => {
                return Err(CatalogError::DuplicateDataset(dataset_id.clone()));
            }
            _ => {}
        }
        topo.reserve(dst, dataset.size).expect("element exists");
        self.replicas.insert(
            key,
            Replica {
                dataset_id: dataset_id.clone(),
                rse: dst.clone(),
                state: ReplicaState::Copying,
                checksum: dataset.checksum,
                created_at: now,
                lifetime,
            },
        );
        self.drop_pins(dataset_id);
        Ok(())
    }

    /// Finish a pending transfer. `checksum_ok = false` marks the replica
    /// CORRUPT, which counts as absent for rules and the safety policy.
    pub fn complete_transfer(
        &mut self,
        dataset_id: &DatasetId,
        dst: &RseId,
        checksum_ok: bool,
        topo: &mut Topology,
    ) -> Result<ReplicaState, CatalogError> {
        let canonical = self.dataset(dataset_id)?.checksum;
        let size = self.dataset(dataset_id)?.size;
        let key = (dataset_id.clone(), dst.clone());
        let replica = self
            .replicas
            .get_mut(&key)
            .filter(|r| r.state == ReplicaState::Copying)
            .ok_or_else(|| CatalogError::NoPendingTransfer {
                dataset: dataset_id.clone(),
                rse: dst.clone(),
            })?;
        if checksum_ok {
            replica.state = ReplicaState::Available;
            replica.checksum = canonical;
        } else {
            replica.state = ReplicaState::Corrupt;
            replica.checksum = canonical ^ CORRUPTION_MASK;
            // Corrupt bytes no longer count toward the element's usage.
            topo.release(dst, size).expect("element exists");
        }
        self.drop_pins(dataset_id);
        Ok(self.replicas[&key].state)
    }

    /// Replicas whose lifetime has elapsed. Deletion is not performed here;
    /// candidates are handed to the purge gate.
    pub fn expire_replicas(&self, now: SimTime) -> Vec<(DatasetId, RseId)> {
        self.replicas
            .values()
            .filter(|r| r.state == ReplicaState::Available)
            .filter(|r| r.lifetime.map(|l| r.created_at + l <= now).unwrap_or(false))
            .map(|r| (r.dataset_id.clone(), r.rse.clone()))
            .collect()
    }

    /// All non-PURGED replicas of a dataset.
    pub fn replicas_of(&self, dataset_id: &DatasetId) -> Result<Vec<&Replica>, CatalogError> {
        self.dataset(dataset_id)?;
        Ok(self
            .replicas
            .range((dataset_id.clone(), RseId::new(""))..)
            .take_while(|((d, _), _)| d == dataset_id)
            .map(|(_, r)| r)
            .filter(|r| r.state != ReplicaState::Purged)
            .collect())
    }

    pub fn replica(&self, dataset_id: &DatasetId, rse: &RseId) -> Option<&Replica> {
        self.replicas.get(&(dataset_id.clone(), rse.clone()))
    }

    /// AVAILABLE replicas of a dataset at disk RSEs, i.e. candidates that
    /// satisfy safety requirements.
    pub fn available_disk_replicas(&self, dataset_id: &DatasetId, topo: &Topology) -> Vec<RseId> {
        self.replicas
            .range((dataset_id.clone(), RseId::new(""))..)
            .take_while(|((d, _), _)| d == dataset_id)
            .filter(|(_, r)| r.state == ReplicaState::Available)
            .filter(|((_, rse), _)| {
                topo.elements
                    .get(rse)
                    .map(|el| el.kind == StorageKind::Disk)
                    .unwrap_or(false)
            })
            .map(|((_, rse), _)| rse.clone())
            .collect()
    }

    /// Mark a replica PURGED and release its bytes. Only the policy module
    /// calls this, after the gate has passed.
    pub(crate) fn mark_purged(
        &mut self,
        dataset_id: &DatasetId,
        rse: &RseId,
        topo: &mut Topology,
    ) -> Result<Replica, CatalogError> {
        let size = self.dataset(dataset_id)?.size;
        let key = (dataset_id.clone(), rse.clone());
        let replica = self
            .replicas
            .get_mut(&key)
            .ok_or_else(|| CatalogError::UnknownDataset(dataset_id.clone()))?;
        debug_assert_eq!(replica.state, ReplicaState::Available);
        replica.state = ReplicaState::Purged;
        topo.release(rse, size).expect("element exists");
        self.drop_pins(dataset_id);
        Ok(replica.clone())
    }

    /// Fault injection: mark live replicas CORRUPT (data loss), releasing
    /// their bytes. Returns the affected RSEs.
    pub fn inject_loss(
        &mut self,
        dataset_id: &DatasetId,
        only_rse: Option<&RseId>,
        topo: &mut Topology,
    ) -> Vec<RseId> {
        let size = match self.datasets.get(dataset_id) {
            Some(d) => d.size,
            None => return Vec::new(),
        };
        let mut hit = Vec::new();
        for ((d, rse), r) in self.replicas.iter_mut() {
            if d != dataset_id {
                continue;
            }
            if let Some(only) = only_rse {
                if rse != only {
                    continue;
                }
            }
            if matches!(r.state, ReplicaState::Available | ReplicaState::Copying) {
                r.state = ReplicaState::Corrupt;
                r.checksum ^= CORRUPTION_MASK;
                topo.release(rse, size).expect("element exists");
                hit.push(rse.clone());
            }
        }
        if !hit.is_empty() {
            self.drop_pins(dataset_id);
        }
        hit
    }

    /// Recreate a replica from a verified tape copy (restore path). The
    /// replica starts COPYING; the tape transfer completion flips it.
    pub fn start_restore_copy(
        &mut self,
        dataset_id: &DatasetId,
        dst: &RseId,
        now: SimTime,
        lifetime: Option<SimTime>,
        topo: &mut Topology,
    ) -> Result<(), CatalogError> {
        // A CORRUPT or PURGED replica at dst is simply overwritten.
        let key = (dataset_id.clone(), dst.clone());
        self.replicas.remove(&key);
        self.start_copy(dataset_id, dst, lifetime, now, topo)
    }

    pub fn all_replicas(&self) -> impl Iterator<Item = &Replica> {
        self.replicas.values()
    }

    fn drop_pins(&mut self, dataset_id: &DatasetId) {
        self.pinned.retain(|(d, _), _| d != dataset_id);
    }

    /// Dataset ids that currently have at least one unmet rule.
    pub fn unsatisfied_datasets(&self, topo: &Topology) -> Vec<DatasetId> {
        let mut out = BTreeSet::new();
        for (id, _) in self.datasets.iter() {
            let traits = self.traits[id];
            for rule in &self.rules {
                if rule.selector.matches(traits.science, traits.source)
                    && self.unmet_copies(id, rule, topo) > 0
                {
                    out.insert(id.clone());
                    break;
                }
            }
        }
        out.into_iter().collect()
    }
}
