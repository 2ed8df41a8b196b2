//! Storage elements, network links and compute sites — the static world the
//! simulation runs against, plus the outage-aware transfer time arithmetic.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(
            Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

id_newtype!(RseId);
id_newtype!(SiteId);
id_newtype!(RunId);
id_newtype!(DatasetId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Region {
    Lngs,
    Europe,
    Us,
    Nordic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StorageKind {
    Buffer,
    Disk,
    Tape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pool {
    Osg,
    Egi,
    Local,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StorageElement {
    pub id: RseId,
    pub region: Region,
    pub kind: StorageKind,
    pub capacity: u64,
    pub used: u64,
    pub available: bool,
}

impl StorageElement {
    pub fn free(&self) -> u64 {
        self.capacity.saturating_sub(self.used)
    }
}

/// A closed-open outage window `[start, end)` during which no bytes flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outage {
    pub start: SimTime,
    pub end: SimTime,
}

#[derive(Debug, Clone)]
pub struct NetworkLink {
    pub src: RseId,
    pub dst: RseId,
    /// Bytes per second; > 0.
    pub bandwidth: u64,
    pub latency: SimTime,
    /// Sorted, non-overlapping outage windows.
    pub outages: Vec<Outage>,
    /// Permanently down links block transfers entirely.
    pub down: bool,
    /// One transfer at a time per link; next transfer starts no earlier.
    pub busy_until: SimTime,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComputeSite {
    pub id: SiteId,
    pub pool: Pool,
    pub attached_rse: RseId,
    pub slots: u32,
    pub job_failure_prob: f64,
    /// Bytes of input processed per second, the job runtime model.
    pub throughput: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("BLOCKED: link {src} -> {dst} is permanently down")]
    Blocked { src: RseId, dst: RseId },
    #[error("no link declared from {src} to {dst}")]
    NoLink { src: RseId, dst: RseId },
    #[error("unknown storage element {0}")]
    UnknownRse(RseId),
}

/// Elapsed transfer time: latency + size/bandwidth, with the byte flow
/// pausing across outage windows and resuming afterwards.
///
/// Byte time uses ceiling division so every non-empty transfer costs at
/// least one second. Returns `Blocked` when the link is permanently down.
pub fn transfer_time(size: u64, link: &NetworkLink, start: SimTime) -> Result<SimTime, TopologyError> {
    Ok(transfer_completion(size, link, start)? - start)
}

/// Absolute completion time of a transfer starting at `start`.
pub fn transfer_completion(
    size: u64,
    link: &NetworkLink,
    start: SimTime,
) -> Result<SimTime, TopologyError> {
    if link.down {
        return Err(TopologyError::Blocked {
            src: link.src.clone(),
            dst: link.dst.clone(),
        });
    }
    let mut t = start + link.latency;
    let mut remaining = size.div_ceil(link.bandwidth.max(1));
    while remaining > 0 {
        // Inside an outage window: wait for it to end.
        if let Some(o) = link.outages.iter().find(|o| o.start <= t && t < o.end) {
            t = o.end;
            continue;
        }
        // Flow until the next outage begins or the payload is done.
        let next_outage = link
            .outages
            .iter()
            .map(|o| o.start)
            .filter(|&s| s > t)
            .min();
        let step = match next_outage {
            Some(s) => remaining.min(s - t),
            None => remaining,
        };
        t += step;
        remaining -= step;
    }
    Ok(t)
}

/// The static topology of one scenario, with per-element usage state.
#[derive(Default)]
pub struct Topology {
    pub elements: BTreeMap<RseId, StorageElement>,
    pub links: BTreeMap<(RseId, RseId), NetworkLink>,
    pub sites: BTreeMap<SiteId, ComputeSite>,
}

impl Topology {
    pub fn element(&self, id: &RseId) -> Result<&StorageElement, TopologyError> {
        self.elements
            .get(id)
            .ok_or_else(|| TopologyError::UnknownRse(id.clone()))
    }

    pub fn element_mut(&mut self, id: &RseId) -> Result<&mut StorageElement, TopologyError> {
        self.elements
            .get_mut(id)
            .ok_or_else(|| TopologyError::UnknownRse(id.clone()))
    }

    pub fn link(&self, src: &RseId, dst: &RseId) -> Result<&NetworkLink, TopologyError> {
        self.links
            .get(&(src.clone(), dst.clone()))
            .ok_or_else(|| TopologyError::NoLink {
                src: src.clone(),
                dst: dst.clone(),
            })
    }

    pub fn link_mut(
        &mut self,
        src: &RseId,
        dst: &RseId,
    ) -> Result<&mut NetworkLink, TopologyError> {
        self.links
            .get_mut(&(src.clone(), dst.clone()))
            .ok_or_else(|| TopologyError::NoLink {
                src: src.clone(),
                dst: dst.clone(),
            })
    }

    /// A declared, not permanently down link exists from `src` to `dst`.
    pub fn link_usable(&self, src: &RseId, dst: &RseId) -> bool {
        self.links
            .get(&(src.clone(), dst.clone()))
            .map(|l| !l.down)
            .unwrap_or(false)
    }

    /// The single BUFFER element in the LNGS region (the DAQ buffer RSE).
    pub fn lngs_buffer(&self) -> &StorageElement {
        self.elements
            .values()
            .find(|e| e.kind == StorageKind::Buffer && e.region == Region::Lngs)
            .expect("scenario validation guarantees exactly one LNGS buffer")
    }

    /// The single TAPE endpoint.
    pub fn tape_endpoint(&self) -> &StorageElement {
        self.elements
            .values()
            .find(|e| e.kind == StorageKind::Tape)
            .expect("scenario validation guarantees exactly one tape endpoint")
    }

    /// Disk RSEs of a region, sorted by id.
    pub fn disks_in_region(&self, region: Region) -> Vec<&StorageElement> {
        self.elements
            .values()
            .filter(|e| e.kind == StorageKind::Disk && e.region == region)
            .collect()
    }

    /// Reserve `size` bytes at an element; the conservation invariant keeps
    /// `used` equal to the byte total of AVAILABLE/COPYING replicas there.
    pub fn reserve(&mut self, id: &RseId, size: u64) -> Result<(), TopologyError> {
        let el = self.element_mut(id)?;
        debug_assert!(el.used + size <= el.capacity, "capacity checked by caller");
        el.used += size;
        Ok(())
    }

    pub fn release(&mut self, id: &RseId, size: u64) -> Result<(), TopologyError> {
        let el = self.element_mut(id)?;
        debug_assert!(el.used >= size, "releasing more than used at {id}");
        el.used = el.used.saturating_sub(size);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(bandwidth: u64, latency: SimTime, outages: Vec<Outage>) -> NetworkLink {
        NetworkLink {
            src: "A".into(),
            dst: "B".into(),
            bandwidth,
            latency,
            outages,
            down: false,
            busy_until: 0,
        }
    }

    #[test]
    fn zero_payload_costs_only_latency() {
        let l = link(100, 2, vec![]);
        assert_eq!(transfer_time(0, &l, 0).unwrap(), 2);
    }

    #[test]
    fn plain_division_without_outage() {
        let l = link(100_000_000, 0, vec![]);
        assert_eq!(transfer_time(1_000_000_000, &l, 0).unwrap(), 10);
    }

    #[test]
    fn outage_pauses_and_resumes() {
        // 10 s of byte flow, outage [5, 15): 5 s flow + 10 s pause + 5 s flow.
        let l = link(
            100_000_000,
            0,
            vec![Outage { start: 5, end: 15 }],
        );
        assert_eq!(transfer_completion(1_000_000_000, &l, 0).unwrap(), 20);
    }

    #[test]
    fn transfer_started_inside_outage_waits() {
        let l = link(100, 0, vec![Outage { start: 0, end: 50 }]);
        assert_eq!(transfer_completion(100, &l, 10).unwrap(), 51);
    }

    #[test]
    fn multiple_outage_windows() {
        let l = link(
            1,
            1,
            vec![Outage { start: 3, end: 5 }, Outage { start: 7, end: 9 }],
        );
        // start 0, latency -> t=1; flow 2s (t=3); pause to 5; flow 2s (t=7);
        // pause to 9; flow remaining 2s -> t=11.
        assert_eq!(transfer_completion(6, &l, 0).unwrap(), 11);
    }

    #[test]
    fn permanently_down_link_blocks() {
        let mut l = link(100, 0, vec![]);
        l.down = true;
        assert_eq!(
            transfer_time(1, &l, 0),
            Err(TopologyError::Blocked {
                src: "A".into(),
                dst: "B".into()
            })
        );
    }

    #[test]
    fn byte_time_rounds_up() {
        let l = link(1000, 0, vec![]);
        assert_eq!(transfer_time(1, &l, 0).unwrap(), 1);
        assert_eq!(transfer_time(1001, &l, 0).unwrap(), 2);
    }
}
