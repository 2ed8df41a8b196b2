//! Processing orchestration: chunking, locality-based site selection, the
//! spliced DAG (all chunk jobs in parallel behind one merge barrier) with
//! automatic retry, merging, and minitree production.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::sim::SimTime;
use crate::topology::{DatasetId, Pool, RseId, RunId, SiteId, Topology};

/// RNG stream used for per-attempt job failure draws.
pub const JOB_FAIL_STREAM: &str = "job-fail";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("NO_REPLICA: {0} has no AVAILABLE replica at any site-attached RSE")]
    NoReplica(DatasetId),
    #[error("EMPTY_DATASET: {0} has no chunks")]
    EmptyDataset(DatasetId),
    #[error("MISSING_CHUNK_OUTPUT: {have} of {need} chunk outputs present")]
    MissingChunkOutput { have: usize, need: usize },
    #[error("NOT_PROCESSED: {0} has no processed copy at RCC")]
    NotProcessed(RunId),
    #[error("DAG_FAILED: chunks {0:?} exhausted their retries")]
    DagFailed(Vec<String>),
}

/// Exact rational scale factor, so size bookkeeping stays in integers.
/// Parsed from decimal notation ("0.1" -> 1/10).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Ratio {
        assert!(den > 0);
        Ratio { num, den }
    }

    /// floor(x * num / den) in 128-bit intermediate arithmetic.
    pub fn apply(&self, x: u64) -> u64 {
        ((x as u128 * self.num as u128) / self.den as u128) as u64
    }

    pub fn parse(s: &str) -> Result<Ratio, String> {
        let s = s.trim();
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(format!("invalid ratio {s:?}"));
        }
        let int: u64 = if int_part.is_empty() {
            0
        } else {
            int_part
                .parse()
                .map_err(|_| format!("invalid ratio {s:?}"))?
        };
        if frac_part.len() > 18 {
            return Err(format!("ratio {s:?} has too many decimal places"));
        }
        let mut den: u64 = 1;
        let mut num: u64 = int;
        for c in frac_part.chars() {
            let d = c.to_digit(10).ok_or_else(|| format!("invalid ratio {s:?}"))? as u64;
            den = den.checked_mul(10).ok_or("ratio denominator overflow")?;
            num = num
                .checked_mul(10)
                .and_then(|n| n.checked_add(d))
                .ok_or("ratio numerator overflow")?;
        }
        Ok(Ratio { num, den })
    }
}

impl TryFrom<String> for Ratio {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Ratio::parse(&s)
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        format!("{}/{}", r.num, r.den)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub dataset_id: DatasetId,
    pub index: u64,
    /// Event range [start, end).
    pub event_range: (u64, u64),
    pub size: u64,
}

pub fn chunk_id(dataset_id: &DatasetId, index: u64) -> String {
    format!("{dataset_id}:c{index:04}")
}

/// Split a run's events into contiguous chunks of `chunk_size` events (the
/// last chunk takes the remainder) with byte sizes proportional to event
/// counts; sizes always sum exactly to `total_size`.
pub fn chunk_run(
    dataset_id: &DatasetId,
    event_count: u64,
    total_size: u64,
    chunk_size: u64,
) -> Vec<Chunk> {
    assert!(chunk_size >= 1);
    if event_count == 0 {
        return Vec::new();
    }
    let n = event_count.div_ceil(chunk_size);
    let mut chunks = Vec::with_capacity(n as usize);
    let mut allocated = 0u64;
    for i in 0..n {
        let start = i * chunk_size;
        let end = (start + chunk_size).min(event_count);
        let size = if i == n - 1 {
            total_size - allocated
        } else {
            // proportional share, floor; remainder lands in the last chunk
            ((total_size as u128 * (end - start) as u128) / event_count as u128) as u64
        };
        allocated += size;
        chunks.push(Chunk {
            id: chunk_id(dataset_id, i),
            dataset_id: dataset_id.clone(),
            index: i,
            event_range: (start, end),
            size,
        });
    }
    chunks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
pub struct ChunkJob {
    pub chunk: Chunk,
    pub attempts: u32,
    pub state: JobState,
}

/// One spliced DAG: N parallel chunk jobs joined by a single merge barrier.
#[derive(Debug, Clone)]
pub struct ProcessingDag {
    pub dataset_id: DatasetId,
    pub chunk_jobs: Vec<ChunkJob>,
    pub merge_state: JobState,
    pub site: SiteId,
    pub max_retries: u32,
}

impl ProcessingDag {
    pub fn node_count(&self) -> usize {
        self.chunk_jobs.len() + 1
    }

    pub fn merge_in_degree(&self) -> usize {
        self.chunk_jobs.len()
    }
}

pub fn build_dag(
    dataset_id: &DatasetId,
    chunks: Vec<Chunk>,
    site: SiteId,
    max_retries: u32,
) -> Result<ProcessingDag, PipelineError> {
    if chunks.is_empty() {
        return Err(PipelineError::EmptyDataset(dataset_id.clone()));
    }
    Ok(ProcessingDag {
        dataset_id: dataset_id.clone(),
        chunk_jobs: chunks
            .into_iter()
            .map(|chunk| ChunkJob {
                chunk,
                attempts: 0,
                state: JobState::Pending,
            })
            .collect(),
        merge_state: JobState::Pending,
        site,
        max_retries,
    })
}

/// Pick the compute site for a dataset: an OSG site whose attached RSE holds
/// an AVAILABLE replica wins over an EGI one; ties break by lowest queued
/// load, then lexicographic site id.
pub fn select_site(
    dataset_id: &DatasetId,
    catalog: &Catalog,
    topo: &Topology,
    load: &BTreeMap<SiteId, u64>,
) -> Result<SiteId, PipelineError> {
    let holding = catalog.available_disk_replicas(dataset_id, topo);
    for pool in [Pool::Osg, Pool::Egi] {
        let mut best: Option<(u64, &SiteId)> = None;
        for site in topo.sites.values() {
            if site.pool != pool || !holding.contains(&site.attached_rse) {
                continue;
            }
            let l = load.get(&site.id).copied().unwrap_or(0);
            match best {
                Some((bl, bid)) if (bl, bid.as_str()) <= (l, site.id.as_str()) => {}
                _ => best = Some((l, &site.id)),
            }
        }
        if let Some((_, id)) = best {
            return Ok(id.clone());
        }
    }
    Err(PipelineError::NoReplica(dataset_id.clone()))
}

/// What the executor wants done after a job state change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DagStep {
    /// Nothing new startable yet.
    Wait,
    /// All chunk jobs done: run the merge.
    Merge,
    /// A chunk exhausted its retries; once everything is terminal the DAG
    /// fails with the listed chunk ids.
    Failed(Vec<String>),
}

/// Slot-bounded execution state of one DAG. The world (or a test driver)
/// supplies job completions and failure draws; retry bookkeeping lives here.
pub struct DagRun {
    pub dag: ProcessingDag,
    queue: VecDeque<usize>,
    pub running: u32,
    pub slots: u32,
}

impl DagRun {
    pub fn new(dag: ProcessingDag, slots: u32) -> DagRun {
        let queue = (0..dag.chunk_jobs.len()).collect();
        DagRun {
            dag,
            queue,
            running: 0,
            slots: slots.max(1),
        }
    }

    /// Start the next pending chunk job if a slot is free. Increments the
    /// job's attempt counter and returns its index.
    pub fn start_next(&mut self) -> Option<usize> {
        if self.running >= self.slots {
            return None;
        }
        let idx = self.queue.pop_front()?;
        let job = &mut self.dag.chunk_jobs[idx];
        job.state = JobState::Running;
        job.attempts += 1;
        self.running += 1;
        Some(idx)
    }

    /// Record a job result. A failed job is requeued until its attempts
    /// exceed `max_retries + 1`, then it is terminally Failed.
    pub fn on_job_result(&mut self, idx: usize, success: bool) -> DagStep {
        self.running -= 1;
        let max_attempts = self.dag.max_retries + 1;
        {
            let job = &mut self.dag.chunk_jobs[idx];
            debug_assert_eq!(job.state, JobState::Running);
            if success {
                job.state = JobState::Done;
            } else if job.attempts < max_attempts {
                job.state = JobState::Pending;
                self.queue.push_back(idx);
            } else {
                job.state = JobState::Failed;
            }
        }
        if self.all_terminal() {
            let failed: Vec<String> = self
                .dag
                .chunk_jobs
                .iter()
                .filter(|j| j.state == JobState::Failed)
                .map(|j| j.chunk.id.clone())
                .collect();
            if failed.is_empty() {
                DagStep::Merge
            } else {
                DagStep::Failed(failed)
            }
        } else {
            DagStep::Wait
        }
    }

    /// Whether a job was requeued for retry (for JOB_RETRY logging).
    pub fn will_retry(&self, idx: usize) -> bool {
        self.dag.chunk_jobs[idx].state == JobState::Pending
    }

    fn all_terminal(&self) -> bool {
        self.running == 0
            && self.queue.is_empty()
            && self
                .dag
                .chunk_jobs
                .iter()
                .all(|j| matches!(j.state, JobState::Done | JobState::Failed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProcessedLocation {
    DcacheStaging,
    Staging,
    Rcc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedDataset {
    pub dataset_id: DatasetId,
    pub size: u64,
    pub location: ProcessedLocation,
    /// The RSE the staged copy physically sits at until shipped.
    pub staging_rse: Option<RseId>,
}

/// Sum the chunk outputs into the final processed file. Outputs are indexed
/// by chunk; every chunk must have produced one.
pub fn merge(outputs: &BTreeMap<u64, u64>, chunk_count: usize) -> Result<u64, PipelineError> {
    if outputs.len() != chunk_count {
        return Err(PipelineError::MissingChunkOutput {
            have: outputs.len(),
            need: chunk_count,
        });
    }
    Ok(outputs.values().sum())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Minitree {
    pub name: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinitreeSet {
    pub run_id: RunId,
    /// Bumped on every regrowth.
    pub generation: u32,
    pub trees: Vec<Minitree>,
    pub grown_at: SimTime,
}

/// Create (or regrow) the minitree set for a processed run at RCC. Never
/// touches the catalog or the meta-database.
pub fn grow_minitrees(
    run_id: &RunId,
    categories: &[String],
    raw_size: u64,
    ratio: Ratio,
    processed_at_rcc: bool,
    previous: Option<&MinitreeSet>,
    now: SimTime,
) -> Result<MinitreeSet, PipelineError> {
    if !processed_at_rcc {
        return Err(PipelineError::NotProcessed(run_id.clone()));
    }
    Ok(MinitreeSet {
        run_id: run_id.clone(),
        generation: previous.map(|p| p.generation + 1).unwrap_or(1),
        trees: categories
            .iter()
            .map(|name| Minitree {
                name: name.clone(),
                size: ratio.apply(raw_size),
            })
            .collect(),
        grown_at: now,
    })
}
