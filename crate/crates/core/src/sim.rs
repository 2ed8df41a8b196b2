//! Discrete-event kernel: simulated clock, event queue, seeded named RNG
//! streams and the structured event log.
//!
//! Everything else in the crate runs on top of this module. Two executions
//! with the same scenario and seed must produce bit-identical logs, so the
//! queue breaks timestamp ties FIFO by insertion order and all randomness
//! goes through named `RngHub` streams.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in whole seconds. Integer seconds avoid float drift.
pub type SimTime = u64;

pub const SECOND: SimTime = 1;
pub const MINUTE: SimTime = 60;
pub const HOUR: SimTime = 3_600;
pub const DAY: SimTime = 86_400;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("SCHEDULE_IN_PAST: cannot schedule at t={at} when now={now}")]
    ScheduleInPast { at: SimTime, now: SimTime },
}

/// Opaque handle of a scheduled event (its insertion sequence number).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EventHandle(u64);

struct Slot<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Slot<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<E> Eq for Slot<E> {}

impl<E> PartialOrd for Slot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// BinaryHeap is a max-heap; invert so the earliest (at, seq) pops first.
impl<E> Ord for Slot<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Time-ordered event queue with FIFO tie-breaking at equal timestamps.
pub struct EventQueue<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Slot<E>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedule `event` to fire at absolute time `at`.
    pub fn schedule(&mut self, at: SimTime, event: E) -> Result<EventHandle, SimError> {
        if at < self.now {
            return Err(SimError::ScheduleInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Slot { at, seq, event });
        Ok(EventHandle(seq))
    }

    /// Pop the next event with timestamp ≤ `t_end`, advancing the clock to
    /// its timestamp. Returns `None` once no such event remains; the caller
    /// is expected to finish with [`EventQueue::advance_to`].
    pub fn pop_due(&mut self, t_end: SimTime) -> Option<(SimTime, E)> {
        match self.heap.peek() {
            Some(slot) if slot.at <= t_end => {
                let slot = self.heap.pop().expect("peeked");
                debug_assert!(slot.at >= self.now, "time went backwards");
                self.now = slot.at;
                Some((slot.at, slot.event))
            }
            _ => None,
        }
    }

    /// Move the clock forward to `t` (no-op if already past it).
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }
}

/// Hub of independent, named deterministic RNG streams.
///
/// Each stream is a ChaCha12 generator keyed by (global seed, stream name),
/// so adding draws in one subsystem never perturbs the sequence seen by
/// another. Draw results depend only on (seed, stream, draw index).
pub struct RngHub {
    seed: u64,
    streams: BTreeMap<String, ChaCha12Rng>,
}

impl RngHub {
    pub fn new(seed: u64) -> Self {
        RngHub {
            seed,
            streams: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn stream(&mut self, name: &str) -> &mut ChaCha12Rng {
        if !self.streams.contains_key(name) {
            let key = stream_key(self.seed, name);
            self.streams
                .insert(name.to_string(), ChaCha12Rng::from_seed(key));
        }
        self.streams.get_mut(name).expect("just inserted")
    }

    /// Uniform draw in `[0, n)` from the named stream. `n` must be ≥ 1.
    pub fn draw(&mut self, stream: &str, n: u64) -> u64 {
        assert!(n >= 1, "draw requires n >= 1");
        if n == 1 {
            // Still consume one value so the stream advances uniformly.
            let _ = self.stream(stream).next_u64();
            return 0;
        }
        // Rejection sampling keeps the draw unbiased and independent of any
        // distribution-crate implementation details.
        let rng = self.stream(stream);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = rng.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Bernoulli draw with probability `p` from the named stream.
    pub fn draw_prob(&mut self, stream: &str, p: f64) -> bool {
        if p <= 0.0 {
            let _ = self.stream(stream).next_u64();
            return false;
        }
        if p >= 1.0 {
            let _ = self.stream(stream).next_u64();
            return true;
        }
        let x = self.stream(stream).next_u64();
        // 53-bit mantissa gives a uniform value in [0, 1).
        let u = (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        u < p
    }
}

/// Derive a 32-byte ChaCha key from the global seed and a stream name.
fn stream_key(seed: u64, name: &str) -> [u8; 32] {
    let mut state = seed ^ fnv1a64(name.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

pub fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut hash: u32 = 0x811c_9dc5;
    for &b in bytes {
        hash ^= b as u32;
        hash = hash.wrapping_mul(0x0100_0193);
    }
    hash
}

/// Structured log entry; serialized as one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLogEntry {
    pub t: SimTime,
    pub kind: EventKind,
    pub subject: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    RunTaken,
    RunOnBuffer,
    RunSkipped,
    Halt,
    Resume,
    Register,
    TransferStart,
    TransferDone,
    TransferFail,
    ArchiveStart,
    ArchiveDone,
    ArchiveFail,
    TapeVerify,
    RestoreStart,
    RestoreDone,
    JobStart,
    JobDone,
    JobFail,
    JobRetry,
    MergeDone,
    DagFailed,
    ShipStart,
    ShipDone,
    ShipFail,
    MinitreesGrown,
    Expire,
    Purge,
    PurgeRefused,
    Safe,
    InvariantViolation,
}

/// Append-only event log, emitted in non-decreasing time order.
#[derive(Default)]
pub struct EventLog {
    entries: Vec<EventLogEntry>,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog::default()
    }

    pub fn emit(&mut self, t: SimTime, kind: EventKind, subject: impl Into<String>) {
        self.emit_with(t, kind, subject, BTreeMap::new());
    }

    pub fn emit_with(
        &mut self,
        t: SimTime,
        kind: EventKind,
        subject: impl Into<String>,
        detail: BTreeMap<String, String>,
    ) {
        if let Some(last) = self.entries.last() {
            debug_assert!(t >= last.t, "log entries must be time-ordered");
        }
        self.entries.push(EventLogEntry {
            t,
            kind,
            subject: subject.into(),
            detail,
        });
    }

    pub fn entries(&self) -> &[EventLogEntry] {
        &self.entries
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &EventLogEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    /// JSON-lines rendering: fields `t`, `kind`, `subject`, `detail`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Convenience for building detail maps.
pub fn detail<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}
