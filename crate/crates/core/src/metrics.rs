//! Operation counters and level tracking.
//!
//! Every homomorphic operation increments exactly one counter; levels are
//! consumed only by `Mult`/`PMult`. Replaying a seeded pipeline twice yields
//! identical numbers, which is what the acceptance checks rely on.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mult,
    PMult,
    Rot,
    Refresh,
    Encode,
    Encrypt,
}

const OP_COUNT: usize = 8;

/// Concurrent-increment-safe tally of backend operations, with an optional
/// per-tag breakdown keyed by the active `counter_tag`.
#[derive(Debug, Default)]
pub struct OpCounters {
    totals: [AtomicU64; OP_COUNT],
    tags: Mutex<BTreeMap<String, [u64; OP_COUNT]>>,
}

impl OpCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bump(&self, op: Op, tag: Option<&str>) {
        self.bump_by(op, 1, tag)
    }

    pub fn bump_by(&self, op: Op, n: u64, tag: Option<&str>) {
        self.totals[op as usize].fetch_add(n, Ordering::Relaxed);
        if let Some(tag) = tag {
            let mut tags = self.tags.lock().unwrap();
            tags.entry(tag.to_string()).or_default()[op as usize] += n;
        }
    }

    /// An exact, reproducible snapshot of the current tallies.
    pub fn snapshot(&self) -> CounterSnapshot {
        let read = |op: Op| self.totals[op as usize].load(Ordering::Relaxed);
        CounterSnapshot {
            add: read(Op::Add),
            sub: read(Op::Sub),
            mult: read(Op::Mult),
            pmult: read(Op::PMult),
            rot: read(Op::Rot),
            refresh: read(Op::Refresh),
            encode: read(Op::Encode),
            encrypt: read(Op::Encrypt),
            per_tag: self
                .tags
                .lock()
                .unwrap()
                .iter()
                .map(|(k, v)| (k.clone(), TagCounts::from_array(v)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCounts {
    pub add: u64,
    pub sub: u64,
    pub mult: u64,
    pub pmult: u64,
    pub rot: u64,
    pub refresh: u64,
}

impl TagCounts {
    fn from_array(v: &[u64; OP_COUNT]) -> Self {
        TagCounts {
            add: v[Op::Add as usize],
            sub: v[Op::Sub as usize],
            mult: v[Op::Mult as usize],
            pmult: v[Op::PMult as usize],
            rot: v[Op::Rot as usize],
            refresh: v[Op::Refresh as usize],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub add: u64,
    pub sub: u64,
    pub mult: u64,
    pub pmult: u64,
    pub rot: u64,
    pub refresh: u64,
    pub encode: u64,
    pub encrypt: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_tag: BTreeMap<String, TagCounts>,
}

impl CounterSnapshot {
    /// Deltas of `after` relative to `before` (tags are dropped; use the
    /// snapshots directly when the breakdown matters).
    pub fn diff(before: &CounterSnapshot, after: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            add: after.add - before.add,
            sub: after.sub - before.sub,
            mult: after.mult - before.mult,
            pmult: after.pmult - before.pmult,
            rot: after.rot - before.rot,
            refresh: after.refresh - before.refresh,
            encode: after.encode - before.encode,
            encrypt: after.encrypt - before.encrypt,
            per_tag: BTreeMap::new(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.add == 0
            && self.sub == 0
            && self.mult == 0
            && self.pmult == 0
            && self.rot == 0
            && self.refresh == 0
            && self.encode == 0
            && self.encrypt == 0
    }
}

impl fmt::Display for CounterSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "add={} sub={} mult={} pmult={} rot={} refresh={} encode={} encrypt={}",
            self.add,
            self.sub,
            self.mult,
            self.pmult,
            self.rot,
            self.refresh,
            self.encode,
            self.encrypt
        )
    }
}

/// One measured pipeline stage: label, level consumption and counter deltas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub label: String,
    /// Multiplicative levels consumed along the deepest path through the
    /// stage (`mult + pmult` on that path).
    pub levels: u32,
    pub entry_level: u16,
    pub exit_level: u16,
    pub counters: CounterSnapshot,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl StageRecord {
    pub fn to_record_line(&self) -> String {
        serde_json::to_string(self).expect("stage record serializes")
    }
}

/// Per-stage consumed-levels ledger. Kernels append one record per stage;
/// `assert_budget` checks a stage against its expected level cost.
#[derive(Debug, Default)]
pub struct LevelTracker {
    records: Mutex<Vec<StageRecord>>,
}

impl LevelTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, record: StageRecord) {
        self.records.lock().unwrap().push(record);
    }

    pub fn records(&self) -> Vec<StageRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.records.lock().unwrap().clear();
    }

    pub fn last(&self, label: &str) -> Option<StageRecord> {
        self.records
            .lock()
            .unwrap()
            .iter()
            .rev()
            .find(|r| r.label == label)
            .cloned()
    }

    /// Passes iff the most recent record for `stage` consumed exactly
    /// `expected` levels; the failure report lists the per-op ledger.
    pub fn assert_budget(&self, stage: &str, expected: u32) -> Result<StageRecord> {
        let record = self
            .last(stage)
            .ok_or_else(|| Error::UnknownStage(stage.to_string()))?;
        if record.levels == expected {
            Ok(record)
        } else {
            Err(Error::BudgetMismatch {
                stage: stage.to_string(),
                expected,
                measured: record.levels,
                ledger: render_table(&[record]),
            })
        }
    }
}

/// Human-readable table of stage records.
pub fn render_table(records: &[StageRecord]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>6} {:>6}->{:<6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "stage", "levels", "in", "out", "add", "sub", "mult", "pmult", "rot", "wall_ms"
    ));
    for r in records {
        out.push_str(&format!(
            "{:<28} {:>6} {:>6}->{:<6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9.2}\n",
            r.label,
            r.levels,
            r.entry_level,
            r.exit_level,
            r.counters.add,
            r.counters.sub,
            r.counters.mult,
            r.counters.pmult,
            r.counters.rot,
            r.wall_ms,
        ));
    }
    out
}

/// Machine-readable line-delimited records, one JSON object per stage.
pub fn render_records(records: &[StageRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_record_line());
        out.push('\n');
    }
    out
}

/// Wall-clock helper that degrades to zero on targets without a monotonic
/// clock (wasm).
pub(crate) fn wall_ms(start: Option<std::time::Instant>) -> f64 {
    match start {
        Some(t) => t.elapsed().as_secs_f64() * 1e3,
        None => 0.0,
    }
}

pub(crate) fn now() -> Option<std::time::Instant> {
    if cfg!(target_arch = "wasm32") {
        None
    } else {
        Some(std::time::Instant::now())
    }
}

#[allow(unused)]
pub(crate) fn duration_ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_merge_and_diff() {
        let c = OpCounters::new();
        c.bump(Op::Add, Some("pcmm"));
        c.bump_by(Op::Rot, 3, Some("ccmm"));
        c.bump(Op::Mult, None);
        let snap = c.snapshot();
        assert_eq!(snap.add, 1);
        assert_eq!(snap.rot, 3);
        assert_eq!(snap.mult, 1);
        assert_eq!(snap.per_tag["pcmm"].add, 1);
        assert_eq!(snap.per_tag["ccmm"].rot, 3);

        let before = snap.clone();
        c.bump(Op::Add, None);
        let after = c.snapshot();
        let d = CounterSnapshot::diff(&before, &after);
        assert_eq!(d.add, 1);
        assert_eq!(d.rot, 0);
    }

    #[test]
    fn empty_region_diff_is_zero() {
        let c = OpCounters::new();
        let a = c.snapshot();
        let b = c.snapshot();
        assert!(CounterSnapshot::diff(&a, &b).is_zero());
    }

    #[test]
    fn budget_mismatch_reports_ledger() {
        let t = LevelTracker::new();
        t.record(StageRecord {
            label: "pcmm".into(),
            levels: 0,
            entry_level: 8,
            exit_level: 8,
            counters: CounterSnapshot::default(),
            wall_ms: 0.0,
            note: None,
        });
        assert!(t.assert_budget("pcmm", 0).is_ok());
        let err = t.assert_budget("pcmm", 1).unwrap_err();
        assert!(matches!(err, Error::BudgetMismatch { .. }));
        assert!(t.assert_budget("nope", 0).is_err());
    }

    #[test]
    fn concurrent_increments() {
        let c = std::sync::Arc::new(OpCounters::new());
        let mut handles = Vec::new();
        for _ in 0..4 {
            let c = c.clone();
            handles.push(std::thread::spawn(move || {
                for _ in 0..1000 {
                    c.bump(Op::Add, Some("t"));
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        let snap = c.snapshot();
        assert_eq!(snap.add, 4000);
        assert_eq!(snap.per_tag["t"].add, 4000);
    }
}
