//! Run counters and the stats CSV schema shared by every engine.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::pjr::PjrStats;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub cycles: u64,
    pub dram_reads: u64,
    pub dram_writes: u64,
    pub l1_hits: u64,
    pub l2_hits: u64,
    pub per_store_accesses: BTreeMap<String, u64>,
    pub results_emitted: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_insertions: u64,
    pub cache_overflows: u64,
    pub cache_rejections: u64,
    /// Tuples materialized outside the final output: cache entry values for
    /// the trie join, intermediate relations for the pairwise plan.
    pub intermediate_tuples: u64,
    /// Tuples (pairwise) or array elements (trie join) read, plus tuples written.
    pub memory_touches: u64,
    pub lub_calls: u64,
    pub element_reads: u64,
    pub threads_spawned: u64,
    pub max_live_threads: u64,
    pub weighted_energy: Option<f64>,
}

impl RunStats {
    pub fn store_access(&mut self, store: &str, n: u64) {
        *self.per_store_accesses.entry(store.to_string()).or_default() += n;
    }

    pub fn store(&self, store: &str) -> u64 {
        self.per_store_accesses.get(store).copied().unwrap_or(0)
    }

    pub fn dram_accesses(&self) -> u64 {
        self.dram_reads + self.dram_writes
    }

    pub fn absorb_pjr(&mut self, s: &PjrStats) {
        self.cache_hits += s.hits;
        self.cache_misses += s.misses;
        self.cache_insertions += s.insertions;
        self.cache_overflows += s.overflows;
        self.cache_rejections += s.rejections;
        self.intermediate_tuples += s.appended;
    }

    /// Sums counters from independent executions (static partitions).
    pub fn merge(&mut self, o: &RunStats) {
        self.cycles = self.cycles.max(o.cycles);
        self.dram_reads += o.dram_reads;
        self.dram_writes += o.dram_writes;
        self.l1_hits += o.l1_hits;
        self.l2_hits += o.l2_hits;
        for (k, v) in &o.per_store_accesses {
            *self.per_store_accesses.entry(k.clone()).or_default() += v;
        }
        self.results_emitted += o.results_emitted;
        self.cache_hits += o.cache_hits;
        self.cache_misses += o.cache_misses;
        self.cache_insertions += o.cache_insertions;
        self.cache_overflows += o.cache_overflows;
        self.cache_rejections += o.cache_rejections;
        self.intermediate_tuples += o.intermediate_tuples;
        self.memory_touches += o.memory_touches;
        self.lub_calls += o.lub_calls;
        self.element_reads += o.element_reads;
        self.threads_spawned += o.threads_spawned;
        self.max_live_threads = self.max_live_threads.max(o.max_live_threads);
        self.weighted_energy = match (self.weighted_energy, o.weighted_energy) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
    }
}

/// Column order of the stats CSV. Stable across commands and engines.
pub const CSV_HEADER: [&str; 17] = [
    "query",
    "dataset",
    "scheme",
    "threads",
    "cycles",
    "dramReads",
    "dramWrites",
    "l1Hits",
    "l2Hits",
    "cacheHits",
    "cacheMisses",
    "resultsEmitted",
    "intermediateTuples",
    "weightedEnergy",
    "engine",
    "memoryTouches",
    "lubCalls",
];

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub query: String,
    pub dataset: String,
    pub engine: String,
    /// MT scheme for simulated runs, `-` otherwise.
    pub scheme: String,
    pub threads: usize,
    pub stats: RunStats,
}

impl StatsRow {
    pub fn fields(&self) -> Vec<String> {
        let s = &self.stats;
        vec![
            self.query.clone(),
            self.dataset.clone(),
            self.scheme.clone(),
            self.threads.to_string(),
            s.cycles.to_string(),
            s.dram_reads.to_string(),
            s.dram_writes.to_string(),
            s.l1_hits.to_string(),
            s.l2_hits.to_string(),
            s.cache_hits.to_string(),
            s.cache_misses.to_string(),
            s.results_emitted.to_string(),
            s.intermediate_tuples.to_string(),
            s.weighted_energy.map(|e| format!("{e:.6}")).unwrap_or_default(),
            self.engine.clone(),
            s.memory_touches.to_string(),
            s.lub_calls.to_string(),
        ]
    }

    /// The row as one CSV line (no trailing newline).
    pub fn to_csv_line(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(self.fields()).expect("in-memory write");
        let bytes = w.into_inner().expect("in-memory flush");
        String::from_utf8(bytes).expect("utf-8").trim_end().to_string()
    }
}

pub fn write_csv(out: &mut impl Write, rows: &[StatsRow], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if header {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Appends rows to `path`, writing the header when the file is new or empty.
pub fn append_csv(path: &Path, rows: &[StatsRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    write_csv(&mut f, rows, fresh)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> StatsRow {
        StatsRow {
            query: "p(x,y) = R(x,y).".into(),
            dataset: "g".into(),
            engine: "ctj".into(),
            scheme: "-".into(),
            threads: 1,
            stats: RunStats {
                results_emitted: 3,
                ..RunStats::default()
            },
        }
    }

    #[test]
    fn fields_follow_header() {
        assert_eq!(row().fields().len(), CSV_HEADER.len());
        let line = row().to_csv_line();
        assert!(line.starts_with("\"p(x,y) = R(x,y).\",g,-,1,0,"));
        assert!(line.ends_with(",ctj,0,0"));
    }

    #[test]
    fn append_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        append_csv(&p, &[row()]).unwrap();
        append_csv(&p, &[row()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines[1], lines[2]);
    }
}
