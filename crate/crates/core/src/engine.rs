//! Cached TrieJoin over flat-array tries.
//!
//! The driver is iterative: one frame per variable position, no recursion.
//! Every position intersects the ranges of its participating tries with a
//! leapfrog of plain binary-search LUB probes, so the step counts line up
//! with the accelerator model in [`crate::sim`].

use std::io::{self, Write};
use std::sync::Arc;

use crate::pjr::{PjrCache, PjrConfig, PjrEntry, SlotHandle};
use crate::query::{CacheStructure, QueryPlan, TrieSet};
use crate::stats::RunStats;
use crate::trie::{ArrayRange, TrieId, VertexId};

/// Probe counters for LUB searches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LubCounters {
    pub calls: u64,
    pub reads: u64,
}

/// Lowest upper bound of `target` in `values[start..end]`: the smallest index
/// whose value is `>= target`, or `(end, None)` when there is none.
///
/// Binary search that stops early on an exact hit.
pub fn lub(values: &[VertexId], start: usize, end: usize, target: VertexId) -> (usize, Option<VertexId>) {
    lub_counted(values, start, end, target, &mut LubCounters::default())
}

pub fn lub_counted(
    values: &[VertexId],
    start: usize,
    end: usize,
    target: VertexId,
    counters: &mut LubCounters,
) -> (usize, Option<VertexId>) {
    counters.calls += 1;
    let (mut lo, mut hi) = (start, end);
    let mut at_hi = None;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        let v = values[mid];
        counters.reads += 1;
        if v == target {
            return (mid, Some(v));
        }
        if v < target {
            lo = mid + 1;
        } else {
            hi = mid;
            at_hi = Some(v);
        }
    }
    if lo < end {
        (lo, at_hi)
    } else {
        (end, None)
    }
}

/// A position inside one sorted range.
#[derive(Debug, Clone, Copy)]
pub struct Cursor<'a> {
    pub values: &'a [VertexId],
    pub pos: usize,
    pub end: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(values: &'a [VertexId], start: usize, end: usize) -> Self {
        Cursor { values, pos: start, end }
    }
}

/// Smallest value `>= seed` present in every cursor's remaining range.
///
/// Iterative LUB rounds: the current candidate is searched in the next range
/// (in cursor order) until all ranges agree or one is exhausted. Cursors are
/// left on the match.
pub fn leapfrog_next(cursors: &mut [Cursor<'_>], seed: VertexId, counters: &mut LubCounters) -> Option<VertexId> {
    let k = cursors.len();
    assert!(k > 0, "leapfrog needs at least one range");
    if cursors.iter().any(|c| c.pos >= c.end) {
        return None;
    }
    let mut target = seed;
    let mut agree = 0;
    let mut i = 0;
    loop {
        let c = &mut cursors[i];
        let (idx, v) = lub_counted(c.values, c.pos, c.end, target, counters);
        c.pos = idx;
        let v = v?;
        if v == target {
            agree += 1;
        } else {
            target = v;
            agree = 1;
        }
        if agree == k {
            return Some(target);
        }
        i = (i + 1) % k;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub found: bool,
    pub value: VertexId,
    /// One index per participant at the position, in plan order.
    pub indexes: Vec<usize>,
}

/// Receives join results.
pub trait ResultSink {
    fn push(&mut self, tuple: &[VertexId]);
}

impl<F: FnMut(&[VertexId])> ResultSink for F {
    fn push(&mut self, tuple: &[VertexId]) {
        self(tuple)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CountSink(pub u64);

impl ResultSink for CountSink {
    fn push(&mut self, _: &[VertexId]) {
        self.0 += 1;
    }
}

#[derive(Debug, Default, Clone)]
pub struct VecSink(pub Vec<Vec<VertexId>>);

impl ResultSink for VecSink {
    fn push(&mut self, tuple: &[VertexId]) {
        self.0.push(tuple.to_vec());
    }
}

/// Tab-separated tuples, one per line. The first write error is kept and
/// later writes are skipped.
pub struct WriterSink<W: Write> {
    out: W,
    error: Option<io::Error>,
    line: String,
}

impl<W: Write> WriterSink<W> {
    pub fn new(out: W) -> Self {
        WriterSink {
            out,
            error: None,
            line: String::new(),
        }
    }

    pub fn finish(mut self) -> io::Result<W> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> ResultSink for WriterSink<W> {
    fn push(&mut self, tuple: &[VertexId]) {
        if self.error.is_some() {
            return;
        }
        use std::fmt::Write as _;
        self.line.clear();
        for (i, v) in tuple.iter().enumerate() {
            if i > 0 {
                self.line.push('\t');
            }
            let _ = write!(self.line, "{v}");
        }
        self.line.push('\n');
        if let Err(e) = self.out.write_all(self.line.as_bytes()) {
            self.error = Some(e);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrontierEntry {
    /// Position whose match pushed this range; `None` for level-0 roots.
    pub pushed_at: Option<usize>,
    pub range: ArrayRange,
}

/// Bound prefix plus the stack of active trie ranges.
#[derive(Clone)]
pub struct JoinState<'a> {
    plan: &'a QueryPlan,
    tries: &'a TrieSet,
    pub d: usize,
    res: Vec<VertexId>,
    bound: Vec<Vec<usize>>,
    frontier: Vec<FrontierEntry>,
    active: Vec<Vec<Option<ArrayRange>>>,
    /// Child-offset array elements read while adjusting.
    pub offset_reads: u64,
}

impl<'a> JoinState<'a> {
    pub fn new(plan: &'a QueryPlan, tries: &'a TrieSet) -> Self {
        let mut frontier = Vec::with_capacity(tries.len() * 2);
        let mut active = Vec::with_capacity(tries.len());
        let mut bound = Vec::with_capacity(tries.len());
        for t in 0..tries.len() {
            let arity = tries.get(t).arity();
            let root = tries.get(t).full_range(t);
            frontier.push(FrontierEntry { pushed_at: None, range: root });
            let mut slots = vec![None; arity];
            slots[0] = Some(root);
            active.push(slots);
            bound.push(vec![usize::MAX; arity]);
        }
        JoinState {
            plan,
            tries,
            d: 0,
            res: vec![0; plan.n()],
            bound,
            frontier,
            active,
            offset_reads: 0,
        }
    }

    pub fn res(&self) -> &[VertexId] {
        &self.res
    }

    pub fn frontier(&self) -> &[FrontierEntry] {
        &self.frontier
    }

    /// Active range of a trie level, if its parent is bound.
    pub fn range(&self, trie: TrieId, level: usize) -> Option<ArrayRange> {
        self.active[trie][level]
    }

    pub fn bound_index(&self, trie: TrieId, level: usize) -> usize {
        self.bound[trie][level]
    }

    /// Binds position `d` to the match and pushes the child range of every
    /// participant whose next level belongs to a later position.
    pub fn adjust_tries(&mut self, d: usize, m: &MatchResult) {
        for (trie, level, idx) in self.bind(d, m) {
            let r = self
                .tries
                .get(trie)
                .child_range(trie, level, idx)
                .expect("matched index lies inside its level");
            self.offset_reads += 2;
            self.push_range(d, r);
        }
    }

    /// Binds position `d` without expanding children. Returns the
    /// `(trie, level, index)` of every participant whose child range is needed.
    pub fn bind(&mut self, d: usize, m: &MatchResult) -> Vec<(TrieId, usize, usize)> {
        debug_assert!(m.found);
        self.res[d] = m.value;
        let mut needs = Vec::new();
        for (p, &idx) in self.plan.participants[d].iter().zip(&m.indexes) {
            self.bound[p.trie][p.level] = idx;
            let binding = &self.plan.tries[p.trie];
            let next = p.level + 1;
            if next < binding.positions.len() && binding.positions[next] != d {
                needs.push((p.trie, p.level, idx));
            }
        }
        self.d = d + 1;
        needs
    }

    /// Makes `r` the active range of its level, owned by position `d`.
    pub fn push_range(&mut self, d: usize, r: ArrayRange) {
        self.frontier.push(FrontierEntry {
            pushed_at: Some(d),
            range: r,
        });
        self.active[r.trie][r.level] = Some(r);
    }

    /// Pops every range pushed by positions `>= to`.
    pub fn reset_tries(&mut self, to: usize) {
        while let Some(top) = self.frontier.last() {
            match top.pushed_at {
                Some(p) if p >= to => {
                    self.active[top.range.trie][top.range.level] = None;
                    self.frontier.pop();
                }
                _ => break,
            }
        }
        self.d = to;
    }
}

/// Per-position matching layout derived once from the plan.
pub(crate) struct PositionLayout {
    /// Participant slots intersected by leapfrog.
    pub(crate) primary: Vec<usize>,
    /// Participant slots checked by descending from the previous level of the
    /// same trie at the same position.
    pub(crate) chained: Vec<(usize, usize)>,
}

pub(crate) fn layouts(plan: &QueryPlan) -> Vec<PositionLayout> {
    plan.participants
        .iter()
        .map(|ps| {
            let mut primary = Vec::new();
            let mut chained = Vec::new();
            for (i, p) in ps.iter().enumerate() {
                if p.chained {
                    let parent = ps
                        .iter()
                        .position(|q| q.trie == p.trie && q.level + 1 == p.level)
                        .expect("chained level has its parent at the same position");
                    chained.push((i, parent));
                } else {
                    primary.push(i);
                }
            }
            PositionLayout { primary, chained }
        })
        .collect()
}

enum Frame {
    Scan {
        /// `(start, end)` per primary participant; start advances.
        cursors: Vec<(usize, usize)>,
        next_seed: Option<VertexId>,
        slot: Option<SlotHandle>,
    },
    Hit {
        entry: Arc<PjrEntry>,
        next: usize,
    },
    /// Position served by the hit frame at the given start.
    Covered(usize),
    Idle,
}

/// Value bounds applied to the first variable (static partitioning).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FirstBounds {
    pub lower: VertexId,
    pub upper: Option<VertexId>,
}

struct Driver<'a, 'c> {
    plan: &'a QueryPlan,
    cs: &'a CacheStructure,
    tries: &'a TrieSet,
    cache: Option<&'c mut PjrCache>,
    layouts: Vec<PositionLayout>,
    state: JoinState<'a>,
    frames: Vec<Frame>,
    lub: LubCounters,
    bounds: FirstBounds,
}

impl<'a, 'c> Driver<'a, 'c> {
    fn open_scan(&mut self, d: usize, slot: Option<SlotHandle>) {
        let ps = &self.plan.participants[d];
        let cursors = self.layouts[d]
            .primary
            .iter()
            .map(|&i| {
                let r = self.state.range(ps[i].trie, ps[i].level).expect("parent level bound");
                (r.start, r.end)
            })
            .collect();
        let seed = if d == 0 { self.bounds.lower } else { 0 };
        self.frames[d] = Frame::Scan {
            cursors,
            next_seed: Some(seed),
            slot,
        };
    }

    /// Next match at `d` from the scan frame, or `None` when exhausted.
    fn next_match(&mut self, d: usize) -> Option<MatchResult> {
        let Frame::Scan { cursors, next_seed, .. } = &mut self.frames[d] else {
            unreachable!("scan frame expected");
        };
        let ps = &self.plan.participants[d];
        let layout = &self.layouts[d];
        loop {
            let seed = (*next_seed)?;
            let mut cs: Vec<Cursor<'_>> = layout
                .primary
                .iter()
                .zip(cursors.iter())
                .map(|(&i, &(s, e))| Cursor::new(self.tries.get(ps[i].trie).values(ps[i].level), s, e))
                .collect();
            let found = leapfrog_next(&mut cs, seed, &mut self.lub);
            for (c, cur) in cursors.iter_mut().zip(&cs) {
                c.0 = cur.pos;
            }
            let Some(v) = found else {
                *next_seed = None;
                return None;
            };
            if d == 0 && self.bounds.upper.is_some_and(|u| v >= u) {
                *next_seed = None;
                return None;
            }
            *next_seed = v.checked_add(1);
            let mut indexes = vec![0; ps.len()];
            for (&i, c) in layout.primary.iter().zip(&cs) {
                indexes[i] = c.pos;
            }
            let mut ok = true;
            for &(i, parent) in &layout.chained {
                let trie = self.tries.get(ps[i].trie);
                let (s, e) = trie.children(ps[i].level - 1, indexes[parent]).expect("bound parent");
                self.state.offset_reads += 2;
                let (idx, val) = lub_counted(trie.values(ps[i].level), s, e, v, &mut self.lub);
                if val != Some(v) {
                    ok = false;
                    break;
                }
                indexes[i] = idx;
            }
            if ok {
                return Some(MatchResult {
                    found: true,
                    value: v,
                    indexes,
                });
            }
        }
    }

    fn enter(&mut self, d: usize) {
        let spec = match (&self.cache, self.cs.starting_at(d)) {
            (Some(_), Some(spec)) => spec.clone(),
            _ => {
                self.open_scan(d, None);
                return;
            }
        };
        let cache = self.cache.as_deref_mut().expect("checked");
        let key: Vec<VertexId> = spec.keys.iter().map(|&k| self.state.res()[k]).collect();
        match cache.lookup(&key) {
            Some(entry) => {
                self.frames[d] = Frame::Hit { entry, next: 0 };
                for p in d + 1..=spec.last {
                    self.frames[p] = Frame::Covered(d);
                }
            }
            None => {
                let slot = cache.begin_insert(&key, &self.state.res()[..d], spec.width()).ok();
                self.open_scan(d, slot);
            }
        }
    }

    /// Caches the complete binding of an entry when `d` is its last position.
    fn apply_caching(&mut self, d: usize) {
        let Some(spec) = self.cs.ending_at(d) else { return };
        let Frame::Scan { slot: Some(slot), .. } = self.frames[spec.first] else {
            return;
        };
        let cache = self.cache.as_deref_mut().expect("slot implies cache");
        let values = &self.state.res()[spec.first..=d];
        let mut indexes = Vec::new();
        for p in spec.values() {
            for part in &self.plan.participants[p] {
                indexes.push(self.state.bound_index(part.trie, part.level) as u32);
            }
        }
        cache.append(slot, values, &indexes);
    }

    fn close(&mut self, d: usize) {
        if let Frame::Scan { slot: Some(slot), .. } = std::mem::replace(&mut self.frames[d], Frame::Idle) {
            let cache = self.cache.as_deref_mut().expect("slot implies cache");
            cache.release(slot).expect("slot opened by this frame");
        }
        self.state.reset_tries(d);
    }

    /// Position to resume after everything at or beyond `d` is exhausted.
    fn backtrack_from(&self, d: usize) -> Option<usize> {
        let prev = d.checked_sub(1)?;
        match self.frames[prev] {
            Frame::Covered(start) => Some(start),
            _ => Some(prev),
        }
    }

    fn run(&mut self, sink: &mut dyn ResultSink, stats: &mut RunStats) {
        let n = self.plan.n();
        let mut d = 0;
        self.enter(0);
        loop {
            // advance the frame at d
            let advanced = match &mut self.frames[d] {
                Frame::Scan { .. } => match self.next_match(d) {
                    Some(m) => {
                        self.state.reset_tries(d);
                        self.state.adjust_tries(d, &m);
                        self.apply_caching(d);
                        Some(d + 1)
                    }
                    None => None,
                },
                Frame::Hit { entry, next } => {
                    if *next < entry.count() {
                        let entry = Arc::clone(entry);
                        let i = *next;
                        *next += 1;
                        self.state.reset_tries(d);
                        let (values, indexes) = entry.tuple(i);
                        let mut idx = indexes.iter();
                        for (off, &v) in values.iter().enumerate() {
                            let p = d + off;
                            let ids = self.plan.participants[p]
                                .iter()
                                .map(|_| *idx.next().expect("index per participant") as usize)
                                .collect();
                            self.state.adjust_tries(
                                p,
                                &MatchResult {
                                    found: true,
                                    value: v,
                                    indexes: ids,
                                },
                            );
                        }
                        Some(d + values.len())
                    } else {
                        None
                    }
                }
                Frame::Covered(_) | Frame::Idle => unreachable!("advance on inactive frame {d}"),
            };
            match advanced {
                Some(next) if next == n => {
                    sink.push(self.state.res());
                    stats.results_emitted += 1;
                }
                Some(next) => {
                    d = next;
                    self.enter(d);
                }
                None => {
                    self.close(d);
                    match self.backtrack_from(d) {
                        Some(p) => d = p,
                        None => break,
                    }
                }
            }
        }
    }
}

/// Runs the join, streaming results to `sink` in lexicographic order of the
/// plan's variable order. Caching is used when `cache` is given and the
/// cache structure has entries.
pub fn cached_trie_join(
    plan: &QueryPlan,
    cs: &CacheStructure,
    tries: &TrieSet,
    cache: Option<&mut PjrCache>,
    sink: &mut dyn ResultSink,
    stats: &mut RunStats,
) {
    cached_trie_join_bounded(plan, cs, tries, cache, FirstBounds::default(), sink, stats)
}

pub fn cached_trie_join_bounded(
    plan: &QueryPlan,
    cs: &CacheStructure,
    tries: &TrieSet,
    mut cache: Option<&mut PjrCache>,
    bounds: FirstBounds,
    sink: &mut dyn ResultSink,
    stats: &mut RunStats,
) {
    let before = cache.as_deref().map(|c| c.stats()).unwrap_or_default();
    let mut drv = Driver {
        plan,
        cs,
        tries,
        cache: cache.as_deref_mut(),
        layouts: layouts(plan),
        state: JoinState::new(plan, tries),
        frames: (0..plan.n()).map(|_| Frame::Idle).collect(),
        lub: LubCounters::default(),
        bounds,
    };
    let results_before = stats.results_emitted;
    if plan.n() > 0 {
        drv.run(sink, stats);
    }
    stats.lub_calls += drv.lub.calls;
    stats.element_reads += drv.lub.reads + drv.state.offset_reads;
    stats.memory_touches += drv.lub.reads + drv.state.offset_reads + (stats.results_emitted - results_before);
    if let Some(c) = cache {
        let after = c.stats();
        stats.cache_hits += after.hits - before.hits;
        stats.cache_misses += after.misses - before.misses;
        stats.cache_insertions += after.insertions - before.insertions;
        stats.cache_overflows += after.overflows - before.overflows;
        stats.cache_rejections += after.rejections - before.rejections;
        stats.intermediate_tuples += after.appended - before.appended;
    }
}

/// Splits the first variable's level-0 values into `parts` value ranges.
pub fn partition_bounds(plan: &QueryPlan, tries: &TrieSet, parts: usize) -> Vec<FirstBounds> {
    let Some(first) = plan.participants.first().and_then(|ps| ps.iter().find(|p| !p.chained)) else {
        return vec![FirstBounds::default()];
    };
    let values = tries.get(first.trie).values(0);
    let parts = parts.clamp(1, values.len().max(1));
    let cuts: Vec<usize> = (0..parts).map(|i| i * values.len() / parts).collect();
    cuts.iter()
        .enumerate()
        .map(|(i, &c)| FirstBounds {
            lower: if i == 0 { 0 } else { values[c] },
            upper: cuts.get(i + 1).map(|&n| values[n]),
        })
        .collect()
}

/// Static parallelism: `parts` independent executions over disjoint ranges of
/// the first variable, each with its own cache, outputs concatenated in
/// partition order.
pub fn partitioned_join(
    plan: &QueryPlan,
    cs: &CacheStructure,
    tries: &TrieSet,
    pjr: Option<PjrConfig>,
    parts: usize,
    sink: &mut dyn ResultSink,
    stats: &mut RunStats,
) {
    let bounds = partition_bounds(plan, tries, parts);
    let outputs: Vec<(Vec<Vec<VertexId>>, RunStats)> = std::thread::scope(|scope| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|&b| {
                scope.spawn(move || {
                    let mut cache = pjr.map(PjrCache::new);
                    let mut local = VecSink::default();
                    let mut st = RunStats::default();
                    cached_trie_join_bounded(plan, cs, tries, cache.as_mut(), b, &mut local, &mut st);
                    (local.0, st)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("partition thread")).collect()
    });
    for (rows, st) in outputs {
        for r in &rows {
            sink.push(r);
        }
        stats.merge(&st);
    }
}
