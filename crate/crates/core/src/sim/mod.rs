//! Discrete-event model of the join accelerator.
//!
//! Four unit kinds exchange messages over bounded queues: Cupid (query
//! control, one per accelerator), MatchMaker (per-variable intersection),
//! LUB (sorted-array search) and Midwife (child-range expansion). Every unit
//! step costs one cycle; memory responses arrive after the latency of the
//! level that served them.
//!
//! Back-pressure is credit based: before a request leaves, the sender
//! reserves room in the receiver's request queue and in its own response
//! buffer, so responses never block. A request that cannot get its slots
//! waits in the sender's state store while the unit keeps serving others.
//! If the event queue drains while threads are still live, the run fails
//! with [`Error::Deadlock`].
//!
//! Ties between events at the same cycle are broken by
//! `(kind priority, thread id, sequence)`; see [`EventKind`]. With
//! [`SimConfig::tie_seed`] set, same-cycle order is shuffled instead.

pub mod config;
pub mod memory;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{EnergyWeights, MemGeometry, MemLatencies, MtScheme, QueueDepths, SimConfig};
pub use memory::{AccessLevel, AddressMap, MemCounters, MemoryModel, SetAssocCache};

use crate::engine::{layouts, partition_bounds, FirstBounds, JoinState, MatchResult, PositionLayout};
use crate::error::{Error, Result};
use crate::pjr::{key_hash, EntryState, PjrCache, PjrEntry, SlotHandle};
use crate::query::{CacheStructure, QueryPlan, TrieSet};
use crate::stats::RunStats;
use crate::trie::{ArrayRange, TrieId, VertexId};

pub type ThreadId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnitKind {
    Cupid,
    MatchMaker,
    Lub,
    Midwife,
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Event kinds in tie-break priority order (earlier wins within a cycle).
/// Responses drain before new requests; PJR responses come first at Cupid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    MemResp,
    PjrResp,
    LubResp,
    MidwifeResp,
    MatchResp,
    LubReq,
    MidwifeReq,
    MatchReq,
    CupidReq,
    /// A unit picks its next message.
    Wake,
}

/// Result of the LUB binary search state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LubStep {
    /// Read the element at this index and feed it back.
    Read(usize),
    Done(usize, Option<VertexId>),
}

/// One LUB search, halving the range per memory response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LubSearch {
    pub lo: usize,
    pub hi: usize,
    pub end: usize,
    pub target: VertexId,
    at_hi: Option<VertexId>,
}

impl LubSearch {
    pub fn start(start: usize, end: usize, target: VertexId) -> (Self, LubStep) {
        let s = LubSearch {
            lo: start,
            hi: end,
            end,
            target,
            at_hi: None,
        };
        let step = s.next();
        (s, step)
    }

    fn mid(&self) -> usize {
        self.lo + (self.hi - self.lo) / 2
    }

    fn next(&self) -> LubStep {
        if self.lo < self.hi {
            LubStep::Read(self.mid())
        } else if self.lo < self.end {
            LubStep::Done(self.lo, self.at_hi)
        } else {
            LubStep::Done(self.end, None)
        }
    }

    /// Feeds the value read at the index of the last `Read`.
    pub fn on_value(&mut self, v: VertexId) -> LubStep {
        let mid = self.mid();
        if v == self.target {
            return LubStep::Done(mid, Some(v));
        }
        if v < self.target {
            self.lo = mid + 1;
        } else {
            self.hi = mid;
            self.at_hi = Some(v);
        }
        self.next()
    }
}

/// Returned when no thread slot is free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Denied;

/// Live-thread accounting against the configured thread count.
#[derive(Debug, Clone, Default)]
pub struct ThreadPool {
    capacity: usize,
    live: usize,
    next: ThreadId,
    pub spawned: u64,
    pub max_live: usize,
}

impl ThreadPool {
    pub fn new(capacity: usize) -> Self {
        ThreadPool {
            capacity,
            ..ThreadPool::default()
        }
    }

    pub fn spawn(&mut self) -> std::result::Result<ThreadId, Denied> {
        if self.live >= self.capacity {
            return Err(Denied);
        }
        self.live += 1;
        self.max_live = self.max_live.max(self.live);
        self.spawned += 1;
        let t = self.next;
        self.next += 1;
        Ok(t)
    }

    pub fn exit(&mut self) {
        self.live = self.live.checked_sub(1).expect("exit without live thread");
    }

    pub fn live(&self) -> usize {
        self.live
    }
}

/// Safety observations made while the cache is shared between threads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SafetyCounters {
    /// Lookups that returned an entry not yet committed. Must stay zero.
    pub uncommitted_exposures: u64,
    pub double_commits: u64,
}

/// Order-independent description of the emitted result set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResultDescriptor {
    pub count: u64,
    /// Wrapping sum of per-tuple hashes.
    pub fingerprint: u64,
    /// Emission order, when collected.
    pub tuples: Option<Vec<Vec<VertexId>>>,
}

impl ResultDescriptor {
    pub fn sorted_tuples(&self) -> Option<Vec<Vec<VertexId>>> {
        self.tuples.as_ref().map(|t| {
            let mut t = t.clone();
            t.sort_unstable();
            t
        })
    }
}

pub fn tuple_fingerprint<'t>(tuples: impl IntoIterator<Item = &'t [VertexId]>) -> u64 {
    tuples
        .into_iter()
        .fold(0u64, |acc, t| acc.wrapping_add(key_hash(t)))
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub results: ResultDescriptor,
    pub stats: RunStats,
    pub safety: SafetyCounters,
    /// `timestamp\tkind\tthread` lines when tracing.
    pub trace: Vec<String>,
}

pub const STORES: [&str; 9] = [
    "L1",
    "L2",
    "DRAM",
    "PJR",
    "CupidStateStore",
    "MatchMakerStateStore",
    "LubStateStore",
    "MidwifeStateStore",
    "QueryStore",
];

/// Runs the accelerator model to completion.
pub fn simulate(plan: &QueryPlan, cs: &CacheStructure, tries: &TrieSet, config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let mut sim = Sim::new(plan, cs, tries, config);
    sim.run()?;
    Ok(sim.finish())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Msg {
    CupidReq {
        tid: ThreadId,
    },
    MatchReq {
        tid: ThreadId,
        d: usize,
        cursors: Vec<(usize, usize)>,
        seed: VertexId,
        upper: Option<VertexId>,
    },
    LubReq {
        tid: ThreadId,
        trie: TrieId,
        level: usize,
        start: usize,
        end: usize,
        target: VertexId,
    },
    MidwifeReq {
        tid: ThreadId,
        client: UnitKind,
        /// `(trie, parent level, parent index)`
        items: Vec<(TrieId, usize, usize)>,
    },
    MemResp {
        tid: ThreadId,
        tag: usize,
    },
    LubResp {
        tid: ThreadId,
        index: usize,
        value: Option<VertexId>,
    },
    MidwifeResp {
        tid: ThreadId,
        ranges: Vec<ArrayRange>,
    },
    MatchResp {
        tid: ThreadId,
        found: Option<(VertexId, Vec<usize>)>,
        cursors: Vec<usize>,
        next_seed: Option<VertexId>,
    },
    PjrResp {
        tid: ThreadId,
    },
}

impl Msg {
    fn kind(&self) -> EventKind {
        match self {
            Msg::CupidReq { .. } => EventKind::CupidReq,
            Msg::MatchReq { .. } => EventKind::MatchReq,
            Msg::LubReq { .. } => EventKind::LubReq,
            Msg::MidwifeReq { .. } => EventKind::MidwifeReq,
            Msg::MemResp { .. } => EventKind::MemResp,
            Msg::LubResp { .. } => EventKind::LubResp,
            Msg::MidwifeResp { .. } => EventKind::MidwifeResp,
            Msg::MatchResp { .. } => EventKind::MatchResp,
            Msg::PjrResp { .. } => EventKind::PjrResp,
        }
    }

    fn tid(&self) -> ThreadId {
        match *self {
            Msg::CupidReq { tid }
            | Msg::MatchReq { tid, .. }
            | Msg::LubReq { tid, .. }
            | Msg::MidwifeReq { tid, .. }
            | Msg::MemResp { tid, .. }
            | Msg::LubResp { tid, .. }
            | Msg::MidwifeResp { tid, .. }
            | Msg::MatchResp { tid, .. }
            | Msg::PjrResp { tid } => tid,
        }
    }

    /// Queue and buffer slots the message occupies (one per range).
    fn weight(&self) -> usize {
        match self {
            Msg::MidwifeReq { items, .. } => items.len(),
            Msg::MidwifeResp { ranges, .. } => ranges.len(),
            _ => 1,
        }
    }
}

/// Response buffer classes held by requesters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Credit {
    Match = 0,
    Lub = 1,
    Midwife = 2,
    Pjr = 3,
}

impl Credit {
    fn of_target(kind: UnitKind) -> Credit {
        match kind {
            UnitKind::MatchMaker => Credit::Match,
            UnitKind::Lub => Credit::Lub,
            UnitKind::Midwife => Credit::Midwife,
            UnitKind::Cupid => unreachable!("nothing requests Cupid"),
        }
    }

    fn of_response(msg: &Msg) -> Option<Credit> {
        match msg {
            Msg::MatchResp { .. } => Some(Credit::Match),
            Msg::LubResp { .. } => Some(Credit::Lub),
            Msg::MidwifeResp { .. } => Some(Credit::Midwife),
            Msg::PjrResp { .. } => Some(Credit::Pjr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
enum Outgoing {
    Unit(UnitKind, Msg),
    Pjr {
        tid: ThreadId,
        key: Vec<VertexId>,
        path: Vec<VertexId>,
        width: usize,
    },
}

struct Unit {
    kind: UnitKind,
    inbox: BTreeMap<(EventKind, u64), Msg>,
    busy_until: u64,
    wake_pending: bool,
    /// Request slots queued or in flight towards this unit.
    reserved: usize,
    depth: usize,
    pending: VecDeque<Outgoing>,
    credits: [usize; 4],
    store: &'static str,
}

#[derive(Debug)]
enum Ev {
    Arrive(usize, Msg),
    Wake(usize),
}

struct Queued {
    key: (u64, u64, u64, u64),
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        self.key == o.key
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> Ordering {
        self.key.cmp(&o.key)
    }
}

#[derive(Clone)]
enum SFrame {
    Scan {
        cursors: Vec<(usize, usize)>,
        next_seed: Option<VertexId>,
        slot: Option<SlotHandle>,
    },
    Hit {
        entry: Arc<PjrEntry>,
        next: usize,
    },
    Covered(usize),
    Idle,
}

#[derive(Debug, Clone, Copy)]
enum Next {
    Enter(usize),
    Advance(usize),
    Close(usize),
    Complete,
}

#[derive(Debug, Clone, Copy)]
struct After {
    cache_at: Option<usize>,
    next_pos: usize,
    advance_at: usize,
}

#[derive(Clone)]
enum Lookup {
    Hit(Arc<PjrEntry>),
    Miss(Option<SlotHandle>),
}

#[derive(Clone)]
struct Thread<'a> {
    floor: usize,
    bounds: FirstBounds,
    js: JoinState<'a>,
    frames: Vec<SFrame>,
    resume: Option<Next>,
    after: Option<After>,
    /// Position whose MatchMaker or PJR response is awaited.
    waiting_at: usize,
}

enum MmPhase {
    Leap,
    ChainedRange(usize),
    ChainedLub(usize),
}

struct MmState {
    d: usize,
    cursors: Vec<(usize, usize)>,
    target: VertexId,
    agree: usize,
    i: usize,
    upper: Option<VertexId>,
    value: VertexId,
    next_seed: Option<VertexId>,
    indexes: Vec<usize>,
    phase: MmPhase,
}

struct LubState {
    unit: usize,
    search: LubSearch,
    trie: TrieId,
    level: usize,
}

struct MwState {
    client: UnitKind,
    items: Vec<(TrieId, usize, usize)>,
    ranges: Vec<Option<ArrayRange>>,
    remaining: usize,
}

const CUPID: usize = 0;
const MATCHMAKER: usize = 1;

struct Sim<'a> {
    plan: &'a QueryPlan,
    cs: &'a CacheStructure,
    tries: &'a TrieSet,
    cfg: &'a SimConfig,
    layouts: Vec<PositionLayout>,
    addr: AddressMap,
    mem: MemoryModel,
    cache: Option<PjrCache>,
    pjr_bank_free: Vec<u64>,
    pjr_results: HashMap<ThreadId, Lookup>,
    units: Vec<Unit>,
    heap: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    rng: Option<ChaCha8Rng>,
    now: u64,
    threads: Vec<Option<Thread<'a>>>,
    pool: ThreadPool,
    mm: HashMap<ThreadId, MmState>,
    lub: HashMap<ThreadId, LubState>,
    mw: HashMap<ThreadId, MwState>,
    wb_bytes: usize,
    wb_lines: u64,
    last_write: u64,
    done_at: Option<u64>,
    stats: RunStats,
    steps: u64,
    pjr_accesses: u64,
    store_accesses: BTreeMap<&'static str, u64>,
    results: ResultDescriptor,
    safety: SafetyCounters,
    trace: Vec<String>,
}

impl<'a> Sim<'a> {
    fn new(plan: &'a QueryPlan, cs: &'a CacheStructure, tries: &'a TrieSet, cfg: &'a SimConfig) -> Self {
        let q = &cfg.queue_depths;
        let mut units = vec![
            Unit::new(UnitKind::Cupid, usize::MAX, "CupidStateStore"),
            Unit::new(UnitKind::MatchMaker, q.matchmaker, "MatchMakerStateStore"),
        ];
        units.extend((0..cfg.lub_unit_count).map(|_| Unit::new(UnitKind::Lub, q.lub, "LubStateStore")));
        units.extend((0..cfg.midwife_unit_count).map(|_| Unit::new(UnitKind::Midwife, q.midwife, "MidwifeStateStore")));
        let cache = (cfg.pjr_enabled && !cs.is_empty()).then(|| PjrCache::new(cfg.pjr));
        Sim {
            plan,
            cs,
            tries,
            cfg,
            layouts: layouts(plan),
            addr: AddressMap::new(tries, cfg.cache_line_bytes),
            mem: MemoryModel::new(&cfg.mem_geometry, cfg.mem_latencies, cfg.cache_line_bytes),
            cache,
            pjr_bank_free: vec![0; cfg.pjr.bank_count],
            pjr_results: HashMap::new(),
            units,
            heap: BinaryHeap::new(),
            seq: 0,
            rng: cfg.tie_seed.map(ChaCha8Rng::seed_from_u64),
            now: 0,
            threads: Vec::new(),
            pool: ThreadPool::new(cfg.thread_count),
            mm: HashMap::new(),
            lub: HashMap::new(),
            mw: HashMap::new(),
            wb_bytes: 0,
            wb_lines: 0,
            last_write: 0,
            done_at: None,
            stats: RunStats::default(),
            steps: 0,
            pjr_accesses: 0,
            store_accesses: BTreeMap::new(),
            results: ResultDescriptor {
                tuples: cfg.collect_results.then(Vec::new),
                ..ResultDescriptor::default()
            },
            safety: SafetyCounters::default(),
            trace: Vec::new(),
        }
    }

    // -- event plumbing ----------------------------------------------------

    fn push(&mut self, time: u64, kind: EventKind, tid: ThreadId, ev: Ev) {
        self.seq += 1;
        let key = match &mut self.rng {
            Some(rng) => (time, rng.gen::<u64>(), 0, self.seq),
            None => (time, kind as u64, tid as u64, self.seq),
        };
        self.heap.push(Reverse(Queued { key, ev }));
    }

    fn deliver(&mut self, unit: usize, msg: Msg, at: u64) {
        let (kind, tid) = (msg.kind(), msg.tid());
        self.push(at, kind, tid, Ev::Arrive(unit, msg));
    }

    fn schedule_wake(&mut self, unit: usize) {
        let u = &mut self.units[unit];
        if u.wake_pending {
            return;
        }
        u.wake_pending = true;
        let at = self.now.max(u.busy_until);
        self.push(at, EventKind::Wake, 0, Ev::Wake(unit));
    }

    fn trace(&mut self, kind: &str, tid: ThreadId) {
        if self.cfg.trace {
            self.trace.push(format!("{}\t{}\t{}", self.now, kind, tid));
        }
    }

    fn store(&mut self, name: &'static str) {
        *self.store_accesses.entry(name).or_default() += 1;
    }

    fn run(&mut self) -> Result<()> {
        self.start_threads();
        while let Some(Reverse(Queued { key, ev })) = self.heap.pop() {
            self.now = key.0;
            match ev {
                Ev::Arrive(unit, msg) => {
                    let kind = msg.kind();
                    self.trace(&format!("{kind:?}"), msg.tid());
                    self.seq += 1;
                    self.units[unit].inbox.insert((kind, self.seq), msg);
                    self.schedule_wake(unit);
                }
                Ev::Wake(unit) => self.wake(unit),
            }
        }
        if self.pool.live() > 0 {
            return Err(self.deadlock());
        }
        Ok(())
    }

    fn deadlock(&self) -> Error {
        let mut blocked = Vec::new();
        for u in &self.units {
            if let Some(head) = u.pending.front() {
                let (target, need) = match head {
                    Outgoing::Unit(k, m) => (k.to_string(), m.weight()),
                    Outgoing::Pjr { .. } => ("PJR".to_string(), 1),
                };
                blocked.push(format!(
                    "{} -> {} -> {} ({} queued request(s); head needs {} slot(s), request queue depth {}, response buffer depth {})",
                    u.kind,
                    target,
                    u.kind,
                    u.pending.len(),
                    need,
                    match head {
                        Outgoing::Unit(k, _) => self.depth_of(*k).to_string(),
                        Outgoing::Pjr { .. } => "-".into(),
                    },
                    match head {
                        Outgoing::Unit(k, _) => self.credit_cap(u.kind, Credit::of_target(*k)),
                        Outgoing::Pjr { .. } => self.credit_cap(u.kind, Credit::Pjr),
                    }
                ));
            }
        }
        let detail = if blocked.is_empty() {
            format!("{} live thread(s) but no pending work", self.pool.live())
        } else {
            format!("{} live thread(s) blocked: {}", self.pool.live(), blocked.join("; "))
        };
        Error::Deadlock { cycle: self.now, detail }
    }

    fn depth_of(&self, kind: UnitKind) -> usize {
        let q = &self.cfg.queue_depths;
        match kind {
            UnitKind::MatchMaker => q.matchmaker,
            UnitKind::Lub => q.lub,
            UnitKind::Midwife => q.midwife,
            UnitKind::Cupid => usize::MAX,
        }
    }

    fn credit_cap(&self, _holder: UnitKind, c: Credit) -> usize {
        let q = &self.cfg.queue_depths;
        match c {
            Credit::Match => q.match_responses,
            Credit::Lub => q.lub_responses,
            Credit::Midwife => q.midwife_responses,
            Credit::Pjr => q.pjr_responses,
        }
    }

    /// Queues an outgoing request and sends whatever fits.
    fn send(&mut self, from: usize, out: Outgoing) {
        self.units[from].pending.push_back(out);
        self.flush(from);
    }

    fn flush(&mut self, from: usize) {
        while let Some(head) = self.units[from].pending.front() {
            let holder = self.units[from].kind;
            match head {
                Outgoing::Unit(kind, msg) => {
                    let (kind, w) = (*kind, msg.weight());
                    let c = Credit::of_target(kind);
                    if self.units[from].credits[c as usize] + w > self.credit_cap(holder, c) {
                        break;
                    }
                    let target = (0..self.units.len())
                        .filter(|&i| self.units[i].kind == kind && self.units[i].depth - self.units[i].reserved >= w)
                        .min_by_key(|&i| self.units[i].reserved);
                    let Some(target) = target else { break };
                    let Some(Outgoing::Unit(_, msg)) = self.units[from].pending.pop_front() else {
                        unreachable!()
                    };
                    self.units[from].credits[c as usize] += w;
                    self.units[target].reserved += w;
                    self.deliver(target, msg, self.now + 1);
                }
                Outgoing::Pjr { .. } => {
                    if self.units[from].credits[Credit::Pjr as usize] + 1 > self.credit_cap(holder, Credit::Pjr) {
                        break;
                    }
                    let Some(Outgoing::Pjr { tid, key, path, width }) = self.units[from].pending.pop_front() else {
                        unreachable!()
                    };
                    self.units[from].credits[Credit::Pjr as usize] += 1;
                    self.pjr_lookup(tid, &key, &path, width);
                }
            }
        }
    }

    fn flush_all(&mut self) {
        for u in 0..self.units.len() {
            if !self.units[u].pending.is_empty() {
                self.flush(u);
            }
        }
    }

    fn wake(&mut self, unit: usize) {
        self.units[unit].wake_pending = false;
        if self.now < self.units[unit].busy_until {
            self.schedule_wake(unit);
            return;
        }
        let Some((_, msg)) = self.units[unit].inbox.pop_first() else {
            return;
        };
        if let Some(c) = Credit::of_response(&msg) {
            self.units[unit].credits[c as usize] -= msg.weight();
            self.flush(unit);
        }
        if matches!(msg.kind(), EventKind::MatchReq | EventKind::LubReq | EventKind::MidwifeReq) {
            self.units[unit].reserved -= msg.weight();
            self.flush_all();
        }
        self.units[unit].busy_until = self.now + 1;
        self.steps += 1;
        let store = self.units[unit].store;
        self.store(store);
        match self.units[unit].kind {
            UnitKind::Cupid => self.cupid(msg),
            UnitKind::MatchMaker => self.matchmaker(msg),
            UnitKind::Lub => self.lub_unit(unit, msg),
            UnitKind::Midwife => self.midwife(unit, msg),
        }
        if !self.units[unit].inbox.is_empty() {
            self.schedule_wake(unit);
        }
    }

    fn mem_read(&mut self, unit: usize, tid: ThreadId, tag: usize, addr: u64, issue: u64) {
        self.trace("MemRead", tid);
        let (ready, _) = self.mem.read(issue, addr);
        self.deliver(unit, Msg::MemResp { tid, tag }, ready);
    }

    // -- LUB -----------------------------------------------------------------

    fn lub_unit(&mut self, unit: usize, msg: Msg) {
        match msg {
            Msg::LubReq {
                tid,
                trie,
                level,
                start,
                end,
                target,
            } => {
                self.stats.lub_calls += 1;
                let (search, step) = LubSearch::start(start, end, target);
                self.lub.insert(
                    tid,
                    LubState {
                        unit,
                        search,
                        trie,
                        level,
                    },
                );
                self.lub_continue(tid, step);
            }
            Msg::MemResp { tid, .. } => {
                let st = self.lub.get_mut(&tid).expect("saved LUB state");
                let idx = st.search.lo + (st.search.hi - st.search.lo) / 2;
                let v = self.tries.get(st.trie).values(st.level)[idx];
                let step = st.search.on_value(v);
                self.lub_continue(tid, step);
            }
            other => panic!("LUB unit got {other:?}"),
        }
    }

    fn lub_continue(&mut self, tid: ThreadId, step: LubStep) {
        match step {
            LubStep::Read(i) => {
                self.stats.element_reads += 1;
                let st = &self.lub[&tid];
                let (unit, addr) = (st.unit, self.addr.value_addr(st.trie, st.level, i));
                self.mem_read(unit, tid, 0, addr, self.now + 1);
            }
            LubStep::Done(index, value) => {
                self.lub.remove(&tid);
                self.deliver(MATCHMAKER, Msg::LubResp { tid, index, value }, self.now + 1);
            }
        }
    }

    // -- Midwife -------------------------------------------------------------

    fn midwife(&mut self, unit: usize, msg: Msg) {
        match msg {
            Msg::MidwifeReq { tid, client, items } => {
                let k = items.len();
                for (j, &(trie, level, parent)) in items.iter().enumerate() {
                    self.stats.element_reads += 2;
                    let addr = self.addr.offset_addr(trie, level, parent);
                    self.mem_read(unit, tid, j, addr, self.now + 1 + j as u64);
                }
                self.units[unit].busy_until = self.now + k.max(1) as u64;
                self.mw.insert(
                    tid,
                    MwState {
                        client,
                        items,
                        ranges: vec![None; k],
                        remaining: k,
                    },
                );
            }
            Msg::MemResp { tid, tag } => {
                let st = self.mw.get_mut(&tid).expect("saved Midwife state");
                let (trie, level, parent) = st.items[tag];
                let r = self
                    .tries
                    .get(trie)
                    .child_range(trie, level, parent)
                    .expect("parent index inside its level");
                st.ranges[tag] = Some(r);
                st.remaining -= 1;
                if st.remaining == 0 {
                    let st = self.mw.remove(&tid).expect("present");
                    let ranges = st.ranges.into_iter().map(|r| r.expect("all ranges read")).collect();
                    let to = match st.client {
                        UnitKind::Cupid => CUPID,
                        _ => MATCHMAKER,
                    };
                    self.deliver(to, Msg::MidwifeResp { tid, ranges }, self.now + 1);
                }
            }
            other => panic!("Midwife unit got {other:?}"),
        }
    }

    // -- MatchMaker ----------------------------------------------------------

    fn matchmaker(&mut self, msg: Msg) {
        self.store("QueryStore");
        match msg {
            Msg::MatchReq {
                tid,
                d,
                cursors,
                seed,
                upper,
            } => {
                let parts = self.plan.participants[d].len();
                self.mm.insert(
                    tid,
                    MmState {
                        d,
                        cursors,
                        target: seed,
                        agree: 0,
                        i: 0,
                        upper,
                        value: 0,
                        next_seed: Some(seed),
                        indexes: vec![0; parts],
                        phase: MmPhase::Leap,
                    },
                );
                self.mm_probe(tid);
            }
            Msg::LubResp { tid, index, value } => {
                let st = self.mm.get_mut(&tid).expect("saved MatchMaker state");
                let layout = &self.layouts[st.d];
                match st.phase {
                    MmPhase::Leap => {
                        st.cursors[st.i].0 = index;
                        let Some(v) = value else {
                            st.next_seed = None;
                            return self.mm_respond(tid, false);
                        };
                        if v == st.target {
                            st.agree += 1;
                        } else {
                            st.target = v;
                            st.agree = 1;
                        }
                        let k = st.cursors.len();
                        if st.agree < k {
                            st.i = (st.i + 1) % k;
                            return self.mm_probe(tid);
                        }
                        if st.d == 0 && st.upper.is_some_and(|u| v >= u) {
                            st.next_seed = None;
                            return self.mm_respond(tid, false);
                        }
                        st.value = v;
                        st.next_seed = v.checked_add(1);
                        for (j, &p) in layout.primary.iter().enumerate() {
                            st.indexes[p] = st.cursors[j].0;
                        }
                        if layout.chained.is_empty() {
                            self.mm_respond(tid, true);
                        } else {
                            st.phase = MmPhase::ChainedRange(0);
                            self.mm_chained_range(tid);
                        }
                    }
                    MmPhase::ChainedLub(ci) => {
                        if value == Some(st.value) {
                            st.indexes[layout.chained[ci].0] = index;
                            if ci + 1 < layout.chained.len() {
                                st.phase = MmPhase::ChainedRange(ci + 1);
                                self.mm_chained_range(tid);
                            } else {
                                self.mm_respond(tid, true);
                            }
                        } else if let Some(s) = st.next_seed {
                            st.target = s;
                            st.agree = 0;
                            st.i = 0;
                            st.phase = MmPhase::Leap;
                            self.mm_probe(tid);
                        } else {
                            self.mm_respond(tid, false);
                        }
                    }
                    MmPhase::ChainedRange(_) => panic!("LUB response while waiting for a range"),
                }
            }
            Msg::MidwifeResp { tid, ranges } => {
                let st = self.mm.get_mut(&tid).expect("saved MatchMaker state");
                let MmPhase::ChainedRange(ci) = st.phase else {
                    panic!("unexpected range response");
                };
                let p = self.plan.participants[st.d][self.layouts[st.d].chained[ci].0];
                let r = ranges[0];
                st.phase = MmPhase::ChainedLub(ci);
                let req = Msg::LubReq {
                    tid,
                    trie: p.trie,
                    level: p.level,
                    start: r.start,
                    end: r.end,
                    target: st.value,
                };
                self.send(MATCHMAKER, Outgoing::Unit(UnitKind::Lub, req));
            }
            other => panic!("MatchMaker got {other:?}"),
        }
    }

    fn mm_probe(&mut self, tid: ThreadId) {
        let st = &self.mm[&tid];
        let p = self.plan.participants[st.d][self.layouts[st.d].primary[st.i]];
        let (start, end) = st.cursors[st.i];
        let req = Msg::LubReq {
            tid,
            trie: p.trie,
            level: p.level,
            start,
            end,
            target: st.target,
        };
        self.send(MATCHMAKER, Outgoing::Unit(UnitKind::Lub, req));
    }

    fn mm_chained_range(&mut self, tid: ThreadId) {
        let st = &self.mm[&tid];
        let MmPhase::ChainedRange(ci) = st.phase else { unreachable!() };
        let (i, parent) = self.layouts[st.d].chained[ci];
        let p = self.plan.participants[st.d][i];
        let req = Msg::MidwifeReq {
            tid,
            client: UnitKind::MatchMaker,
            items: vec![(p.trie, p.level - 1, st.indexes[parent])],
        };
        self.send(MATCHMAKER, Outgoing::Unit(UnitKind::Midwife, req));
    }

    fn mm_respond(&mut self, tid: ThreadId, found: bool) {
        let st = self.mm.remove(&tid).expect("saved MatchMaker state");
        let msg = Msg::MatchResp {
            tid,
            found: found.then_some((st.value, st.indexes)),
            cursors: st.cursors.iter().map(|c| c.0).collect(),
            next_seed: st.next_seed,
        };
        self.deliver(CUPID, msg, self.now + 1);
    }

    // -- PJR -------------------------------------------------------------------

    /// Bank-timed PJR access; returns the cycle the access completes.
    fn pjr_access(&mut self, key: &[VertexId]) -> u64 {
        self.pjr_accesses += 1;
        let bank = self.cache.as_ref().expect("cache enabled").bank_of(key);
        let t = (self.now + 1).max(self.pjr_bank_free[bank]);
        self.pjr_bank_free[bank] = t + 1;
        t + 1
    }

    fn pjr_lookup(&mut self, tid: ThreadId, key: &[VertexId], path: &[VertexId], width: usize) {
        let done = self.pjr_access(key);
        let cache = self.cache.as_mut().expect("cache enabled");
        let outcome = match cache.lookup(key) {
            Some(e) => {
                if e.state() != EntryState::Committed {
                    self.safety.uncommitted_exposures += 1;
                }
                Lookup::Hit(e)
            }
            None => Lookup::Miss(cache.begin_insert(key, path, width).ok()),
        };
        self.pjr_results.insert(tid, outcome);
        self.trace("PjrReq", tid);
        self.deliver(CUPID, Msg::PjrResp { tid }, done);
    }

    // -- Cupid -----------------------------------------------------------------

    fn start_threads(&mut self) {
        let seeds = if self.plan.n() == 0 {
            Vec::new()
        } else {
            partition_bounds(self.plan, self.tries, self.cfg.seed_count())
        };
        for bounds in seeds {
            let tid = self.pool.spawn().expect("seed count within thread count");
            let th = Thread {
                floor: 0,
                bounds,
                js: JoinState::new(self.plan, self.tries),
                frames: (0..self.plan.n()).map(|_| SFrame::Idle).collect(),
                resume: Some(Next::Enter(0)),
                after: None,
                waiting_at: 0,
            };
            self.put_thread(tid, th);
            self.deliver(CUPID, Msg::CupidReq { tid }, 0);
        }
        if self.pool.live() == 0 {
            self.finalize();
        }
    }

    fn put_thread(&mut self, tid: ThreadId, th: Thread<'a>) {
        if self.threads.len() <= tid {
            self.threads.resize_with(tid + 1, || None);
        }
        self.threads[tid] = Some(th);
    }

    fn cupid(&mut self, msg: Msg) {
        self.store("QueryStore");
        let tid = msg.tid();
        let mut th = self.threads[tid].take().expect("live thread");
        let next = match msg {
            Msg::CupidReq { .. } => th.resume.take().expect("resume point"),
            Msg::PjrResp { .. } => {
                let d = th.waiting_at;
                match self.pjr_results.remove(&tid).expect("lookup outcome") {
                    Lookup::Hit(entry) => {
                        let last = d + entry.width() - 1;
                        th.frames[d] = SFrame::Hit { entry, next: 0 };
                        for p in d + 1..=last {
                            th.frames[p] = SFrame::Covered(d);
                        }
                    }
                    Lookup::Miss(slot) => self.open_scan(&mut th, d, slot),
                }
                Next::Advance(d)
            }
            Msg::MatchResp {
                found,
                cursors,
                next_seed,
                ..
            } => {
                let d = th.waiting_at;
                let SFrame::Scan {
                    cursors: cur,
                    next_seed: ns,
                    ..
                } = &mut th.frames[d]
                else {
                    panic!("match response without a scan frame");
                };
                for (c, p) in cur.iter_mut().zip(cursors) {
                    c.0 = p;
                }
                *ns = next_seed;
                match found {
                    None => Next::Close(d),
                    Some((value, indexes)) => {
                        self.maybe_spawn(&mut th, d);
                        let m = MatchResult {
                            found: true,
                            value,
                            indexes,
                        };
                        th.js.reset_tries(d);
                        let needs = th.js.bind(d, &m);
                        th.after = Some(After {
                            cache_at: Some(d),
                            next_pos: d + 1,
                            advance_at: d,
                        });
                        if needs.is_empty() {
                            Next::Complete
                        } else {
                            self.put_back_and_send_midwife(tid, th, needs);
                            return;
                        }
                    }
                }
            }
            Msg::MidwifeResp { ranges, .. } => {
                let mut rs: Vec<(usize, ArrayRange)> = ranges
                    .into_iter()
                    .map(|r| (self.plan.tries[r.trie].positions[r.level - 1], r))
                    .collect();
                rs.sort_by_key(|&(p, r)| (p, r.trie, r.level));
                for (p, r) in rs {
                    th.js.push_range(p, r);
                }
                Next::Complete
            }
            other => panic!("Cupid got {other:?}"),
        };
        self.drive(tid, th, next);
    }

    fn put_back_and_send_midwife(&mut self, tid: ThreadId, th: Thread<'a>, needs: Vec<(TrieId, usize, usize)>) {
        self.threads[tid] = Some(th);
        let req = Msg::MidwifeReq {
            tid,
            client: UnitKind::Cupid,
            items: needs,
        };
        self.send(CUPID, Outgoing::Unit(UnitKind::Midwife, req));
    }

    fn open_scan(&mut self, th: &mut Thread<'a>, d: usize, slot: Option<SlotHandle>) {
        let ps = &self.plan.participants[d];
        let cursors = self.layouts[d]
            .primary
            .iter()
            .map(|&i| {
                let r = th.js.range(ps[i].trie, ps[i].level).expect("parent level bound");
                (r.start, r.end)
            })
            .collect();
        let seed = if d == 0 { th.bounds.lower } else { 0 };
        th.frames[d] = SFrame::Scan {
            cursors,
            next_seed: Some(seed),
            slot,
        };
    }

    fn cache_key(&self, th: &Thread<'a>, d: usize) -> Vec<VertexId> {
        let spec = self.cs.starting_at(d).expect("entry starts here");
        spec.keys.iter().map(|&k| th.js.res()[k]).collect()
    }

    /// Runs the thread's control flow until it has to wait for a response.
    fn drive(&mut self, tid: ThreadId, mut th: Thread<'a>, mut next: Next) {
        let n = self.plan.n();
        loop {
            match next {
                Next::Enter(d) => {
                    if self.cache.is_some() && self.cs.starting_at(d).is_some() {
                        let spec = self.cs.starting_at(d).expect("checked");
                        let out = Outgoing::Pjr {
                            tid,
                            key: self.cache_key(&th, d),
                            path: th.js.res()[..d].to_vec(),
                            width: spec.width(),
                        };
                        th.waiting_at = d;
                        self.threads[tid] = Some(th);
                        self.send(CUPID, out);
                        return;
                    }
                    self.open_scan(&mut th, d, None);
                    next = Next::Advance(d);
                }
                Next::Advance(d) => {
                    if d < th.floor {
                        return self.terminate(tid, th);
                    }
                    match &mut th.frames[d] {
                        SFrame::Scan { next_seed: None, .. } => next = Next::Close(d),
                        SFrame::Scan {
                            cursors,
                            next_seed: Some(seed),
                            ..
                        } => {
                            let req = Msg::MatchReq {
                                tid,
                                d,
                                cursors: cursors.clone(),
                                seed: *seed,
                                upper: if d == 0 { th.bounds.upper } else { None },
                            };
                            th.waiting_at = d;
                            self.threads[tid] = Some(th);
                            self.send(CUPID, Outgoing::Unit(UnitKind::MatchMaker, req));
                            return;
                        }
                        SFrame::Hit { entry, next: i } if *i < entry.count() => {
                            let entry = Arc::clone(entry);
                            let k = *i;
                            *i += 1;
                            th.js.reset_tries(d);
                            let (values, indexes) = entry.tuple(k);
                            let mut idx = indexes.iter();
                            let mut needs = Vec::new();
                            for (off, &v) in values.iter().enumerate() {
                                let p = d + off;
                                let ids = self.plan.participants[p]
                                    .iter()
                                    .map(|_| *idx.next().expect("index per participant") as usize)
                                    .collect();
                                needs.extend(th.js.bind(
                                    p,
                                    &MatchResult {
                                        found: true,
                                        value: v,
                                        indexes: ids,
                                    },
                                ));
                            }
                            th.after = Some(After {
                                cache_at: None,
                                next_pos: d + values.len(),
                                advance_at: d,
                            });
                            if needs.is_empty() {
                                next = Next::Complete;
                            } else {
                                return self.put_back_and_send_midwife(tid, th, needs);
                            }
                        }
                        SFrame::Hit { .. } => next = Next::Close(d),
                        SFrame::Covered(_) | SFrame::Idle => unreachable!("advance on inactive frame {d}"),
                    }
                }
                Next::Close(d) => {
                    self.close(&mut th, d);
                    let prev = match d.checked_sub(1) {
                        None => None,
                        Some(p) => match th.frames[p] {
                            SFrame::Covered(start) => Some(start),
                            _ => Some(p),
                        },
                    };
                    match prev {
                        Some(p) => next = Next::Advance(p),
                        None => return self.terminate(tid, th),
                    }
                }
                Next::Complete => {
                    let a = th.after.take().expect("pending adjustment");
                    if let Some(d) = a.cache_at {
                        self.apply_caching(&th, d);
                    }
                    if a.next_pos == n {
                        self.emit(th.js.res().to_vec(), tid);
                        next = Next::Advance(a.advance_at);
                    } else {
                        next = Next::Enter(a.next_pos);
                    }
                }
            }
        }
    }

    /// On a MatchMaker match at `d`: the child takes the rest of the scan at
    /// `d` and everything the parent would have backtracked into; the parent
    /// keeps the current match and stops once it backtracks past it.
    fn maybe_spawn(&mut self, parent: &mut Thread<'a>, d: usize) {
        if self.cfg.mt_scheme == MtScheme::Static {
            return;
        }
        let Ok(child_id) = self.pool.spawn() else { return };
        let mut child = parent.clone();
        child.after = None;
        child.resume = Some(Next::Advance(d));
        // the child shares every open insertion slot
        for f in &child.frames {
            if let SFrame::Scan { slot: Some(s), .. } = f {
                self.cache
                    .as_mut()
                    .expect("slot implies cache")
                    .retain(*s)
                    .expect("slot open while a frame holds it");
            }
        }
        self.store("CupidStateStore");
        self.trace("Spawn", child_id);
        self.put_thread(child_id, child);
        self.deliver(CUPID, Msg::CupidReq { tid: child_id }, self.now + 1);
        parent.floor = d + 1;
    }

    fn apply_caching(&mut self, th: &Thread<'a>, d: usize) {
        let Some(spec) = self.cs.ending_at(d) else { return };
        let SFrame::Scan { slot: Some(slot), .. } = th.frames[spec.first] else {
            return;
        };
        let values = th.js.res()[spec.first..=d].to_vec();
        let mut indexes = Vec::new();
        for p in spec.values() {
            for part in &self.plan.participants[p] {
                indexes.push(th.js.bound_index(part.trie, part.level) as u32);
            }
        }
        let key: Vec<VertexId> = spec.keys.iter().map(|&k| th.js.res()[k]).collect();
        self.pjr_access(&key);
        self.cache.as_mut().expect("slot implies cache").append(slot, &values, &indexes);
    }

    fn release_slot(&mut self, th: &Thread<'a>, d: usize, slot: SlotHandle) {
        let key = self.cache_key(th, d);
        self.pjr_access(&key);
        self.cache
            .as_mut()
            .expect("slot implies cache")
            .release(slot)
            .expect("thread holds the slot");
    }

    fn close(&mut self, th: &mut Thread<'a>, d: usize) {
        if let SFrame::Scan { slot: Some(slot), .. } = std::mem::replace(&mut th.frames[d], SFrame::Idle) {
            self.release_slot(th, d, slot);
        }
        th.js.reset_tries(d);
    }

    fn terminate(&mut self, tid: ThreadId, mut th: Thread<'a>) {
        for d in 0..th.frames.len() {
            if let SFrame::Scan { slot: Some(slot), .. } = th.frames[d] {
                self.release_slot(&th, d, slot);
                th.frames[d] = SFrame::Idle;
            }
        }
        self.trace("Exit", tid);
        self.pool.exit();
        if self.pool.live() == 0 {
            self.finalize();
        }
    }

    fn emit(&mut self, tuple: Vec<VertexId>, tid: ThreadId) {
        self.trace("Emit", tid);
        self.results.count += 1;
        self.results.fingerprint = self.results.fingerprint.wrapping_add(key_hash(&tuple));
        self.wb_bytes += tuple.len() * 4;
        let line = self.cfg.cache_line_bytes;
        while self.wb_bytes >= line {
            self.wb_bytes -= line;
            self.write_line(tid);
        }
        if let Some(t) = &mut self.results.tuples {
            t.push(tuple);
        }
    }

    fn write_line(&mut self, tid: ThreadId) {
        self.trace("MemWrite", tid);
        let addr = self.addr.result_base + self.wb_lines * self.cfg.cache_line_bytes as u64;
        self.wb_lines += 1;
        let done = self.mem.write_line(self.now + 1, addr);
        self.last_write = self.last_write.max(done);
    }

    /// Drains the write buffer and writes the DONE token.
    fn finalize(&mut self) {
        if self.wb_bytes > 0 {
            self.wb_bytes = 0;
            self.write_line(0);
        }
        self.write_line(0);
        self.done_at = Some(self.now.max(self.last_write));
    }

    fn finish(mut self) -> SimOutput {
        let m = self.mem.counters;
        let mut st = std::mem::take(&mut self.stats);
        st.cycles = self.done_at.expect("run finished");
        st.dram_reads = m.dram_reads;
        st.dram_writes = m.dram_writes;
        st.l1_hits = m.l1_hits;
        st.l2_hits = m.l2_hits;
        st.results_emitted = self.results.count;
        st.threads_spawned = self.pool.spawned;
        st.max_live_threads = self.pool.max_live as u64;
        st.memory_touches = st.element_reads + self.results.count;
        if let Some(c) = &self.cache {
            st.absorb_pjr(&c.stats());
            self.safety.double_commits = c.stats().double_commits;
        }
        let mut stores: BTreeMap<&str, u64> = STORES.iter().map(|s| (*s, 0)).collect();
        stores.insert("L1", m.l1_accesses);
        stores.insert("L2", m.l2_accesses);
        stores.insert("DRAM", m.dram_reads + m.dram_writes);
        stores.insert("PJR", self.pjr_accesses);
        for (k, v) in &self.store_accesses {
            stores.insert(k, *v);
        }
        for (k, v) in &stores {
            st.store_access(k, *v);
        }
        if let Some(w) = &self.cfg.energy_weights {
            let state: u64 = STORES[4..].iter().map(|s| stores[s]).sum();
            st.weighted_energy = Some(
                w.get("l1") * m.l1_accesses as f64
                    + w.get("l2") * m.l2_accesses as f64
                    + w.get("dram") * (m.dram_reads + m.dram_writes) as f64
                    + w.get("pjr") * self.pjr_accesses as f64
                    + w.get("store") * state as f64
                    + w.get("step") * self.steps as f64,
            );
        }
        SimOutput {
            results: self.results,
            stats: st,
            safety: self.safety,
            trace: self.trace,
        }
    }
}

impl Unit {
    fn new(kind: UnitKind, depth: usize, store: &'static str) -> Self {
        Unit {
            kind,
            inbox: BTreeMap::new(),
            busy_until: 0,
            wake_pending: false,
            reserved: 0,
            depth,
            pending: VecDeque::new(),
            credits: [0; 4],
            store,
        }
    }
}

#[cfg(test)]
mod tests;
