//! Partial-join-results cache.
//!
//! Entries are built in an insertion buffer and only become visible to
//! [`PjrCache::lookup`] once every thread working on them has released the
//! slot. A slot belongs to the full prefix that opened it; other prefixes
//! hitting the same key while it is being filled are rejected and recompute.

use std::collections::{HashMap, HashSet};
use std::hash::{BuildHasherDefault, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Fixed per-entry bookkeeping charged against the total capacity.
pub const ENTRY_HEADER_BYTES: usize = 16;
/// Bytes charged per cached position value (value plus its trie indexes).
pub const ELEMENT_BYTES: usize = 8;

const MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Multiplicative mix of a key tuple. Also selects the bank in timed mode.
pub fn key_hash(key: &[u32]) -> u64 {
    let mut h = (key.len() as u64).wrapping_mul(MIX);
    for &k in key {
        h = (h ^ k as u64).wrapping_mul(MIX);
        h ^= h >> 29;
    }
    h
}

#[derive(Default)]
pub struct KeyHasher {
    state: u64,
}

impl Hasher for KeyHasher {
    fn finish(&self) -> u64 {
        self.state
    }

    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(4) {
            let mut b = [0u8; 4];
            b[..chunk.len()].copy_from_slice(chunk);
            self.write_u32(u32::from_le_bytes(b));
        }
    }

    fn write_u32(&mut self, i: u32) {
        self.state = (self.state ^ i as u64).wrapping_mul(MIX);
        self.state ^= self.state >> 29;
    }

    fn write_usize(&mut self, i: usize) {
        self.write_u32(i as u32);
    }
}

type KeyMap<V> = HashMap<Vec<u32>, V, BuildHasherDefault<KeyHasher>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PjrConfig {
    pub total_capacity: usize,
    /// Maximum number of cached tuples per entry.
    pub entry_capacity: usize,
    pub bank_count: usize,
}

impl Default for PjrConfig {
    fn default() -> Self {
        PjrConfig {
            total_capacity: 4 << 20,
            entry_capacity: 256,
            bank_count: 4,
        }
    }
}

impl PjrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_capacity == 0 || self.entry_capacity == 0 || self.bank_count == 0 {
            return Err(Error::Config("pjr capacities and bank count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryState {
    Inserting,
    Committed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PjrEntry {
    key: Vec<u32>,
    width: usize,
    values: Vec<u32>,
    indexes: Vec<u32>,
    index_width: usize,
    state: EntryState,
}

impl PjrEntry {
    fn new(key: Vec<u32>, width: usize) -> Self {
        PjrEntry {
            key,
            width,
            values: Vec::new(),
            indexes: Vec::new(),
            index_width: 0,
            state: EntryState::Inserting,
        }
    }

    pub fn key(&self) -> &[u32] {
        &self.key
    }

    pub fn state(&self) -> EntryState {
        self.state
    }

    /// Number of cached tuples.
    pub fn count(&self) -> usize {
        self.values.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Values and per-trie indexes of the `i`-th cached tuple.
    pub fn tuple(&self, i: usize) -> (&[u32], &[u32]) {
        (
            &self.values[i * self.width..(i + 1) * self.width],
            &self.indexes[i * self.index_width..(i + 1) * self.index_width],
        )
    }

    pub fn tuples(&self) -> impl Iterator<Item = (&[u32], &[u32])> + '_ {
        (0..self.count()).map(move |i| self.tuple(i))
    }

    pub fn footprint(&self) -> usize {
        ENTRY_HEADER_BYTES + ELEMENT_BYTES * self.values.len()
    }

    fn sort_tuples(&mut self) {
        let w = self.width;
        let sorted = self.values.chunks(w).zip(self.values.chunks(w).skip(1)).all(|(a, b)| a <= b);
        if sorted {
            return;
        }
        let mut order: Vec<usize> = (0..self.count()).collect();
        order.sort_by(|&a, &b| self.values[a * w..(a + 1) * w].cmp(&self.values[b * w..(b + 1) * w]));
        let iw = self.index_width;
        let values = order.iter().flat_map(|&i| self.values[i * w..(i + 1) * w].iter().copied()).collect();
        let indexes = order.iter().flat_map(|&i| self.indexes[i * iw..(i + 1) * iw].iter().copied()).collect();
        self.values = values;
        self.indexes = indexes;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotHandle(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejected {
    AlreadyCommitted,
    /// Another prefix is filling this key.
    OtherPath,
    /// The same prefix already opened a slot for this key.
    InProgress,
    /// This key overflowed earlier and is never cached.
    Poisoned,
    CapacityExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Ok,
    /// The entry grew past a capacity and was deallocated.
    Overflow,
    /// The slot had already overflowed; nothing stored.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseOutcome {
    Pending(usize),
    Committed,
    Discarded,
}

#[derive(Debug)]
struct Slot {
    entry: PjrEntry,
    owner_path: Vec<u32>,
    thread_count: usize,
    overflowed: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PjrStats {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub insertions: u64,
    pub rejections: u64,
    pub appended: u64,
    pub overflows: u64,
    pub commits: u64,
    pub discards: u64,
    /// Commits of a key that was already committed. Must stay zero.
    pub double_commits: u64,
}

#[derive(Debug)]
pub struct PjrCache {
    config: PjrConfig,
    committed: KeyMap<Arc<PjrEntry>>,
    inserting: KeyMap<SlotHandle>,
    slots: HashMap<SlotHandle, Slot>,
    poisoned: HashSet<Vec<u32>, BuildHasherDefault<KeyHasher>>,
    used_bytes: usize,
    next_slot: u64,
    stats: PjrStats,
}

impl PjrCache {
    pub fn new(config: PjrConfig) -> Self {
        PjrCache {
            config,
            committed: KeyMap::default(),
            inserting: KeyMap::default(),
            slots: HashMap::new(),
            poisoned: HashSet::default(),
            used_bytes: 0,
            next_slot: 0,
            stats: PjrStats::default(),
        }
    }

    pub fn config(&self) -> &PjrConfig {
        &self.config
    }

    pub fn stats(&self) -> PjrStats {
        self.stats
    }

    pub fn used_bytes(&self) -> usize {
        self.used_bytes
    }

    pub fn committed_len(&self) -> usize {
        self.committed.len()
    }

    pub fn bank_of(&self, key: &[u32]) -> usize {
        (key_hash(key) % self.config.bank_count as u64) as usize
    }

    /// Only committed entries are visible.
    pub fn lookup(&mut self, key: &[u32]) -> Option<Arc<PjrEntry>> {
        self.stats.lookups += 1;
        match self.committed.get(key) {
            Some(e) => {
                self.stats.hits += 1;
                Some(Arc::clone(e))
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    pub fn is_inserting(&self, key: &[u32]) -> bool {
        self.inserting.contains_key(key)
    }

    /// Opens an insertion-buffer slot for `key` with one owning thread.
    /// `width` is the number of positions stored per tuple.
    pub fn begin_insert(&mut self, key: &[u32], owner_path: &[u32], width: usize) -> Result<SlotHandle, Rejected> {
        let verdict = if self.committed.contains_key(key) {
            Err(Rejected::AlreadyCommitted)
        } else if self.poisoned.contains(key) {
            Err(Rejected::Poisoned)
        } else if let Some(h) = self.inserting.get(key) {
            if self.slots[h].owner_path == owner_path {
                Err(Rejected::InProgress)
            } else {
                Err(Rejected::OtherPath)
            }
        } else if self.used_bytes + ENTRY_HEADER_BYTES > self.config.total_capacity {
            Err(Rejected::CapacityExhausted)
        } else {
            Ok(())
        };
        if let Err(r) = verdict {
            self.stats.rejections += 1;
            return Err(r);
        }
        let h = SlotHandle(self.next_slot);
        self.next_slot += 1;
        self.used_bytes += ENTRY_HEADER_BYTES;
        self.inserting.insert(key.to_vec(), h);
        self.slots.insert(
            h,
            Slot {
                entry: PjrEntry::new(key.to_vec(), width.max(1)),
                owner_path: owner_path.to_vec(),
                thread_count: 1,
                overflowed: false,
            },
        );
        self.stats.insertions += 1;
        Ok(h)
    }

    pub fn owner_path(&self, slot: SlotHandle) -> Option<&[u32]> {
        self.slots.get(&slot).map(|s| s.owner_path.as_slice())
    }

    pub fn append(&mut self, slot: SlotHandle, values: &[u32], indexes: &[u32]) -> AppendOutcome {
        let Some(s) = self.slots.get_mut(&slot) else {
            return AppendOutcome::Ignored;
        };
        if s.overflowed {
            return AppendOutcome::Ignored;
        }
        assert_eq!(values.len(), s.entry.width, "cached tuple width");
        if s.entry.count() == 0 {
            s.entry.index_width = indexes.len();
        }
        assert_eq!(indexes.len(), s.entry.index_width, "cached index width");
        let grow = ELEMENT_BYTES * values.len();
        if s.entry.count() + 1 > self.config.entry_capacity || self.used_bytes + grow > self.config.total_capacity {
            // deallocate: incomplete entries are never stored
            self.used_bytes -= s.entry.footprint();
            s.entry.values = Vec::new();
            s.entry.indexes = Vec::new();
            s.overflowed = true;
            let key = s.entry.key.clone();
            self.inserting.remove(&key);
            self.poisoned.insert(key);
            self.stats.overflows += 1;
            return AppendOutcome::Overflow;
        }
        s.entry.values.extend_from_slice(values);
        s.entry.indexes.extend_from_slice(indexes);
        self.used_bytes += grow;
        self.stats.appended += 1;
        AppendOutcome::Ok
    }

    pub fn retain(&mut self, slot: SlotHandle) -> Result<usize> {
        let s = self
            .slots
            .get_mut(&slot)
            .ok_or_else(|| Error::Pjr(format!("retain on closed slot {slot:?}")))?;
        s.thread_count += 1;
        Ok(s.thread_count)
    }

    /// Drops one thread from the slot; the last release commits the entry
    /// (or discards it after an overflow).
    pub fn release(&mut self, slot: SlotHandle) -> Result<ReleaseOutcome> {
        let s = self
            .slots
            .get_mut(&slot)
            .ok_or_else(|| Error::Pjr(format!("release on closed slot {slot:?} (thread count underflow)")))?;
        s.thread_count -= 1;
        if s.thread_count > 0 {
            return Ok(ReleaseOutcome::Pending(s.thread_count));
        }
        let s = self.slots.remove(&slot).expect("slot present");
        if s.overflowed {
            self.stats.discards += 1;
            return Ok(ReleaseOutcome::Discarded);
        }
        let mut entry = s.entry;
        self.inserting.remove(&entry.key);
        entry.sort_tuples();
        entry.state = EntryState::Committed;
        if self.committed.contains_key(&entry.key) {
            self.stats.double_commits += 1;
            self.used_bytes -= entry.footprint();
            return Ok(ReleaseOutcome::Discarded);
        }
        self.stats.commits += 1;
        self.committed.insert(entry.key.clone(), Arc::new(entry));
        Ok(ReleaseOutcome::Committed)
    }

    /// Recomputes the footprint of every live entry; must equal `used_bytes`.
    pub fn accounted_bytes(&self) -> usize {
        let committed: usize = self.committed.values().map(|e| e.footprint()).sum();
        let inserting: usize = self
            .slots
            .values()
            .filter(|s| !s.overflowed)
            .map(|s| s.entry.footprint())
            .sum();
        committed + inserting
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache() -> PjrCache {
        PjrCache::new(PjrConfig::default())
    }

    #[test]
    fn commit_then_lookup() {
        let mut c = cache();
        assert!(c.lookup(&[1]).is_none());
        let s = c.begin_insert(&[1], &[7, 1], 1).unwrap();
        assert_eq!(c.append(s, &[2], &[0]), AppendOutcome::Ok);
        assert_eq!(c.append(s, &[4], &[1]), AppendOutcome::Ok);
        assert!(c.lookup(&[1]).is_none(), "insertion buffer is invisible");
        assert_eq!(c.release(s).unwrap(), ReleaseOutcome::Committed);
        let e = c.lookup(&[1]).unwrap();
        assert_eq!(e.count(), 2);
        assert_eq!(e.state(), EntryState::Committed);
        assert_eq!(e.tuples().map(|(v, _)| v[0]).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(c.stats().hits, 1);
        assert_eq!(c.stats().misses, 2);
    }

    #[test]
    fn other_path_is_rejected_while_inserting() {
        let mut c = cache();
        let s = c.begin_insert(&[2], &[1, 2], 1).unwrap();
        assert_eq!(c.begin_insert(&[2], &[2, 2], 1), Err(Rejected::OtherPath));
        assert_eq!(c.begin_insert(&[2], &[1, 2], 1), Err(Rejected::InProgress));
        c.release(s).unwrap();
        assert_eq!(c.begin_insert(&[2], &[2, 2], 1), Err(Rejected::AlreadyCommitted));
    }

    #[test]
    fn capacity_exhaustion_rejects() {
        let mut c = PjrCache::new(PjrConfig {
            total_capacity: ENTRY_HEADER_BYTES * 2,
            ..PjrConfig::default()
        });
        let a = c.begin_insert(&[1], &[1], 1).unwrap();
        let _b = c.begin_insert(&[2], &[2], 1).unwrap();
        assert_eq!(c.begin_insert(&[3], &[3], 1), Err(Rejected::CapacityExhausted));
        // no room for a value either
        assert_eq!(c.append(a, &[9], &[0]), AppendOutcome::Overflow);
    }

    #[test]
    fn overflow_deallocates_and_never_commits() {
        let mut c = PjrCache::new(PjrConfig {
            entry_capacity: 2,
            ..PjrConfig::default()
        });
        let s = c.begin_insert(&[5], &[5], 1).unwrap();
        assert_eq!(c.append(s, &[1], &[0]), AppendOutcome::Ok);
        assert_eq!(c.append(s, &[2], &[1]), AppendOutcome::Ok);
        assert_eq!(c.append(s, &[3], &[2]), AppendOutcome::Overflow);
        assert_eq!(c.append(s, &[4], &[3]), AppendOutcome::Ignored);
        assert_eq!(c.used_bytes(), 0);
        assert_eq!(c.release(s).unwrap(), ReleaseOutcome::Discarded);
        assert!(c.lookup(&[5]).is_none());
        assert_eq!(c.begin_insert(&[5], &[5], 1), Err(Rejected::Poisoned));
        assert!(c.lookup(&[5]).is_none());
    }

    #[test]
    fn thread_counter_commits_once() {
        let mut c = cache();
        let s = c.begin_insert(&[1], &[0, 1], 1).unwrap();
        assert_eq!(c.retain(s).unwrap(), 2);
        c.append(s, &[3], &[0]);
        assert_eq!(c.release(s).unwrap(), ReleaseOutcome::Pending(1));
        assert!(c.lookup(&[1]).is_none());
        assert_eq!(c.release(s).unwrap(), ReleaseOutcome::Committed);
        assert_eq!(c.stats().commits, 1);
        // count is back at zero: a further release is an underflow
        assert!(matches!(c.release(s), Err(Error::Pjr(_))));
        assert!(c.retain(s).is_err());
    }

    #[test]
    fn release_after_overflow_discards() {
        let mut c = PjrCache::new(PjrConfig {
            entry_capacity: 1,
            ..PjrConfig::default()
        });
        let s = c.begin_insert(&[1], &[1], 1).unwrap();
        c.retain(s).unwrap();
        c.append(s, &[1], &[0]);
        assert_eq!(c.append(s, &[2], &[1]), AppendOutcome::Overflow);
        assert_eq!(c.release(s).unwrap(), ReleaseOutcome::Pending(1));
        assert_eq!(c.release(s).unwrap(), ReleaseOutcome::Discarded);
        assert_eq!(c.stats().commits, 0);
    }

    #[test]
    fn commit_sorts_out_of_order_appends() {
        let mut c = cache();
        let s = c.begin_insert(&[], &[], 2).unwrap();
        c.append(s, &[3, 1], &[30, 10]);
        c.append(s, &[1, 9], &[11, 19]);
        c.release(s).unwrap();
        let e = c.lookup(&[]).unwrap();
        assert_eq!(e.tuple(0), (&[1u32, 9][..], &[11u32, 19][..]));
        assert_eq!(e.tuple(1), (&[3u32, 1][..], &[30u32, 10][..]));
    }

    #[test]
    fn duplicate_values_are_kept_verbatim() {
        let mut c = cache();
        let s = c.begin_insert(&[1], &[1], 1).unwrap();
        c.append(s, &[2], &[0]);
        assert_eq!(c.append(s, &[2], &[0]), AppendOutcome::Ok);
        c.release(s).unwrap();
        assert_eq!(c.lookup(&[1]).unwrap().count(), 2);
    }

    #[test]
    fn accounting_matches_footprints() {
        let mut c = cache();
        let a = c.begin_insert(&[1], &[1], 1).unwrap();
        c.append(a, &[1], &[0]);
        let b = c.begin_insert(&[2], &[2], 2).unwrap();
        c.append(b, &[1, 2], &[0, 0]);
        c.release(a).unwrap();
        assert_eq!(c.used_bytes(), c.accounted_bytes());
        assert_eq!(c.used_bytes(), 2 * ENTRY_HEADER_BYTES + 3 * ELEMENT_BYTES);
    }

    #[test]
    fn hasher_matches_key_equality() {
        use std::hash::BuildHasher;
        let bh = BuildHasherDefault::<KeyHasher>::default();
        let h = |k: &Vec<u32>| bh.hash_one(k);
        assert_eq!(h(&vec![1, 2]), h(&vec![1, 2]));
        assert_ne!(h(&vec![1, 2]), h(&vec![2, 1]));
        assert_ne!(key_hash(&[1, 2]), key_hash(&[2, 1]));
        let c = cache();
        assert!(c.bank_of(&[7]) < 4);
    }
}
