//! Relations and their flat-array trie indexes.
//!
//! A [`TrieIndex`] stores one sorted `values` array per attribute level. Every
//! level except the last also carries a `child_offsets` array with one more
//! entry than `values`: the children of `values[i]` live in
//! `next.values[child_offsets[i]..child_offsets[i + 1]]`.
//!
//! # Binary dump layout
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! magic        8 bytes   b"TJTRIE\0\x01"
//! arity        u32
//! lens         u32 x arity      number of values per level
//! for level k in 0..arity:
//!     values   u32 x lens[k]
//!     offsets  u32 x (lens[k] + 1)   only if k + 1 < arity and lens[k] > 0
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type VertexId = u32;

/// Index of a bound trie inside a query plan (one per atom occurrence).
pub type TrieId = usize;

const DUMP_MAGIC: &[u8; 8] = b"TJTRIE\0\x01";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    name: String,
    arity: usize,
    tuples: Vec<Vec<VertexId>>,
}

impl Relation {
    /// Builds a relation and canonicalizes it (sorted, duplicate-free).
    pub fn new(name: impl Into<String>, arity: usize, tuples: Vec<Vec<VertexId>>) -> Result<Self> {
        let name = name.into();
        if arity == 0 {
            return Err(Error::Arity {
                relation: name,
                expected: 1,
                found: 0,
            });
        }
        if let Some(bad) = tuples.iter().find(|t| t.len() != arity) {
            return Err(Error::Arity {
                relation: name,
                expected: arity,
                found: bad.len(),
            });
        }
        let mut rel = Relation {
            name,
            arity,
            tuples,
        };
        rel.canonicalize();
        Ok(rel)
    }

    pub fn from_edges(name: impl Into<String>, edges: impl IntoIterator<Item = (VertexId, VertexId)>) -> Self {
        let tuples = edges.into_iter().map(|(u, v)| vec![u, v]).collect();
        Relation::new(name, 2, tuples).expect("edges have arity 2")
    }

    fn canonicalize(&mut self) {
        self.tuples.sort_unstable();
        self.tuples.dedup();
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn tuples(&self) -> &[Vec<VertexId>] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn rename(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Add the reverse of every edge.
    pub undirected: bool,
}

/// Reads a SNAP-style edge list: two whitespace-separated integers per line,
/// `#` starts a comment line.
pub fn load_edge_list(path: impl AsRef<Path>, options: LoadOptions) -> Result<Relation> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "G".to_string());
    parse_edge_list(&name, &text, options)
}

pub fn parse_edge_list(name: &str, text: &str, options: LoadOptions) -> Result<Relation> {
    let mut tuples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::EdgeList {
                line: lineno + 1,
                message: format!("arity mismatch: expected 2 fields, found {}", fields.len()),
            });
        }
        let mut edge = [0u32; 2];
        for (slot, field) in edge.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| Error::EdgeList {
                line: lineno + 1,
                message: format!("not a vertex id: {field:?}"),
            })?;
        }
        tuples.push(edge.to_vec());
        if options.undirected {
            tuples.push(vec![edge[1], edge[0]]);
        }
    }
    Relation::new(name, 2, tuples)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrieLevel {
    pub values: Vec<VertexId>,
    /// Offsets into the next level; empty on the last level and on empty levels.
    pub child_offsets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrieIndex {
    levels: Vec<TrieLevel>,
}

/// Half-open range over one level's values array of a bound trie.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArrayRange {
    pub trie: TrieId,
    pub level: usize,
    pub start: usize,
    pub end: usize,
}

impl ArrayRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

impl TrieIndex {
    pub fn build(rel: &Relation) -> Self {
        Self::from_sorted(rel.arity(), rel.tuples().iter().map(Vec::as_slice))
    }

    /// Builds the trie over `rel` with its columns reordered: level `k` holds
    /// column `columns[k]` of the relation.
    pub fn build_permuted(rel: &Relation, columns: &[usize]) -> Self {
        if columns.iter().copied().eq(0..rel.arity()) {
            return Self::build(rel);
        }
        let mut tuples: Vec<Vec<VertexId>> = rel
            .tuples()
            .iter()
            .map(|t| columns.iter().map(|&c| t[c]).collect())
            .collect();
        tuples.sort_unstable();
        tuples.dedup();
        Self::from_sorted(columns.len(), tuples.iter().map(Vec::as_slice))
    }

    fn from_sorted<'a>(arity: usize, tuples: impl Iterator<Item = &'a [VertexId]>) -> Self {
        let mut levels = vec![TrieLevel::default(); arity];
        let mut prev: Option<&[VertexId]> = None;
        for t in tuples {
            let first_diff = match prev {
                None => 0,
                Some(p) => match p.iter().zip(t).position(|(a, b)| a != b) {
                    Some(i) => i,
                    None => continue,
                },
            };
            for k in first_diff..arity {
                if k + 1 < arity {
                    let next_len = levels[k + 1].values.len() as u32;
                    levels[k].child_offsets.push(next_len);
                }
                levels[k].values.push(t[k]);
            }
            prev = Some(t);
        }
        for k in 0..arity.saturating_sub(1) {
            if !levels[k].values.is_empty() {
                let next_len = levels[k + 1].values.len() as u32;
                levels[k].child_offsets.push(next_len);
            }
        }
        TrieIndex { levels }
    }

    pub fn arity(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[TrieLevel] {
        &self.levels
    }

    pub fn level(&self, level: usize) -> &TrieLevel {
        &self.levels[level]
    }

    pub fn values(&self, level: usize) -> &[VertexId] {
        &self.levels[level].values
    }

    pub fn is_empty(&self) -> bool {
        self.levels.first().is_none_or(|l| l.values.is_empty())
    }

    /// Number of root-to-leaf paths.
    pub fn len(&self) -> usize {
        self.levels.last().map_or(0, |l| l.values.len())
    }

    /// Range of the children of `values(level)[parent]` in level `level + 1`.
    pub fn children(&self, level: usize, parent: usize) -> Result<(usize, usize)> {
        if level + 1 >= self.arity() {
            return Err(Error::OutOfBounds(format!(
                "level {level} is the last level of an arity-{} trie",
                self.arity()
            )));
        }
        let lvl = &self.levels[level];
        if parent >= lvl.values.len() {
            return Err(Error::OutOfBounds(format!(
                "parent index {parent} at level {level} (len {})",
                lvl.values.len()
            )));
        }
        Ok((
            lvl.child_offsets[parent] as usize,
            lvl.child_offsets[parent + 1] as usize,
        ))
    }

    pub fn child_range(&self, trie: TrieId, level: usize, parent: usize) -> Result<ArrayRange> {
        let (start, end) = self.children(level, parent)?;
        Ok(ArrayRange {
            trie,
            level: level + 1,
            start,
            end,
        })
    }

    pub fn full_range(&self, trie: TrieId) -> ArrayRange {
        ArrayRange {
            trie,
            level: 0,
            start: 0,
            end: self.levels.first().map_or(0, |l| l.values.len()),
        }
    }

    /// All root-to-leaf paths in lexicographic order.
    pub fn enumerate(&self) -> Vec<Vec<VertexId>> {
        let mut out = Vec::with_capacity(self.len());
        if self.is_empty() {
            return out;
        }
        let mut path = Vec::with_capacity(self.arity());
        self.walk(0, 0, self.levels[0].values.len(), &mut path, &mut out);
        out
    }

    fn walk(&self, level: usize, start: usize, end: usize, path: &mut Vec<VertexId>, out: &mut Vec<Vec<VertexId>>) {
        for i in start..end {
            path.push(self.levels[level].values[i]);
            if level + 1 == self.arity() {
                out.push(path.clone());
            } else {
                let (s, e) = self.children(level, i).expect("index within level");
                self.walk(level + 1, s, e, path, out);
            }
            path.pop();
        }
    }

    /// Checks every structural invariant of the layout.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::TrieDump(msg));
        if self.levels.is_empty() {
            return bad("trie has no levels".into());
        }
        if self.levels[0].values.windows(2).any(|w| w[0] >= w[1]) {
            return bad("level 0 values are not strictly increasing".into());
        }
        for k in 0..self.arity() {
            let lvl = &self.levels[k];
            let last = k + 1 == self.arity();
            if last || lvl.values.is_empty() {
                if !lvl.child_offsets.is_empty() {
                    return bad(format!("level {k} must not carry child offsets"));
                }
                if !last && !self.levels[k + 1].values.is_empty() {
                    return bad(format!("level {} has values without parents", k + 1));
                }
                continue;
            }
            let offs = &lvl.child_offsets;
            let next = &self.levels[k + 1].values;
            if offs.len() != lvl.values.len() + 1 {
                return bad(format!("level {k} offsets length {} != {}", offs.len(), lvl.values.len() + 1));
            }
            if offs[0] != 0 || *offs.last().unwrap() as usize != next.len() {
                return bad(format!("level {k} offsets do not span level {}", k + 1));
            }
            for w in offs.windows(2) {
                if w[0] >= w[1] {
                    return bad(format!("level {k} has a value without children"));
                }
                let kids = &next[w[0] as usize..w[1] as usize];
                if kids.windows(2).any(|p| p[0] >= p[1]) {
                    return bad(format!("level {} sibling run is not strictly increasing", k + 1));
                }
            }
        }
        Ok(())
    }

    pub fn write_dump(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.arity() as u32).to_le_bytes())?;
        for lvl in &self.levels {
            w.write_all(&(lvl.values.len() as u32).to_le_bytes())?;
        }
        for lvl in &self.levels {
            for v in lvl.values.iter().chain(&lvl.child_offsets) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::TrieDump("bad magic".into()));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let arity = word()? as usize;
        if arity == 0 || arity > 64 {
            return Err(Error::TrieDump(format!("implausible arity {arity}")));
        }
        let lens = (0..arity).map(|_| word().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
        let mut levels = Vec::with_capacity(arity);
        for (k, &len) in lens.iter().enumerate() {
            let values = (0..len).map(|_| word()).collect::<Result<Vec<_>>>()?;
            let n_offs = if k + 1 < arity && len > 0 { len + 1 } else { 0 };
            let child_offsets = (0..n_offs).map(|_| word()).collect::<Result<Vec<_>>>()?;
            levels.push(TrieLevel { values, child_offsets });
        }
        let trie = TrieIndex { levels };
        trie.validate()?;
        Ok(trie)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(edges: &[(u32, u32)]) -> Relation {
        Relation::from_edges("R", edges.iter().copied())
    }

    #[test]
    fn parse_plain_edges() {
        let r = parse_edge_list("g", "1 1\n1 2\n2 3", LoadOptions::default()).unwrap();
        assert_eq!(r.tuples(), &[vec![1, 1], vec![1, 2], vec![2, 3]]);
    }

    #[test]
    fn parse_skips_comments_and_dedups() {
        let r = parse_edge_list("g", "# c\n2 3\n1 2\n1 2", LoadOptions::default()).unwrap();
        assert_eq!(r.tuples(), &[vec![1, 2], vec![2, 3]]);
    }

    #[test]
    fn parse_undirected_adds_reverse() {
        let r = parse_edge_list("g", "1 2", LoadOptions { undirected: true }).unwrap();
        assert_eq!(r.tuples(), &[vec![1, 2], vec![2, 1]]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_edge_list("g", "1 2\n3 x\n", LoadOptions::default()) {
            Err(Error::EdgeList { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_edge_list("g", "1 2\n\n1 2 3\n", LoadOptions::default()) {
            Err(Error::EdgeList { line: 3, message }) => assert!(message.contains("arity")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_edge_list("g", "-1 2", LoadOptions::default()).is_err());
    }

    #[test]
    fn relation_rejects_wrong_arity() {
        assert!(matches!(
            Relation::new("R", 2, vec![vec![1, 2, 3]]),
            Err(Error::Arity { expected: 2, found: 3, .. })
        ));
    }

    #[test]
    fn worked_example_layout() {
        let t = TrieIndex::build(&rel(&[(1, 1), (1, 2)]));
        assert_eq!(t.values(0), &[1]);
        assert_eq!(t.level(0).child_offsets, vec![0, 2]);
        assert_eq!(t.values(1), &[1, 2]);
        assert_eq!(t.child_range(0, 0, 0).unwrap(), ArrayRange { trie: 0, level: 1, start: 0, end: 2 });
    }

    #[test]
    fn three_edge_layout() {
        let t = TrieIndex::build(&rel(&[(1, 1), (1, 2), (2, 3)]));
        assert_eq!(t.values(0), &[1, 2]);
        assert_eq!(t.level(0).child_offsets, vec![0, 2, 3]);
        assert_eq!(t.values(1), &[1, 2, 3]);
        assert_eq!(t.children(0, 1).unwrap(), (2, 3));
        assert_eq!(t.children(0, 1).unwrap().1 - t.children(0, 1).unwrap().0, 1);
    }

    #[test]
    fn empty_relation_gives_empty_arrays() {
        let t = TrieIndex::build(&rel(&[]));
        assert!(t.levels().iter().all(|l| l.values.is_empty() && l.child_offsets.is_empty()));
        assert_eq!(t.full_range(3), ArrayRange { trie: 3, level: 0, start: 0, end: 0 });
        t.validate().unwrap();
        assert!(t.enumerate().is_empty());
    }

    #[test]
    fn full_range_counts_distinct_first_values() {
        assert_eq!(TrieIndex::build(&rel(&[(5, 1)])).full_range(0).end, 1);
        assert_eq!(TrieIndex::build(&rel(&[(1, 1), (2, 3)])).full_range(0).end, 2);
    }

    #[test]
    fn child_range_out_of_bounds() {
        let t = TrieIndex::build(&rel(&[(1, 1), (1, 2)]));
        assert!(matches!(t.children(0, 1), Err(Error::OutOfBounds(_))));
        assert!(matches!(t.children(1, 0), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn permuted_build_swaps_columns() {
        let r = rel(&[(1, 2), (3, 2), (3, 1)]);
        let t = TrieIndex::build_permuted(&r, &[1, 0]);
        assert_eq!(t.enumerate(), vec![vec![1, 3], vec![2, 1], vec![2, 3]]);
        t.validate().unwrap();
    }

    #[test]
    fn dump_round_trip() {
        let r = Relation::new("T", 3, vec![vec![1, 2, 3], vec![1, 2, 4], vec![2, 0, 0]]).unwrap();
        let t = TrieIndex::build(&r);
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..8], DUMP_MAGIC);
        let back = TrieIndex::read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let empty = TrieIndex::build(&rel(&[]));
        let mut buf = Vec::new();
        empty.write_dump(&mut buf).unwrap();
        assert_eq!(TrieIndex::read_dump(&mut buf.as_slice()).unwrap(), empty);
    }

    #[test]
    fn dump_rejects_corruption() {
        let t = TrieIndex::build(&rel(&[(1, 1), (1, 2)]));
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        // level-1 values become [2, 1]
        let n = buf.len();
        buf[n - 8..n - 4].copy_from_slice(&2u32.to_le_bytes());
        buf[n - 4..].copy_from_slice(&1u32.to_le_bytes());
        assert!(TrieIndex::read_dump(&mut buf.as_slice()).is_err());
        buf[0] = b'X';
        assert!(TrieIndex::read_dump(&mut buf.as_slice()).is_err());
    }
}
