//! Datalog-style conjunctive queries, variable ordering, trie binding and
//! cache-structure derivation.
//!
//! Grammar: `name(v1, ..., vk) = Rel(args), Rel(args), ... .` with
//! identifiers matching `[A-Za-z][A-Za-z0-9]*`. Positions are 0-based
//! throughout the crate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::trie::{Relation, TrieId, TrieIndex};

/// The benchmark patterns, all expressed as self-joins of edge relations.
pub const BUILTIN_QUERIES: [(&str, &str); 5] = [
    ("path3", "path3(x,y,z) = R(x,y), S(y,z)."),
    ("path4", "path4(x,y,z,w) = R(x,y), S(y,z), T(z,w)."),
    ("cycle3", "cycle3(x,y,z) = R(x,y), S(y,z), T(z,x)."),
    ("cycle4", "cycle4(x,y,z,w) = R(x,y), S(y,z), T(z,w), U(w,x)."),
    (
        "clique4",
        "clique4(x,y,z,w) = R(x,y), S(y,z), T(z,w), U(w,x), V(z,x), W(w,y).",
    ),
];

pub fn builtin_query(name: &str) -> Option<&'static str> {
    BUILTIN_QUERIES.iter().find(|(n, _)| *n == name).map(|(_, q)| *q)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub relation: String,
    pub vars: Vec<String>,
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.relation, self.vars.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub name: String,
    pub head: Vec<String>,
    pub atoms: Vec<Atom>,
}

impl Query {
    /// Accepts either a builtin name (`path3`, ..., `clique4`) or datalog text.
    pub fn resolve(text: &str) -> Result<Query> {
        match builtin_query(text.trim()) {
            Some(q) => parse_query(q),
            None => parse_query(text),
        }
    }

    pub fn relation_names(&self) -> BTreeSet<&str> {
        self.atoms.iter().map(|a| a.relation.as_str()).collect()
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}) = ", self.name, self.head.join(","))?;
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(".")
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::QuerySyntax {
            pos: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<()> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            Some(got) => self.err(format!("expected '{c}', found '{got}'")),
            None => self.err(format!("expected '{c}', found end of input")),
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        match rest.chars().next() {
            Some(c) if c.is_ascii_alphabetic() => {}
            Some(c) => return self.err(format!("expected identifier, found '{c}'")),
            None => return self.err("expected identifier, found end of input"),
        }
        let len = rest
            .find(|c: char| !c.is_ascii_alphanumeric())
            .unwrap_or(rest.len());
        self.pos += len;
        Ok(rest[..len].to_string())
    }

    fn var_list(&mut self) -> Result<Vec<String>> {
        self.expect('(')?;
        let mut vars = vec![self.ident()?];
        while self.peek() == Some(',') {
            self.pos += 1;
            vars.push(self.ident()?);
        }
        self.expect(')')?;
        Ok(vars)
    }
}

pub fn parse_query(text: &str) -> Result<Query> {
    let mut p = Parser { src: text, pos: 0 };
    let name = p.ident()?;
    let head = p.var_list()?;
    p.expect('=')?;
    let mut atoms = Vec::new();
    loop {
        let relation = p.ident()?;
        let vars = p.var_list()?;
        atoms.push(Atom { relation, vars });
        match p.peek() {
            Some(',') => p.pos += 1,
            Some('.') => {
                p.pos += 1;
                break;
            }
            Some(c) => return p.err(format!("expected ',' or '.', found '{c}'")),
            None => return p.err("expected '.' at end of query"),
        }
    }
    if p.peek().is_some() {
        return p.err("trailing input after '.'");
    }
    Ok(Query { name, head, atoms })
}

/// Relation name to arity.
pub type Catalog = BTreeMap<String, usize>;

pub fn catalog_of<'a>(relations: impl IntoIterator<Item = &'a Relation>) -> Catalog {
    relations
        .into_iter()
        .map(|r| (r.name().to_string(), r.arity()))
        .collect()
}

/// One (trie, level) pair taking part in the intersection at a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Participant {
    pub trie: TrieId,
    pub level: usize,
    /// The previous level of the same trie is bound at the same position
    /// (repeated variable inside one atom).
    pub chained: bool,
}

/// How an atom occurrence is laid out as a trie.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrieBinding {
    pub atom: usize,
    pub relation: String,
    /// `columns[level]` is the atom column stored at that level.
    pub columns: Vec<usize>,
    /// `positions[level]` is the variable position bound by that level.
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct QueryPlan {
    pub query: Query,
    pub order: Vec<String>,
    pub tries: Vec<TrieBinding>,
    /// Participants per position, in atom (binding) order.
    pub participants: Vec<Vec<Participant>>,
}

impl QueryPlan {
    pub fn n(&self) -> usize {
        self.order.len()
    }

    pub fn position_of(&self, var: &str) -> Option<usize> {
        self.order.iter().position(|v| v == var)
    }

    /// Positions mentioned by each atom.
    pub fn atom_positions(&self) -> Vec<BTreeSet<usize>> {
        self.tries
            .iter()
            .map(|b| b.positions.iter().copied().collect())
            .collect()
    }

    /// Builds one trie per atom occurrence from a name-keyed relation map.
    pub fn bind(&self, relations: &BTreeMap<String, Relation>) -> Result<TrieSet> {
        self.bind_with(|name| relations.get(name))
    }

    /// Builds one trie per atom occurrence. Occurrences resolving to the same
    /// relation object with the same column order share storage.
    pub fn bind_with<'r>(&self, resolve: impl Fn(&str) -> Option<&'r Relation>) -> Result<TrieSet> {
        let mut built: HashMap<(*const Relation, Vec<usize>), usize> = HashMap::new();
        let mut storage: Vec<Arc<TrieIndex>> = Vec::new();
        let mut tries = Vec::with_capacity(self.tries.len());
        let mut physical = Vec::with_capacity(self.tries.len());
        for b in &self.tries {
            let rel = resolve(&b.relation)
                .ok_or_else(|| Error::Plan(format!("unknown relation {}", b.relation)))?;
            if rel.arity() != b.columns.len() {
                return Err(Error::Arity {
                    relation: b.relation.clone(),
                    expected: b.columns.len(),
                    found: rel.arity(),
                });
            }
            let key = (rel as *const Relation, b.columns.clone());
            let id = *built.entry(key).or_insert_with(|| {
                storage.push(Arc::new(TrieIndex::build_permuted(rel, &b.columns)));
                storage.len() - 1
            });
            tries.push(Arc::clone(&storage[id]));
            physical.push(id);
        }
        Ok(TrieSet { tries, physical })
    }
}

/// Tries bound to a plan, indexed by [`TrieId`].
#[derive(Debug, Clone)]
pub struct TrieSet {
    tries: Vec<Arc<TrieIndex>>,
    physical: Vec<usize>,
}

impl TrieSet {
    pub fn get(&self, id: TrieId) -> &TrieIndex {
        &self.tries[id]
    }

    pub fn len(&self) -> usize {
        self.tries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tries.is_empty()
    }

    /// Identifier of the storage behind a bound trie; equal ids share arrays.
    pub fn physical_id(&self, id: TrieId) -> usize {
        self.physical[id]
    }

    pub fn physical_count(&self) -> usize {
        self.physical.iter().max().map_or(0, |m| m + 1)
    }
}

pub fn plan_query(q: &Query, catalog: &Catalog) -> Result<QueryPlan> {
    let mut seen = BTreeSet::new();
    for v in &q.head {
        if !seen.insert(v.as_str()) {
            return Err(Error::Plan(format!("head variable {v} appears twice")));
        }
    }
    let order = q.head.clone();
    let pos_of = |v: &str| order.iter().position(|o| o == v);

    let mut used = vec![false; order.len()];
    let mut tries = Vec::with_capacity(q.atoms.len());
    for (ai, atom) in q.atoms.iter().enumerate() {
        let arity = *catalog
            .get(&atom.relation)
            .ok_or_else(|| Error::Plan(format!("unknown relation {}", atom.relation)))?;
        if arity != atom.vars.len() {
            return Err(Error::Arity {
                relation: atom.relation.clone(),
                expected: arity,
                found: atom.vars.len(),
            });
        }
        let mut cols: Vec<(usize, usize)> = Vec::with_capacity(arity);
        for (ci, v) in atom.vars.iter().enumerate() {
            let p = pos_of(v).ok_or_else(|| {
                Error::Plan(format!(
                    "variable {v} in {atom} is not in the head (only full queries are supported)"
                ))
            })?;
            used[p] = true;
            cols.push((p, ci));
        }
        cols.sort();
        tries.push(TrieBinding {
            atom: ai,
            relation: atom.relation.clone(),
            columns: cols.iter().map(|&(_, c)| c).collect(),
            positions: cols.iter().map(|&(p, _)| p).collect(),
        });
    }
    if let Some(p) = used.iter().position(|u| !u) {
        return Err(Error::Plan(format!("head variable {} appears in no atom", order[p])));
    }

    let mut participants = vec![Vec::new(); order.len()];
    for (t, b) in tries.iter().enumerate() {
        for (level, &p) in b.positions.iter().enumerate() {
            participants[p].push(Participant {
                trie: t,
                level,
                chained: level > 0 && b.positions[level - 1] == p,
            });
        }
    }
    Ok(QueryPlan {
        query: q.clone(),
        order,
        tries,
        participants,
    })
}

/// One cacheable suffix: values of positions `first..=last` keyed by `keys`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntrySpec {
    pub keys: Vec<usize>,
    pub first: usize,
    pub last: usize,
}

impl CacheEntrySpec {
    pub fn width(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn values(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CacheRange {
    /// Cache only the first position of each valid range.
    #[default]
    Single,
    /// Cache the largest valid contiguous range.
    Maximal,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheStructure {
    entries: Vec<CacheEntrySpec>,
    by_first: Vec<Option<usize>>,
    by_last: Vec<Option<usize>>,
}

impl CacheStructure {
    pub fn empty(n: usize) -> Self {
        CacheStructure {
            entries: Vec::new(),
            by_first: vec![None; n],
            by_last: vec![None; n],
        }
    }

    pub fn entries(&self) -> &[CacheEntrySpec] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn starting_at(&self, d: usize) -> Option<&CacheEntrySpec> {
        self.by_first.get(d).copied().flatten().map(|i| &self.entries[i])
    }

    pub fn ending_at(&self, d: usize) -> Option<&CacheEntrySpec> {
        self.by_last.get(d).copied().flatten().map(|i| &self.entries[i])
    }

    pub fn from_entries(n: usize, entries: Vec<CacheEntrySpec>) -> Self {
        let mut cs = CacheStructure::empty(n);
        for e in entries {
            cs.by_first[e.first] = Some(cs.entries.len());
            cs.by_last[e.last] = Some(cs.entries.len());
            cs.entries.push(e);
        }
        cs
    }
}

/// Earlier positions sharing an atom with any position in `first..=last`.
fn key_positions(atoms: &[BTreeSet<usize>], first: usize, last: usize) -> BTreeSet<usize> {
    atoms
        .iter()
        .filter(|a| a.range(first..=last).next().is_some())
        .flat_map(|a| a.range(..first).copied())
        .collect()
}

/// Scans positions left to right. A position `d > 0` opens an entry when its
/// key set is a strict subset of all earlier positions; the range then grows
/// while that stays true. Positions inside an accepted range are skipped even
/// when only the first one is cached.
pub fn derive_cache_structure(plan: &QueryPlan, mode: CacheRange) -> CacheStructure {
    let n = plan.n();
    let atoms = plan.atom_positions();
    let mut entries = Vec::new();
    let mut d = 1;
    while d < n {
        let keys = key_positions(&atoms, d, d);
        if keys.len() >= d {
            d += 1;
            continue;
        }
        let mut e = d;
        while e + 1 < n && key_positions(&atoms, d, e + 1).len() < d {
            e += 1;
        }
        let last = match mode {
            CacheRange::Single => d,
            CacheRange::Maximal => e,
        };
        let keys = key_positions(&atoms, d, last);
        entries.push(CacheEntrySpec {
            keys: keys.into_iter().collect(),
            first: d,
            last,
        });
        d = e + 1;
    }
    CacheStructure::from_entries(n, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_catalog(q: &Query) -> Catalog {
        q.relation_names().into_iter().map(|r| (r.to_string(), 2)).collect()
    }

    fn plan(name: &str) -> QueryPlan {
        let q = Query::resolve(name).unwrap();
        plan_query(&q, &graph_catalog(&q)).unwrap()
    }

    fn parts(p: &QueryPlan, d: usize) -> Vec<(String, usize)> {
        p.participants[d]
            .iter()
            .map(|x| (p.tries[x.trie].relation.clone(), x.level))
            .collect()
    }

    #[test]
    fn parse_path3() {
        let q = parse_query("path3(x,y,z) = R(x,y), S(y,z).").unwrap();
        assert_eq!(q.head, vec!["x", "y", "z"]);
        assert_eq!(q.atoms.len(), 2);
        assert_eq!(q.atoms[1], Atom { relation: "S".into(), vars: vec!["y".into(), "z".into()] });
        assert_eq!(q.to_string(), "path3(x,y,z) = R(x,y), S(y,z).");
    }

    #[test]
    fn parse_self_join_and_clique() {
        let q = parse_query("t(x) = R(x,x).").unwrap();
        assert_eq!(q.head, vec!["x"]);
        assert_eq!(q.atoms[0].vars, vec!["x", "x"]);
        let q = parse_query("clique4(x,y,z,w) = R(x,y), S(y,z), T(z,w), U(w,x), V(z,x), W(w,y).").unwrap();
        assert_eq!(q.atoms.len(), 6);
    }

    #[test]
    fn parse_errors_report_position() {
        match parse_query("p(x,y) = R(x,y)") {
            Err(Error::QuerySyntax { pos, .. }) => assert_eq!(pos, 15),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_query("p(x,_y) = R(x)."), Err(Error::QuerySyntax { pos: 4, .. })));
        assert!(parse_query("p(x) = R(x). junk").is_err());
        assert!(parse_query("p() = R(x).").is_err());
        assert!(parse_query("").is_err());
    }

    #[test]
    fn plan_path3_bindings() {
        let p = plan("path3");
        assert_eq!(p.order, vec!["x", "y", "z"]);
        assert_eq!(parts(&p, 0), vec![("R".into(), 0)]);
        assert_eq!(parts(&p, 1), vec![("R".into(), 1), ("S".into(), 0)]);
        assert_eq!(parts(&p, 2), vec![("S".into(), 1)]);
    }

    #[test]
    fn plan_cycle3_reorders_closing_atom() {
        let p = plan("cycle3");
        // T(z,x) is indexed as (x,z) so it can be descended in order.
        assert_eq!(p.tries[2].columns, vec![1, 0]);
        assert_eq!(parts(&p, 0), vec![("R".into(), 0), ("T".into(), 0)]);
        assert_eq!(parts(&p, 1), vec![("R".into(), 1), ("S".into(), 0)]);
        assert_eq!(parts(&p, 2), vec![("S".into(), 1), ("T".into(), 1)]);
    }

    #[test]
    fn plan_repeated_variable() {
        let q = parse_query("t(x) = R(x,x).").unwrap();
        let p = plan_query(&q, &graph_catalog(&q)).unwrap();
        assert_eq!(
            p.participants[0],
            vec![
                Participant { trie: 0, level: 0, chained: false },
                Participant { trie: 0, level: 1, chained: true }
            ]
        );
    }

    #[test]
    fn plan_errors() {
        let cat: Catalog = [("R".to_string(), 2)].into_iter().collect();
        let q = parse_query("p(x) = R(x,y).").unwrap();
        assert!(matches!(plan_query(&q, &cat), Err(Error::Plan(_))));
        let q = parse_query("p(x,y) = R(x,y,x).").unwrap();
        assert!(matches!(plan_query(&q, &cat), Err(Error::Arity { .. })));
        let q = parse_query("p(x,y) = Q(x,y).").unwrap();
        assert!(matches!(plan_query(&q, &cat), Err(Error::Plan(_))));
        let q = parse_query("p(x,y,z) = R(x,y).").unwrap();
        assert!(matches!(plan_query(&q, &cat), Err(Error::Plan(_))));
        let q = parse_query("p(x,x) = R(x,x).").unwrap();
        assert!(matches!(plan_query(&q, &cat), Err(Error::Plan(_))));
    }

    #[test]
    fn every_trie_level_bound_once_and_consecutive() {
        for (name, _) in BUILTIN_QUERIES {
            let p = plan(name);
            let mut seen = BTreeSet::new();
            for ps in &p.participants {
                for x in ps {
                    assert!(seen.insert((x.trie, x.level)));
                }
            }
            for (t, b) in p.tries.iter().enumerate() {
                for l in 0..b.columns.len() {
                    assert!(seen.contains(&(t, l)));
                }
                assert!(b.positions.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn cache_structure_of_benchmarks() {
        let cs = derive_cache_structure(&plan("path4"), CacheRange::Single);
        assert_eq!(cs.entries(), &[CacheEntrySpec { keys: vec![1], first: 2, last: 2 }]);
        let cs = derive_cache_structure(&plan("path4"), CacheRange::Maximal);
        assert_eq!(cs.entries(), &[CacheEntrySpec { keys: vec![1], first: 2, last: 3 }]);
        assert!(derive_cache_structure(&plan("cycle3"), CacheRange::Single).is_empty());
        assert!(derive_cache_structure(&plan("clique4"), CacheRange::Maximal).is_empty());
        let cs = derive_cache_structure(&plan("cycle4"), CacheRange::Single);
        assert_eq!(
            cs.entries(),
            &[
                CacheEntrySpec { keys: vec![1], first: 2, last: 2 },
                CacheEntrySpec { keys: vec![0, 2], first: 3, last: 3 }
            ]
        );
        let cs = derive_cache_structure(&plan("path3"), CacheRange::Single);
        assert_eq!(cs.entries(), &[CacheEntrySpec { keys: vec![1], first: 2, last: 2 }]);
        assert_eq!(cs.starting_at(2).unwrap().keys, vec![1]);
        assert!(cs.starting_at(1).is_none());
        assert_eq!(cs.ending_at(2).unwrap().first, 2);
    }

    #[test]
    fn keys_are_strict_subsets_of_prefix() {
        for (name, _) in BUILTIN_QUERIES {
            for mode in [CacheRange::Single, CacheRange::Maximal] {
                for e in derive_cache_structure(&plan(name), mode).entries() {
                    assert!(e.first > 0);
                    assert!(e.keys.len() < e.first);
                    assert!(e.keys.iter().all(|&k| k < e.first));
                }
            }
        }
    }

    #[test]
    fn bind_shares_storage_per_column_order() {
        let p = plan("cycle3");
        let g = Relation::from_edges("G", [(1, 2), (2, 3), (3, 1)]);
        let rels: BTreeMap<String, Relation> = ["R", "S", "T"]
            .iter()
            .map(|n| (n.to_string(), g.clone().rename(*n)))
            .collect();
        let ts = p.bind(&rels).unwrap();
        assert_eq!(ts.len(), 3);
        assert_eq!(ts.physical_count(), 3);
        assert_eq!(ts.get(2).enumerate(), vec![vec![1, 3], vec![2, 1], vec![3, 2]]);
        // one graph behind every name: R and S share the forward layout
        let shared = p.bind_with(|_| Some(&g)).unwrap();
        assert_eq!(shared.physical_count(), 2);
        assert_eq!(shared.physical_id(0), shared.physical_id(1));
    }
}
