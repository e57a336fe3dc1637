//! Independent oracles and graph generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ctjoin::query::{derive_cache_structure, plan_query, CacheRange, CacheStructure, Query, QueryPlan, TrieSet};
use ctjoin::trie::{Relation, VertexId};

pub const QUERIES: [&str; 5] = ["path3", "path4", "cycle3", "cycle4", "clique4"];

/// Exactly `edges` distinct directed edges over `vertices` vertices
/// (self-loops allowed).
pub fn random_graph(seed: u64, edges: usize, vertices: u32) -> Relation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = edges.min((vertices * vertices) as usize);
    let mut set = BTreeSet::new();
    while set.len() < edges {
        set.insert((rng.gen_range(0..vertices), rng.gen_range(0..vertices)));
    }
    Relation::from_edges(format!("g{seed}"), set)
}

/// The `i`-th graph of the fixed random suite: 25..=200 edges, dense enough
/// that cliques appear.
pub fn suite_graph(i: u64) -> Relation {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + i);
    let m = rng.gen_range(25..=200usize);
    let v = ((m as f64 * 2.5).sqrt().ceil() as u32).max(6);
    random_graph(1000 + i, m, v)
}

pub fn suite() -> Vec<Relation> {
    (0..20).map(suite_graph).collect()
}

/// Nested loops over the atoms in text order, set semantics, sorted output.
pub fn oracle<'r>(q: &Query, resolve: impl Fn(&str) -> Option<&'r Relation>) -> Vec<Vec<VertexId>> {
    let rels: Vec<&Relation> = q.atoms.iter().map(|a| resolve(&a.relation).expect("relation")).collect();
    let mut out = BTreeSet::new();
    let mut binding: HashMap<&str, VertexId> = HashMap::new();
    fn rec<'q>(
        i: usize,
        q: &'q Query,
        rels: &[&Relation],
        binding: &mut HashMap<&'q str, VertexId>,
        out: &mut BTreeSet<Vec<VertexId>>,
    ) {
        if i == q.atoms.len() {
            out.insert(q.head.iter().map(|v| binding[v.as_str()]).collect());
            return;
        }
        for t in rels[i].tuples() {
            let mut fresh = Vec::new();
            let mut ok = true;
            for (v, &x) in q.atoms[i].vars.iter().zip(t) {
                match binding.get(v.as_str()) {
                    Some(&b) if b != x => {
                        ok = false;
                        break;
                    }
                    Some(_) => {}
                    None => {
                        binding.insert(v, x);
                        fresh.push(v.as_str());
                    }
                }
            }
            if ok {
                rec(i + 1, q, rels, binding, out);
            }
            for v in fresh {
                binding.remove(v);
            }
        }
    }
    rec(0, q, &rels, &mut binding, &mut out);
    out.into_iter().collect()
}

pub struct Setup {
    pub query: Query,
    pub plan: QueryPlan,
    pub cs: CacheStructure,
    pub tries: TrieSet,
}

/// Every atom bound to `g`.
pub fn self_join(name: &str, g: &Relation) -> Setup {
    let query = Query::resolve(name).unwrap();
    let catalog = query.relation_names().into_iter().map(|n| (n.to_string(), 2)).collect();
    let plan = plan_query(&query, &catalog).unwrap();
    let tries = plan.bind_with(|_| Some(g)).unwrap();
    let cs = derive_cache_structure(&plan, CacheRange::Single);
    Setup { query, plan, cs, tries }
}

/// Does every atom have some tuple agreeing with the bound variables?
pub fn locally_consistent(q: &Query, g: &Relation, bound: &HashMap<&str, VertexId>) -> bool {
    q.atoms.iter().all(|a| {
        g.tuples().iter().any(|t| {
            a.vars
                .iter()
                .zip(t)
                .all(|(v, &x)| bound.get(v.as_str()).is_none_or(|&b| b == x))
        })
    })
}

pub fn vertices(g: &Relation) -> Vec<VertexId> {
    let s: BTreeSet<VertexId> = g.tuples().iter().flatten().copied().collect();
    s.into_iter().collect()
}
