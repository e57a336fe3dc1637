//! Partial-join-result caching on path4: the z-extensions of each y are
//! computed once and replayed for every x that reaches the same y.

use ctjoin::engine::{cached_trie_join, CountSink};
use ctjoin::pjr::{PjrCache, PjrConfig};
use ctjoin::query::{derive_cache_structure, plan_query, CacheRange, Query};
use ctjoin::stats::RunStats;
use ctjoin::trie::Relation;

fn main() -> ctjoin::error::Result<()> {
    // many x share y=10, which fans out to two z values
    let mut edges: Vec<(u32, u32)> = (0..8).map(|x| (x, 10)).collect();
    edges.extend([(10, 20), (10, 21), (20, 30), (21, 31), (21, 32)]);
    let g = Relation::from_edges("G", edges);

    let q = Query::resolve("path4")?;
    let catalog = q.relation_names().into_iter().map(|n| (n.to_string(), 2)).collect();
    let plan = plan_query(&q, &catalog)?;
    let tries = plan.bind_with(|_| Some(&g))?;
    let cs = derive_cache_structure(&plan, CacheRange::Single);
    for e in cs.entries() {
        let name = |ps: &[usize]| ps.iter().map(|&p| plan.order[p].as_str()).collect::<Vec<_>>().join(",");
        println!("entry: key ({}) -> values ({})", name(&e.keys), name(&e.values().collect::<Vec<_>>()));
    }

    let mut plain = RunStats::default();
    let mut n0 = CountSink::default();
    cached_trie_join(&plan, &cs, &tries, None, &mut n0, &mut plain);

    let mut cache = PjrCache::new(PjrConfig::default());
    let mut cached = RunStats::default();
    let mut n1 = CountSink::default();
    cached_trie_join(&plan, &cs, &tries, Some(&mut cache), &mut n1, &mut cached);

    assert_eq!(n0.0, n1.0);
    println!("results: {}", n1.0);
    println!("lub calls: {} without cache, {} with", plain.lub_calls, cached.lub_calls);
    println!(
        "cache: {} hits, {} misses, {} tuples materialized",
        cached.cache_hits, cached.cache_misses, cached.intermediate_tuples
    );
    Ok(())
}
