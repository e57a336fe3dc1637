//! List directed triangles in an edge list (or a small built-in graph).
//!
//!     cargo run --example triangle_listing -- path/to/edges.txt

use ctjoin::engine::{cached_trie_join, VecSink};
use ctjoin::query::{derive_cache_structure, plan_query, CacheRange, Query};
use ctjoin::stats::RunStats;
use ctjoin::trie::{load_edge_list, LoadOptions, Relation};

fn main() -> ctjoin::error::Result<()> {
    let g = match std::env::args().nth(1) {
        Some(path) => load_edge_list(path, LoadOptions::default())?,
        None => Relation::from_edges("G", [(0, 1), (1, 2), (2, 0), (2, 3), (3, 0), (0, 2)]),
    };
    let q = Query::resolve("cycle3")?;
    println!("{q}");
    let catalog = q.relation_names().into_iter().map(|n| (n.to_string(), 2)).collect();
    let plan = plan_query(&q, &catalog)?;
    // every atom reads the same graph
    let tries = plan.bind_with(|_| Some(&g))?;
    let cs = derive_cache_structure(&plan, CacheRange::Single);
    println!("cache entries: {} (a triangle has nothing reusable)", cs.entries().len());

    let mut out = VecSink::default();
    let mut stats = RunStats::default();
    cached_trie_join(&plan, &cs, &tries, None, &mut out, &mut stats);
    for t in &out.0 {
        println!("{} -> {} -> {} -> {}", t[0], t[1], t[2], t[0]);
    }
    println!("{} triangles, {} lub calls", out.0.len(), stats.lub_calls);
    Ok(())
}
