//! A datalog query over several named relations, including a repeated
//! variable (self-loops) and a relation used in reverse.

use std::collections::BTreeMap;

use ctjoin::engine::{cached_trie_join, VecSink};
use ctjoin::pairwise::run_pairwise;
use ctjoin::query::{catalog_of, derive_cache_structure, parse_query, plan_query, CacheRange};
use ctjoin::stats::RunStats;
use ctjoin::trie::Relation;

fn main() -> ctjoin::error::Result<()> {
    let follows = Relation::from_edges("Follows", [(1, 2), (2, 3), (3, 1), (2, 2), (4, 2)]);
    let likes = Relation::from_edges("Likes", [(2, 100), (3, 101), (1, 100)]);
    let q = parse_query("fans(a,b,item) = Follows(a,b), Likes(b,item), Likes(a,item).")?;
    let loops = parse_query("selfish(v) = Follows(v,v).")?;

    let rels: BTreeMap<String, Relation> = [follows, likes].into_iter().map(|r| (r.name().to_string(), r)).collect();
    let catalog = catalog_of(rels.values());
    for q in [&q, &loops] {
        let plan = plan_query(q, &catalog)?;
        let tries = plan.bind(&rels)?;
        let cs = derive_cache_structure(&plan, CacheRange::Single);
        let mut out = VecSink::default();
        cached_trie_join(&plan, &cs, &tries, None, &mut out, &mut RunStats::default());

        let mut check = VecSink::default();
        run_pairwise(q, |n| rels.get(n), &mut check, &mut RunStats::default())?;
        assert_eq!(out.0, check.0);
        println!("{q}\n  order {:?}\n  {:?}", plan.order, out.0);
    }
    Ok(())
}
