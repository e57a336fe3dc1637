//! Sweep thread counts and multithreading schemes on the accelerator model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ctjoin::query::{derive_cache_structure, plan_query, CacheRange, Query};
use ctjoin::sim::{simulate, MtScheme, SimConfig};
use ctjoin::trie::Relation;

fn main() -> ctjoin::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = Relation::from_edges("G", (0..2000).map(|_| (rng.gen_range(0..200), rng.gen_range(0..200))));
    let q = Query::resolve("path3")?;
    let catalog = q.relation_names().into_iter().map(|n| (n.to_string(), 2)).collect();
    let plan = plan_query(&q, &catalog)?;
    let tries = plan.bind_with(|_| Some(&g))?;
    let cs = derive_cache_structure(&plan, CacheRange::Single);

    println!("{:>8} {:>7} {:>10} {:>8} {:>9} {:>9}", "scheme", "threads", "cycles", "speedup", "dramRd", "results");
    for scheme in [MtScheme::Static, MtScheme::Dynamic, MtScheme::Hybrid] {
        let mut base = None;
        for threads in [1, 8, 32] {
            let cfg = SimConfig {
                thread_count: threads,
                mt_scheme: scheme,
                ..SimConfig::default()
            };
            let out = simulate(&plan, &cs, &tries, &cfg)?;
            let c = out.stats.cycles;
            let b = *base.get_or_insert(c);
            println!(
                "{:>8} {:>7} {:>10} {:>7.2}x {:>9} {:>9}",
                scheme.to_string(),
                threads,
                c,
                b as f64 / c as f64,
                out.stats.dram_reads,
                out.results.count
            );
        }
    }
    Ok(())
}
