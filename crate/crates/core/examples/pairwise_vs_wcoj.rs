//! Intermediate results and memory traffic: binary hash joins versus the
//! cached trie join, on every benchmark pattern.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ctjoin::cli::{EngineKind, RunManifest};
use ctjoin::query::Query;
use ctjoin::trie::Relation;

fn main() -> ctjoin::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let g = Relation::from_edges("random", (0..400).map(|_| (rng.gen_range(0..60), rng.gen_range(0..60))));
    println!("{:>8} {:>9} {:>14} {:>14} {:>12} {:>12}", "query", "results", "inter(pair)", "inter(ctj)", "touch(pair)", "dram(sim)");
    for name in ["path3", "path4", "cycle3", "cycle4", "clique4"] {
        let mut m = RunManifest::new(Query::resolve(name)?, g.clone());
        m.count_only = true;
        let run = |e| m.execute(e, &mut |_: &[u32]| {});
        let pair = run(EngineKind::Pairwise)?;
        let ctj = run(EngineKind::Ctj)?;
        let sim = run(EngineKind::Sim)?;
        assert_eq!(pair.count, ctj.count);
        println!(
            "{:>8} {:>9} {:>14} {:>14} {:>12} {:>12}",
            name,
            ctj.count,
            pair.row.stats.intermediate_tuples,
            ctj.row.stats.intermediate_tuples,
            pair.row.stats.memory_touches,
            sim.row.stats.dram_accesses()
        );
    }
    Ok(())
}
