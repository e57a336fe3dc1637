use super::*;
use crate::engine::{cached_trie_join, VecSink};
use crate::pjr::PjrConfig;
use crate::query::{derive_cache_structure, plan_query, CacheRange, Catalog, Query};
use crate::trie::Relation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(q: &str, edges: &[(u32, u32)]) -> (QueryPlan, TrieSet, CacheStructure) {
    let q = Query::resolve(q).unwrap();
    let cat: Catalog = q.relation_names().into_iter().map(|r| (r.to_string(), 2)).collect();
    let plan = plan_query(&q, &cat).unwrap();
    let g = Relation::from_edges("G", edges.iter().copied());
    let tries = plan.bind_with(|_| Some(&g)).unwrap();
    let cs = derive_cache_structure(&plan, CacheRange::Single);
    (plan, tries, cs)
}

fn engine(plan: &QueryPlan, tries: &TrieSet, cs: &CacheStructure) -> Vec<Vec<u32>> {
    let mut cache = PjrCache::new(PjrConfig::default());
    let mut sink = VecSink::default();
    cached_trie_join(plan, cs, tries, Some(&mut cache), &mut sink, &mut RunStats::default());
    sink.0
}

fn cfg(threads: usize, mt: MtScheme) -> SimConfig {
    SimConfig {
        thread_count: threads,
        mt_scheme: mt,
        collect_results: true,
        ..SimConfig::default()
    }
}

fn graph(n: u32, m: u32, mul: u32) -> Vec<(u32, u32)> {
    (0..m).map(|i| ((i * mul + i / 3) % n, (i * 7 + 3 * (i % 5)) % n)).collect()
}

#[test]
fn path3_worked_example() {
    let (plan, tries, cs) = setup("path3", &[(1, 1), (1, 2), (2, 3)]);
    let out = simulate(&plan, &cs, &tries, &cfg(1, MtScheme::Dynamic)).unwrap();
    assert_eq!(out.results.sorted_tuples().unwrap(), vec![vec![1, 1, 1], vec![1, 1, 2], vec![1, 2, 3]]);
    assert_eq!(out.stats.results_emitted, 3);
    assert!(out.stats.cycles > 0);
}

#[test]
fn empty_relation_still_writes_done() {
    let (plan, tries, cs) = setup("cycle3", &[]);
    let out = simulate(&plan, &cs, &tries, &cfg(4, MtScheme::Hybrid)).unwrap();
    assert_eq!(out.results.count, 0);
    assert!(out.stats.cycles > 0);
    assert_eq!(out.stats.dram_writes, 1);
}

#[test]
fn all_schemes_match_engine() {
    let edges = graph(23, 120, 5);
    for q in ["path3", "path4", "cycle3", "cycle4", "clique4"] {
        let (plan, tries, cs) = setup(q, &edges);
        let want = engine(&plan, &tries, &cs);
        for mt in [MtScheme::Static, MtScheme::Dynamic, MtScheme::Hybrid] {
            for threads in [1, 8, 32] {
                let out = simulate(&plan, &cs, &tries, &cfg(threads, mt)).unwrap();
                assert_eq!(out.results.sorted_tuples().unwrap(), want, "{q} {mt} {threads}");
                assert!(out.stats.max_live_threads as usize <= threads);
                assert_eq!(out.safety, SafetyCounters::default());
            }
        }
    }
}

fn random_graph(seed: u64, v: u32, m: usize) -> Vec<(u32, u32)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| (r.gen_range(0..v), r.gen_range(0..v))).collect()
}

#[test]
fn identical_runs_are_identical() {
    let edges = random_graph(3, 40, 200);
    let (plan, tries, cs) = setup("path4", &edges);
    let c = SimConfig::default();
    let a = simulate(&plan, &cs, &tries, &c).unwrap();
    let b = simulate(&plan, &cs, &tries, &c).unwrap();
    assert_eq!(a.stats, b.stats);
    assert_eq!(a.results, b.results);
}

#[test]
fn shallow_queues_deadlock() {
    let (plan, tries, cs) = setup("cycle3", &[(0, 1), (1, 2), (2, 0)]);
    let c = SimConfig {
        queue_depths: QueueDepths::uniform(1),
        ..SimConfig::default()
    };
    match simulate(&plan, &cs, &tries, &c) {
        Err(Error::Deadlock { detail, .. }) => assert!(detail.contains("Cupid -> Midwife -> Cupid"), "{detail}"),
        other => panic!("expected deadlock, got {other:?}"),
    }
    // one more slot is enough
    let c = SimConfig {
        queue_depths: QueueDepths::uniform(2),
        ..SimConfig::default()
    };
    assert_eq!(simulate(&plan, &cs, &tries, &c).unwrap().results.count, 3);
}

#[test]
fn spawned_child_takes_the_rest_of_the_first_variable() {
    let (plan, tries, cs) = setup("path3", &[(1, 2), (2, 3), (3, 1)]);
    let c = SimConfig {
        trace: true,
        ..cfg(2, MtScheme::Dynamic)
    };
    let out = simulate(&plan, &cs, &tries, &c).unwrap();
    let emitters: Vec<usize> = out
        .trace
        .iter()
        .filter(|l| l.contains("\tEmit\t"))
        .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
        .collect();
    let tuples = out.results.tuples.unwrap();
    assert_eq!(emitters.len(), 3);
    for (t, tid) in tuples.iter().zip(&emitters) {
        if *tid == 0 {
            assert_eq!(t[0], 1, "parent keeps x=1");
        } else {
            assert!(t[0] > 1, "child handles x>1");
        }
    }
    assert!(emitters.contains(&0) && emitters.contains(&1));
    assert!(out.stats.max_live_threads <= 2);
}

#[test]
fn static_scheme_never_spawns() {
    let edges = random_graph(5, 30, 150);
    let (plan, tries, cs) = setup("path3", &edges);
    let out = simulate(&plan, &cs, &tries, &cfg(8, MtScheme::Static)).unwrap();
    assert!(out.stats.threads_spawned <= 8);
    assert_eq!(out.stats.threads_spawned, out.stats.max_live_threads);
}

#[test]
fn pool_denies_when_saturated() {
    let mut p = ThreadPool::new(2);
    assert_eq!(p.spawn(), Ok(0));
    assert_eq!(p.spawn(), Ok(1));
    assert_eq!(p.spawn(), Err(Denied));
    p.exit();
    assert_eq!(p.spawn(), Ok(2));
    assert_eq!(p.max_live, 2);
}

#[test]
fn write_buffer_flushes_per_line() {
    // 12-byte results: five fit in a 64-byte line, the sixth spills
    let five: Vec<(u32, u32)> = (0..5).map(|i| (0, 10 + i)).chain([(100, 0)]).collect();
    let (plan, tries, cs) = setup("path3", &five);
    let out = simulate(&plan, &cs, &tries, &cfg(1, MtScheme::Dynamic)).unwrap();
    assert_eq!(out.results.count, 5);
    assert_eq!(out.stats.dram_writes, 2, "residual line + DONE");

    let six: Vec<(u32, u32)> = (0..6).map(|i| (0, 10 + i)).chain([(100, 0)]).collect();
    let (plan, tries, cs) = setup("path3", &six);
    let out = simulate(&plan, &cs, &tries, &cfg(1, MtScheme::Dynamic)).unwrap();
    assert_eq!(out.results.count, 6);
    assert_eq!(out.stats.dram_writes, 3);
}

#[test]
fn result_writes_bypass_caches() {
    let edges = random_graph(11, 30, 200);
    let (plan, tries, cs) = setup("path3", &edges);
    let c = SimConfig::default();
    let mut sim = Sim::new(&plan, &cs, &tries, &c);
    sim.run().unwrap();
    for line in 0..sim.wb_lines {
        assert!(!sim.mem.cached(sim.addr.result_base + line * 64));
    }
    let out = sim.finish();
    let s = &out.stats;
    assert_eq!(s.store("DRAM"), s.dram_reads + s.dram_writes);
    assert_eq!(s.store("L1"), s.l1_hits + s.store("L2"));
    assert!(s.dram_writes >= out.results.count * 12 / 64);
    assert!(s.store("L1") <= s.element_reads);
}

#[test]
fn tie_perturbation_keeps_cache_safe() {
    let edges = random_graph(2, 25, 180);
    let (plan, tries, cs) = setup("path4", &edges);
    let want = engine(&plan, &tries, &cs);
    for seed in 0..25 {
        let c = SimConfig {
            tie_seed: Some(seed),
            ..cfg(32, MtScheme::Dynamic)
        };
        let out = simulate(&plan, &cs, &tries, &c).unwrap();
        assert_eq!(out.safety, SafetyCounters::default());
        assert_eq!(out.results.sorted_tuples().unwrap(), want);
        assert!(out.stats.cache_hits > 0);
    }
}

#[test]
fn lub_search_probe_count() {
    let v: Vec<u32> = (0..8).map(|i| 2 * i).collect();
    for target in 0..18 {
        let (mut s, mut step) = LubSearch::start(0, 8, target);
        let mut reads = 0;
        let got = loop {
            match step {
                LubStep::Read(i) => {
                    reads += 1;
                    step = s.on_value(v[i]);
                }
                LubStep::Done(i, val) => break (i, val),
            }
        };
        assert_eq!(got, crate::engine::lub(&v, 0, 8, target));
        assert!(reads <= 4, "target {target}: {reads}");
    }
    assert_eq!(LubSearch::start(3, 3, 1).1, LubStep::Done(3, None));
}

#[test]
fn midwife_reads_one_child_range() {
    let (plan, tries, cs) = setup("path3", &[(1, 1), (1, 2)]);
    let c = SimConfig {
        trace: true,
        ..cfg(1, MtScheme::Dynamic)
    };
    let mut sim = Sim::new(&plan, &cs, &tries, &c);
    sim.run().unwrap();
    // R's x=1 expands to [0,2)
    assert_eq!(
        tries.get(0).child_range(0, 0, 0).unwrap(),
        ArrayRange { trie: 0, level: 1, start: 0, end: 2 }
    );
    let out = sim.finish();
    assert_eq!(out.results.count, 2);
}

#[test]
fn energy_is_weighted_sum() {
    let (plan, tries, cs) = setup("cycle3", &random_graph(1, 20, 80));
    let mut w = EnergyWeights::default();
    w.set("dram", 1.0).unwrap();
    let c = SimConfig {
        energy_weights: Some(w),
        ..SimConfig::default()
    };
    let out = simulate(&plan, &cs, &tries, &c).unwrap();
    assert_eq!(out.stats.weighted_energy, Some((out.stats.dram_reads + out.stats.dram_writes) as f64));
}
