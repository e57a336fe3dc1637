//! Command-line front end. Argument parsing lives here so the binary is a
//! one-liner and the commands can be driven from tests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::engine::{cached_trie_join, partitioned_join, ResultSink, WriterSink};
use crate::error::{Error, Result};
use crate::pairwise::run_pairwise;
use crate::pjr::{key_hash, PjrCache, PjrConfig};
use crate::query::{derive_cache_structure, plan_query, CacheRange, CacheStructure, Catalog, Query, QueryPlan, TrieSet};
use crate::sim::{simulate, MtScheme, SimConfig};
use crate::stats::{append_csv, write_csv, StatsRow};
use crate::trie::{load_edge_list, LoadOptions, Relation, TrieIndex, VertexId};

#[derive(Parser, Debug)]
#[command(name = "ctjoin", version, about = "Cached trie joins for graph patterns, with an accelerator timing model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Evaluate a query with a functional engine and write the results.
    Run(RunArgs),
    /// Run the accelerator model and print a summary line.
    Simulate(RunArgs),
    /// Evaluate with ctj, ctj-nocache and pairwise; print one CSV row each.
    Compare(RunArgs),
    /// Build a trie from an edge list and write or print it.
    Index(IndexArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EngineKind {
    Ctj,
    CtjNocache,
    Pairwise,
    Sim,
}

impl EngineKind {
    pub fn label(self) -> &'static str {
        match self {
            EngineKind::Ctj => "ctj",
            EngineKind::CtjNocache => "ctj-nocache",
            EngineKind::Pairwise => "pairwise",
            EngineKind::Sim => "sim",
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Builtin name (path3, path4, cycle3, cycle4, clique4) or datalog text.
    #[arg(long)]
    pub query: String,
    /// Edge list bound to every relation not given by --relation.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Bind one relation name to its own edge list.
    #[arg(long, value_name = "NAME=PATH")]
    pub relation: Vec<String>,
    /// Add the reverse of every edge on load.
    #[arg(long)]
    pub undirected: bool,
    #[arg(long, value_enum)]
    pub engine: Option<EngineKind>,
    /// Static partitions for ctj; hardware threads for sim.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub mt: Option<MtScheme>,
    /// Total cached tuples in the partial-join-result cache.
    #[arg(long)]
    pub pjr_capacity: Option<usize>,
    /// Cached tuples per entry.
    #[arg(long)]
    pub pjr_entry_capacity: Option<usize>,
    #[arg(long)]
    pub pjr_disable: bool,
    /// Cache the widest valid position range instead of a single position.
    #[arg(long)]
    pub cache_max_range: bool,
    /// Only count results.
    #[arg(long)]
    pub count: bool,
    /// Cross-check the result set against the uncached trie join.
    #[arg(long)]
    pub verify: bool,
    /// Result file (stdout by default).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Append stats rows to this CSV file.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    /// Event trace file (simulated runs).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Simulator config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Simulator override, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// compare: also add a simulated row.
    #[arg(long)]
    pub with_sim: bool,
}

#[derive(Args, Debug, Clone)]
pub struct IndexArgs {
    /// Edge list to index.
    #[arg(long, conflicts_with = "load")]
    pub dataset: Option<PathBuf>,
    /// Read an existing dump instead.
    #[arg(long)]
    pub load: Option<PathBuf>,
    #[arg(long)]
    pub undirected: bool,
    /// Column order, e.g. `1,0` for a reversed edge trie.
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<usize>>,
    /// Write the binary dump here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print every level's arrays.
    #[arg(long)]
    pub show: bool,
}

/// Everything one command needs, resolved from flags and files.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub query: Query,
    /// Bound to every relation name without an explicit binding.
    pub dataset: Option<Relation>,
    pub relations: BTreeMap<String, Relation>,
    pub dataset_label: String,
    pub engine: EngineKind,
    /// Static partitions for the functional trie join.
    pub partitions: usize,
    pub cache_range: CacheRange,
    pub sim: SimConfig,
    pub count_only: bool,
    pub verify: bool,
    pub output: Option<PathBuf>,
    pub stats_out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

/// Count, order-independent fingerprint and stats of one engine run.
#[derive(Debug, Clone)]
pub struct EngineOutcome {
    pub count: u64,
    pub fingerprint: u64,
    pub row: StatsRow,
    pub trace: Vec<String>,
}

struct Tally<'s> {
    inner: &'s mut dyn ResultSink,
    count: u64,
    fingerprint: u64,
}

impl ResultSink for Tally<'_> {
    fn push(&mut self, t: &[VertexId]) {
        self.count += 1;
        self.fingerprint = self.fingerprint.wrapping_add(key_hash(t));
        self.inner.push(t);
    }
}

fn split_binding(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| Error::Config(format!("expected NAME=VALUE, got {s:?}")))
}

impl RunManifest {
    /// Self-join manifest: every atom reads `dataset`.
    pub fn new(query: Query, dataset: Relation) -> Self {
        RunManifest {
            query,
            dataset_label: dataset.name().to_string(),
            dataset: Some(dataset),
            relations: BTreeMap::new(),
            engine: EngineKind::Ctj,
            partitions: 1,
            cache_range: CacheRange::Single,
            sim: SimConfig::default(),
            count_only: false,
            verify: false,
            output: None,
            stats_out: None,
            trace: None,
        }
    }

    pub fn from_args(args: &RunArgs, default_engine: EngineKind) -> Result<Self> {
        let query = Query::resolve(&args.query)?;
        let opts = LoadOptions {
            undirected: args.undirected,
        };
        let dataset = args.dataset.as_ref().map(|p| load_edge_list(p, opts)).transpose()?;
        let mut relations = BTreeMap::new();
        for b in &args.relation {
            let (name, path) = split_binding(b)?;
            relations.insert(name.to_string(), load_edge_list(path, opts)?.rename(name));
        }
        let dataset_label = match &args.dataset {
            Some(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            None => relations.keys().cloned().collect::<Vec<_>>().join("+"),
        };

        let mut sim = SimConfig::default();
        if let Some(path) = &args.config {
            sim.apply_file(path)?;
        }
        for o in &args.overrides {
            let (k, v) = split_binding(o)?;
            sim.apply(k, v)?;
        }
        if let Some(t) = args.threads {
            sim.thread_count = t;
        }
        if let Some(mt) = args.mt {
            sim.mt_scheme = mt;
        }
        if let Some(c) = args.pjr_capacity {
            sim.pjr.total_capacity = c;
        }
        if let Some(c) = args.pjr_entry_capacity {
            sim.pjr.entry_capacity = c;
        }
        if args.pjr_disable {
            sim.pjr_enabled = false;
        }
        sim.trace = args.trace.is_some();

        let m = RunManifest {
            query,
            dataset,
            relations,
            dataset_label,
            engine: args.engine.unwrap_or(default_engine),
            partitions: args.threads.unwrap_or(1).max(1),
            cache_range: if args.cache_max_range {
                CacheRange::Maximal
            } else {
                CacheRange::Single
            },
            sim,
            count_only: args.count,
            verify: args.verify,
            output: args.output.clone(),
            stats_out: args.stats_out.clone(),
            trace: args.trace.clone(),
        };
        for name in m.query.relation_names() {
            if m.relation(name).is_none() {
                return Err(Error::Config(format!("no input for relation {name}: pass --dataset or --relation {name}=PATH")));
            }
        }
        Ok(m)
    }

    pub fn relation(&self, name: &str) -> Option<&Relation> {
        self.relations.get(name).or(self.dataset.as_ref())
    }

    /// Cache configuration for the functional engine, `None` when disabled.
    pub fn pjr(&self) -> Option<PjrConfig> {
        self.sim.pjr_enabled.then_some(self.sim.pjr)
    }

    pub fn plan(&self) -> Result<(QueryPlan, CacheStructure, TrieSet)> {
        let catalog: Catalog = self
            .query
            .relation_names()
            .into_iter()
            .filter_map(|n| self.relation(n).map(|r| (n.to_string(), r.arity())))
            .collect();
        let plan = plan_query(&self.query, &catalog)?;
        let cs = derive_cache_structure(&plan, self.cache_range);
        let tries = plan.bind_with(|n| self.relation(n))?;
        Ok((plan, cs, tries))
    }

    fn row(&self, engine: EngineKind, scheme: String, threads: usize, stats: crate::stats::RunStats) -> StatsRow {
        StatsRow {
            query: self.query.name.clone(),
            dataset: self.dataset_label.clone(),
            engine: engine.label().to_string(),
            scheme,
            threads,
            stats,
        }
    }

    /// Runs one engine, streaming results into `sink`. Simulated results are
    /// delivered sorted, and only when tuples are collected (not `count_only`).
    pub fn execute(&self, engine: EngineKind, sink: &mut dyn ResultSink) -> Result<EngineOutcome> {
        let mut stats = crate::stats::RunStats::default();
        let mut tally = Tally {
            inner: sink,
            count: 0,
            fingerprint: 0,
        };
        match engine {
            EngineKind::Ctj | EngineKind::CtjNocache => {
                let (plan, cs, tries) = self.plan()?;
                let pjr = if engine == EngineKind::Ctj { self.pjr() } else { None };
                if self.partitions > 1 {
                    partitioned_join(&plan, &cs, &tries, pjr, self.partitions, &mut tally, &mut stats);
                } else {
                    let mut cache = pjr.map(PjrCache::new);
                    cached_trie_join(&plan, &cs, &tries, cache.as_mut(), &mut tally, &mut stats);
                }
                let (count, fingerprint) = (tally.count, tally.fingerprint);
                Ok(EngineOutcome {
                    count,
                    fingerprint,
                    row: self.row(engine, "-".into(), self.partitions, stats),
                    trace: Vec::new(),
                })
            }
            EngineKind::Pairwise => {
                run_pairwise(&self.query, |n| self.relation(n), &mut tally, &mut stats)?;
                let (count, fingerprint) = (tally.count, tally.fingerprint);
                Ok(EngineOutcome {
                    count,
                    fingerprint,
                    row: self.row(engine, "-".into(), 1, stats),
                    trace: Vec::new(),
                })
            }
            EngineKind::Sim => {
                let (plan, cs, tries) = self.plan()?;
                let mut cfg = self.sim.clone();
                cfg.collect_results = !self.count_only;
                let cs = if cfg.pjr_enabled { cs } else { CacheStructure::empty(plan.n()) };
                let out = simulate(&plan, &cs, &tries, &cfg)?;
                if let Some(tuples) = out.results.sorted_tuples() {
                    for t in &tuples {
                        tally.inner.push(t);
                    }
                }
                Ok(EngineOutcome {
                    count: out.results.count,
                    fingerprint: out.results.fingerprint,
                    row: self.row(engine, cfg.mt_scheme.to_string(), cfg.thread_count, out.stats),
                    trace: out.trace,
                })
            }
        }
    }

    /// Compares an outcome with the uncached trie join.
    pub fn verify_outcome(&self, got: &EngineOutcome) -> Result<()> {
        let want = self.execute(EngineKind::CtjNocache, &mut crate::engine::CountSink::default())?;
        if (got.count, got.fingerprint) != (want.count, want.fingerprint) {
            return Err(Error::Verify(format!(
                "{} produced {} results (fingerprint {:016x}), reference produced {} ({:016x})",
                got.row.engine, got.count, got.fingerprint, want.count, want.fingerprint
            )));
        }
        Ok(())
    }

    fn finish(&self, outcomes: &[EngineOutcome]) -> Result<()> {
        if let Some(path) = &self.trace {
            let mut f = BufWriter::new(File::create(path)?);
            for o in outcomes {
                for line in &o.trace {
                    writeln!(f, "{line}")?;
                }
            }
            f.flush()?;
        }
        if let Some(path) = &self.stats_out {
            let rows: Vec<StatsRow> = outcomes.iter().map(|o| o.row.clone()).collect();
            append_csv(path, &rows)?;
        }
        Ok(())
    }
}

fn open_output<'a>(path: &Option<PathBuf>, stdout: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(stdout),
    })
}

/// Results go to `--output` or `out`; with `--count` only the count is printed.
pub fn cmd_run(m: &RunManifest, out: &mut dyn Write) -> Result<EngineOutcome> {
    let outcome = if m.count_only {
        let o = m.execute(m.engine, &mut |_: &[VertexId]| {})?;
        writeln!(out, "{}", o.count)?;
        o
    } else {
        let mut sink = WriterSink::new(open_output(&m.output, out)?);
        let o = m.execute(m.engine, &mut sink)?;
        sink.finish()?;
        o
    };
    if m.verify {
        m.verify_outcome(&outcome)?;
    }
    m.finish(std::slice::from_ref(&outcome))?;
    Ok(outcome)
}

/// Prints `key=value` summary fields; tuples are written only to `--output`.
pub fn cmd_simulate(m: &RunManifest, out: &mut dyn Write) -> Result<EngineOutcome> {
    let outcome = match (&m.output, m.count_only) {
        (Some(p), false) => {
            let mut sink = WriterSink::new(BufWriter::new(File::create(p)?));
            let o = m.execute(EngineKind::Sim, &mut sink)?;
            sink.finish()?;
            o
        }
        _ => {
            let mut quiet = m.clone();
            quiet.count_only = true;
            quiet.execute(EngineKind::Sim, &mut |_: &[VertexId]| {})?
        }
    };
    let s = &outcome.row.stats;
    writeln!(
        out,
        "results={} cycles={} seconds={:.9} dram_reads={} dram_writes={} l1_hits={} l2_hits={} cache_hits={} threads_spawned={} max_live_threads={}{}",
        outcome.count,
        s.cycles,
        m.sim.seconds(s.cycles),
        s.dram_reads,
        s.dram_writes,
        s.l1_hits,
        s.l2_hits,
        s.cache_hits,
        s.threads_spawned,
        s.max_live_threads,
        s.weighted_energy.map(|e| format!(" energy={e:.3}")).unwrap_or_default(),
    )?;
    if m.verify {
        m.verify_outcome(&outcome)?;
        writeln!(out, "verified")?;
    }
    m.finish(std::slice::from_ref(&outcome))?;
    Ok(outcome)
}

/// Writes a CSV header plus one row per engine to `out`.
pub fn cmd_compare(m: &RunManifest, with_sim: bool, mut out: &mut dyn Write) -> Result<Vec<EngineOutcome>> {
    let mut engines = vec![EngineKind::Ctj, EngineKind::CtjNocache, EngineKind::Pairwise];
    if with_sim {
        engines.push(EngineKind::Sim);
    }
    let mut counting = m.clone();
    counting.count_only = true;
    let outcomes = engines
        .into_iter()
        .map(|e| counting.execute(e, &mut |_: &[VertexId]| {}))
        .collect::<Result<Vec<_>>>()?;
    if m.verify {
        for o in &outcomes {
            m.verify_outcome(o)?;
        }
    }
    let rows: Vec<StatsRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_csv(&mut out, &rows, true)?;
    m.finish(&outcomes)?;
    Ok(outcomes)
}

pub fn cmd_index(args: &IndexArgs, out: &mut dyn Write) -> Result<TrieIndex> {
    let trie = match (&args.dataset, &args.load) {
        (Some(p), _) => {
            let rel = load_edge_list(
                p,
                LoadOptions {
                    undirected: args.undirected,
                },
            )?;
            let cols = args.columns.clone().unwrap_or_else(|| (0..rel.arity()).collect());
            let mut sorted = cols.clone();
            sorted.sort_unstable();
            if sorted != (0..rel.arity()).collect::<Vec<_>>() {
                return Err(Error::Config(format!("--columns must permute 0..{}", rel.arity())));
            }
            TrieIndex::build_permuted(&rel, &cols)
        }
        (None, Some(p)) => TrieIndex::read_dump(&mut io::BufReader::new(File::open(p)?))?,
        (None, None) => return Err(Error::Config("index needs --dataset or --load".into())),
    };
    for (i, lvl) in trie.levels().iter().enumerate() {
        writeln!(out, "level {i}: {} values", lvl.values.len())?;
        if args.show {
            writeln!(out, "  values  {:?}", lvl.values)?;
            if !lvl.child_offsets.is_empty() {
                writeln!(out, "  offsets {:?}", lvl.child_offsets)?;
            }
        }
    }
    if let Some(p) = &args.out {
        let mut f = BufWriter::new(File::create(p)?);
        trie.write_dump(&mut f)?;
        f.flush()?;
    }
    Ok(trie)
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(&RunManifest::from_args(a, EngineKind::Ctj)?, out).map(drop),
        Command::Simulate(a) => cmd_simulate(&RunManifest::from_args(a, EngineKind::Sim)?, out).map(drop),
        Command::Compare(a) => cmd_compare(&RunManifest::from_args(a, EngineKind::Ctj)?, a.with_sim, out).map(drop),
        Command::Index(a) => cmd_index(a, out).map(drop),
    }
}

/// Process entry point: 0 on success, 1 on any error, 2 on bad arguments.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match dispatch(&cli, &mut lock).and_then(|_| lock.flush().map_err(Error::from)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
