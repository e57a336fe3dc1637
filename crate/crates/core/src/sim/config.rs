use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pjr::PjrConfig;

/// Saved continuation per thread in Cupid's state store.
pub const CUPID_THREAD_STATE_BYTES: usize = 512;
pub const CUPID_STORE_BYTES: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MtScheme {
    /// Threads own fixed slices of the first variable.
    Static,
    /// One initial thread; a new thread takes the rest of the search space
    /// after each match while threads are free.
    Dynamic,
    /// Static seeds, then dynamic splitting.
    #[default]
    Hybrid,
}

impl FromStr for MtScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(MtScheme::Static),
            "dynamic" => Ok(MtScheme::Dynamic),
            "hybrid" => Ok(MtScheme::Hybrid),
            _ => Err(Error::Config(format!("unknown mt scheme {s:?} (static|dynamic|hybrid)"))),
        }
    }
}

impl fmt::Display for MtScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MtScheme::Static => "static",
            MtScheme::Dynamic => "dynamic",
            MtScheme::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemLatencies {
    pub l1_hit: u64,
    pub l2_hit: u64,
    pub dram: u64,
}

impl Default for MemLatencies {
    fn default() -> Self {
        MemLatencies {
            l1_hit: 4,
            l2_hit: 12,
            dram: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemGeometry {
    pub l1_bytes: usize,
    pub l2_bytes: usize,
    pub ways: usize,
    pub dram_channels: usize,
    /// Cycles a channel is busy per line transfer.
    pub channel_interval: u64,
}

impl Default for MemGeometry {
    fn default() -> Self {
        MemGeometry {
            l1_bytes: 32 * 1024,
            l2_bytes: 32 * 1024,
            ways: 8,
            dram_channels: 2,
            channel_interval: 4,
        }
    }
}

/// Request-queue depths per receiving unit and response-buffer depths per
/// requester/source pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueDepths {
    pub matchmaker: usize,
    pub lub: usize,
    pub midwife: usize,
    pub match_responses: usize,
    pub lub_responses: usize,
    pub midwife_responses: usize,
    pub pjr_responses: usize,
}

impl QueueDepths {
    pub fn uniform(n: usize) -> Self {
        QueueDepths {
            matchmaker: n,
            lub: n,
            midwife: n,
            match_responses: n,
            lub_responses: n,
            midwife_responses: n,
            pjr_responses: n,
        }
    }

    fn all(&self) -> [usize; 7] {
        [
            self.matchmaker,
            self.lub,
            self.midwife,
            self.match_responses,
            self.lub_responses,
            self.midwife_responses,
            self.pjr_responses,
        ]
    }
}

impl Default for QueueDepths {
    fn default() -> Self {
        QueueDepths::uniform(8)
    }
}

/// Weights per event class; weighted energy is Σ count × weight.
///
/// Classes: `l1`, `l2`, `dram`, `pjr`, `store`, `step`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyWeights(pub BTreeMap<String, f64>);

impl EnergyWeights {
    pub const CLASSES: [&'static str; 6] = ["l1", "l2", "dram", "pjr", "store", "step"];

    pub fn get(&self, class: &str) -> f64 {
        self.0.get(class).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, class: &str, w: f64) -> Result<()> {
        if !Self::CLASSES.contains(&class) {
            return Err(Error::Config(format!("unknown energy class {class:?}")));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Config(format!("energy weight for {class} must be a non-negative number")));
        }
        self.0.insert(class.to_string(), w);
        Ok(())
    }

    /// Reads `class = weight` lines (`energy.` prefix optional).
    pub fn load(path: &Path) -> Result<Self> {
        let mut w = EnergyWeights::default();
        for (k, v) in parse_kv(&std::fs::read_to_string(path)?)? {
            let class = k.strip_prefix("energy.").unwrap_or(&k);
            w.set(class, parse_num(&k, &v)?)?;
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub thread_count: usize,
    pub mt_scheme: MtScheme,
    /// Static seeds for the hybrid scheme; `None` means a quarter of the threads.
    pub hybrid_seeds: Option<usize>,
    pub clock_ghz: f64,
    pub mem_latencies: MemLatencies,
    pub mem_geometry: MemGeometry,
    pub cache_line_bytes: usize,
    pub lub_unit_count: usize,
    pub midwife_unit_count: usize,
    pub queue_depths: QueueDepths,
    pub pjr: PjrConfig,
    pub pjr_enabled: bool,
    pub energy_weights: Option<EnergyWeights>,
    /// Shuffles same-cycle event order with this seed (race testing).
    pub tie_seed: Option<u64>,
    pub trace: bool,
    /// Keep every result tuple in the output descriptor.
    pub collect_results: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            thread_count: 32,
            mt_scheme: MtScheme::default(),
            hybrid_seeds: None,
            clock_ghz: 2.38,
            mem_latencies: MemLatencies::default(),
            mem_geometry: MemGeometry::default(),
            cache_line_bytes: 64,
            lub_unit_count: 2,
            midwife_unit_count: 2,
            queue_depths: QueueDepths::default(),
            pjr: PjrConfig::default(),
            pjr_enabled: true,
            energy_weights: None,
            tie_seed: None,
            trace: false,
            collect_results: false,
        }
    }
}

impl SimConfig {
    pub fn max_threads(&self) -> usize {
        CUPID_STORE_BYTES / CUPID_THREAD_STATE_BYTES
    }

    pub fn seed_count(&self) -> usize {
        match self.mt_scheme {
            MtScheme::Static => self.thread_count,
            MtScheme::Dynamic => 1,
            MtScheme::Hybrid => self.hybrid_seeds.unwrap_or(self.thread_count / 4).clamp(1, self.thread_count),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("threads", self.thread_count),
            ("line_bytes", self.cache_line_bytes),
            ("lub_units", self.lub_unit_count),
            ("midwife_units", self.midwife_unit_count),
            ("ways", self.mem_geometry.ways),
            ("dram_channels", self.mem_geometry.dram_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.queue_depths.all().contains(&0) {
            return Err(Error::Config("queue depths must be positive".into()));
        }
        if self.thread_count > self.max_threads() {
            return Err(Error::Config(format!(
                "{} threads exceed the Cupid state store ({} bytes hold {} threads)",
                self.thread_count,
                CUPID_STORE_BYTES,
                self.max_threads()
            )));
        }
        if !(self.clock_ghz.is_finite() && self.clock_ghz > 0.0) {
            return Err(Error::Config("clock_ghz must be positive".into()));
        }
        let line = self.cache_line_bytes;
        if !line.is_power_of_two() || line < 8 {
            return Err(Error::Config("line_bytes must be a power of two >= 8".into()));
        }
        let g = &self.mem_geometry;
        for (name, bytes) in [("l1_bytes", g.l1_bytes), ("l2_bytes", g.l2_bytes)] {
            if bytes == 0 || bytes % (line * g.ways) != 0 {
                return Err(Error::Config(format!("{name} must be a positive multiple of line_bytes × ways")));
            }
        }
        if self.hybrid_seeds == Some(0) {
            return Err(Error::Config("hybrid_seeds must be positive".into()));
        }
        self.pjr.validate()
    }

    pub fn seconds(&self, cycles: u64) -> f64 {
        cycles as f64 / (self.clock_ghz * 1e9)
    }

    /// Applies `key = value` overrides. Unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let int = || parse_num::<usize>(key, v);
        let cyc = || parse_num::<u64>(key, v);
        match key {
            "threads" => self.thread_count = int()?,
            "mt" => self.mt_scheme = v.parse()?,
            "hybrid_seeds" => self.hybrid_seeds = Some(int()?),
            "clock_ghz" => self.clock_ghz = parse_num(key, v)?,
            "l1_latency" => self.mem_latencies.l1_hit = cyc()?,
            "l2_latency" => self.mem_latencies.l2_hit = cyc()?,
            "dram_latency" => self.mem_latencies.dram = cyc()?,
            "l1_bytes" => self.mem_geometry.l1_bytes = int()?,
            "l2_bytes" => self.mem_geometry.l2_bytes = int()?,
            "ways" => self.mem_geometry.ways = int()?,
            "dram_channels" => self.mem_geometry.dram_channels = int()?,
            "channel_interval" => self.mem_geometry.channel_interval = cyc()?,
            "line_bytes" => self.cache_line_bytes = int()?,
            "lub_units" => self.lub_unit_count = int()?,
            "midwife_units" => self.midwife_unit_count = int()?,
            "queue_depth" => self.queue_depths = QueueDepths::uniform(int()?),
            "queue.matchmaker" => self.queue_depths.matchmaker = int()?,
            "queue.lub" => self.queue_depths.lub = int()?,
            "queue.midwife" => self.queue_depths.midwife = int()?,
            "queue.match_responses" => self.queue_depths.match_responses = int()?,
            "queue.lub_responses" => self.queue_depths.lub_responses = int()?,
            "queue.midwife_responses" => self.queue_depths.midwife_responses = int()?,
            "queue.pjr_responses" => self.queue_depths.pjr_responses = int()?,
            "pjr_capacity" => self.pjr.total_capacity = int()?,
            "pjr_entry_capacity" => self.pjr.entry_capacity = int()?,
            "pjr_banks" => self.pjr.bank_count = int()?,
            "pjr_disable" => self.pjr_enabled = !parse_bool(key, v)?,
            "tie_seed" => self.tie_seed = Some(parse_num(key, v)?),
            "trace" => self.trace = parse_bool(key, v)?,
            _ => {
                if let Some(class) = key.strip_prefix("energy.") {
                    self.energy_weights
                        .get_or_insert_with(EnergyWeights::default)
                        .set(class, parse_num(key, v)?)?;
                } else {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies a key=value file; `energy_weights = path` is resolved
    /// relative to the file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (k, v) in parse_kv(&text)? {
            if k == "energy_weights" {
                let p = path.parent().unwrap_or(Path::new(".")).join(&v);
                self.energy_weights = Some(EnergyWeights::load(&p)?);
            } else {
                self.apply(&k, &v)?;
            }
        }
        Ok(())
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?} as a number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}
