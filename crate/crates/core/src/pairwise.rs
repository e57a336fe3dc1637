//! Left-deep binary hash-join baseline that fully materializes every
//! intermediate relation, so intermediate sizes and tuple traffic can be
//! compared against the trie join.

use std::collections::HashMap;

use crate::engine::ResultSink;
use crate::error::{Error, Result};
use crate::query::Query;
use crate::stats::RunStats;
use crate::trie::{Relation, VertexId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinStep {
    /// Atom joined onto the running intermediate.
    pub right_atom: usize,
    pub shared: Vec<String>,
    /// Variables of the join output, left input's first.
    pub schema: Vec<String>,
}

/// Atoms in query-text order, joined left to right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryJoinPlan {
    pub query: Query,
    pub leaf_order: Vec<usize>,
    pub first_schema: Vec<String>,
    pub joins: Vec<JoinStep>,
}

fn distinct(vars: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in vars {
        if !out.contains(v) {
            out.push(v.clone());
        }
    }
    out
}

impl BinaryJoinPlan {
    pub fn new(query: &Query) -> Self {
        let first_schema = query.atoms.first().map(|a| distinct(&a.vars)).unwrap_or_default();
        let mut schema = first_schema.clone();
        let mut joins = Vec::new();
        for (i, atom) in query.atoms.iter().enumerate().skip(1) {
            let right = distinct(&atom.vars);
            let shared: Vec<String> = right.iter().filter(|v| schema.contains(v)).cloned().collect();
            schema.extend(right.into_iter().filter(|v| !shared.contains(v)));
            joins.push(JoinStep {
                right_atom: i,
                shared,
                schema: schema.clone(),
            });
        }
        BinaryJoinPlan {
            query: query.clone(),
            leaf_order: (0..query.atoms.len()).collect(),
            first_schema,
            joins,
        }
    }

    /// Every join shares at least one variable with what came before.
    pub fn is_connected(&self) -> bool {
        self.joins.iter().all(|j| !j.shared.is_empty())
    }
}

/// A materialized relation over named variables, rows stored flat.
struct Table {
    schema: Vec<String>,
    rows: Vec<VertexId>,
}

impl Table {
    fn len(&self) -> usize {
        if self.schema.is_empty() {
            0
        } else {
            self.rows.len() / self.schema.len()
        }
    }

    fn row(&self, i: usize) -> &[VertexId] {
        let w = self.schema.len();
        &self.rows[i * w..(i + 1) * w]
    }

    fn col(&self, v: &str) -> usize {
        self.schema.iter().position(|s| s == v).expect("variable in schema")
    }
}

/// Selection on repeated variables plus projection onto distinct ones.
fn scan(rel: &Relation, vars: &[String]) -> Table {
    let schema = distinct(vars);
    let first: Vec<usize> = vars.iter().map(|v| vars.iter().position(|o| o == v).unwrap()).collect();
    let mut rows = Vec::with_capacity(rel.len() * schema.len());
    for t in rel.tuples() {
        if first.iter().enumerate().all(|(i, &f)| t[i] == t[f]) {
            rows.extend(schema.iter().map(|v| t[vars.iter().position(|o| o == v).unwrap()]));
        }
    }
    Table { schema, rows }
}

fn hash_join(left: &Table, right: &Table, step: &JoinStep) -> Table {
    let lk: Vec<usize> = step.shared.iter().map(|v| left.col(v)).collect();
    let rk: Vec<usize> = step.shared.iter().map(|v| right.col(v)).collect();
    let extra: Vec<usize> = (0..right.schema.len()).filter(|c| !rk.contains(c)).collect();
    let key = |row: &[VertexId], cols: &[usize]| cols.iter().map(|&c| row[c]).collect::<Vec<_>>();
    let mut rows = Vec::new();
    let mut emit = |l: &[VertexId], r: &[VertexId]| {
        rows.extend_from_slice(l);
        rows.extend(extra.iter().map(|&c| r[c]));
    };
    // build on the smaller input, probe with the larger
    if left.len() <= right.len() {
        let mut ht: HashMap<Vec<VertexId>, Vec<usize>> = HashMap::new();
        for i in 0..left.len() {
            ht.entry(key(left.row(i), &lk)).or_default().push(i);
        }
        for j in 0..right.len() {
            if let Some(ls) = ht.get(&key(right.row(j), &rk)) {
                for &i in ls {
                    emit(left.row(i), right.row(j));
                }
            }
        }
    } else {
        let mut ht: HashMap<Vec<VertexId>, Vec<usize>> = HashMap::new();
        for j in 0..right.len() {
            ht.entry(key(right.row(j), &rk)).or_default().push(j);
        }
        for i in 0..left.len() {
            if let Some(rs) = ht.get(&key(left.row(i), &lk)) {
                for &j in rs {
                    emit(left.row(i), right.row(j));
                }
            }
        }
    }
    Table {
        schema: step.schema.clone(),
        rows,
    }
}

/// Runs the plan, returning per-join output sizes and the final table.
fn execute<'r>(
    plan: &BinaryJoinPlan,
    resolve: &impl Fn(&str) -> Option<&'r Relation>,
    stats: &mut RunStats,
) -> Result<(Vec<u64>, Table)> {
    let rel = |i: usize| {
        let a = &plan.query.atoms[i];
        let r = resolve(&a.relation).ok_or_else(|| Error::Plan(format!("unknown relation {}", a.relation)))?;
        if r.arity() != a.vars.len() {
            return Err(Error::Arity {
                relation: a.relation.clone(),
                expected: r.arity(),
                found: a.vars.len(),
            });
        }
        Ok(r)
    };
    let Some(first) = plan.query.atoms.first() else {
        return Err(Error::Plan("query has no atoms".into()));
    };
    let base = rel(0)?;
    stats.memory_touches += base.len() as u64;
    let mut cur = scan(base, &first.vars);
    let mut sizes = Vec::with_capacity(plan.joins.len());
    for (k, step) in plan.joins.iter().enumerate() {
        let r = rel(step.right_atom)?;
        let right = scan(r, &plan.query.atoms[step.right_atom].vars);
        let out = hash_join(&cur, &right, step);
        let n = out.len() as u64;
        stats.memory_touches += cur.len() as u64 * u64::from(k > 0) + r.len() as u64 + n;
        sizes.push(n);
        cur = out;
    }
    if plan.joins.is_empty() {
        stats.memory_touches += cur.len() as u64;
    }
    Ok((sizes, cur))
}

/// Per-join materialized sizes (the last one is the query result).
pub fn count_intermediates<'r>(
    plan: &BinaryJoinPlan,
    resolve: impl Fn(&str) -> Option<&'r Relation>,
) -> Result<Vec<u64>> {
    Ok(execute(plan, &resolve, &mut RunStats::default())?.0)
}

/// Evaluates the query pairwise, emitting results in head order, sorted.
/// Returns the result count.
pub fn run_pairwise<'r>(
    query: &Query,
    resolve: impl Fn(&str) -> Option<&'r Relation>,
    sink: &mut dyn ResultSink,
    stats: &mut RunStats,
) -> Result<u64> {
    let plan = BinaryJoinPlan::new(query);
    let (sizes, table) = execute(&plan, &resolve, stats)?;
    if let Some((_, inner)) = sizes.split_last() {
        stats.intermediate_tuples += inner.iter().sum::<u64>();
    }
    let cols: Vec<usize> = query
        .head
        .iter()
        .map(|v| {
            table
                .schema
                .iter()
                .position(|s| s == v)
                .ok_or_else(|| Error::Plan(format!("head variable {v} appears in no atom")))
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<VertexId>> = (0..table.len())
        .map(|i| {
            let r = table.row(i);
            cols.iter().map(|&c| r[c]).collect()
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    for t in &out {
        sink.push(t);
    }
    stats.results_emitted += out.len() as u64;
    Ok(out.len() as u64)
}
