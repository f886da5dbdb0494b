//! Ranking, blocking and scoring for the clustering tasks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composite::{column_composites, encode_segment, table_composite, Recipe};
use crate::error::{Error, Result};
use crate::pretrain::ModelBundle;
use crate::sequence::{CellOrigin, SegmentKind};
use crate::table::{CellKind, Table};

pub const DEFAULT_K: usize = 20;

/// Item id to vector, iterated in id order.
pub type VectorPool = BTreeMap<String, Vec<f32>>;

fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab, aa, bb)
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (ab, aa, bb) = dot_norms(a, b);
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub entries: Vec<(String, f64)>,
    pub k: usize,
}

fn rank(query: &str, query_vec: &[f32], pool: &VectorPool, keep: impl Fn(&str) -> bool, k: usize) -> Result<RankedList> {
    let mut scored = Vec::new();
    for (id, v) in pool {
        if id != query && keep(id) {
            scored.push((id.clone(), cosine(query_vec, v)?));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(RankedList {
        query: query.to_string(),
        entries: scored,
        k,
    })
}

/// The `k` items most similar to `query`, which is excluded. Ties go to the
/// smaller id.
pub fn topk_cluster(query: &str, pool: &VectorPool, k: usize) -> Result<RankedList> {
    let qv = pool
        .get(query)
        .ok_or_else(|| Error::Value(format!("query {query:?} is not in the pool")))?;
    if pool.len() < 2 {
        return Err(Error::Value("pool needs at least two items".into()));
    }
    rank(query, qv, pool, |_| true, k)
}

/// Like [`topk_cluster`] but only over `candidates`.
pub fn topk_among(query: &str, pool: &VectorPool, candidates: &BTreeSet<String>, k: usize) -> Result<RankedList> {
    let qv = pool
        .get(query)
        .ok_or_else(|| Error::Value(format!("query {query:?} is not in the pool")))?;
    rank(query, qv, pool, |id| candidates.contains(id), k)
}

/// Ranks `pool` by cosine to the mean of `exemplars`, skipping `exclude`.
pub fn centroid_cluster(
    query: &str,
    exemplars: &[&[f32]],
    pool: &VectorPool,
    exclude: &BTreeSet<String>,
    k: usize,
) -> Result<RankedList> {
    let first = exemplars.first().ok_or(Error::EmptyExemplar)?;
    let mut centroid = vec![0.0f64; first.len()];
    for e in exemplars {
        if e.len() != centroid.len() {
            return Err(Error::Shape("exemplars differ in length".into()));
        }
        for (c, x) in centroid.iter_mut().zip(e.iter()) {
            *c += *x as f64;
        }
    }
    let centroid: Vec<f32> = centroid.iter().map(|c| (c / exemplars.len() as f64) as f32).collect();
    if centroid.iter().all(|c| *c == 0.0) {
        return Err(Error::ZeroVector);
    }
    rank(query, &centroid, pool, |id| !exclude.contains(id), k)
}

// ---------------------------------------------------------------------------
// Blocking

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LshParams {
    pub planes: usize,
    pub bands: usize,
    pub rows: usize,
}

impl Default for LshParams {
    fn default() -> Self {
        LshParams {
            planes: 64,
            bands: 16,
            rows: 4,
        }
    }
}

/// Probability that a pair at cosine `cos` shares at least one band.
pub fn lsh_collision_probability(cos: f64, bands: usize, rows: usize) -> f64 {
    let theta = cos.clamp(-1.0, 1.0).acos();
    let p = 1.0 - theta / std::f64::consts::PI;
    1.0 - (1.0 - p.powi(rows as i32)).powi(bands as i32)
}

/// Random-hyperplane LSH over `vectors`: for each item, the sorted indices
/// of the other items sharing the signature of at least one band.
pub fn lsh_candidates(vectors: &[&[f32]], params: LshParams, seed: u64) -> Result<Vec<Vec<usize>>> {
    let LshParams { planes, bands, rows } = params;
    if planes == 0 || planes != bands * rows || rows > 64 {
        return Err(Error::Config(format!(
            "lsh needs planes == bands * rows (got {planes} != {bands} x {rows}) with rows <= 64"
        )));
    }
    let Some(dim) = vectors.first().map(|v| v.len()) else {
        return Ok(Vec::new());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hyper: Vec<f64> = (0..planes * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut buckets: HashMap<(usize, u64), Vec<usize>> = HashMap::new();
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Shape(format!("vector {i} has length {} not {dim}", v.len())));
        }
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::ZeroVector);
        }
        for b in 0..bands {
            let mut key = 0u64;
            for r in 0..rows {
                let plane = &hyper[(b * rows + r) * dim..(b * rows + r + 1) * dim];
                let side: f64 = plane.iter().zip(v.iter()).map(|(p, x)| p * *x as f64).sum();
                key = key << 1 | (side >= 0.0) as u64;
            }
            buckets.entry((b, key)).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); vectors.len()];
    for members in buckets.values() {
        for &i in members {
            out[i].extend(members.iter().copied().filter(|j| *j != i));
        }
    }
    for c in &mut out {
        c.sort_unstable();
        c.dedup();
    }
    Ok(out)
}

/// Blocked id pairs `(a, b)` with `a < b`.
pub fn lsh_block(vectors: &VectorPool, params: LshParams, seed: u64) -> Result<BTreeSet<(String, String)>> {
    let ids: Vec<&String> = vectors.keys().collect();
    let vecs: Vec<&[f32]> = vectors.values().map(Vec::as_slice).collect();
    let cands = lsh_candidates(&vecs, params, seed)?;
    let mut pairs = BTreeSet::new();
    for (i, c) in cands.iter().enumerate() {
        for &j in c.iter().filter(|j| **j > i) {
            pairs.insert((ids[i].clone(), ids[j].clone()));
        }
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Ground truth and metrics

/// Item id to cluster label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruth {
    pub labels: BTreeMap<String, String>,
}

impl GroundTruth {
    pub fn new(labels: BTreeMap<String, String>) -> Self {
        GroundTruth { labels }
    }

    pub fn label(&self, id: &str) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn insert(&mut self, id: impl Into<String>, label: impl Into<String>) {
        self.labels.insert(id.into(), label.into());
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Items sharing `label`, excluding `except`.
    pub fn count_label(&self, label: &str, except: &BTreeSet<String>) -> usize {
        self.labels
            .iter()
            .filter(|(id, l)| l.as_str() == label && !except.contains(*id))
            .count()
    }

    /// Reads `item_id,cluster_label` CSV with a header row.
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "item_id" || &headers[1] != "cluster_label" {
            return Err(Error::Schema(format!(
                "ground truth header must be item_id,cluster_label, got {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut gt = GroundTruth::default();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Schema(format!("ground truth row has {} fields", rec.len())));
            }
            gt.insert(&rec[0], &rec[1]);
        }
        Ok(gt)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["item_id", "cluster_label"])?;
        for (id, l) in &self.labels {
            w.write_record([id, l])?;
        }
        w.flush().map_err(|e| Error::io("<ground truth>", e))?;
        Ok(())
    }
}

fn query_label<'a>(list: &RankedList, truth: &'a GroundTruth, label: Option<&'a str>) -> Result<&'a str> {
    label
        .or_else(|| truth.label(&list.query))
        .ok_or_else(|| Error::Value(format!("no ground truth for query {:?}", list.query)))
}

/// AP@k with denominator `min(k, relevant)`; relevant items share the
/// query's label and are not the query.
pub fn ap_at_k(list: &RankedList, truth: &GroundTruth, k: usize) -> Result<f64> {
    ap_at_k_with(list, truth, k, None, &BTreeSet::from([list.query.clone()]))
}

/// AP@k with an explicit query label and set of ids outside the universe.
pub fn ap_at_k_with(
    list: &RankedList,
    truth: &GroundTruth,
    k: usize,
    label: Option<&str>,
    excluded: &BTreeSet<String>,
) -> Result<f64> {
    let label = query_label(list, truth, label)?;
    ap_given(list, truth, k, label, truth.count_label(label, excluded))
}

fn ap_given(list: &RankedList, truth: &GroundTruth, k: usize, label: &str, relevant: usize) -> Result<f64> {
    if relevant == 0 {
        return Err(Error::NoRelevant(list.query.clone()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, (id, _)) in list.entries.iter().take(k).enumerate() {
        if truth.label(id) == Some(label) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / k.min(relevant) as f64)
}

fn reciprocal_rank(list: &RankedList, truth: &GroundTruth, k: usize, label: &str) -> f64 {
    list.entries
        .iter()
        .take(k)
        .position(|(id, _)| truth.label(id) == Some(label))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapMrr {
    pub map: f64,
    pub mrr: f64,
    pub n_queries: usize,
    /// Queries without any relevant item, left out of MAP.
    pub n_no_relevant: usize,
}

/// A ranked list with its query label and the ids outside its universe.
#[derive(Clone, Debug)]
pub struct Query {
    pub list: RankedList,
    pub label: Option<String>,
    pub excluded: BTreeSet<String>,
}

impl From<RankedList> for Query {
    fn from(list: RankedList) -> Self {
        let excluded = BTreeSet::from([list.query.clone()]);
        Query {
            list,
            label: None,
            excluded,
        }
    }
}

pub fn map_mrr(lists: &[RankedList], truth: &GroundTruth, k: usize) -> Result<MapMrr> {
    let queries: Vec<Query> = lists.iter().cloned().map(Query::from).collect();
    score_queries(&queries, truth, k)
}

/// MAP over queries with relevant items, MRR over all queries.
pub fn score_queries(queries: &[Query], truth: &GroundTruth, k: usize) -> Result<MapMrr> {
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    let mut rr_sum = 0.0;
    let mut none = 0usize;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for l in truth.labels.values() {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    for q in queries {
        let label = query_label(&q.list, truth, q.label.as_deref())?;
        let excluded = q.excluded.iter().filter(|e| truth.label(e) == Some(label)).count();
        let relevant = counts.get(label).copied().unwrap_or(0) - excluded;
        match ap_given(&q.list, truth, k, label, relevant) {
            Ok(ap) => {
                ap_sum += ap;
                ap_n += 1;
            }
            Err(Error::NoRelevant(_)) => none += 1,
            Err(e) => return Err(e),
        }
        rr_sum += reciprocal_rank(&q.list, truth, k, label);
    }
    let n = queries.len();
    Ok(MapMrr {
        map: if ap_n == 0 { 0.0 } else { ap_sum / ap_n as f64 },
        mrr: if n == 0 { 0.0 } else { rr_sum / n as f64 },
        n_queries: n,
        n_no_relevant: none,
    })
}

// ---------------------------------------------------------------------------
// Tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cc,
    Tc,
    Ec,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Cc => "cc",
            Task::Tc => "tc",
            Task::Ec => "ec",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cc" => Ok(Task::Cc),
            "tc" => Ok(Task::Tc),
            "ec" => Ok(Task::Ec),
            other => Err(Error::Config(format!("unknown task {other:?} (cc, tc, ec)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// Blocking for column clustering; `None` scores all pairs.
    pub lsh: Option<LshParams>,
    pub table_recipe: Recipe,
    /// Tables per topic centroid: the query plus `tc_exemplars - 1` more of
    /// its topic.
    pub tc_exemplars: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: DEFAULT_K,
            lsh: Some(LshParams::default()),
            table_recipe: Recipe::Tblcomp1,
            tc_exemplars: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumScore {
    pub name: String,
    pub map: f64,
    pub mrr: f64,
    pub n_queries: usize,
    pub n_no_relevant: usize,
}

impl StratumScore {
    fn new(name: &str, s: MapMrr) -> Self {
        StratumScore {
            name: name.to_string(),
            map: s.map,
            mrr: s.mrr,
            n_queries: s.n_queries,
            n_no_relevant: s.n_no_relevant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: Task,
    pub strata: Vec<StratumScore>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl Report {
    /// The `all` stratum, or the only one.
    pub fn overall(&self) -> &StratumScore {
        self.strata
            .iter()
            .find(|s| s.name == "all")
            .unwrap_or(&self.strata[0])
    }
}

pub fn table_id(table: &Table, index: usize) -> String {
    if table.source_id.is_empty() {
        format!("t{index:04}")
    } else {
        table.source_id.clone()
    }
}

pub fn column_id(table_id: &str, col: usize) -> String {
    format!("{table_id}#c{col}")
}

pub fn cell_id(table_id: &str, row: usize, col: usize) -> String {
    format!("{table_id}#r{row}c{col}")
}

/// `textual`, `numerical` or `range` by the majority kind of the column.
pub fn column_stratum(table: &Table, col: usize) -> &'static str {
    let (mut text, mut num, mut range) = (0, 0, 0);
    for row in &table.data {
        match row[col].kind() {
            CellKind::Number | CellKind::Gaussian => num += 1,
            CellKind::Range => range += 1,
            CellKind::Empty => {}
            _ => text += 1,
        }
    }
    if range > text && range >= num {
        "range"
    } else if num > text {
        "numerical"
    } else {
        "textual"
    }
}

/// Column composites keyed by column id, with each column's stratum.
pub fn column_vectors(tables: &[Table], bundle: &ModelBundle) -> Result<(VectorPool, BTreeMap<String, &'static str>)> {
    let per: Vec<Vec<(String, Vec<f32>, &'static str)>> = tables
        .par_iter()
        .enumerate()
        .map(|(ti, t)| {
            let tid = table_id(t, ti);
            Ok(column_composites(t, bundle)?
                .into_iter()
                .enumerate()
                .map(|(j, c)| (column_id(&tid, j), c.vector, column_stratum(t, j)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut pool = VectorPool::new();
    let mut strata = BTreeMap::new();
    for (id, v, s) in per.into_iter().flatten() {
        strata.insert(id.clone(), s);
        pool.insert(id, v);
    }
    Ok((pool, strata))
}

pub fn table_vectors(tables: &[Table], bundle: &ModelBundle, recipe: Recipe) -> Result<VectorPool> {
    let v: Vec<(String, Vec<f32>)> = tables
        .par_iter()
        .enumerate()
        .map(|(ti, t)| Ok((table_id(t, ti), table_composite(t, bundle, recipe)?.vector)))
        .collect::<Result<_>>()?;
    Ok(v.into_iter().collect())
}

/// Column-model embeddings of the data cells named in `truth`.
pub fn entity_vectors(tables: &[Table], bundle: &ModelBundle, truth: &GroundTruth) -> Result<VectorPool> {
    let per: Vec<Vec<(String, Vec<f32>)>> = tables
        .par_iter()
        .enumerate()
        .map(|(ti, t)| {
            let tid = table_id(t, ti);
            let wanted = (0..t.n_rows())
                .flat_map(|i| (0..t.n_cols()).map(move |j| (i, j)))
                .any(|(i, j)| truth.label(&cell_id(&tid, i, j)).is_some());
            if !wanted {
                return Ok(Vec::new());
            }
            let enc = encode_segment(t, SegmentKind::DataCol, bundle)?;
            let mut out = Vec::new();
            for i in 0..t.n_rows() {
                for j in 0..t.n_cols() {
                    let id = cell_id(&tid, i, j);
                    if truth.label(&id).is_none() {
                        continue;
                    }
                    let v = enc.pool_cells(|c| c.origin == CellOrigin::Data && c.grid == Some((i, j)));
                    if let Some(v) = v {
                        out.push((id, v.to_vec()));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Every pool item as a query against the rest, optionally restricted to
/// LSH candidates.
pub fn score_pool(pool: &VectorPool, truth: &GroundTruth, k: usize, lsh: Option<(LshParams, u64)>) -> Result<MapMrr> {
    let (ids, vecs): (Vec<&String>, Vec<&[f32]>) = pool
        .iter()
        .filter(|(id, _)| truth.label(id).is_some())
        .map(|(id, v)| (id, v.as_slice()))
        .unzip();
    if ids.len() < 2 {
        return Ok(MapMrr {
            n_queries: ids.len(),
            ..Default::default()
        });
    }
    let cands = match lsh {
        Some((params, seed)) => Some(lsh_candidates(&vecs, params, seed)?),
        None => None,
    };
    let lists: Vec<RankedList> = (0..ids.len())
        .into_par_iter()
        .map(|q| {
            let mut scored = Vec::new();
            let mut push = |j: usize| -> Result<()> {
                scored.push((j, cosine(vecs[q], vecs[j])?));
                Ok(())
            };
            match &cands {
                Some(c) => c[q].iter().try_for_each(|&j| push(j))?,
                None => (0..ids.len()).filter(|j| *j != q).try_for_each(&mut push)?,
            }
            // Indices follow id order, so index order breaks ties by id.
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(k);
            Ok(RankedList {
                query: ids[q].clone(),
                entries: scored.into_iter().map(|(j, s)| (ids[j].clone(), s)).collect(),
                k,
            })
        })
        .collect::<Result<_>>()?;
    let queries: Vec<Query> = lists.into_iter().map(Query::from).collect();
    let universe = GroundTruth::new(
        ids.iter()
            .map(|id| ((*id).clone(), truth.label(id).expect("filtered").to_string()))
            .collect(),
    );
    score_queries(&queries, &universe, k)
}

/// Topic retrieval: each table's centroid (itself plus same-topic
/// exemplars) ranks the other tables.
pub fn score_tables(pool: &VectorPool, truth: &GroundTruth, k: usize, exemplars: usize, seed: u64) -> Result<MapMrr> {
    let scoped: VectorPool = pool
        .iter()
        .filter(|(id, _)| truth.label(id).is_some())
        .map(|(id, v)| (id.clone(), v.clone()))
        .collect();
    let universe = GroundTruth::new(
        scoped
            .keys()
            .map(|id| (id.clone(), truth.label(id).expect("filtered").to_string()))
            .collect(),
    );
    let mut by_label: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    for (id, l) in &universe.labels {
        by_label.entry(l.as_str()).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::new();
    for (id, label) in &universe.labels {
        let mut others: Vec<&String> = by_label[label.as_str()].iter().copied().filter(|o| *o != id).collect();
        others.shuffle(&mut rng);
        others.truncate(exemplars.saturating_sub(1));
        let mut excluded: BTreeSet<String> = others.iter().map(|s| (*s).clone()).collect();
        excluded.insert(id.clone());
        plans.push((id.clone(), label.clone(), excluded));
    }
    let queries: Vec<Query> = plans
        .into_par_iter()
        .map(|(id, label, excluded)| {
            let ex: Vec<&[f32]> = excluded.iter().map(|e| scoped[e].as_slice()).collect();
            let list = centroid_cluster(&id, &ex, &scoped, &excluded, k)?;
            Ok(Query {
                list,
                label: Some(label),
                excluded,
            })
        })
        .collect::<Result<_>>()?;
    score_queries(&queries, &universe, k)
}

/// Standard-normal vectors with the same ids and length as `pool`.
pub fn random_vectors(pool: &VectorPool, seed: u64) -> VectorPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.iter()
        .map(|(id, v)| (id.clone(), (0..v.len()).map(|_| StandardNormal.sample(&mut rng)).collect()))
        .collect()
}

/// Item vectors for a task, each tagged with its stratum.
pub struct TaskVectors {
    pub pool: VectorPool,
    pub strata: BTreeMap<String, &'static str>,
}

pub fn task_vectors(task: Task, tables: &[Table], bundle: &ModelBundle, truth: &GroundTruth, cfg: &EvalConfig) -> Result<TaskVectors> {
    Ok(match task {
        Task::Cc => {
            let (pool, strata) = column_vectors(tables, bundle)?;
            TaskVectors { pool, strata }
        }
        Task::Tc => {
            let pool = table_vectors(tables, bundle, cfg.table_recipe)?;
            let strata = pool.keys().map(|k| (k.clone(), "all")).collect();
            TaskVectors { pool, strata }
        }
        Task::Ec => {
            let pool = entity_vectors(tables, bundle, truth)?;
            let strata = pool.keys().map(|k| (k.clone(), "all")).collect();
            TaskVectors { pool, strata }
        }
    })
}

/// Scores precomputed vectors; column clustering also scores each stratum.
pub fn score_task(task: Task, vectors: &TaskVectors, truth: &GroundTruth, cfg: &EvalConfig) -> Result<Vec<StratumScore>> {
    let pool = &vectors.pool;
    let mut strata = Vec::new();
    match task {
        Task::Cc => {
            let lsh = cfg.lsh.map(|p| (p, cfg.seed));
            strata.push(StratumScore::new("all", score_pool(pool, truth, cfg.k, lsh)?));
            for name in ["textual", "numerical", "range"] {
                let sub: VectorPool = pool
                    .iter()
                    .filter(|(id, _)| vectors.strata.get(id.as_str()) == Some(&name))
                    .map(|(id, v)| (id.clone(), v.clone()))
                    .collect();
                if !sub.is_empty() {
                    strata.push(StratumScore::new(name, score_pool(&sub, truth, cfg.k, lsh)?));
                }
            }
        }
        Task::Tc => {
            strata.push(StratumScore::new("all", score_tables(pool, truth, cfg.k, cfg.tc_exemplars, cfg.seed)?));
        }
        Task::Ec => {
            strata.push(StratumScore::new("all", score_pool(pool, truth, cfg.k, None)?));
        }
    }
    Ok(strata)
}

/// Runs one task end to end.
pub fn run_task(task: Task, tables: &[Table], bundle: &ModelBundle, truth: &GroundTruth, cfg: &EvalConfig) -> Result<Report> {
    let vectors = task_vectors(task, tables, bundle, truth, cfg)?;
    Ok(Report {
        task,
        strata: score_task(task, &vectors, truth, cfg)?,
        config: serde_json::json!({ "eval": cfg, "bundle": bundle.config }),
        seed: cfg.seed,
    })
}

/// The same task scored on standard-normal vectors of matching shape.
pub fn random_baseline(task: Task, vectors: &TaskVectors, truth: &GroundTruth, cfg: &EvalConfig, seed: u64) -> Result<Vec<StratumScore>> {
    let random = TaskVectors {
        pool: random_vectors(&vectors.pool, seed),
        strata: vectors.strata.clone(),
    };
    score_task(task, &random, truth, cfg)
}
