//! Seeded synthetic corpora of BiN tables with clustering ground truth.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{cell_id, column_id, GroundTruth};
use crate::featurize::UnitDictionary;
use crate::table::{parse_table, serialize_table, Cell, Decimal, HeaderNode, HeaderTree, Table, UnitClass};

const TEXT_TEMPLATES: usize = 10;
const NUMBER_TEMPLATES: usize = 7;
const RANGE_TEMPLATES: usize = 3;
const ENTITY_TYPES: usize = 3;
const ENTITY_VALUES: usize = 16;
const GROUP_WORDS: usize = 8;
const ROW_WORDS: usize = 16;
const CAPTION_WORDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicSpec {
    pub name: String,
    /// Words used before any generated ones.
    #[serde(default)]
    pub vocabulary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_tables: usize,
    /// Explicit topics; when empty, `n_topics` topics are generated.
    pub topics: Vec<TopicSpec>,
    pub n_topics: usize,
    pub fraction_nonrelational: f64,
    /// Fraction of all tables with a nested cell; only non-relational tables
    /// nest, so this may not exceed `fraction_nonrelational`.
    pub fraction_nested: f64,
    /// Share of columns holding numbers or ranges.
    pub fraction_numeric: f64,
    /// Inclusive HMD depth range of non-relational tables.
    pub hmd_depth: (usize, usize),
    /// Inclusive VMD depth range of non-relational tables.
    pub vmd_depth: (usize, usize),
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_tables: 200,
            topics: Vec::new(),
            n_topics: 5,
            fraction_nonrelational: 0.4,
            fraction_nested: 0.1,
            fraction_numeric: 0.4,
            hmd_depth: (1, 3),
            vmd_depth: (1, 2),
            rows: (8, 16),
            cols: (6, 14),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("fraction_nonrelational", self.fraction_nonrelational),
            ("fraction_nested", self.fraction_nested),
            ("fraction_numeric", self.fraction_numeric),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {f}")));
            }
        }
        if self.fraction_nested > self.fraction_nonrelational {
            return Err(Error::Config(format!(
                "fraction_nested {} exceeds fraction_nonrelational {}",
                self.fraction_nested, self.fraction_nonrelational
            )));
        }
        for (name, (lo, hi)) in [
            ("hmd_depth", self.hmd_depth),
            ("vmd_depth", self.vmd_depth),
            ("rows", self.rows),
            ("cols", self.cols),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) must satisfy 1 <= lo <= hi")));
            }
        }
        if self.cols.1 > TEXT_TEMPLATES + NUMBER_TEMPLATES + RANGE_TEMPLATES {
            return Err(Error::Config(format!(
                "at most {} columns per table",
                TEXT_TEMPLATES + NUMBER_TEMPLATES + RANGE_TEMPLATES
            )));
        }
        if self.topics.is_empty() && self.n_topics == 0 {
            return Err(Error::Config("corpus needs at least one topic".into()));
        }
        let names: BTreeSet<&str> = self.topics.iter().map(|t| t.name.as_str()).collect();
        if names.len() != self.topics.len() {
            return Err(Error::Config("topic names must be distinct".into()));
        }
        Ok(())
    }
}

/// Ground truth for the three clustering tasks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusTruth {
    /// Table id to topic.
    pub tc: GroundTruth,
    /// Column id to column template.
    pub cc: GroundTruth,
    /// Cell id to entity type.
    pub ec: GroundTruth,
}

#[derive(Clone, Debug)]
enum ColumnKind {
    Text { entity: usize },
    Number { unit: UnitClass, center: f64, decimals: usize },
    Range { unit: UnitClass, center: f64, decimals: usize },
}

#[derive(Clone, Debug)]
struct Template {
    id: String,
    label: String,
    kind: ColumnKind,
}

#[derive(Clone, Debug)]
struct Topic {
    name: String,
    text: Vec<Template>,
    numeric: Vec<Template>,
    entities: Vec<(String, Vec<String>)>,
    groups: Vec<String>,
    rows: Vec<String>,
    caption: Vec<String>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

struct Words<'a> {
    used: BTreeSet<String>,
    units: &'a UnitDictionary,
}

impl Words<'_> {
    fn fresh<R: Rng>(&mut self, rng: &mut R) -> String {
        loop {
            let n = rng.random_range(2..=3);
            let w: String = (0..n)
                .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
                .collect();
            if self.units.classify(&w).is_none() && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn build_topic<R: Rng>(spec: &TopicSpec, words: &mut Words<'_>, rng: &mut R) -> Topic {
    let mut pool: Vec<String> = spec
        .vocabulary
        .iter()
        .map(|w| w.trim().to_lowercase())
        .filter(|w| !w.is_empty() && words.used.insert(w.clone()))
        .collect();
    pool.reverse();
    let mut take = |rng: &mut R| pool.pop().unwrap_or_else(|| words.fresh(rng));
    let name = &spec.name;
    let entities: Vec<(String, Vec<String>)> = (0..ENTITY_TYPES)
        .map(|e| {
            let values = (0..ENTITY_VALUES).map(|_| take(rng)).collect();
            (format!("{name}/entity{e}"), values)
        })
        .collect();
    let text = (0..TEXT_TEMPLATES)
        .map(|i| Template {
            id: format!("{name}/text{i}"),
            label: take(rng),
            kind: ColumnKind::Text { entity: i % ENTITY_TYPES },
        })
        .collect();
    let numeric = (0..NUMBER_TEMPLATES + RANGE_TEMPLATES)
        .map(|i| {
            let unit = *UnitClass::ALL.choose(rng).unwrap();
            let center = 10f64.powf(rng.random_range(0.0..3.0));
            let decimals = rng.random_range(0..=2);
            let (id, kind) = if i < NUMBER_TEMPLATES {
                (format!("{name}/number{i}"), ColumnKind::Number { unit, center, decimals })
            } else {
                (format!("{name}/range{}", i - NUMBER_TEMPLATES), ColumnKind::Range { unit, center, decimals })
            };
            Template {
                id,
                label: take(rng),
                kind,
            }
        })
        .collect();
    let groups = (0..GROUP_WORDS).map(|_| take(rng)).collect();
    let rows = (0..ROW_WORDS).map(|_| take(rng)).collect();
    let caption = (0..CAPTION_WORDS).map(|_| take(rng)).collect();
    Topic {
        name: name.clone(),
        text,
        numeric,
        entities,
        groups,
        rows,
        caption,
    }
}

fn quantity<R: Rng>(center: f64, rng: &mut R) -> f64 {
    (center * (1.0 + 0.3 * rng.random_range(-1.0..1.0))).abs()
}

fn number_cell<R: Rng>(unit: UnitClass, center: f64, decimals: usize, units: &UnitDictionary, rng: &mut R) -> Cell {
    let value = Decimal::with_precision(quantity(center, rng), decimals);
    let surface = units.surfaces(unit).first().map_or("", String::as_str);
    Cell::number(format!("{} {surface}", value.as_str()), value, Some(unit))
}

fn range_cell<R: Rng>(unit: UnitClass, center: f64, decimals: usize, units: &UnitDictionary, rng: &mut R) -> Cell {
    let lo = quantity(center, rng);
    let hi = lo + center * rng.random_range(0.1..0.5);
    let (lo, hi) = (Decimal::with_precision(lo, decimals), Decimal::with_precision(hi, decimals));
    let surface = units.surfaces(unit).first().map_or("", String::as_str);
    let text = format!("{}-{} {surface}", lo.as_str(), hi.as_str());
    Cell::range(text, lo, hi, Some(unit)).expect("lo <= hi after rounding")
}

fn fill_cell<R: Rng>(t: &Template, topic: &Topic, units: &UnitDictionary, rng: &mut R) -> Cell {
    match t.kind {
        ColumnKind::Text { entity } => Cell::text(topic.entities[entity].1.choose(rng).unwrap().clone()),
        ColumnKind::Number { unit, center, decimals } => number_cell(unit, center, decimals, units, rng),
        ColumnKind::Range { unit, center, decimals } => range_cell(unit, center, decimals, units, rng),
    }
}

/// Groups consecutive labels under parents until `depth` levels exist.
fn header_forest<R: Rng>(labels: Vec<String>, depth: usize, groups: &[String], rng: &mut R) -> Vec<HeaderNode> {
    if depth <= 1 || labels.len() < 2 {
        return labels.into_iter().map(HeaderNode::leaf).collect();
    }
    let mut out = Vec::new();
    let mut rest = labels.as_slice();
    while !rest.is_empty() {
        let size = rng.random_range(2..=4).min(rest.len());
        let (chunk, tail) = rest.split_at(size);
        let children = header_forest(chunk.to_vec(), depth - 1, groups, rng);
        out.push(HeaderNode::group(groups.choose(rng).unwrap().clone(), children));
        rest = tail;
    }
    out
}

fn nested_table<R: Rng>(topic: &Topic, units: &UnitDictionary, rng: &mut R) -> Table {
    let cols: Vec<&Template> = topic.numeric.choose_multiple(rng, 2).collect();
    let data = (0..2)
        .map(|_| cols.iter().map(|t| fill_cell(t, topic, units, rng)).collect())
        .collect();
    let hmd = HeaderTree::flat(cols.iter().map(|t| t.label.clone()));
    Table::new("", hmd, HeaderTree::default(), data).expect("nested table is well formed")
}

fn range_incl<R: Rng>(r: (usize, usize), rng: &mut R) -> usize {
    rng.random_range(r.0..=r.1)
}

/// Generates `spec.n_tables` tables with ids `t0000, t0001, ...`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Vec<Table>, CorpusTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let units = UnitDictionary::default();
    let mut words = Words {
        used: BTreeSet::new(),
        units: &units,
    };
    let topic_specs: Vec<TopicSpec> = if spec.topics.is_empty() {
        (0..spec.n_topics)
            .map(|i| TopicSpec {
                name: format!("topic{i}"),
                vocabulary: Vec::new(),
            })
            .collect()
    } else {
        spec.topics.clone()
    };
    let topics: Vec<Topic> = topic_specs.iter().map(|t| build_topic(t, &mut words, &mut rng)).collect();
    let nested_given_nonrel = if spec.fraction_nonrelational > 0.0 {
        (spec.fraction_nested / spec.fraction_nonrelational).min(1.0)
    } else {
        0.0
    };

    let mut tables = Vec::with_capacity(spec.n_tables);
    let mut truth = CorpusTruth::default();
    for ti in 0..spec.n_tables {
        let tid = format!("t{ti:04}");
        let topic = &topics[rng.random_range(0..topics.len())];
        let n_rows = range_incl(spec.rows, &mut rng);
        let n_cols = range_incl(spec.cols, &mut rng);

        let mut text: Vec<&Template> = topic.text.iter().collect();
        let mut numeric: Vec<&Template> = topic.numeric.iter().collect();
        text.shuffle(&mut rng);
        numeric.shuffle(&mut rng);
        let mut cols = Vec::with_capacity(n_cols);
        for _ in 0..n_cols {
            let want_numeric = rng.random_bool(spec.fraction_numeric);
            let t = match (want_numeric, numeric.is_empty(), text.is_empty()) {
                (true, false, _) | (false, false, true) => numeric.pop(),
                _ => text.pop(),
            };
            cols.push(t.expect("templates cover the column cap"));
        }

        let mut data: Vec<Vec<Cell>> = (0..n_rows)
            .map(|_| cols.iter().map(|t| fill_cell(t, topic, &units, &mut rng)).collect())
            .collect();

        let nonrel = rng.random_bool(spec.fraction_nonrelational);
        let (hmd, vmd) = if nonrel {
            let hd = range_incl(spec.hmd_depth, &mut rng);
            let vd = range_incl(spec.vmd_depth, &mut rng);
            let hmd = header_forest(cols.iter().map(|t| t.label.clone()).collect(), hd, &topic.groups, &mut rng);
            let row_labels = (0..n_rows).map(|_| topic.rows.choose(&mut rng).unwrap().clone()).collect();
            let vmd = header_forest(row_labels, vd, &topic.groups, &mut rng);
            (HeaderTree::new(hmd), HeaderTree::new(vmd))
        } else {
            (HeaderTree::flat(cols.iter().map(|t| t.label.clone())), HeaderTree::default())
        };
        let mut nested_at = None;
        if nonrel && rng.random_bool(nested_given_nonrel) {
            let (i, j) = (rng.random_range(0..n_rows), rng.random_range(0..n_cols));
            data[i][j] = Cell::nested("", nested_table(topic, &units, &mut rng));
            nested_at = Some((i, j));
        }

        let caption: Vec<&str> = topic.caption.choose_multiple(&mut rng, 2).map(String::as_str).collect();
        let table = Table::new(caption.join(" "), hmd, vmd, data)?.with_source_id(&tid);

        truth.tc.insert(&tid, &topic.name);
        for (j, t) in cols.iter().enumerate() {
            truth.cc.insert(column_id(&tid, j), &t.id);
            if let ColumnKind::Text { entity } = t.kind {
                for i in 0..n_rows {
                    if nested_at != Some((i, j)) {
                        truth.ec.insert(cell_id(&tid, i, j), &topic.entities[entity].0);
                    }
                }
            }
        }
        tables.push(table);
    }
    Ok((tables, truth))
}

pub const TABLES_DIR: &str = "tables";
pub const TRUTH_FILES: [(&str, &str); 3] = [("tc", "truth_tc.csv"), ("cc", "truth_cc.csv"), ("ec", "truth_ec.csv")];

/// Writes `tables/<id>.json` plus one ground-truth CSV per task.
pub fn write_corpus(dir: &Path, tables: &[Table], truth: Option<&CorpusTruth>) -> Result<()> {
    let tdir = dir.join(TABLES_DIR);
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    for (i, t) in tables.iter().enumerate() {
        let id = crate::eval::table_id(t, i);
        let path = tdir.join(format!("{id}.json"));
        fs::write(&path, serialize_table(t)).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(truth) = truth {
        for ((_, file), gt) in TRUTH_FILES.iter().zip([&truth.tc, &truth.cc, &truth.ec]) {
            let path = dir.join(file);
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            gt.write_csv(f)?;
        }
    }
    Ok(())
}

/// Reads every `*.json` table under `dir/tables` (or `dir` itself), sorted
/// by file name. Tables without an id take the file stem.
pub fn read_tables(dir: &Path) -> Result<Vec<Table>> {
    let tdir = if dir.join(TABLES_DIR).is_dir() { dir.join(TABLES_DIR) } else { dir.to_path_buf() };
    let mut paths: Vec<_> = fs::read_dir(&tdir)
        .map_err(|e| Error::io(&tdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let t = parse_table(&text).map_err(|e| match e {
                Error::Schema(m) => Error::Schema(format!("{}: {m}", p.display())),
                Error::Shape(m) => Error::Shape(format!("{}: {m}", p.display())),
                Error::Value(m) => Error::Value(format!("{}: {m}", p.display())),
                other => other,
            })?;
            Ok(if t.source_id.is_empty() {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                t.with_source_id(stem)
            } else {
                t
            })
        })
        .collect()
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    GroundTruth::read_csv(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::is_relational;

    #[test]
    fn relational_only() {
        let spec = CorpusSpec {
            n_tables: 30,
            fraction_nonrelational: 0.0,
            fraction_nested: 0.0,
            ..Default::default()
        };
        let (tables, truth) = generate_corpus(&spec).unwrap();
        assert!(tables.iter().all(is_relational));
        assert_eq!(truth.tc.len(), 30);
    }

    #[test]
    fn rejects_bad_fractions() {
        let bad = CorpusSpec {
            fraction_nested: 0.5,
            ..Default::default()
        };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn truth_covers_columns() {
        let (tables, truth) = generate_corpus(&CorpusSpec {
            n_tables: 10,
            ..Default::default()
        })
        .unwrap();
        let cols: usize = tables.iter().map(Table::n_cols).sum();
        assert_eq!(truth.cc.len(), cols);
        assert!(!truth.ec.is_empty());
    }
}
