//! In-memory model of tables with hierarchical metadata and nested cells.
//!
//! A [`Table`] holds a caption, a horizontal header tree (HMD) whose leaves are
//! the data columns, an optional vertical header tree (VMD) whose leaves are the
//! data rows, and a rectangular grid of [`Cell`]s. Cells may hold a nested table
//! one level deep.
//!
//! The canonical on-disk form is `tabjson/1`, see [`parse_table`] and
//! [`serialize_table`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const TABJSON_VERSION: &str = "tabjson/1";

/// Default bound on every coordinate component.
pub const DEFAULT_POSITIONS: usize = 256;

/// A decimal number that keeps its written form.
///
/// Number features (magnitude, precision, trailing digit) are read off the
/// written digits, so `20.30` and `20.3` are different decimals here.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Decimal {
    text: String,
    quoted: bool,
}

impl Decimal {
    /// Parses an exact-decimal string such as `-12`, `20.3` or `1.5e3`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if !is_decimal_literal(text) {
            return Err(Error::Value(format!("malformed number {text:?}")));
        }
        let value: f64 = text
            .parse()
            .map_err(|_| Error::Value(format!("malformed number {text:?}")))?;
        if !value.is_finite() {
            return Err(Error::Value(format!("number {text:?} is not finite")));
        }
        Ok(Decimal {
            text: text.to_string(),
            quoted: true,
        })
    }

    /// Shortest round-tripping decimal for `value`, written as a JSON number.
    pub fn from_f64(value: f64) -> Self {
        assert!(value.is_finite(), "decimal must be finite");
        Self::unquoted(format!("{value}"))
    }

    /// Formats `value` with a fixed number of fractional digits.
    pub fn with_precision(value: f64, digits: usize) -> Self {
        assert!(value.is_finite(), "decimal must be finite");
        Self::unquoted(format!("{value:.digits$}"))
    }

    /// Written as a JSON number unless that would lose digits such as a
    /// trailing zero.
    fn unquoted(text: String) -> Self {
        let exact = serde_json::Number::from_str(&text).is_ok_and(|n| n.to_string() == text);
        Decimal { text, quoted: !exact }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn value(&self) -> f64 {
        self.text.parse().expect("validated at construction")
    }

    /// Integer and fractional digit strings of `|x|`, with any exponent
    /// folded in. `-1.25e1` gives `("12", "5")`.
    pub fn digits(&self) -> (String, String) {
        plain_digits(&self.text)
    }

    fn from_json(value: &Value) -> Result<Self> {
        match value {
            Value::Number(n) => {
                let text = n.to_string();
                let parsed: f64 = text
                    .parse()
                    .map_err(|_| Error::Value(format!("malformed number {text}")))?;
                if !parsed.is_finite() {
                    return Err(Error::Value(format!("number {text} is not finite")));
                }
                Ok(Decimal {
                    text,
                    quoted: false,
                })
            }
            Value::String(s) => Decimal::parse(s),
            other => Err(Error::Value(format!("expected a number, found {other}"))),
        }
    }

    fn to_json(&self) -> Value {
        if self.quoted {
            return Value::String(self.text.clone());
        }
        match serde_json::Number::from_str(&self.text) {
            Ok(n) if n.to_string() == self.text => Value::Number(n),
            _ => Value::String(self.text.clone()),
        }
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn is_decimal_literal(s: &str) -> bool {
    let s = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(at) => (&s[..at], Some(&s[at + 1..])),
        None => (s, None),
    };
    let (int, frac) = match mantissa.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (mantissa, None),
    };
    let int_ok = int.chars().all(|c| c.is_ascii_digit());
    let frac_ok = frac.is_none_or(|f| !f.is_empty() && f.chars().all(|c| c.is_ascii_digit()));
    let exp_ok = exponent.is_none_or(|e| {
        let e = e.strip_prefix(['+', '-']).unwrap_or(e);
        !e.is_empty() && e.chars().all(|c| c.is_ascii_digit())
    });
    !int.is_empty() && int_ok && frac_ok && exp_ok
}

/// Splits a decimal literal into integer and fraction digit strings, shifting
/// the decimal point by any exponent. The sign is dropped.
pub(crate) fn plain_digits(text: &str) -> (String, String) {
    let s = text.trim().trim_start_matches(['+', '-']);
    let (mantissa, exp) = match s.find(['e', 'E']) {
        Some(at) => (&s[..at], s[at + 1..].parse::<i64>().unwrap_or(0)),
        None => (s, 0),
    };
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let mut digits: String = format!("{int}{frac}");
    let mut point = int.len() as i64 + exp;
    if point < 0 {
        digits.insert_str(0, &"0".repeat((-point) as usize));
        point = 0;
    }
    let point = point as usize;
    if point > digits.len() {
        digits.push_str(&"0".repeat(point - digits.len()));
    }
    let (i, f) = digits.split_at(point);
    let i = i.trim_start_matches('0');
    let i = if i.is_empty() { "0" } else { i };
    (i.to_string(), f.to_string())
}

/// Unit classes, in the bit order of the cell feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitClass {
    Stats,
    Length,
    Weight,
    Capacity,
    Time,
    Temperature,
    Pressure,
}

impl UnitClass {
    pub const ALL: [UnitClass; 7] = [
        UnitClass::Stats,
        UnitClass::Length,
        UnitClass::Weight,
        UnitClass::Capacity,
        UnitClass::Time,
        UnitClass::Temperature,
        UnitClass::Pressure,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            UnitClass::Stats => "stats",
            UnitClass::Length => "length",
            UnitClass::Weight => "weight",
            UnitClass::Capacity => "capacity",
            UnitClass::Time => "time",
            UnitClass::Temperature => "temperature",
            UnitClass::Pressure => "pressure",
        }
    }
}

impl FromStr for UnitClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UnitClass::ALL
            .into_iter()
            .find(|u| u.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown unit class {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellKind {
    String,
    Number,
    Range,
    Gaussian,
    Nested,
    Empty,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::String => "string",
            CellKind::Number => "number",
            CellKind::Range => "range",
            CellKind::Gaussian => "gaussian",
            CellKind::Nested => "nested",
            CellKind::Empty => "empty",
        }
    }

    /// Number, range and gaussian cells.
    pub fn is_numeric(self) -> bool {
        matches!(self, CellKind::Number | CellKind::Range | CellKind::Gaussian)
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "string" => CellKind::String,
            "number" => CellKind::Number,
            "range" => CellKind::Range,
            "gaussian" => CellKind::Gaussian,
            "nested" => CellKind::Nested,
            "empty" => CellKind::Empty,
            other => return Err(Error::Schema(format!("unknown cell kind {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellValue {
    Text,
    Number(Decimal),
    Range { lo: Decimal, hi: Decimal },
    Gaussian { mean: Decimal, sd: Decimal },
    Nested(Box<Table>),
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub text: String,
    pub value: CellValue,
    pub unit: Option<UnitClass>,
}

impl Cell {
    pub fn text(text: impl Into<String>) -> Self {
        Cell {
            text: text.into(),
            value: CellValue::Text,
            unit: None,
        }
    }

    pub fn number(text: impl Into<String>, value: Decimal, unit: Option<UnitClass>) -> Self {
        Cell {
            text: text.into(),
            value: CellValue::Number(value),
            unit,
        }
    }

    pub fn range(
        text: impl Into<String>,
        lo: Decimal,
        hi: Decimal,
        unit: Option<UnitClass>,
    ) -> Result<Self> {
        if lo.value() > hi.value() {
            return Err(Error::RangeOrder {
                lo: lo.value(),
                hi: hi.value(),
            });
        }
        Ok(Cell {
            text: text.into(),
            value: CellValue::Range { lo, hi },
            unit,
        })
    }

    pub fn gaussian(text: impl Into<String>, mean: Decimal, sd: Decimal) -> Self {
        Cell {
            text: text.into(),
            value: CellValue::Gaussian { mean, sd },
            unit: Some(UnitClass::Stats),
        }
    }

    pub fn nested(text: impl Into<String>, table: Table) -> Self {
        Cell {
            text: text.into(),
            value: CellValue::Nested(Box::new(table)),
            unit: None,
        }
    }

    pub fn empty() -> Self {
        Cell {
            text: String::new(),
            value: CellValue::Empty,
            unit: None,
        }
    }

    pub fn kind(&self) -> CellKind {
        match self.value {
            CellValue::Text => CellKind::String,
            CellValue::Number(_) => CellKind::Number,
            CellValue::Range { .. } => CellKind::Range,
            CellValue::Gaussian { .. } => CellKind::Gaussian,
            CellValue::Nested(_) => CellKind::Nested,
            CellValue::Empty => CellKind::Empty,
        }
    }

    pub fn nested_table(&self) -> Option<&Table> {
        match &self.value {
            CellValue::Nested(t) => Some(t),
            _ => None,
        }
    }
}

/// Parses `"μ ± σ"` (also `+/-` and `+-`) into a mean and standard deviation.
pub fn parse_gaussian(text: &str) -> Option<(Decimal, Decimal)> {
    let (mean, sd) = ["±", "+/-", "+-"]
        .iter()
        .find_map(|sep| text.split_once(sep))?;
    let sd = sd.split_whitespace().next()?;
    let mean = Decimal::parse(mean.trim()).ok()?;
    let sd = Decimal::parse(sd).ok()?;
    (sd.value() >= 0.0).then_some((mean, sd))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeaderNode {
    pub label: String,
    pub children: Vec<HeaderNode>,
    /// 1-based position among the tree's leaves; `None` on internal nodes.
    pub leaf_index: Option<usize>,
}

impl HeaderNode {
    pub fn leaf(label: impl Into<String>) -> Self {
        HeaderNode {
            label: label.into(),
            children: Vec::new(),
            leaf_index: None,
        }
    }

    pub fn group(label: impl Into<String>, children: Vec<HeaderNode>) -> Self {
        HeaderNode {
            label: label.into(),
            children,
            leaf_index: None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A visited header node: its child-index path from the roots and its depth
/// (roots are depth 1).
#[derive(Clone, Debug)]
pub struct NodeVisit<'a> {
    pub node: &'a HeaderNode,
    pub path: Vec<usize>,
    pub depth: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HeaderTree {
    pub roots: Vec<HeaderNode>,
}

impl HeaderTree {
    pub fn new(roots: Vec<HeaderNode>) -> Self {
        let mut tree = HeaderTree { roots };
        tree.index_leaves();
        tree
    }

    /// Flat tree with one leaf per label.
    pub fn flat<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        HeaderTree::new(labels.into_iter().map(HeaderNode::leaf).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    /// Renumbers leaves 1..=k in depth-first order and clears internal nodes.
    pub fn index_leaves(&mut self) {
        fn walk(node: &mut HeaderNode, next: &mut usize) {
            if node.children.is_empty() {
                *next += 1;
                node.leaf_index = Some(*next);
            } else {
                node.leaf_index = None;
                for child in &mut node.children {
                    walk(child, next);
                }
            }
        }
        let mut next = 0;
        for root in &mut self.roots {
            walk(root, &mut next);
        }
    }

    /// All nodes in depth-first pre-order.
    pub fn visit(&self) -> Vec<NodeVisit<'_>> {
        fn walk<'a>(node: &'a HeaderNode, path: &mut Vec<usize>, out: &mut Vec<NodeVisit<'a>>) {
            out.push(NodeVisit {
                node,
                path: path.clone(),
                depth: path.len(),
            });
            for (i, child) in node.children.iter().enumerate() {
                path.push(i);
                walk(child, path, out);
                path.pop();
            }
        }
        let mut out = Vec::new();
        for (i, root) in self.roots.iter().enumerate() {
            let mut path = vec![i];
            walk(root, &mut path, &mut out);
        }
        out
    }

    pub fn leaves(&self) -> Vec<NodeVisit<'_>> {
        self.visit().into_iter().filter(|v| v.node.is_leaf()).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.visit().iter().filter(|v| v.node.is_leaf()).count()
    }

    pub fn node_count(&self) -> usize {
        self.visit().len()
    }

    pub fn max_depth(&self) -> usize {
        self.visit().iter().map(|v| v.depth).max().unwrap_or(0)
    }

    pub fn node(&self, path: &[usize]) -> Option<&HeaderNode> {
        let (first, rest) = path.split_first()?;
        let mut node = self.roots.get(*first)?;
        for &i in rest {
            node = node.children.get(i)?;
        }
        Some(node)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub caption: String,
    pub hmd: HeaderTree,
    pub vmd: HeaderTree,
    pub data: Vec<Vec<Cell>>,
    pub source_id: String,
}

impl Table {
    /// Builds and validates a table.
    pub fn new(
        caption: impl Into<String>,
        hmd: HeaderTree,
        vmd: HeaderTree,
        data: Vec<Vec<Cell>>,
    ) -> Result<Self> {
        let mut table = Table {
            caption: caption.into(),
            hmd,
            vmd,
            data,
            source_id: String::new(),
        };
        table.hmd.index_leaves();
        table.vmd.index_leaves();
        table.validate(false)?;
        Ok(table)
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn n_rows(&self) -> usize {
        self.data.len()
    }

    pub fn n_cols(&self) -> usize {
        self.hmd.leaf_count()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&Cell> {
        self.data.get(row)?.get(col)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &Cell)> {
        self.data
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, c)| (i, j, c)))
    }

    pub fn validate(&self, nested: bool) -> Result<()> {
        let m = self.hmd.leaf_count();
        if m == 0 {
            return Err(Error::Shape("horizontal metadata has no leaves".into()));
        }
        let n = self.data.len();
        if n == 0 {
            return Err(Error::Shape(format!(
                "data grid has no rows for {m} declared columns"
            )));
        }
        for (i, row) in self.data.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Shape(format!(
                    "row {i} has {} cells, expected {m}",
                    row.len()
                )));
            }
        }
        if !self.vmd.is_empty() && self.vmd.leaf_count() != n {
            return Err(Error::Shape(format!(
                "vertical metadata has {} leaves for {n} rows",
                self.vmd.leaf_count()
            )));
        }
        for (i, j, cell) in self.cells() {
            match &cell.value {
                CellValue::Range { lo, hi } if lo.value() > hi.value() => {
                    return Err(Error::Value(format!(
                        "cell ({i},{j}) range {lo}..{hi} is reversed"
                    )));
                }
                CellValue::Gaussian { sd, .. } if sd.value() < 0.0 => {
                    return Err(Error::Value(format!(
                        "cell ({i},{j}) has negative standard deviation {sd}"
                    )));
                }
                CellValue::Nested(inner) => {
                    if nested {
                        return Err(Error::Shape(format!(
                            "cell ({i},{j}) nests a table inside a nested table"
                        )));
                    }
                    inner.validate(true)?;
                }
                _ => {}
            }
            if cell.unit.is_some() && !cell.kind().is_numeric() {
                return Err(Error::Schema(format!(
                    "cell ({i},{j}) of kind {} carries a unit",
                    cell.kind().name()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// tabjson/1

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_id: Option<String>,
    caption: String,
    hmd: Vec<RawNode>,
    vmd: Vec<RawNode>,
    data: Vec<Vec<RawCell>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    caption: String,
    hmd: Vec<RawNode>,
    vmd: Vec<RawNode>,
    data: Vec<Vec<RawCell>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    label: String,
    children: Vec<RawNode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCell {
    kind: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    number: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    range: Option<[Value; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaussian: Option<[Value; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nested: Option<Box<RawTable>>,
}

fn node_from_raw(raw: RawNode) -> HeaderNode {
    HeaderNode {
        label: raw.label,
        children: raw.children.into_iter().map(node_from_raw).collect(),
        leaf_index: None,
    }
}

fn node_to_raw(node: &HeaderNode) -> RawNode {
    RawNode {
        label: node.label.clone(),
        children: node.children.iter().map(node_to_raw).collect(),
    }
}

fn cell_from_raw(raw: RawCell) -> Result<Cell> {
    let kind: CellKind = raw.kind.parse()?;
    let present = [
        ("number", raw.number.is_some()),
        ("range", raw.range.is_some()),
        ("gaussian", raw.gaussian.is_some()),
        ("nested", raw.nested.is_some()),
    ];
    let expected = match kind {
        CellKind::Number => Some("number"),
        CellKind::Range => Some("range"),
        CellKind::Gaussian => Some("gaussian"),
        CellKind::Nested => Some("nested"),
        CellKind::String | CellKind::Empty => None,
    };
    for (field, is_set) in present {
        if is_set != (Some(field) == expected) {
            let verb = if is_set { "must not carry" } else { "requires" };
            return Err(Error::Schema(format!(
                "{} cell {verb} field {field:?}",
                kind.name()
            )));
        }
    }
    let unit = raw.unit.as_deref().map(str::parse).transpose()?;
    let value = match kind {
        CellKind::String => CellValue::Text,
        CellKind::Empty => CellValue::Empty,
        CellKind::Number => CellValue::Number(Decimal::from_json(&raw.number.unwrap())?),
        CellKind::Range => {
            let [lo, hi] = raw.range.unwrap();
            let (lo, hi) = (Decimal::from_json(&lo)?, Decimal::from_json(&hi)?);
            if lo.value() > hi.value() {
                return Err(Error::Value(format!("range {lo}..{hi} is reversed")));
            }
            CellValue::Range { lo, hi }
        }
        CellKind::Gaussian => {
            let [mean, sd] = raw.gaussian.unwrap();
            let (mean, sd) = (Decimal::from_json(&mean)?, Decimal::from_json(&sd)?);
            if sd.value() < 0.0 {
                return Err(Error::Value(format!("negative standard deviation {sd}")));
            }
            CellValue::Gaussian { mean, sd }
        }
        CellKind::Nested => {
            CellValue::Nested(Box::new(table_from_raw(*raw.nested.unwrap(), None)?))
        }
    };
    Ok(Cell {
        text: raw.text,
        value,
        unit,
    })
}

fn cell_to_raw(cell: &Cell) -> RawCell {
    let mut raw = RawCell {
        kind: cell.kind().name().to_string(),
        text: cell.text.clone(),
        number: None,
        range: None,
        gaussian: None,
        unit: cell.unit.map(|u| u.name().to_string()),
        nested: None,
    };
    match &cell.value {
        CellValue::Number(x) => raw.number = Some(x.to_json()),
        CellValue::Range { lo, hi } => raw.range = Some([lo.to_json(), hi.to_json()]),
        CellValue::Gaussian { mean, sd } => raw.gaussian = Some([mean.to_json(), sd.to_json()]),
        CellValue::Nested(t) => raw.nested = Some(Box::new(table_to_raw(t))),
        CellValue::Text | CellValue::Empty => {}
    }
    raw
}

fn table_from_raw(raw: RawTable, source_id: Option<String>) -> Result<Table> {
    let data = raw
        .data
        .into_iter()
        .map(|row| row.into_iter().map(cell_from_raw).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let hmd = HeaderTree::new(raw.hmd.into_iter().map(node_from_raw).collect());
    let vmd = HeaderTree::new(raw.vmd.into_iter().map(node_from_raw).collect());
    Ok(Table {
        caption: raw.caption,
        hmd,
        vmd,
        data,
        source_id: source_id.unwrap_or_default(),
    })
}

fn table_to_raw(table: &Table) -> RawTable {
    RawTable {
        caption: table.caption.clone(),
        hmd: table.hmd.roots.iter().map(node_to_raw).collect(),
        vmd: table.vmd.roots.iter().map(node_to_raw).collect(),
        data: table
            .data
            .iter()
            .map(|row| row.iter().map(cell_to_raw).collect())
            .collect(),
    }
}

/// Parses a `tabjson/1` document.
pub fn parse_table(json_text: &str) -> Result<Table> {
    let raw: RawDoc =
        serde_json::from_str(json_text).map_err(|e| Error::Schema(e.to_string()))?;
    if raw.version != TABJSON_VERSION {
        return Err(Error::Schema(format!(
            "unsupported version {:?}, expected {TABJSON_VERSION:?}",
            raw.version
        )));
    }
    let table = table_from_raw(
        RawTable {
            caption: raw.caption,
            hmd: raw.hmd,
            vmd: raw.vmd,
            data: raw.data,
        },
        raw.source_id,
    )?;
    table.validate(false)?;
    Ok(table)
}

pub fn table_to_json(table: &Table) -> Value {
    let raw = table_to_raw(table);
    let doc = RawDoc {
        version: TABJSON_VERSION.to_string(),
        source_id: (!table.source_id.is_empty()).then(|| table.source_id.clone()),
        caption: raw.caption,
        hmd: raw.hmd,
        vmd: raw.vmd,
        data: raw.data,
    };
    serde_json::to_value(doc).expect("table serializes")
}

/// Serializes a table as a compact `tabjson/1` document.
pub fn serialize_table(table: &Table) -> String {
    table_to_json(table).to_string()
}

// ---------------------------------------------------------------------------
// Coordinates

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoordPair {
    pub row: u16,
    pub col: u16,
}

impl CoordPair {
    pub const ZERO: CoordPair = CoordPair { row: 0, col: 0 };

    pub fn new(row: usize, col: usize) -> Self {
        CoordPair {
            row: row as u16,
            col: col as u16,
        }
    }

    pub fn is_zero(self) -> bool {
        self == CoordPair::ZERO
    }
}

impl fmt::Display for CoordPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// Vertical, horizontal and nested position of a cell or token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BiCoordinate {
    pub v: CoordPair,
    pub h: CoordPair,
    pub n: CoordPair,
}

impl BiCoordinate {
    pub fn components(&self) -> [u16; 6] {
        [
            self.v.row, self.v.col, self.h.row, self.h.col, self.n.row, self.n.col,
        ]
    }
}

impl fmt::Display for BiCoordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.v, self.h, self.n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Identifies a cell of a table: a header node, a data cell, or either of
/// those inside the nested table held by data cell `(row, col)`. Indices are
/// 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellPos {
    Header {
        axis: Axis,
        path: Vec<usize>,
    },
    Data {
        row: usize,
        col: usize,
    },
    NestedHeader {
        row: usize,
        col: usize,
        axis: Axis,
        path: Vec<usize>,
    },
    NestedData {
        row: usize,
        col: usize,
        inner_row: usize,
        inner_col: usize,
    },
}

pub type CoordinateMap = BTreeMap<CellPos, BiCoordinate>;

fn checked(value: usize, bound: usize) -> Result<usize> {
    if value >= bound {
        Err(Error::Overflow { value, bound })
    } else {
        Ok(value)
    }
}

/// (depth, 1-based ordinal among nodes of the same depth) for every node.
fn node_slots(tree: &HeaderTree) -> Vec<(Vec<usize>, usize, usize)> {
    let mut per_depth: BTreeMap<usize, usize> = BTreeMap::new();
    tree.visit()
        .into_iter()
        .map(|v| {
            let ordinal = per_depth.entry(v.depth).or_default();
            *ordinal += 1;
            (v.path, v.depth, *ordinal)
        })
        .collect()
}

fn leaf_depths(tree: &HeaderTree) -> Vec<usize> {
    tree.leaves().iter().map(|v| v.depth).collect()
}

/// Assigns a [`BiCoordinate`] to every header node and data cell, including
/// the contents of nested tables.
///
/// Data cell `(i, j)` gets `h = (depth of HMD leaf j, j)` and
/// `v = (depth of VMD leaf i, i)`, 1-based, with `v = (0, i)` when the table
/// has no vertical metadata. Header nodes get `(depth, ordinal among nodes at
/// that depth)` on their own axis and `(0, 0)` on the other. Cells of a nested
/// table inherit the host's `v`/`h` and get a 1-based `n` in the nested table's
/// own grid, header rows first.
pub fn assign_coordinates(table: &Table, bound: usize) -> Result<CoordinateMap> {
    let mut map = CoordinateMap::new();
    for (path, depth, ordinal) in node_slots(&table.hmd) {
        let h = CoordPair::new(checked(depth, bound)?, checked(ordinal, bound)?);
        map.insert(
            CellPos::Header {
                axis: Axis::Horizontal,
                path,
            },
            BiCoordinate {
                h,
                ..Default::default()
            },
        );
    }
    for (path, depth, ordinal) in node_slots(&table.vmd) {
        let v = CoordPair::new(checked(depth, bound)?, checked(ordinal, bound)?);
        map.insert(
            CellPos::Header {
                axis: Axis::Vertical,
                path,
            },
            BiCoordinate {
                v,
                ..Default::default()
            },
        );
    }
    let h_depths = leaf_depths(&table.hmd);
    let v_depths = leaf_depths(&table.vmd);
    for (i, j, cell) in table.cells() {
        let v_row = v_depths.get(i).copied().unwrap_or(0);
        let host = BiCoordinate {
            v: CoordPair::new(checked(v_row, bound)?, checked(i + 1, bound)?),
            h: CoordPair::new(checked(h_depths[j], bound)?, checked(j + 1, bound)?),
            n: CoordPair::ZERO,
        };
        map.insert(CellPos::Data { row: i, col: j }, host);
        if let Some(inner) = cell.nested_table() {
            for (pos, n) in nested_positions(inner, bound)? {
                let pos = match pos {
                    InnerPos::Header { axis, path } => CellPos::NestedHeader {
                        row: i,
                        col: j,
                        axis,
                        path,
                    },
                    InnerPos::Data { row, col } => CellPos::NestedData {
                        row: i,
                        col: j,
                        inner_row: row,
                        inner_col: col,
                    },
                };
                map.insert(pos, BiCoordinate { n, ..host });
            }
        }
    }
    Ok(map)
}

enum InnerPos {
    Header { axis: Axis, path: Vec<usize> },
    Data { row: usize, col: usize },
}

fn nested_positions(inner: &Table, bound: usize) -> Result<Vec<(InnerPos, CoordPair)>> {
    let header_rows = inner.hmd.max_depth();
    let header_cols = inner.vmd.max_depth();
    let mut out = Vec::new();
    for (path, depth, ordinal) in node_slots(&inner.hmd) {
        let n = CoordPair::new(
            checked(depth, bound)?,
            checked(header_cols + ordinal, bound)?,
        );
        out.push((
            InnerPos::Header {
                axis: Axis::Horizontal,
                path,
            },
            n,
        ));
    }
    for (path, depth, ordinal) in node_slots(&inner.vmd) {
        let n = CoordPair::new(
            checked(header_rows + ordinal, bound)?,
            checked(depth, bound)?,
        );
        out.push((
            InnerPos::Header {
                axis: Axis::Vertical,
                path,
            },
            n,
        ));
    }
    for (r, c, _) in inner.cells() {
        let n = CoordPair::new(
            checked(header_rows + r + 1, bound)?,
            checked(header_cols + c + 1, bound)?,
        );
        out.push((InnerPos::Data { row: r, col: c }, n));
    }
    Ok(out)
}

/// True for flat single-level tables: no vertical metadata, every horizontal
/// header a leaf root, and no nested cells.
pub fn is_relational(table: &Table) -> bool {
    table.vmd.is_empty()
        && table.hmd.roots.iter().all(HeaderNode::is_leaf)
        && table.cells().all(|(_, _, c)| c.nested_table().is_none())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const PEOPLE: &str = r#"{
        "version": "tabjson/1",
        "caption": "people",
        "hmd": [{"label":"Name","children":[]},{"label":"Age","children":[]},{"label":"Job","children":[]}],
        "vmd": [],
        "data": [
            [{"kind":"string","text":"Sam"},{"kind":"number","text":"24","number":24},{"kind":"string","text":"Engineer"}],
            [{"kind":"string","text":"John"},{"kind":"number","text":"25","number":25},{"kind":"string","text":"Scientist"}],
            [{"kind":"string","text":"Nick"},{"kind":"number","text":"23","number":23},{"kind":"string","text":"Lawyer"}]
        ]
    }"#;

    fn nested_doc() -> String {
        r#"{"version":"tabjson/1","caption":"outer","hmd":[{"label":"a","children":[]},{"label":"b","children":[]}],"vmd":[],
           "data":[[{"kind":"string","text":"x"},{"kind":"string","text":"y"}],
                   [{"kind":"string","text":"z"},{"kind":"nested","text":"","nested":{"caption":"","hmd":[{"label":"p","children":[]},{"label":"q","children":[]}],"vmd":[],
                        "data":[[{"kind":"number","text":"1","number":1},{"kind":"number","text":"2.5 kg","number":"2.5","unit":"weight"}],
                                [{"kind":"range","text":"1-2","range":[1,2]},{"kind":"gaussian","text":"3 ± 1","gaussian":[3,1]}]]}}]]}"#
            .to_string()
    }

    #[test]
    fn parses_relational_table() {
        let t = parse_table(PEOPLE).unwrap();
        assert_eq!(t.n_cols(), 3);
        assert_eq!(t.n_rows(), 3);
        assert!(t.vmd.is_empty());
        assert_eq!(t.hmd.max_depth(), 1);
        assert!(is_relational(&t));
        assert_eq!(t.cell(1, 2).unwrap().text, "Scientist");
    }

    #[test]
    fn empty_grid_is_shape_error() {
        let doc = r#"{"version":"tabjson/1","caption":"","hmd":[{"label":"a","children":[]}],"vmd":[],"data":[]}"#;
        assert!(matches!(parse_table(doc), Err(Error::Shape(_))));
    }

    #[test]
    fn nested_round_trip() {
        let doc = nested_doc();
        let t = parse_table(&doc).unwrap();
        let cell = t.cell(1, 1).unwrap();
        assert_eq!(cell.kind(), CellKind::Nested);
        assert_eq!(cell.nested_table().unwrap().n_cols(), 2);
        let original: Value = serde_json::from_str(&doc).unwrap();
        assert_eq!(table_to_json(&t), original);
        assert!(!is_relational(&t));
    }

    #[test]
    fn rejects_bad_documents() {
        let cases = [
            (r#"{"version":"tabjson/2","caption":"","hmd":[{"label":"a","children":[]}],"vmd":[],"data":[[{"kind":"string","text":"x"}]]}"#, "schema"),
            (r#"{"version":"tabjson/1","caption":"","hmd":[{"label":"a","children":[]}],"vmd":[],"data":[[{"kind":"string","text":"x"}]],"extra":1}"#, "schema"),
            (r#"{"version":"tabjson/1","caption":"","hmd":[{"label":"a","children":[]}],"vmd":[],"data":[[{"kind":"number","text":"x"}]]}"#, "schema"),
            (r#"{"version":"tabjson/1","caption":"","hmd":[{"label":"a","children":[]}],"vmd":[],"data":[[{"kind":"string","text":"x","number":1}]]}"#, "schema"),
            (r#"{"version":"tabjson/1","caption":"","hmd":[{"label":"a","children":[]},{"label":"b","children":[]}],"vmd":[],"data":[[{"kind":"string","text":"x"}]]}"#, "shape"),
            (r#"{"version":"tabjson/1","caption":"","hmd":[{"label":"a","children":[]}],"vmd":[{"label":"r1","children":[]},{"label":"r2","children":[]}],"data":[[{"kind":"string","text":"x"}]]}"#, "shape"),
            (r#"{"version":"tabjson/1","caption":"","hmd":[{"label":"a","children":[]}],"vmd":[],"data":[[{"kind":"range","text":"3-1","range":[3,1]}]]}"#, "value"),
            (r#"{"version":"tabjson/1","caption":"","hmd":[{"label":"a","children":[]}],"vmd":[],"data":[[{"kind":"number","text":"x","number":"1.2.3"}]]}"#, "value"),
            (r#"{"version":"tabjson/1","caption":"","hmd":[{"label":"a","children":[]}],"vmd":[],"data":[[{"kind":"gaussian","text":"x","gaussian":[1,-1]}]]}"#, "value"),
        ];
        for (doc, expected) in cases {
            let err = parse_table(doc).unwrap_err();
            let got = match err {
                Error::Schema(_) => "schema",
                Error::Shape(_) => "shape",
                Error::Value(_) => "value",
                other => panic!("unexpected error {other}"),
            };
            assert_eq!(got, expected, "{doc}");
        }
    }

    #[test]
    fn doubly_nested_rejected() {
        let inner = Table::new("", HeaderTree::flat(["a"]), HeaderTree::default(), vec![vec![Cell::text("x")]]).unwrap();
        let mid = Table::new("", HeaderTree::flat(["b"]), HeaderTree::default(), vec![vec![Cell::nested("", inner)]]).unwrap();
        let outer = Table::new("", HeaderTree::flat(["c"]), HeaderTree::default(), vec![vec![Cell::nested("", mid)]]);
        assert!(matches!(outer, Err(Error::Shape(_))));
    }

    #[test]
    fn cartesian_coordinates_on_people_table() {
        let t = parse_table(PEOPLE).unwrap();
        let coords = assign_coordinates(&t, DEFAULT_POSITIONS).unwrap();
        let engineer = coords[&CellPos::Data { row: 0, col: 2 }];
        assert_eq!(engineer.v, CoordPair::new(0, 1));
        assert_eq!(engineer.h, CoordPair::new(1, 3));
        assert_eq!(engineer.n, CoordPair::ZERO);
        // 9 cells plus 3 headers
        assert_eq!(coords.len(), 12);
    }

    #[test]
    fn nested_coordinates_are_nonzero_only_inside() {
        let t = parse_table(&nested_doc()).unwrap();
        let coords = assign_coordinates(&t, DEFAULT_POSITIONS).unwrap();
        for (pos, c) in &coords {
            let inside = matches!(pos, CellPos::NestedData { .. } | CellPos::NestedHeader { .. });
            assert_eq!(!c.n.is_zero(), inside, "{pos:?}");
        }
        let host = coords[&CellPos::Data { row: 1, col: 1 }];
        let inner = coords[&CellPos::NestedData { row: 1, col: 1, inner_row: 1, inner_col: 0 }];
        assert_eq!(inner.v, host.v);
        assert_eq!(inner.h, host.h);
        // one header row above the nested data
        assert_eq!(inner.n, CoordPair::new(3, 1));
        // 4 outer cells + 2 outer headers + 4 nested cells + 2 nested headers
        assert_eq!(coords.len(), 12);
    }

    #[test]
    fn coordinates_can_express_pairs_of_pairs() {
        let c = BiCoordinate {
            v: CoordPair::new(2, 7),
            h: CoordPair::new(1, 3),
            n: CoordPair::ZERO,
        };
        assert_eq!(c.to_string(), "(2,7)(1,3)(0,0)");
    }

    #[test]
    fn overflow_detected() {
        let labels: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let row: Vec<Cell> = (0..5).map(|_| Cell::text("x")).collect();
        let t = Table::new("", HeaderTree::flat(labels), HeaderTree::default(), vec![row]).unwrap();
        assert!(assign_coordinates(&t, 6).is_ok());
        assert!(matches!(
            assign_coordinates(&t, 5),
            Err(Error::Overflow { value: 5, bound: 5 })
        ));
    }

    #[test]
    fn decimal_digits() {
        assert_eq!(plain_digits("20.3"), ("20".into(), "3".into()));
        assert_eq!(plain_digits("-0.05"), ("0".into(), "05".into()));
        assert_eq!(plain_digits("1.25e1"), ("12".into(), "5".into()));
        assert_eq!(plain_digits("1e20"), ("100000000000000000000".into(), "".into()));
        assert_eq!(plain_digits("5e-3"), ("0".into(), "005".into()));
        assert!(Decimal::parse("1.").is_err());
        assert!(Decimal::parse("abc").is_err());
    }

    #[test]
    fn gaussian_text() {
        let (m, s) = parse_gaussian("12.5 ± 3.1").unwrap();
        assert_eq!((m.as_str(), s.as_str()), ("12.5", "3.1"));
        assert!(parse_gaussian("12.5").is_none());
    }
}
