//! Serialization of table segments into token sequences with visibility
//! matrices.
//!
//! Data segments are read row by row ([`SegmentKind::DataRow`]) or column by
//! column ([`SegmentKind::DataCol`]); metadata segments walk one header tree
//! depth-first. Every unit (row, column or root subtree) opens with `[CLS]` and
//! every cell is closed by `[SEP]`. Units are packed greedily into sequences of
//! at most [`MAX_SEQ_LEN`] tokens without splitting a cell.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::featurize::{CellContext, FeatureBits, Featurizer, TokenRecord, CLS, MAX_CELL_TOKENS, SEP};
use crate::table::{Axis, BiCoordinate, Cell, CellPos, CoordPair, CoordinateMap, HeaderTree, Table};

pub const MAX_SEQ_LEN: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegmentKind {
    #[serde(rename = "row")]
    DataRow,
    #[serde(rename = "col")]
    DataCol,
    #[serde(rename = "hmd")]
    Hmd,
    #[serde(rename = "vmd")]
    Vmd,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [
        SegmentKind::DataRow,
        SegmentKind::DataCol,
        SegmentKind::Hmd,
        SegmentKind::Vmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::DataRow => "row",
            SegmentKind::DataCol => "col",
            SegmentKind::Hmd => "hmd",
            SegmentKind::Vmd => "vmd",
        }
    }

    pub fn is_data(self) -> bool {
        matches!(self, SegmentKind::DataRow | SegmentKind::DataCol)
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SegmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SegmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown segment {s:?} (row, col, hmd, vmd)")))
    }
}

/// Components removed for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Attend everywhere instead of through the visibility matrix.
    pub no_visibility: bool,
    /// Drop the type embedding.
    pub no_type: bool,
    /// Zero the unit/nesting features.
    pub no_units_nesting: bool,
    /// Reduce every coordinate to its plain Cartesian form.
    pub no_bicoords: bool,
}

impl AblationFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Parses one of `visibility`, `type`, `units`, `coords`.
    pub fn drop(name: &str) -> Result<Self> {
        let mut flags = Self::default();
        match name {
            "visibility" => flags.no_visibility = true,
            "type" => flags.no_type = true,
            "units" => flags.no_units_nesting = true,
            "coords" => flags.no_bicoords = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?} (visibility, type, units, coords)"
                )))
            }
        }
        Ok(flags)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_visibility {
            parts.push("visibility");
        }
        if self.no_type {
            parts.push("type");
        }
        if self.no_units_nesting {
            parts.push("units");
        }
        if self.no_bicoords {
            parts.push("coords");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            format!("no-{}", parts.join("+"))
        }
    }

    pub fn apply_record(&self, rec: &mut TokenRecord) {
        if self.no_units_nesting {
            rec.feat = FeatureBits::default();
        }
        if self.no_bicoords {
            rec.coord = cartesian(rec.coord);
        }
    }
}
/// Drops hierarchy depth and nesting from a coordinate: depths collapse to 1
/// and the nested pair is cleared. Relational coordinates are unchanged.
pub fn cartesian(c: BiCoordinate) -> BiCoordinate {
    let flat = |p: CoordPair| CoordPair::new(p.row.min(1) as usize, p.col as usize);
    BiCoordinate {
        v: flat(c.v),
        h: flat(c.h),
        n: CoordPair::ZERO,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellOrigin {
    Data,
    NestedData,
    NestedHeader,
    Header,
    Caption,
}

/// A cell as laid out inside a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqCell {
    pub pos: Option<CellPos>,
    pub origin: CellOrigin,
    pub text: String,
    /// Row, column or root index of the unit the cell belongs to.
    pub unit: usize,
    /// Position in the outer data grid; nested content reports its host.
    pub grid: Option<(usize, usize)>,
    /// Header path for metadata cells.
    pub path: Option<Vec<usize>>,
    /// Content tokens, without the closing `[SEP]`.
    pub tokens: Range<usize>,
    /// The `[SEP]` closing this cell; nested content shares its host's.
    pub sep: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Cls { unit: usize },
    Content { cell: usize },
    Sep { cell: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub table_id: String,
    pub units: Vec<usize>,
}

/// Symmetric binary n×n matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Visibility {
    n: usize,
    bits: Vec<bool>,
}

impl Visibility {
    pub fn zeros(n: usize) -> Self {
        Visibility {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn ones(n: usize) -> Self {
        Visibility {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut v = Self::zeros(n);
        for i in 0..n {
            v.set(i, i, true);
        }
        v
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut v = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                v.bits[i * n + j] = f(i, j);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.n + j] = value;
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn has_unit_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.get(i, i))
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Run lengths over the row-major bits, starting with a run of zeros
    /// (possibly empty).
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(n: usize, runs: &[usize]) -> Result<Self> {
        let mut bits = Vec::with_capacity(n * n);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(value, r));
            value = !value;
        }
        if bits.len() != n * n {
            return Err(Error::Shape(format!(
                "run lengths cover {} entries, expected {}",
                bits.len(),
                n * n
            )));
        }
        Ok(Visibility { n, bits })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<TokenRecord>,
    pub slots: Vec<Slot>,
    pub cells: Vec<SeqCell>,
    pub segment: SegmentKind,
    pub visibility: Visibility,
    pub provenance: Provenance,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Content tokens of every cell (no `[CLS]`/`[SEP]`).
    pub fn content_indices(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Slot::Content { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Cell a token belongs to; `[SEP]` belongs to the cell it closes.
    pub fn cell_of(&self, token: usize) -> Option<usize> {
        match self.slots[token] {
            Slot::Content { cell } | Slot::Sep { cell } => Some(cell),
            Slot::Cls { .. } => None,
        }
    }

    /// One JSON line for inspection dumps.
    pub fn to_json_line(&self, featurizer: &Featurizer) -> String {
        let tokens: Vec<_> = self
            .tokens
            .iter()
            .map(|r| {
                let c = r.coord;
                json!({
                    "id": r.token_id,
                    "token": featurizer.vocab.token(r.token_id).unwrap_or("[UNK]"),
                    "num": r.num.map(|n| n.as_array()),
                    "in_pos": r.in_pos,
                    "coord": [[c.v.row, c.v.col], [c.h.row, c.h.col], [c.n.row, c.n.col]],
                    "feat": r.feat.to_string(),
                    "type": featurizer.types.name(r.type_id),
                })
            })
            .collect();
        json!({
            "segment": self.segment.name(),
            "table_id": self.provenance.table_id,
            "units": self.provenance.units,
            "n": self.len(),
            "tokens": tokens,
            "visibility_rle": self.visibility.to_rle(),
        })
        .to_string()
    }
}

struct PendingCell {
    cell: SeqCell,
    records: Vec<TokenRecord>,
}

/// A cell plus anything inlined after it, closed by one `[SEP]`.
struct Group {
    cells: Vec<PendingCell>,
    sep: TokenRecord,
}

impl Group {
    fn len(&self) -> usize {
        self.cells.iter().map(|c| c.records.len()).sum::<usize>() + 1
    }
}

struct Unit {
    index: usize,
    cls: TokenRecord,
    groups: Vec<Group>,
}

struct Packer {
    segment: SegmentKind,
    table_id: String,
    max_len: usize,
    done: Vec<TokenSequence>,
    current: Option<TokenSequence>,
}

impl Packer {
    fn new(segment: SegmentKind, table_id: &str, max_len: usize) -> Self {
        Packer {
            segment,
            table_id: table_id.to_string(),
            max_len,
            done: Vec::new(),
            current: None,
        }
    }

    fn empty_seq(&self) -> TokenSequence {
        TokenSequence {
            tokens: Vec::new(),
            slots: Vec::new(),
            cells: Vec::new(),
            segment: self.segment,
            visibility: Visibility::zeros(0),
            provenance: Provenance {
                table_id: self.table_id.clone(),
                units: Vec::new(),
            },
        }
    }

    fn room(&self) -> usize {
        self.max_len - self.current.as_ref().map_or(0, TokenSequence::len)
    }

    fn flush(&mut self) {
        if let Some(mut seq) = self.current.take() {
            seq.visibility = build_visibility_matrix(&seq);
            self.done.push(seq);
        }
    }

    fn open_unit(&mut self, unit: &Unit) {
        if self.current.is_none() {
            self.current = Some(self.empty_seq());
        }
        let seq = self.current.as_mut().unwrap();
        seq.tokens.push(unit.cls);
        seq.slots.push(Slot::Cls { unit: unit.index });
        if seq.provenance.units.last() != Some(&unit.index) {
            seq.provenance.units.push(unit.index);
        }
    }

    fn push_group(&mut self, group: Group) {
        let seq = self.current.as_mut().expect("unit opened");
        let mut host = None;
        for pending in group.cells {
            let idx = seq.cells.len();
            host.get_or_insert(idx);
            let start = seq.tokens.len();
            for r in pending.records {
                seq.tokens.push(r);
                seq.slots.push(Slot::Content { cell: idx });
            }
            let mut cell = pending.cell;
            cell.tokens = start..seq.tokens.len();
            seq.cells.push(cell);
        }
        let host = host.expect("group has a host cell");
        let sep = seq.tokens.len();
        seq.tokens.push(group.sep);
        seq.slots.push(Slot::Sep { cell: host });
        seq.cells[host].sep = Some(sep);
    }

    fn add_unit(&mut self, unit: Unit) -> Result<()> {
        let total: usize = 1 + unit.groups.iter().map(Group::len).sum::<usize>();
        for g in &unit.groups {
            if g.len() + 1 > self.max_len {
                return Err(Error::CellTooLarge {
                    tokens: g.len() + 1,
                    cap: self.max_len,
                });
            }
        }
        if total > self.room() {
            self.flush();
        }
        self.open_unit(&unit);
        let Unit { index, cls, groups } = unit;
        for group in groups {
            if group.len() > self.room() {
                // the unit does not fit in one sequence: continue it in a new one
                self.flush();
                self.open_unit(&Unit {
                    index,
                    cls,
                    groups: Vec::new(),
                });
            }
            self.push_group(group);
        }
        Ok(())
    }

    fn finish(mut self) -> Vec<TokenSequence> {
        self.flush();
        self.done
    }
}

fn coord_at(coords: &CoordinateMap, pos: &CellPos) -> BiCoordinate {
    coords.get(pos).copied().unwrap_or_default()
}

fn sep_record(records: &[TokenRecord], coord: BiCoordinate, nested: bool, type_id: u8) -> TokenRecord {
    let mut feat = FeatureBits::default();
    if nested {
        feat = feat.with_nested();
    }
    TokenRecord {
        token_id: SEP,
        num: None,
        in_pos: records.len().min(MAX_CELL_TOKENS - 1) as u16,
        coord,
        feat,
        type_id,
    }
}

fn tree_cells(
    tree: &HeaderTree,
    featurizer: &Featurizer,
    mut pos_of: impl FnMut(Vec<usize>) -> CellPos,
    coords: &CoordinateMap,
    origin: CellOrigin,
    nested: bool,
    grid: Option<(usize, usize)>,
) -> Vec<PendingCell> {
    tree.visit()
        .into_iter()
        .map(|v| {
            let pos = pos_of(v.path.clone());
            let coord = coord_at(coords, &pos);
            let records = featurizer.tokenize_label(&v.node.label, CellContext { coord, nested });
            PendingCell {
                cell: SeqCell {
                    pos: Some(pos),
                    origin,
                    text: v.node.label.clone(),
                    unit: v.path[0],
                    grid,
                    path: Some(v.path),
                    tokens: 0..0,
                    sep: None,
                },
                records,
            }
        })
        .collect()
}

fn data_group(
    table: &Table,
    row: usize,
    col: usize,
    unit: usize,
    column_major: bool,
    coords: &CoordinateMap,
    featurizer: &Featurizer,
) -> Group {
    let cell = &table.data[row][col];
    let pos = CellPos::Data { row, col };
    let coord = coord_at(coords, &pos);
    let inner = cell.nested_table();
    let records = featurizer.tokenize_cell(
        cell,
        CellContext {
            coord,
            nested: inner.is_some(),
        },
    );
    let sep = sep_record(&records, coord, inner.is_some(), featurizer.infer_type(cell));
    let mut cells = vec![PendingCell {
        cell: SeqCell {
            pos: Some(pos),
            origin: CellOrigin::Data,
            text: cell.text.clone(),
            unit,
            grid: Some((row, col)),
            path: None,
            tokens: 0..0,
            sep: None,
        },
        records,
    }];
    if let Some(inner) = inner {
        for (tree, axis) in [(&inner.hmd, Axis::Horizontal), (&inner.vmd, Axis::Vertical)] {
            cells.extend(tree_cells(
                tree,
                featurizer,
                |path| CellPos::NestedHeader {
                    row,
                    col,
                    axis,
                    path,
                },
                coords,
                CellOrigin::NestedHeader,
                true,
                Some((row, col)),
            ));
        }
        let (n, m) = (inner.n_rows(), inner.n_cols());
        let order: Vec<(usize, usize)> = if column_major {
            (0..m).flat_map(|c| (0..n).map(move |r| (r, c))).collect()
        } else {
            (0..n).flat_map(|r| (0..m).map(move |c| (r, c))).collect()
        };
        for (r, c) in order {
            let inner_cell = &inner.data[r][c];
            let pos = CellPos::NestedData {
                row,
                col,
                inner_row: r,
                inner_col: c,
            };
            let coord = coord_at(coords, &pos);
            let records = featurizer.tokenize_cell(inner_cell, CellContext { coord, nested: true });
            cells.push(PendingCell {
                cell: SeqCell {
                    pos: Some(pos),
                    origin: CellOrigin::NestedData,
                    text: inner_cell.text.clone(),
                    unit,
                    grid: Some((row, col)),
                    path: None,
                    tokens: 0..0,
                    sep: None,
                },
                records,
            });
        }
    }
    Group { cells, sep }
}

/// Serializes one segment of `table` into packed sequences of at most
/// `max_len` tokens, each with its visibility matrix.
pub fn build_sequences(
    table: &Table,
    segment: SegmentKind,
    coords: &CoordinateMap,
    featurizer: &Featurizer,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    let text_type = featurizer.types.text_type();
    let mut packer = Packer::new(segment, &table.source_id, max_len);
    match segment {
        SegmentKind::DataRow | SegmentKind::DataCol => {
            let column_major = segment == SegmentKind::DataCol;
            let (units, per_unit) = if column_major {
                (table.n_cols(), table.n_rows())
            } else {
                (table.n_rows(), table.n_cols())
            };
            for u in 0..units {
                let (row, col) = if column_major { (0, u) } else { (u, 0) };
                let anchor = coord_at(coords, &CellPos::Data { row, col });
                let cls_coord = if column_major {
                    BiCoordinate {
                        h: anchor.h,
                        ..Default::default()
                    }
                } else {
                    BiCoordinate {
                        v: anchor.v,
                        ..Default::default()
                    }
                };
                let groups = (0..per_unit)
                    .map(|k| {
                        let (r, c) = if column_major { (k, u) } else { (u, k) };
                        data_group(table, r, c, u, column_major, coords, featurizer)
                    })
                    .collect();
                packer.add_unit(Unit {
                    index: u,
                    cls: TokenRecord::special(CLS, cls_coord, text_type),
                    groups,
                })?;
            }
        }
        SegmentKind::Hmd | SegmentKind::Vmd => {
            let (tree, axis) = if segment == SegmentKind::Hmd {
                (&table.hmd, Axis::Horizontal)
            } else {
                (&table.vmd, Axis::Vertical)
            };
            let cells = tree_cells(
                tree,
                featurizer,
                |path| CellPos::Header { axis, path },
                coords,
                CellOrigin::Header,
                false,
                None,
            );
            let mut units: Vec<Unit> = Vec::new();
            for pending in cells {
                let root = pending.cell.unit;
                if units.last().is_none_or(|u| u.index != root) {
                    units.push(Unit {
                        index: root,
                        cls: TokenRecord::special(CLS, BiCoordinate::default(), text_type),
                        groups: Vec::new(),
                    });
                }
                let coord = pending.records.first().map(|r| r.coord).unwrap_or_else(|| {
                    coord_at(coords, pending.cell.pos.as_ref().expect("header position"))
                });
                let sep = sep_record(&pending.records, coord, false, featurizer.infer_type(&Cell::text(pending.cell.text.clone())));
                units.last_mut().unwrap().groups.push(Group {
                    cells: vec![pending],
                    sep,
                });
            }
            for unit in units {
                packer.add_unit(unit)?;
            }
        }
    }
    Ok(packer.finish())
}

/// `[CLS] caption [SEP]` with default coordinates and full visibility.
pub fn caption_sequence(table: &Table, featurizer: &Featurizer) -> TokenSequence {
    single_cell_sequence(
        featurizer.tokenize_label(&table.caption, CellContext::default()),
        &table.caption,
        CellOrigin::Caption,
        SegmentKind::DataRow,
        &table.source_id,
        featurizer.types.text_type(),
    )
}

/// `[CLS] records [SEP]` for a standalone cell.
pub fn single_cell_sequence(
    records: Vec<TokenRecord>,
    text: &str,
    origin: CellOrigin,
    segment: SegmentKind,
    table_id: &str,
    text_type: u8,
) -> TokenSequence {
    let coord = records.first().map(|r| r.coord).unwrap_or_default();
    let type_id = records.first().map(|r| r.type_id).unwrap_or(text_type);
    let sep = sep_record(&records, coord, false, type_id);
    let mut packer = Packer::new(segment, table_id, usize::MAX);
    packer.open_unit(&Unit {
        index: 0,
        cls: TokenRecord::special(CLS, BiCoordinate::default(), text_type),
        groups: Vec::new(),
    });
    packer.push_group(Group {
        cells: vec![PendingCell {
            cell: SeqCell {
                pos: None,
                origin,
                text: text.to_string(),
                unit: 0,
                grid: Some((0, 0)),
                path: None,
                tokens: 0..0,
                sep: None,
            },
            records,
        }],
        sep,
    });
    let mut seqs = packer.finish();
    seqs.pop().expect("one sequence")
}

fn cells_visible(seq: &TokenSequence, a: usize, b: usize) -> bool {
    if a == b {
        return true;
    }
    let (ca, cb) = (&seq.cells[a], &seq.cells[b]);
    if let (Some(pa), Some(pb)) = (&ca.path, &cb.path) {
        if ca.origin == CellOrigin::Header && cb.origin == CellOrigin::Header {
            let ancestor = pa.starts_with(pb) || pb.starts_with(pa);
            let siblings = pa.len() == pb.len() && pa[..pa.len() - 1] == pb[..pb.len() - 1];
            return ancestor || siblings;
        }
    }
    match (ca.grid, cb.grid) {
        (Some((ra, ka)), Some((rb, kb))) => ra == rb || ka == kb,
        _ => false,
    }
}

/// Visibility from the sequence structure: cells see cells in the same grid
/// row or column (header cells: ancestors, descendants and siblings);
/// `[SEP]` sees what its cell sees; `[CLS]` sees its own unit and every other
/// `[CLS]`.
pub fn build_visibility_matrix(seq: &TokenSequence) -> Visibility {
    let n = seq.len();
    let unit_of = |slot: &Slot| match *slot {
        Slot::Cls { unit } => unit,
        Slot::Content { cell } | Slot::Sep { cell } => seq.cells[cell].unit,
    };
    let mut m = Visibility::zeros(n);
    for i in 0..n {
        for j in i..n {
            let visible = match (seq.slots[i], seq.slots[j]) {
                (Slot::Cls { .. }, Slot::Cls { .. }) => true,
                (Slot::Cls { unit }, other) | (other, Slot::Cls { unit }) => unit_of(&other) == unit,
                (a, b) => cells_visible(
                    seq,
                    seq.cell_of_slot(a),
                    seq.cell_of_slot(b),
                ),
            };
            m.set(i, j, visible);
            m.set(j, i, visible);
        }
    }
    m
}

impl TokenSequence {
    fn cell_of_slot(&self, slot: Slot) -> usize {
        match slot {
            Slot::Content { cell } | Slot::Sep { cell } => cell,
            Slot::Cls { .. } => unreachable!("cls handled separately"),
        }
    }
}

/// Applies ablations to a sequence: full visibility, zeroed unit/nesting
/// features, default coordinates. The type ablation acts in the embedding
/// layer.
pub fn apply_ablation(seq: &TokenSequence, flags: AblationFlags) -> TokenSequence {
    let mut out = seq.clone();
    if flags.no_visibility {
        out.visibility = Visibility::ones(out.len());
    }
    for rec in &mut out.tokens {
        flags.apply_record(rec);
    }
    out
}

/// Sequences of every table for one segment, ablations applied.
pub fn corpus_sequences(
    tables: &[Table],
    segment: SegmentKind,
    featurizer: &Featurizer,
    flags: AblationFlags,
    positions: usize,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for table in tables {
        let coords = crate::table::assign_coordinates(table, positions)?;
        for seq in build_sequences(table, segment, &coords, featurizer, max_len)? {
            out.push(apply_ablation(&seq, flags));
        }
    }
    Ok(out)
}
