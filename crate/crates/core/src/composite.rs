//! Composite embeddings: pooled hidden states from the segment models,
//! concatenated per recipe.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{CellContext, TokenRecord, UNK};
use crate::nn::{scalar, Mat};
use crate::pretrain::ModelBundle;
use crate::sequence::{
    apply_ablation, build_sequences, caption_sequence, single_cell_sequence, CellOrigin, SegmentKind, SeqCell,
    TokenSequence,
};
use crate::table::{assign_coordinates, Axis, Cell, CellPos, Decimal, Table, UnitClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Recipe {
    #[serde(rename = "colcomp")]
    Colcomp,
    #[serde(rename = "tblcomp1")]
    Tblcomp1,
    #[serde(rename = "tblcomp2")]
    Tblcomp2,
    #[serde(rename = "numeric_ce")]
    Numeric,
    #[serde(rename = "range_ce")]
    Range,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::Colcomp => "colcomp",
            Recipe::Tblcomp1 => "tblcomp1",
            Recipe::Tblcomp2 => "tblcomp2",
            Recipe::Numeric => "numeric_ce",
            Recipe::Range => "range_ce",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "colcomp" => Recipe::Colcomp,
            "tblcomp1" => Recipe::Tblcomp1,
            "tblcomp2" => Recipe::Tblcomp2,
            "numeric" | "numeric_ce" => Recipe::Numeric,
            "range" | "range_ce" => Recipe::Range,
            other => {
                return Err(Error::Config(format!(
                    "unknown recipe {other:?} (colcomp, tblcomp1, tblcomp2, numeric, range)"
                )))
            }
        })
    }
}

/// One slice of a composite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    /// Segment model name, or `caption`.
    pub source: String,
    pub unit: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeEmbedding {
    pub vector: Vec<f32>,
    pub recipe: Recipe,
    pub parts: Vec<Part>,
}

impl CompositeEmbedding {
    fn assemble(recipe: Recipe, slices: Vec<(String, String, Array1<f32>)>) -> Self {
        let mut vector = Vec::new();
        let mut parts = Vec::with_capacity(slices.len());
        for (source, unit, v) in slices {
            let start = vector.len();
            vector.extend(v.iter().copied());
            parts.push(Part {
                source,
                unit,
                start,
                end: vector.len(),
            });
        }
        CompositeEmbedding { vector, recipe, parts }
    }

    pub fn slice(&self, part: usize) -> &[f32] {
        let p = &self.parts[part];
        &self.vector[p.start..p.end]
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

/// Mean of the rows of `hidden` at `unit`.
pub fn pool<F: NdFloat>(hidden: &Mat<F>, unit: &[usize]) -> Result<Array1<F>> {
    if unit.is_empty() {
        return Err(Error::EmptyUnit);
    }
    let mut acc = Array1::zeros(hidden.ncols());
    for &i in unit {
        if i >= hidden.nrows() {
            return Err(Error::Index {
                table: "hidden states",
                index: i,
                rows: hidden.nrows(),
            });
        }
        acc += &hidden.row(i);
    }
    Ok(acc / scalar::<F>(unit.len() as f64))
}

/// A table segment run through its model.
pub struct EncodedSegment {
    pub seqs: Vec<TokenSequence>,
    pub hidden: Vec<Mat<f32>>,
}

impl EncodedSegment {
    /// Mean hidden state over the content tokens of every cell matching
    /// `keep`, across all sequences; `None` when nothing matches.
    pub fn pool_cells(&self, keep: impl Fn(&SeqCell) -> bool) -> Option<Array1<f32>> {
        let mut acc: Option<Array1<f32>> = None;
        let mut count = 0usize;
        for (seq, hid) in self.seqs.iter().zip(&self.hidden) {
            for cell in seq.cells.iter().filter(|c| keep(c)) {
                for i in cell.tokens.clone() {
                    let row = hid.row(i);
                    match &mut acc {
                        Some(a) => *a += &row,
                        None => acc = Some(row.to_owned()),
                    }
                    count += 1;
                }
            }
        }
        acc.map(|a| a / count as f32)
    }
}

/// Builds and encodes one segment of `table` with the bundle's model.
pub fn encode_segment(table: &Table, segment: SegmentKind, bundle: &ModelBundle) -> Result<EncodedSegment> {
    let model = bundle.model(segment)?;
    let flags = bundle.config.ablations;
    let enc = &bundle.config.encoder;
    let coords = assign_coordinates(table, bundle.config.positions)?;
    let seqs: Vec<TokenSequence> = build_sequences(table, segment, &coords, &bundle.featurizer, enc.max_seq)?
        .iter()
        .map(|s| apply_ablation(s, flags))
        .collect();
    let hidden = seqs
        .iter()
        .map(|s| model.encode_sequence(s, enc, flags))
        .collect::<Result<_>>()?;
    Ok(EncodedSegment { seqs, hidden })
}

fn encode_single(bundle: &ModelBundle, segment: SegmentKind, seq: &TokenSequence) -> Result<Array1<f32>> {
    let model = bundle.model(segment)?;
    let flags = bundle.config.ablations;
    let seq = apply_ablation(seq, flags);
    let hid = model.encode_sequence(&seq, &bundle.config.encoder, flags)?;
    pool(&hid, &seq.content_indices())
}

fn is_column_leaf(cell: &SeqCell, leaf_path: &[usize]) -> bool {
    matches!(&cell.pos, Some(CellPos::Header { axis: Axis::Horizontal, path }) if path == leaf_path)
}

/// Composites of every column of `table`: the HMD model's pooled attribute
/// tokens followed by the column model's pooled data tokens.
pub fn column_composites(table: &Table, bundle: &ModelBundle) -> Result<Vec<CompositeEmbedding>> {
    let h = bundle.hidden();
    let hmd = encode_segment(table, SegmentKind::Hmd, bundle)?;
    let col = encode_segment(table, SegmentKind::DataCol, bundle)?;
    let leaves: Vec<Vec<usize>> = table.hmd.leaves().into_iter().map(|v| v.path).collect();
    (0..table.n_cols())
        .map(|j| {
            let attr = leaves
                .get(j)
                .and_then(|p| hmd.pool_cells(|c| is_column_leaf(c, p)))
                .unwrap_or_else(|| Array1::zeros(h));
            let data = col
                .pool_cells(|c| {
                    matches!(c.origin, CellOrigin::Data | CellOrigin::NestedData | CellOrigin::NestedHeader)
                        && c.grid.is_some_and(|(_, cj)| cj == j)
                })
                .unwrap_or_else(|| Array1::zeros(h));
            Ok(CompositeEmbedding::assemble(
                Recipe::Colcomp,
                vec![
                    ("hmd".into(), format!("attribute {j}"), attr),
                    ("col".into(), format!("column {j} data"), data),
                ],
            ))
        })
        .collect()
}

pub fn column_composite(table: &Table, j: usize, bundle: &ModelBundle) -> Result<CompositeEmbedding> {
    if j >= table.n_cols() {
        return Err(Error::Index {
            table: "columns",
            index: j,
            rows: table.n_cols(),
        });
    }
    Ok(column_composites(table, bundle)?.swap_remove(j))
}

/// Table composite: pooled data (row model), HMD and VMD tokens; `tblcomp2`
/// appends the pooled caption run through the row model. Empty segments
/// contribute zero vectors.
pub fn table_composite(table: &Table, bundle: &ModelBundle, recipe: Recipe) -> Result<CompositeEmbedding> {
    if !matches!(recipe, Recipe::Tblcomp1 | Recipe::Tblcomp2) {
        return Err(Error::Config(format!("{recipe} is not a table recipe")));
    }
    let h = bundle.hidden();
    let zero = || Array1::zeros(h);
    let mut slices = Vec::with_capacity(4);
    for (seg, unit) in [
        (SegmentKind::DataRow, "data tokens"),
        (SegmentKind::Hmd, "hmd tokens"),
        (SegmentKind::Vmd, "vmd tokens"),
    ] {
        let encoded = encode_segment(table, seg, bundle)?;
        let v = encoded.pool_cells(|_| true).unwrap_or_else(zero);
        slices.push((seg.name().to_string(), unit.to_string(), v));
    }
    if recipe == Recipe::Tblcomp2 {
        let seq = caption_sequence(table, &bundle.featurizer);
        let v = if seq.content_indices().is_empty() {
            bundle.model(SegmentKind::DataRow)?;
            zero()
        } else {
            encode_single(bundle, SegmentKind::DataRow, &seq)?
        };
        slices.push(("caption".into(), "caption tokens".into(), v));
    }
    Ok(CompositeEmbedding::assemble(recipe, slices))
}

fn label_vector(bundle: &ModelBundle, segment: SegmentKind, text: &str) -> Result<Array1<f32>> {
    let f = &bundle.featurizer;
    let mut recs = f.tokenize_label(text, CellContext::default());
    if recs.is_empty() {
        recs.push(TokenRecord::special(UNK, Default::default(), f.types.text_type()));
    }
    let seq = single_cell_sequence(recs, text, CellOrigin::Header, segment, "", f.types.text_type());
    encode_single(bundle, segment, &seq)
}

fn value_vector(bundle: &ModelBundle, value: &Decimal, unit: Option<UnitClass>) -> Result<Array1<f32>> {
    let f = &bundle.featurizer;
    let mut cell = Cell::number(value.as_str(), value.clone(), None);
    cell.unit = unit;
    let recs = f.tokenize_cell(&cell, CellContext::default());
    let seq = single_cell_sequence(recs, value.as_str(), CellOrigin::Data, SegmentKind::DataCol, "", f.types.text_type());
    encode_single(bundle, SegmentKind::DataCol, &seq)
}

/// The unit's first surface form, or `[UNK]` without a unit.
fn unit_vector(bundle: &ModelBundle, unit: Option<UnitClass>) -> Result<Array1<f32>> {
    let f = &bundle.featurizer;
    let (text, recs) = match unit.and_then(|u| f.units.surfaces(u).first().map(|s| (u, s))) {
        Some((u, surface)) => {
            let mut recs = f.tokenize_label(surface, CellContext::default());
            for r in &mut recs {
                r.feat = r.feat.with_unit(u);
            }
            (surface.clone(), recs)
        }
        None => (
            "[UNK]".to_string(),
            vec![TokenRecord::special(UNK, Default::default(), f.types.text_type())],
        ),
    };
    let seq = single_cell_sequence(recs, &text, CellOrigin::Data, SegmentKind::DataCol, "", f.types.text_type());
    encode_single(bundle, SegmentKind::DataCol, &seq)
}

/// Attribute (HMD model), value and unit (column model), each pooled: 3H.
pub fn numeric_composite(
    attribute: &str,
    value: &Decimal,
    unit: Option<UnitClass>,
    bundle: &ModelBundle,
) -> Result<CompositeEmbedding> {
    Ok(CompositeEmbedding::assemble(
        Recipe::Numeric,
        vec![
            ("hmd".into(), format!("attribute {attribute:?}"), label_vector(bundle, SegmentKind::Hmd, attribute)?),
            ("col".into(), format!("value {}", value.as_str()), value_vector(bundle, value, unit)?),
            ("col".into(), format!("unit {}", unit.map_or("none", |u| u.name())), unit_vector(bundle, unit)?),
        ],
    ))
}

/// Attribute, unit, range start and range end, each pooled: 4H.
pub fn range_composite(
    attribute: &str,
    unit: Option<UnitClass>,
    lo: &Decimal,
    hi: &Decimal,
    bundle: &ModelBundle,
) -> Result<CompositeEmbedding> {
    if lo.value() > hi.value() {
        return Err(Error::RangeOrder {
            lo: lo.value(),
            hi: hi.value(),
        });
    }
    Ok(CompositeEmbedding::assemble(
        Recipe::Range,
        vec![
            ("hmd".into(), format!("attribute {attribute:?}"), label_vector(bundle, SegmentKind::Hmd, attribute)?),
            ("col".into(), format!("unit {}", unit.map_or("none", |u| u.name())), unit_vector(bundle, unit)?),
            ("col".into(), format!("start {}", lo.as_str()), value_vector(bundle, lo, unit)?),
            ("col".into(), format!("end {}", hi.as_str()), value_vector(bundle, hi, unit)?),
        ],
    ))
}
