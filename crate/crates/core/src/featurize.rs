//! Cell featurization: vocabulary, tokenizer, number features, unit detection
//! and type inference, producing one [`TokenRecord`] per token.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{BiCoordinate, Cell, CellValue, Decimal, Table, UnitClass};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const VAL: u32 = 3;
pub const MASK: u32 = 4;
pub const UNK: u32 = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[CLS]", "[SEP]", "[VAL]", "[MASK]", "[UNK]"];

/// Maximum tokens kept per cell.
pub const MAX_CELL_TOKENS: usize = 64;
/// Number of inferred types.
pub const TYPE_COUNT: usize = 14;
/// Width of the unit/nesting feature vector.
pub const FEATURE_BITS: usize = 8;
/// Clip value for every number feature.
pub const NUMBER_FEATURE_MAX: u8 = 10;

const SUBWORD_PREFIX: &str = "##";

// ---------------------------------------------------------------------------
// Tokenizer

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Number(String),
    Punct(String),
}

fn piece_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+(?:\.\d+)?)|([^\W\d_]+)|(\S)").unwrap())
}

/// Lowercasing whitespace/punctuation tokenizer. Digit runs (with an optional
/// fractional part) come out as [`Piece::Number`].
pub fn split_pieces(text: &str) -> Vec<Piece> {
    piece_regex()
        .captures_iter(text)
        .map(|c| {
            if let Some(m) = c.get(1) {
                Piece::Number(m.as_str().to_string())
            } else if let Some(m) = c.get(2) {
                Piece::Word(m.as_str().to_lowercase())
            } else {
                Piece::Punct(c[3].to_lowercase())
            }
        })
        .collect()
}

/// Separators dropped from numeric cells, whose values are already encoded as
/// `[VAL]` tokens.
fn is_numeric_separator(piece: &str) -> bool {
    matches!(piece, "-" | "–" | "±" | "+" | "/" | "(" | ")" | "," | "to")
}

// ---------------------------------------------------------------------------
// Vocabulary

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_count: usize,
    pub max_size: usize,
    /// Add single-character pieces so unknown words decompose greedily
    /// instead of collapsing to `[UNK]`.
    pub subwords: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_count: 1,
            max_size: 30_000,
            subwords: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyDoc", into = "VocabularyDoc")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    subwords: bool,
}

#[derive(Serialize, Deserialize)]
struct VocabularyDoc {
    tokens: Vec<String>,
    subwords: bool,
}

impl From<VocabularyDoc> for Vocabulary {
    fn from(doc: VocabularyDoc) -> Self {
        Vocabulary::from_tokens(doc.tokens, doc.subwords)
    }
}

impl From<Vocabulary> for VocabularyDoc {
    fn from(v: Vocabulary) -> Self {
        VocabularyDoc {
            tokens: v.tokens,
            subwords: v.subwords,
        }
    }
}

impl Vocabulary {
    /// Vocabulary from an explicit token list. Reserved tokens are prepended
    /// when missing so they always hold ids 0-5.
    pub fn from_tokens(tokens: Vec<String>, subwords: bool) -> Self {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens: all,
            index,
            subwords,
        }
    }

    /// Counts words and punctuation over captions, header labels and cell
    /// texts (nested tables included) and keeps the most frequent ones.
    pub fn build<'a>(tables: impl IntoIterator<Item = &'a Table>, cfg: &VocabConfig) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        let mut add = |text: &str| {
            for piece in split_pieces(text) {
                if let Piece::Word(w) | Piece::Punct(w) = piece {
                    chars.extend(w.chars().map(|c| (c, ())));
                    *counts.entry(w).or_default() += 1;
                }
            }
        };
        fn walk(table: &Table, add: &mut dyn FnMut(&str)) {
            add(&table.caption);
            for tree in [&table.hmd, &table.vmd] {
                for v in tree.visit() {
                    add(&v.node.label);
                }
            }
            for (_, _, cell) in table.cells() {
                add(&cell.text);
                if let Some(inner) = cell.nested_table() {
                    walk(inner, add);
                }
            }
        }
        for table in tables {
            walk(table, &mut add);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= cfg.min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = Vec::new();
        if cfg.subwords {
            for c in chars.keys() {
                tokens.push(c.to_string());
                tokens.push(format!("{SUBWORD_PREFIX}{c}"));
            }
        }
        let room = cfg.max_size.saturating_sub(SPECIAL_TOKENS.len() + tokens.len());
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Vocabulary::from_tokens(tokens, cfg.subwords)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids for one word: the word itself, its greedy longest-match pieces
    /// when subwords are enabled, or `[UNK]`.
    pub fn lookup(&self, word: &str) -> Vec<u32> {
        if let Some(id) = self.id(word) {
            return vec![id];
        }
        if !self.subwords {
            return vec![UNK];
        }
        let chars: Vec<char> = word.chars().collect();
        let mut ids = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, SUBWORD_PREFIX);
                }
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => ids.push(id),
                None => return vec![UNK],
            }
            start = end;
        }
        ids
    }
}

// ---------------------------------------------------------------------------
// Number features

/// Magnitude, precision, first and last digit of a number, each clipped to 10.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NumberFeatures {
    pub mag: u8,
    pub pre: u8,
    pub fst: u8,
    pub lst: u8,
}

impl NumberFeatures {
    pub fn new(mag: u8, pre: u8, fst: u8, lst: u8) -> Self {
        NumberFeatures { mag, pre, fst, lst }
    }

    pub fn as_array(&self) -> [u8; 4] {
        [self.mag, self.pre, self.fst, self.lst]
    }
}

impl fmt::Display for NumberFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.mag, self.pre, self.fst, self.lst)
    }
}

fn clip(n: usize) -> u8 {
    n.min(NUMBER_FEATURE_MAX as usize) as u8
}

/// Features read off the written decimal; the sign is ignored.
pub fn number_features(x: &Decimal) -> NumberFeatures {
    let (int, frac) = x.digits();
    let digit = |c: char| c.to_digit(10).unwrap_or(0) as u8;
    let fst = int
        .chars()
        .chain(frac.chars())
        .find(|c| *c != '0')
        .map(digit)
        .unwrap_or(0);
    let lst = frac
        .chars()
        .last()
        .or_else(|| int.chars().last())
        .map(digit)
        .unwrap_or(0);
    NumberFeatures {
        mag: clip(int.len().max(1)),
        pre: clip(frac.len()),
        fst,
        lst,
    }
}

// ---------------------------------------------------------------------------
// Units

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitDictionary {
    classes: BTreeMap<UnitClass, Vec<String>>,
}

impl Default for UnitDictionary {
    fn default() -> Self {
        let table: [(UnitClass, &[&str]); 7] = [
            (UnitClass::Stats, &["%", "mean", "percent", "median"]),
            (UnitClass::Length, &["m", "cm", "mm", "km", "in", "ft"]),
            (UnitClass::Weight, &["kg", "g", "mg", "lb"]),
            (UnitClass::Capacity, &["l", "ml", "dl"]),
            (
                UnitClass::Time,
                &["s", "sec", "min", "hour", "hr", "day", "week", "month", "year"],
            ),
            (UnitClass::Temperature, &["°c", "°f", "k"]),
            (UnitClass::Pressure, &["pa", "kpa", "mmhg", "bar"]),
        ];
        UnitDictionary {
            classes: table
                .into_iter()
                .map(|(u, forms)| (u, forms.iter().map(|s| s.to_string()).collect()))
                .collect(),
        }
    }
}

impl UnitDictionary {
    pub fn from_json(text: &str) -> Result<Self> {
        let dict: UnitDictionary = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("unit dictionary: {e}")))?;
        Ok(dict.normalized())
    }

    pub fn new(classes: BTreeMap<UnitClass, Vec<String>>) -> Self {
        UnitDictionary { classes }.normalized()
    }

    fn normalized(mut self) -> Self {
        for forms in self.classes.values_mut() {
            for f in forms.iter_mut() {
                *f = f.to_lowercase();
            }
        }
        self
    }

    pub fn surfaces(&self, unit: UnitClass) -> &[String] {
        self.classes.get(&unit).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Exact match of a single unit word, falling back to the singular of a
    /// trailing-`s` plural.
    pub fn classify(&self, word: &str) -> Option<UnitClass> {
        let word = word.to_lowercase();
        let hit = |w: &str| {
            self.classes
                .iter()
                .find(|(_, forms)| forms.iter().any(|f| f == w))
                .map(|(u, _)| *u)
        };
        hit(&word).or_else(|| {
            word.strip_suffix('s')
                .filter(|stem| stem.chars().count() > 1)
                .and_then(hit)
        })
    }

    /// The unit class of a cell: its explicit unit, else the first unit word in
    /// its text.
    pub fn detect(&self, cell: &Cell) -> Option<UnitClass> {
        cell.unit.or_else(|| self.detect_text(&cell.text))
    }

    pub fn detect_text(&self, text: &str) -> Option<UnitClass> {
        text.split_whitespace().find_map(|chunk| {
            let word = chunk
                .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | '-' | '+'))
                .trim_end_matches([',', ';', ':', ')', '(', '.']);
            (!word.is_empty()).then(|| self.classify(word)).flatten()
        })
    }
}

// ---------------------------------------------------------------------------
// Types

const DEFAULT_TYPE_NAMES: [&str; TYPE_COUNT] = [
    "text",
    "numeric",
    "range",
    "name",
    "place",
    "measurement",
    "disease",
    "drug",
    "chemical",
    "treatment",
    "vaccine",
    "gene",
    "organization",
    "date",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeDictionaryDoc {
    pub type_names: Vec<String>,
    pub entries: BTreeMap<String, String>,
}

/// Dictionary and regex tagger over a fixed set of 14 type names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TypeDictionaryDoc", into = "TypeDictionaryDoc")]
pub struct TypeDictionary {
    names: Vec<String>,
    /// Lowercased surface form → type id, longest surfaces first.
    entries: Vec<(String, u8)>,
    text: u8,
    numeric: u8,
    range: u8,
    measurement: Option<u8>,
}

impl TryFrom<TypeDictionaryDoc> for TypeDictionary {
    type Error = Error;

    fn try_from(doc: TypeDictionaryDoc) -> Result<Self> {
        TypeDictionary::new(doc.type_names, doc.entries)
    }
}

impl From<TypeDictionary> for TypeDictionaryDoc {
    fn from(d: TypeDictionary) -> Self {
        TypeDictionaryDoc {
            entries: d
                .entries
                .iter()
                .map(|(s, t)| (s.clone(), d.names[*t as usize].clone()))
                .collect(),
            type_names: d.names,
        }
    }
}

impl Default for TypeDictionary {
    fn default() -> Self {
        let entries: [(&str, &str); 16] = [
            ("colon", "disease"),
            ("colorectal cancer", "disease"),
            ("rectal cancer", "disease"),
            ("covid-19", "disease"),
            ("bevacizumab", "drug"),
            ("ifl", "treatment"),
            ("folfox", "treatment"),
            ("chemotherapy", "treatment"),
            ("moderna", "vaccine"),
            ("covaxin", "vaccine"),
            ("kras", "gene"),
            ("braf", "gene"),
            ("florida", "place"),
            ("texas", "place"),
            ("fda", "organization"),
            ("cisplatin", "chemical"),
        ];
        TypeDictionary::new(
            DEFAULT_TYPE_NAMES.iter().map(|s| s.to_string()).collect(),
            entries
                .into_iter()
                .map(|(s, t)| (s.to_string(), t.to_string()))
                .collect(),
        )
        .expect("default type dictionary is valid")
    }
}

fn numeric_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?\d+(?:\.\d+)?$").unwrap())
}

fn range_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?\d+(?:\.\d+)?\s*[-–]\s*[+-]?\d+(?:\.\d+)?$").unwrap())
}

impl TypeDictionary {
    pub fn new(type_names: Vec<String>, entries: BTreeMap<String, String>) -> Result<Self> {
        if type_names.len() != TYPE_COUNT {
            return Err(Error::Config(format!(
                "type dictionary defines {} types, expected {TYPE_COUNT}",
                type_names.len()
            )));
        }
        let find = |name: &str| type_names.iter().position(|n| n == name).map(|i| i as u8);
        let require = |name: &str| {
            find(name).ok_or_else(|| Error::Config(format!("type dictionary lacks type {name:?}")))
        };
        let (text, numeric, range) = (require("text")?, require("numeric")?, require("range")?);
        let measurement = find("measurement");
        let mut resolved = Vec::with_capacity(entries.len());
        for (surface, name) in entries {
            let id = find(&name).ok_or_else(|| {
                Error::Config(format!("entry {surface:?} refers to unknown type {name:?}"))
            })?;
            resolved.push((surface.to_lowercase(), id));
        }
        resolved.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(TypeDictionary {
            names: type_names,
            entries: resolved,
            text,
            numeric,
            range,
            measurement,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("type dictionary: {e}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: u8) -> &str {
        &self.names[id as usize]
    }

    pub fn id(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn text_type(&self) -> u8 {
        self.text
    }

    /// Regex classes first (range, numeric), then the cell's own kind, then
    /// the longest dictionary surface found at word boundaries, else `text`.
    pub fn infer(&self, cell: &Cell) -> u8 {
        let text = cell.text.trim();
        if range_regex().is_match(text) {
            return self.range;
        }
        if numeric_regex().is_match(text) {
            return self.numeric;
        }
        match cell.value {
            CellValue::Range { .. } => return self.range,
            CellValue::Number(_) | CellValue::Gaussian { .. } => {
                return match (cell.unit, self.measurement) {
                    (Some(_), Some(m)) => m,
                    _ => self.numeric,
                };
            }
            _ => {}
        }
        self.lookup(text).unwrap_or(self.text)
    }

    /// Longest dictionary match at word boundaries.
    pub fn lookup(&self, text: &str) -> Option<u8> {
        let lower = text.to_lowercase();
        let bytes = lower.as_bytes();
        let boundary = |i: usize| {
            i == 0
                || i >= bytes.len()
                || !lower[..i]
                    .chars()
                    .next_back()
                    .is_some_and(char::is_alphanumeric)
        };
        let boundary_after = |i: usize| {
            i >= bytes.len() || !lower[i..].chars().next().is_some_and(char::is_alphanumeric)
        };
        self.entries.iter().find_map(|(surface, id)| {
            lower
                .match_indices(surface.as_str())
                .any(|(at, s)| boundary(at) && boundary_after(at + s.len()))
                .then_some(*id)
        })
    }
}

// ---------------------------------------------------------------------------
// Token records

/// Unit and nesting bits in the order
/// `[stats, length, weight, capacity, time, temperature, pressure, nested]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureBits(pub u8);

impl FeatureBits {
    pub const NESTED: usize = 7;

    pub fn with_unit(self, unit: UnitClass) -> Self {
        FeatureBits(self.0 | (1 << unit.index()))
    }

    pub fn with_nested(self) -> Self {
        FeatureBits(self.0 | (1 << Self::NESTED))
    }

    pub fn bit(self, k: usize) -> bool {
        self.0 >> k & 1 == 1
    }

    pub fn as_array(self) -> [u8; FEATURE_BITS] {
        std::array::from_fn(|k| self.bit(k) as u8)
    }

    pub fn is_nested(self) -> bool {
        self.bit(Self::NESTED)
    }

    pub fn unit(self) -> Option<UnitClass> {
        UnitClass::ALL.into_iter().find(|u| self.bit(u.index()))
    }
}

impl fmt::Display for FeatureBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.as_array() {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: u32,
    pub num: Option<NumberFeatures>,
    pub in_pos: u16,
    pub coord: BiCoordinate,
    pub feat: FeatureBits,
    pub type_id: u8,
}

impl TokenRecord {
    pub fn special(token_id: u32, coord: BiCoordinate, type_id: u8) -> Self {
        TokenRecord {
            token_id,
            num: None,
            in_pos: 0,
            coord,
            feat: FeatureBits::default(),
            type_id,
        }
    }

    pub fn is_number(&self) -> bool {
        self.num.is_some()
    }
}

/// Where a cell sits: its coordinate and whether it lives inside a nested
/// table.
#[derive(Clone, Copy, Debug, Default)]
pub struct CellContext {
    pub coord: BiCoordinate,
    pub nested: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub vocab: Vocabulary,
    pub units: UnitDictionary,
    pub types: TypeDictionary,
}

enum Emit {
    Id(u32),
    Val(NumberFeatures),
}

impl Featurizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Featurizer {
            vocab,
            units: UnitDictionary::default(),
            types: TypeDictionary::default(),
        }
    }

    pub fn detect_unit(&self, cell: &Cell) -> Option<UnitClass> {
        self.units.detect(cell)
    }

    pub fn infer_type(&self, cell: &Cell) -> u8 {
        self.types.infer(cell)
    }

    fn emit_pieces(&self, text: &str, numeric_cell: bool, out: &mut Vec<Emit>) {
        for piece in split_pieces(text) {
            match piece {
                Piece::Number(lit) if !numeric_cell => {
                    let d = Decimal::parse(&lit).expect("tokenizer yields plain digits");
                    out.push(Emit::Val(number_features(&d)));
                }
                Piece::Number(_) => {}
                Piece::Punct(p) if numeric_cell && is_numeric_separator(&p) => {}
                Piece::Word(w) if numeric_cell && is_numeric_separator(&w) => {}
                Piece::Word(w) | Piece::Punct(w) => {
                    out.extend(self.vocab.lookup(&w).into_iter().map(Emit::Id));
                }
            }
        }
    }

    /// Token records for one cell. Numbers become `[VAL]` tokens carrying
    /// their [`NumberFeatures`]; a range gives two, a gaussian one (its mean).
    /// Every token shares the cell's type and feature bits; unit bits are set
    /// only on cells holding a numeric value.
    pub fn tokenize_cell(&self, cell: &Cell, ctx: CellContext) -> Vec<TokenRecord> {
        let mut emits = Vec::new();
        match &cell.value {
            CellValue::Number(x) => {
                emits.push(Emit::Val(number_features(x)));
                self.emit_pieces(&cell.text, true, &mut emits);
            }
            CellValue::Range { lo, hi } => {
                emits.push(Emit::Val(number_features(lo)));
                emits.push(Emit::Val(number_features(hi)));
                self.emit_pieces(&cell.text, true, &mut emits);
            }
            CellValue::Gaussian { mean, .. } => {
                emits.push(Emit::Val(number_features(mean)));
                self.emit_pieces(&cell.text, true, &mut emits);
            }
            CellValue::Text | CellValue::Nested(_) | CellValue::Empty => {
                self.emit_pieces(&cell.text, false, &mut emits);
            }
        }
        emits.truncate(MAX_CELL_TOKENS);
        let has_value = emits.iter().any(|e| matches!(e, Emit::Val(_)));
        let mut feat = FeatureBits::default();
        if has_value {
            if let Some(unit) = self.detect_unit(cell) {
                feat = feat.with_unit(unit);
            }
        }
        if ctx.nested {
            feat = feat.with_nested();
        }
        let type_id = self.infer_type(cell);
        emits
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let (token_id, num) = match e {
                    Emit::Id(id) => (id, None),
                    Emit::Val(f) => (VAL, Some(f)),
                };
                TokenRecord {
                    token_id,
                    num,
                    in_pos: i as u16,
                    coord: ctx.coord,
                    feat,
                    type_id,
                }
            })
            .collect()
    }

    /// Header labels and captions are featurized as text cells.
    pub fn tokenize_label(&self, label: &str, ctx: CellContext) -> Vec<TokenRecord> {
        self.tokenize_cell(&Cell::text(label), ctx)
    }

    /// Ids of a candidate cell string, as used by the cell-level cloze.
    pub fn token_ids(&self, text: &str) -> Vec<u32> {
        self.tokenize_label(text, CellContext::default())
            .into_iter()
            .map(|r| r.token_id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{CoordPair, HeaderTree};

    fn dec(s: &str) -> Decimal {
        Decimal::parse(s).unwrap()
    }

    fn featurizer(words: &[&str]) -> Featurizer {
        Featurizer::new(Vocabulary::from_tokens(
            words.iter().map(|s| s.to_string()).collect(),
            false,
        ))
    }

    #[test]
    fn number_feature_examples() {
        assert_eq!(number_features(&dec("15")), NumberFeatures::new(2, 0, 1, 5));
        assert_eq!(number_features(&dec("0")), NumberFeatures::new(1, 0, 0, 0));
        assert_eq!(number_features(&dec("20.3")), NumberFeatures::new(2, 1, 2, 3));
        assert_eq!(number_features(&dec("-0.05")), NumberFeatures::new(1, 2, 5, 5));
        assert_eq!(
            number_features(&dec("123456789012.12345678901")),
            NumberFeatures::new(10, 10, 1, 1)
        );
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_tokens(vec!["b".into(), "[SEP]".into(), "a".into()], false);
        for (i, t) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
        assert_eq!(v.len(), 8);
        assert_eq!(v.lookup("zzz"), vec![UNK]);
    }

    #[test]
    fn subword_fallback() {
        let t = Table::new(
            "",
            HeaderTree::flat(["colon"]),
            HeaderTree::default(),
            vec![vec![Cell::text("colon")], vec![Cell::text("col")]],
        )
        .unwrap();
        let v = Vocabulary::build([&t], &VocabConfig::default());
        let pieces = v.lookup("colonl");
        assert_eq!(v.token(pieces[0]), Some("colon"));
        assert_eq!(v.token(pieces[1]), Some("##l"));
        assert_eq!(v.lookup("q"), vec![UNK]);
    }

    #[test]
    fn nested_time_value() {
        let f = featurizer(&["months"]);
        let cell = Cell::number("20.3 months", dec("20.3"), None);
        let ctx = CellContext {
            coord: BiCoordinate {
                n: CoordPair::new(2, 1),
                ..Default::default()
            },
            nested: true,
        };
        let recs = f.tokenize_cell(&cell, ctx);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].token_id, VAL);
        assert_eq!(recs[0].num, Some(NumberFeatures::new(2, 1, 2, 3)));
        assert_eq!(recs[0].feat.as_array(), [0, 0, 0, 0, 1, 0, 0, 1]);
        assert_eq!(recs[1].token_id, f.vocab.id("months").unwrap());
        assert_eq!(recs[1].feat.as_array(), [0, 0, 0, 0, 1, 0, 0, 1]);
        assert_eq!((recs[0].in_pos, recs[1].in_pos), (0, 1));
    }

    #[test]
    fn plain_text_has_no_features() {
        let f = featurizer(&["colon"]);
        let recs = f.tokenize_cell(&Cell::text("Colon"), CellContext::default());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].feat.as_array(), [0; 8]);
        assert_eq!(f.types.name(recs[0].type_id), "disease");
    }

    #[test]
    fn long_cells_truncate() {
        let f = featurizer(&["word"]);
        let text = vec!["word"; 100].join(" ");
        let recs = f.tokenize_cell(&Cell::text(text), CellContext::default());
        assert_eq!(recs.len(), MAX_CELL_TOKENS);
        assert_eq!(recs.last().unwrap().in_pos as usize, MAX_CELL_TOKENS - 1);
    }

    #[test]
    fn range_and_gaussian_values() {
        let f = featurizer(&["years"]);
        let cell = Cell::range("20-30 years", dec("20"), dec("30"), None).unwrap();
        let recs = f.tokenize_cell(&cell, CellContext::default());
        let ids: Vec<u32> = recs.iter().map(|r| r.token_id).collect();
        assert_eq!(ids, vec![VAL, VAL, f.vocab.id("years").unwrap()]);
        assert_eq!(recs[1].num, Some(NumberFeatures::new(2, 0, 3, 0)));
        assert_eq!(recs[0].feat.unit(), Some(UnitClass::Time));

        let cell = Cell::gaussian("12.5 ± 3.1", dec("12.5"), dec("3.1"));
        let recs = f.tokenize_cell(&cell, CellContext::default());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].feat.unit(), Some(UnitClass::Stats));
    }

    #[test]
    fn unit_detection() {
        let units = UnitDictionary::default();
        assert_eq!(units.detect_text("months"), Some(UnitClass::Time));
        assert_eq!(units.detect_text("%"), Some(UnitClass::Stats));
        assert_eq!(units.detect_text("45%"), Some(UnitClass::Stats));
        assert_eq!(units.detect_text("37 °C"), Some(UnitClass::Temperature));
        assert_eq!(units.detect_text("120 mmHg"), Some(UnitClass::Pressure));
        assert_eq!(units.detect_text("widgets"), None);
        let explicit = Cell::number("3", dec("3"), Some(UnitClass::Weight));
        assert_eq!(units.detect(&explicit), Some(UnitClass::Weight));
    }

    #[test]
    fn unit_dictionary_from_config() {
        let d = UnitDictionary::from_json(r#"{"length": ["Parsec"]}"#).unwrap();
        assert_eq!(d.detect_text("3 parsecs"), Some(UnitClass::Length));
        assert_eq!(d.detect_text("3 kg"), None);
        assert!(UnitDictionary::from_json(r#"{"mass": ["kg"]}"#).is_err());
    }

    #[test]
    fn type_inference() {
        let types = TypeDictionary::default();
        let name = |c: &Cell| types.name(types.infer(c)).to_string();
        assert_eq!(name(&Cell::text("colon")), "disease");
        assert_eq!(name(&Cell::text("20.3")), "numeric");
        assert_eq!(name(&Cell::text("20-30")), "range");
        assert_eq!(name(&Cell::text("metastatic colorectal cancer")), "disease");
        assert_eq!(name(&Cell::text("semicolon")), "text");
        assert_eq!(name(&Cell::text("hello")), "text");
    }

    #[test]
    fn type_dictionary_needs_fourteen_types() {
        let doc = r#"{"type_names": ["text","numeric","range"], "entries": {}}"#;
        assert!(matches!(TypeDictionary::from_json(doc), Err(Error::Config(_))));
        let mut names: Vec<String> = DEFAULT_TYPE_NAMES.iter().map(|s| s.to_string()).collect();
        let doc = serde_json::json!({"type_names": names, "entries": {"x": "nope"}});
        assert!(TypeDictionary::from_json(&doc.to_string()).is_err());
        names[13] = "vehicle".into();
        let doc = serde_json::json!({"type_names": names, "entries": {"tesla": "vehicle"}});
        let d = TypeDictionary::from_json(&doc.to_string()).unwrap();
        assert_eq!(d.name(d.infer(&Cell::text("Tesla"))), "vehicle");
    }

    #[test]
    fn pieces() {
        assert_eq!(
            split_pieces("OS: 20.3 Months"),
            vec![
                Piece::Word("os".into()),
                Piece::Punct(":".into()),
                Piece::Number("20.3".into()),
                Piece::Word("months".into())
            ]
        );
    }
}
