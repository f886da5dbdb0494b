//! Structure-aware embeddings for tables with bi-dimensional hierarchical
//! metadata and nested cells.
//!
//! The pipeline runs bottom-up:
//!
//! - [`table`]: the table model, `tabjson/1` parsing and bi-dimensional
//!   coordinates;
//! - [`featurize`]: per-token records (ids, number features, units, types);
//! - [`sequence`]: `[CLS]`/`[SEP]` serialization of the data, HMD and VMD
//!   segments plus their visibility matrices;
//! - [`embedding`], [`encoder`], [`nn`]: the six-component embedding layer and
//!   the visibility-masked transformer, with hand-written gradients;
//! - [`pretrain`]: MLM and cell-level cloze training of the segment models;
//! - [`composite`]: concatenated embeddings for columns, tables, numbers and
//!   ranges;
//! - [`eval`]: cosine ranking, LSH blocking, MAP/MRR and the clustering tasks;
//! - [`corpus`], [`persist`], [`config`]: synthetic corpora, bundle files and
//!   run configuration.

pub mod composite;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod gradcheck;
pub mod nn;
pub mod persist;
pub mod pretrain;
pub mod sequence;
pub mod table;

pub use composite::{CompositeEmbedding, Recipe};
pub use config::RunConfig;
pub use corpus::{generate_corpus, CorpusSpec, CorpusTruth};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use eval::{EvalConfig, GroundTruth, LshParams, RankedList, Report, Task};
pub use featurize::{Featurizer, NumberFeatures, TokenRecord, VocabConfig, Vocabulary};
pub use nn::MaskMode;
pub use persist::{load_bundle, save_bundle};
pub use pretrain::{BundleConfig, ModelBundle, SegmentModel, TrainConfig};
pub use sequence::{AblationFlags, SegmentKind};
pub use table::{BiCoordinate, Cell, CellKind, CoordPair, Decimal, HeaderNode, HeaderTree, Table, UnitClass};
