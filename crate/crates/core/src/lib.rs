//! Entity Hallucination Index (EHI).
//!
//! An entity-faithfulness score for abstractive summaries, computed from
//! named entities found in the source, the summary and (optionally) a
//! reference summary. The crate provides:
//!
//! - [`text`]: tokenization, entity-key normalization, overlapping chunking;
//! - [`entity`]: gazetteer + capitalization entity extraction;
//! - [`metric`]: the five EHI components, the index itself, entity F1;
//! - [`corpus`]: JSONL corpora and seeded train/validation/test splits;
//! - [`trainer`]: a toy REINFORCE loop that optimizes a policy against EHI;
//! - [`service`]: a newline-delimited JSON reward service.
//!
//! ```
//! use ehi::{score_pair, Gazetteer, GazetteerExtractor, MetricConfig};
//!
//! let extractor = GazetteerExtractor { gazetteer: Gazetteer::builtin(), heuristics: true };
//! let report = score_pair(&extractor, "Alice met Bob in Prague.", "Alice met IBM.", None, &MetricConfig::default());
//! assert_eq!(report.hallucinated_keys.len(), 1);
//! assert!(report.ehi < 1.0);
//! ```

pub mod corpus;
pub mod entity;
pub mod error;
pub mod metric;
pub mod service;
pub mod text;
pub mod trainer;

pub use entity::{EntityExtractor, EntityMention, EntitySet, EntityType, Gazetteer, GazetteerExtractor};
pub use error::{CorpusError, GazetteerError, TextError, TrainError};
pub use metric::{
    compute_components, ehi_from_components, entity_f1, score_pair, score_sets, EhiComponents, EhiReport,
    MetricConfig, ReferenceMode,
};
