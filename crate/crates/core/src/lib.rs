//! Evaluation toolkit for image–text retrieval that looks past the single
//! paired ground truth.
//!
//! Captions are compared with a CIDEr-D consensus scorer to build an
//! image × caption relevance matrix. Retrieval runs are then scored with
//! classic recall alongside relevance-aware metrics, and a small linear
//! model can be trained with a margin that adapts to caption consensus.

mod binio;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod ngram;
pub mod samloss;
pub mod semrel;
pub mod trainer;

pub use corpus::{CaptionRecord, Corpus, FeatureMatrix, Modality, Split};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{
    Direction, EvalConfig, MSelection, MetricCell, MetricReport, QueryScores, RetrievalRun,
};
pub use ngram::{CaptionScorer, DfTable, NgramProfile, TokenSeq};
pub use samloss::{LossParts, SamConfig, Strategy, TripletBatch};
pub use semrel::{ExtendedGt, QueryKind, ScoredItem, SimMatrix, SimMeta};
pub use trainer::{Dataset, EmbeddingModel, RunConfig, TrainConfig, TrainOutcome};
