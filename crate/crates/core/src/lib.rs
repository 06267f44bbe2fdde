//! Duplicate question detection for programming Q&A posts that embed images.
//!
//! The pipeline parses a Stack Exchange dump, builds labeled question pairs,
//! extracts text and image similarity features, trains a logistic regression
//! classifier, ranks candidate masters and reports recall-rate@k.

pub mod classifier;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod imaging;
pub mod par;
pub mod pipeline;
pub mod ranker;
pub mod textprep;
