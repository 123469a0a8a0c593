//! Retrieval metrics, TREC run files, search benchmarking and the
//! synthetic evaluation corpus.

pub mod bench;
pub mod metrics;
pub mod synth;
pub mod trec;

pub use bench::{bench, BenchReport, SearchPath};
pub use metrics::{evaluate, ndcg, recall, reciprocal_rank, Evaluation, Metric, Ranking, Run};
pub use synth::{synth_corpus, SynthConfig, SynthData, SynthDoc, SynthQuery};
pub use trec::{load_run, save_run, write_run};
