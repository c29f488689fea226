//! Exact unlearning for text classifiers via sharded, sliced training.

pub mod data;
pub mod engine;
pub mod learner;
pub mod metrics;
pub mod partition;
pub mod requests;
pub mod seed;
pub mod store;
