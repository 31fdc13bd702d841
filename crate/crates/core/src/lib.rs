//! Scene elaborations for situated question answering.

pub mod corpus;
pub mod gateway;
pub mod jsonl;
pub mod knn;
pub mod metrics;
pub mod probe;
pub mod qa;
pub mod runs;
pub mod scene;
pub mod tasks;
