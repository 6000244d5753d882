//! Detection and removal of templated and copied text in longitudinal
//! clinical note corpora.

pub mod condense;
pub mod config;
pub mod corpus;
pub mod evaluate;
pub mod frequency;
pub mod metrics;
pub mod pipeline;
pub mod reference;
pub mod span;
pub mod synth;
