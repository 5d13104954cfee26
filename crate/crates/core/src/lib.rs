//! Aligning website semantics with encrypted traffic for zero-shot
//! fingerprinting.
//!
//! Modules:
//!
//! * [`model`]: shared data types and matrix encoding;
//! * [`huffman`]: HPACK Huffman encoded lengths;
//! * [`ingest`]: pcap and JSON-lines readers;
//! * [`synth`]: a synthetic site and visit generator;
//! * [`augment`]: cross-modal address-group deletion;
//! * [`dataset`]: JSON-lines datasets and the run configuration;
//! * [`anchors`]: alignment statistics;
//! * [`neural`]: encoders, losses and training;
//! * [`retrieval`]: gallery retrieval, few-shot heads and metrics;
//! * [`experiment`]: site-disjoint splits and end-to-end evaluation.

pub mod anchors;
pub mod augment;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod huffman;
pub mod ingest;
pub mod model;
pub mod neural;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
pub use model::*;
