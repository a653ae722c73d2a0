//! Knowledge-graph representation learning with a GNN encoder and
//! knowledge-aware decoders, trained by margin ranking with negative
//! sampling, either locally or on a sharded parameter server with
//! asynchronous workers.
//!
//! The crate is organized around the training pipeline:
//!
//! * [`store`] — immutable triple store, vocabularies, adjacency.
//! * [`sampler`] — negative corruption and k-hop subgraph sampling.
//! * [`tensor`] / [`tape`] — dense f64 tensors plus reverse-mode
//!   differentiation over the small primitive set the models need.
//! * [`encoder`] — attention aggregation + LSTM update over a subgraph,
//!   and the plain lookup encoder used by the decoder-only baselines.
//! * [`decoder`] — TransE / TransH / TransR / DistMult energies.
//! * [`trainer`] — margin-ranking loop with sparse Adam.
//! * [`ps`] — parameter-server runtime (shards, workers, coordinator)
//!   with in-process and TCP transports over one binary protocol.
//! * [`eval`] — link-prediction ranking (HR@k), triplet-classification
//!   AUC, and the hop/worker sweep harnesses.
//! * [`config`] — the flat key=value run configuration.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod params;
pub mod ps;
pub mod rng;
pub mod sampler;
pub mod store;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{KgError, Result};
