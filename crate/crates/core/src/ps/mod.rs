//! Sharded parameter server, asynchronous workers, and the coordinator.
//!
//! One binary protocol, two transports: in-process calls against
//! [`server::ShardServer`] handles (the default for tests and local
//! sweeps) and length-prefixed frames over TCP. Updates are applied
//! server-side per key, so workers stay stateless.

pub mod client;
pub mod coordinator;
pub mod protocol;
pub mod server;

pub use client::{CoordHandle, Endpoint, PsClient};
pub use coordinator::{
    run_distributed, run_with_runtime, worker_loop, Coordinator, DistRuntime, RunSummary,
};
pub use server::ShardServer;

use crate::params::ParamKey;
use crate::rng::mix64;

/// Stable key → shard assignment: `(mix(kind) ⊕ id) mod num_shards`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardMap {
    pub num_shards: usize,
}

impl ShardMap {
    pub fn new(num_shards: usize) -> Self {
        ShardMap {
            num_shards: num_shards.max(1),
        }
    }

    pub fn shard_of(&self, key: ParamKey) -> usize {
        ((mix64(key.kind.code() as u64) ^ key.id) % self.num_shards as u64) as usize
    }
}
