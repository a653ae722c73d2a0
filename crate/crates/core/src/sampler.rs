//! Negative sampling and layered k-hop subgraph sampling.
//!
//! Both samplers are stateless against the immutable graph; every random
//! choice comes from a caller-supplied RNG stream, so identical inputs
//! reproduce bit-identical output.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{KgError, Result};
use crate::store::{EntityId, KnowledgeGraph, NeighborEntry, Triple};

/// Retries before a filtered corruption accepts a known triple.
const FILTER_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Neighbors sampled per frontier entity, one entry per hop.
    pub fanout_per_hop: Vec<usize>,
    pub negatives_per_positive: usize,
    pub filter_false_negatives: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            fanout_per_hop: vec![16, 8, 8, 8],
            negatives_per_positive: 1,
            filter_false_negatives: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Default fanout schedule truncated to `hops`.
    pub fn with_hops(mut self, hops: usize) -> Self {
        let defaults = [16, 8, 8, 8];
        if self.fanout_per_hop.len() < hops {
            let mut f = self.fanout_per_hop.clone();
            while f.len() < hops {
                f.push(defaults[f.len().min(3)]);
            }
            self.fanout_per_hop = f;
        } else {
            self.fanout_per_hop.truncate(hops);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fanout_per_hop.is_empty() {
            return Err(KgError::config(
                "sampler.fanout",
                "at least one hop is required",
            ));
        }
        if self.fanout_per_hop.contains(&0) {
            return Err(KgError::config("sampler.fanout", "fanout entries must be ≥ 1"));
        }
        if self.negatives_per_positive == 0 {
            return Err(KgError::config(
                "sampler.negatives",
                "negatives_per_positive must be ≥ 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptedSlot {
    Head,
    Tail,
}

/// A negative built from one positive; differs from its source in
/// exactly the corrupted slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptedTriple {
    pub triple: Triple,
    pub corrupted_slot: CorruptedSlot,
}

/// Draws `negatives_per_positive` corruptions of `t`. Each corruption
/// picks head or tail uniformly and replaces it with an entity drawn
/// uniformly from the rest of the vocabulary. With filtering on, draws
/// that form known triples are rejected for up to 100 retries.
pub fn corrupt<R: Rng>(
    t: &Triple,
    g: &KnowledgeGraph,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<CorruptedTriple>> {
    let n = g.n_entities() as u32;
    if n < 2 {
        return Err(KgError::SamplingExhausted(
            "cannot corrupt with fewer than 2 entities".into(),
        ));
    }
    let mut out = Vec::with_capacity(cfg.negatives_per_positive);
    for _ in 0..cfg.negatives_per_positive {
        let slot = if rng.gen::<bool>() {
            CorruptedSlot::Head
        } else {
            CorruptedSlot::Tail
        };
        let original = match slot {
            CorruptedSlot::Head => t.head,
            CorruptedSlot::Tail => t.tail,
        };
        let mut replacement = draw_excluding(rng, n, original);
        if cfg.filter_false_negatives {
            for _ in 0..FILTER_RETRIES {
                let candidate = corrupted(t, slot, replacement);
                if !g.is_known(candidate.head, candidate.relation, candidate.tail) {
                    break;
                }
                replacement = draw_excluding(rng, n, original);
            }
        }
        out.push(CorruptedTriple {
            triple: corrupted(t, slot, replacement),
            corrupted_slot: slot,
        });
    }
    Ok(out)
}

fn corrupted(t: &Triple, slot: CorruptedSlot, replacement: EntityId) -> Triple {
    match slot {
        CorruptedSlot::Head => Triple {
            head: replacement,
            ..*t
        },
        CorruptedSlot::Tail => Triple {
            tail: replacement,
            ..*t
        },
    }
}

/// Uniform over `[0, n)` excluding one id.
fn draw_excluding<R: Rng>(rng: &mut R, n: u32, excluded: EntityId) -> EntityId {
    let v = rng.gen_range(0..n - 1);
    EntityId(if v >= excluded.0 { v + 1 } else { v })
}

/// Layered neighborhood sample around a seed set. `nodes` lists every
/// touched entity in discovery order (seeds first); `sampled[i]` is the
/// neighbor list drawn for `nodes[i]`, empty for entities discovered at
/// the final hop and for isolated entities.
#[derive(Debug, Clone, PartialEq)]
pub struct SubGraph {
    pub seeds: Vec<EntityId>,
    pub nodes: Vec<EntityId>,
    pub index: HashMap<EntityId, usize>,
    /// Hop at which each node entered the sample; seeds are 0.
    pub hop_of_node: Vec<usize>,
    pub sampled: Vec<Vec<NeighborEntry>>,
    pub hops: usize,
}

impl SubGraph {
    /// Frontier entities of layer `k` (1-based) with their sampled lists.
    pub fn layer(&self, k: usize) -> impl Iterator<Item = (EntityId, &[NeighborEntry])> {
        self.nodes
            .iter()
            .zip(self.hop_of_node.iter())
            .zip(self.sampled.iter())
            .filter(move |((_, &hop), _)| hop + 1 == k)
            .map(|((&e, _), s)| (e, s.as_slice()))
    }
}

/// Samples a `K`-hop subgraph. Layer 1 is drawn around the seeds, layer
/// `k` around the entities first discovered at layer `k−1`. Sampling is
/// without replacement: when an entity's degree is within the fanout its
/// whole neighbor list is taken.
pub fn sample_subgraph<R: Rng>(
    seeds: &[EntityId],
    g: &KnowledgeGraph,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SubGraph> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(KgError::Contract("sample_subgraph: empty seed set".into()));
    }
    let hops = cfg.fanout_per_hop.len();
    let mut nodes: Vec<EntityId> = Vec::new();
    let mut index: HashMap<EntityId, usize> = HashMap::new();
    let mut hop_of_node: Vec<usize> = Vec::new();

    for &s in seeds {
        if s.0 as usize >= g.n_entities() {
            return Err(KgError::Lookup(format!("seed entity {} out of range", s.0)));
        }
        if let std::collections::hash_map::Entry::Vacant(slot) = index.entry(s) {
            slot.insert(nodes.len());
            nodes.push(s);
            hop_of_node.push(0);
        }
    }

    let mut sampled: Vec<Vec<NeighborEntry>> = Vec::new();
    let mut frontier_start = 0;
    for (hop, &fanout) in cfg.fanout_per_hop.iter().enumerate() {
        let frontier_end = nodes.len();
        for i in frontier_start..frontier_end {
            let entries = sample_neighbors(g.neighbors(nodes[i])?, fanout, rng);
            for e in &entries {
                if let std::collections::hash_map::Entry::Vacant(slot) = index.entry(e.neighbor)
                {
                    slot.insert(nodes.len());
                    nodes.push(e.neighbor);
                    hop_of_node.push(hop + 1);
                }
            }
            sampled.push(entries);
        }
        frontier_start = frontier_end;
    }
    // Entities discovered at the last hop have no sampled list.
    sampled.resize(nodes.len(), Vec::new());

    Ok(SubGraph {
        seeds: seeds.to_vec(),
        nodes,
        index,
        hop_of_node,
        sampled,
        hops,
    })
}

fn sample_neighbors<R: Rng>(
    adjacency: &[NeighborEntry],
    fanout: usize,
    rng: &mut R,
) -> Vec<NeighborEntry> {
    if adjacency.len() <= fanout {
        return adjacency.to_vec();
    }
    let mut picks: Vec<usize> = (0..adjacency.len()).collect();
    picks.shuffle(rng);
    let mut picks: Vec<usize> = picks.into_iter().take(fanout).collect();
    picks.sort_unstable();
    picks.into_iter().map(|i| adjacency[i]).collect()
}
