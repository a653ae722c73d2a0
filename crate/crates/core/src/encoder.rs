//! Entity encoders.
//!
//! The GNN encoder computes K-hop representations over a sampled
//! subgraph: at every hop a node's neighbors are combined by
//! softmax-attention into a message, and a single LSTM cell (weights
//! shared across hops) folds the message into the node state. The
//! lookup encoder returns base embedding rows directly and backs the
//! decoder-only baselines.

use std::collections::HashMap;

use crate::error::{KgError, Result};
use crate::params::{
    ModelSpec, ParamKey, ParamKind, ParamSet, ATTN_U, ATTN_W, ATTR_PROJ, LSTM_B_INPUT,
    LSTM_W_INPUT,
};
use crate::sampler::SubGraph;
use crate::store::{Direction, EntityId, KnowledgeGraph, NeighborEntry};
use crate::tape::{lstm_cell, LstmWeights, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Gnn,
    Lookup,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "gnn" => EncoderKind::Gnn,
            "lookup" => EncoderKind::Lookup,
            other => {
                return Err(KgError::config(
                    "encoder",
                    format!("unknown encoder `{other}`"),
                ))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Gnn => "gnn",
            EncoderKind::Lookup => "lookup",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub hops: usize,
    pub dim: usize,
    pub attention_hidden: usize,
    pub use_attributes: bool,
    pub leaky_slope: f64,
    /// Error on unseen entities without attributes instead of encoding
    /// them as zero vectors.
    pub strict_coverage: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hops: 2,
            dim: 64,
            attention_hidden: 32,
            use_attributes: false,
            leaky_slope: 0.2,
            strict_coverage: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops == 0 || self.hops > 4 {
            return Err(KgError::config("model.hops", "hops must be in 1..=4"));
        }
        if self.dim == 0 {
            return Err(KgError::config("model.dim", "dim must be positive"));
        }
        if self.attention_hidden == 0 {
            return Err(KgError::config(
                "model.attention_hidden",
                "attention_hidden must be positive",
            ));
        }
        Ok(())
    }
}

/// Final embeddings for the requested entities plus the tape they were
/// recorded on.
pub struct EncodedBatch {
    pub embeddings: HashMap<EntityId, NodeId>,
}

/// One forward recording: a tape plus a per-parameter node cache so a
/// parameter appears as exactly one leaf even when used many times.
pub struct Session {
    pub tape: Tape,
    param_nodes: HashMap<ParamKey, NodeId>,
    zero_vec: Option<NodeId>,
}

impl Session {
    pub fn new() -> Self {
        Session {
            tape: Tape::new(),
            param_nodes: HashMap::new(),
            zero_vec: None,
        }
    }

    /// The tape leaf for `key`, created from the snapshot on first use.
    pub fn param_node(&mut self, snapshot: &ParamSet, key: ParamKey) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(&key) {
            return Ok(id);
        }
        let id = self.tape.parameter(key, snapshot.get(key)?.clone())?;
        self.param_nodes.insert(key, id);
        Ok(id)
    }

    fn zeros(&mut self, dim: usize) -> Result<NodeId> {
        if let Some(id) = self.zero_vec {
            if self.tape.value(id).numel() == dim {
                return Ok(id);
            }
        }
        let id = self.tape.constant(Tensor::zeros(vec![dim]))?;
        self.zero_vec = Some(id);
        Ok(id)
    }

    /// Keys of every parameter leaf recorded so far.
    pub fn touched_keys(&self) -> Vec<ParamKey> {
        let mut keys: Vec<ParamKey> = self.param_nodes.keys().copied().collect();
        keys.sort();
        keys
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Encoder<'a> {
    pub spec: &'a ModelSpec,
    pub cfg: &'a EncoderConfig,
    pub graph: &'a KnowledgeGraph,
    pub snapshot: &'a ParamSet,
}

impl<'a> Encoder<'a> {
    /// Hop-0 embedding of an entity: the attribute projection when the
    /// attribute path is active, else the free embedding row. Unseen
    /// entities without attributes encode as zero (lenient) or error
    /// (strict).
    pub fn base_embedding(&self, sess: &mut Session, e: EntityId) -> Result<NodeId> {
        if self.attribute_path() {
            let attrs = self.graph.attributes.as_ref().unwrap();
            let proj = sess.param_node(
                self.snapshot,
                ParamKey::new(ParamKind::AttrProj, ATTR_PROJ),
            )?;
            let row = sess
                .tape
                .constant(Tensor::vector(attrs.row(e).to_vec()))?;
            return sess.tape.matvec(proj, row);
        }
        if (e.0 as u64) < self.spec.n_entities as u64 {
            return sess.param_node(self.snapshot, ParamKey::new(ParamKind::EntityEmb, e.0 as u64));
        }
        if self.cfg.strict_coverage {
            return Err(KgError::Coverage(format!(
                "entity {} unseen in training and has no attributes",
                e.0
            )));
        }
        sess.tape.constant(Tensor::zeros(vec![self.cfg.dim]))
    }

    fn attribute_path(&self) -> bool {
        self.cfg.use_attributes && self.graph.attributes.is_some() && self.spec.attribute_path()
    }

    fn attn_rel_node(&self, sess: &mut Session, entry: &NeighborEntry) -> Result<NodeId> {
        let key = match entry.direction {
            Direction::Outgoing => self.spec.attn_rel_out(entry.relation.0),
            Direction::Incoming => self.spec.attn_rel_in(entry.relation.0),
        };
        sess.param_node(self.snapshot, key)
    }

    /// Softmax attention over a node's neighbor entries:
    /// `logit_i = uᵀ · leaky_relu(W_a · [e_h ; e_r ; e_t])`.
    pub fn attention_weights(
        &self,
        sess: &mut Session,
        h_emb: NodeId,
        entries: &[(NeighborEntry, NodeId)],
    ) -> Result<NodeId> {
        if entries.is_empty() {
            return Err(KgError::Contract(
                "attention over an empty neighbor list".into(),
            ));
        }
        let u = sess.param_node(self.snapshot, ParamKey::new(ParamKind::AttnWeight, ATTN_U))?;
        let w = sess.param_node(self.snapshot, ParamKey::new(ParamKind::AttnWeight, ATTN_W))?;
        let mut logits = Vec::with_capacity(entries.len());
        for (entry, nbr_emb) in entries {
            let rel = self.attn_rel_node(sess, entry)?;
            let cat = sess.tape.concat(&[h_emb, rel, *nbr_emb])?;
            let pre = sess.tape.matvec(w, cat)?;
            let act = sess.tape.relu_leaky(pre, self.cfg.leaky_slope)?;
            logits.push(sess.tape.dot(u, act)?);
        }
        let stacked = sess.tape.concat(&logits)?;
        sess.tape.softmax(stacked)
    }

    /// Attention-weighted sum of neighbor embeddings; the zero vector
    /// when the node has no sampled neighbors.
    pub fn aggregate(
        &self,
        sess: &mut Session,
        h_emb: NodeId,
        entries: &[(NeighborEntry, NodeId)],
    ) -> Result<NodeId> {
        if entries.is_empty() {
            return sess.zeros(self.cfg.dim);
        }
        let alpha = self.attention_weights(sess, h_emb, entries)?;
        let mut acc: Option<NodeId> = None;
        for (i, (_, nbr_emb)) in entries.iter().enumerate() {
            let a_i = sess.tape.index(alpha, i)?;
            let term = sess.tape.scale_by(*nbr_emb, a_i)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => sess.tape.add(prev, term)?,
            });
        }
        Ok(acc.unwrap())
    }

    fn lstm_weights(&self, sess: &mut Session) -> Result<LstmWeights> {
        let mut w = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for gate in 0..4u64 {
            w.push(sess.param_node(
                self.snapshot,
                ParamKey::new(ParamKind::LstmWeight, LSTM_W_INPUT + gate),
            )?);
            b.push(sess.param_node(
                self.snapshot,
                ParamKey::new(ParamKind::LstmWeight, LSTM_B_INPUT + gate),
            )?);
        }
        Ok(LstmWeights {
            w: [w[0], w[1], w[2], w[3]],
            b: [b[0], b[1], b[2], b[3]],
        })
    }

    /// K-hop GNN encoding of the subgraph's seed entities. The hidden
    /// state starts at the base embedding, the cell state at zero, and
    /// each hop feeds the attention-aggregated message into one shared
    /// LSTM cell.
    pub fn encode(&self, sess: &mut Session, subgraph: &SubGraph) -> Result<EncodedBatch> {
        if subgraph.hops != self.cfg.hops {
            return Err(KgError::Contract(format!(
                "subgraph sampled with {} hops but encoder expects {}",
                subgraph.hops, self.cfg.hops
            )));
        }
        let hops = self.cfg.hops;
        let n = subgraph.nodes.len();
        let weights = self.lstm_weights(sess)?;

        let mut e: Vec<NodeId> = Vec::with_capacity(n);
        for &node in &subgraph.nodes {
            e.push(self.base_embedding(sess, node)?);
        }
        let zero = sess.zeros(self.cfg.dim)?;
        let mut c: Vec<NodeId> = vec![zero; n];

        for k in 0..hops {
            let mut e_next = e.clone();
            let mut c_next = c.clone();
            for v in 0..n {
                // A node discovered at hop `h` only needs `hops − h`
                // updates; deeper nodes' later states are never read.
                if subgraph.hop_of_node[v] + k + 1 > hops {
                    continue;
                }
                let entries: Vec<(NeighborEntry, NodeId)> = subgraph.sampled[v]
                    .iter()
                    .map(|entry| (*entry, e[subgraph.index[&entry.neighbor]]))
                    .collect();
                let message = self.aggregate(sess, e[v], &entries)?;
                let (h_new, c_new) = lstm_cell(&mut sess.tape, message, e[v], c[v], &weights)?;
                e_next[v] = h_new;
                c_next[v] = c_new;
            }
            e = e_next;
            c = c_next;
        }

        let embeddings = subgraph
            .seeds
            .iter()
            .map(|s| (*s, e[subgraph.index[s]]))
            .collect();
        Ok(EncodedBatch { embeddings })
    }

    /// Base-row lookup for the requested entities, recorded as a gather
    /// so gradients stay sparse. Used by the decoder-only baselines.
    pub fn lookup_encode(&self, sess: &mut Session, entities: &[EntityId]) -> Result<EncodedBatch> {
        let mut unique: Vec<EntityId> = Vec::new();
        let mut local: HashMap<EntityId, usize> = HashMap::new();
        for &e in entities {
            if (e.0 as u64) >= self.spec.n_entities as u64 {
                return Err(KgError::Lookup(format!(
                    "entity {} has no trained embedding row",
                    e.0
                )));
            }
            local.entry(e).or_insert_with(|| {
                unique.push(e);
                unique.len() - 1
            });
        }
        let dim = self.cfg.dim;
        let mut keys = Vec::with_capacity(unique.len());
        let mut data = Vec::with_capacity(unique.len() * dim);
        for &e in &unique {
            let key = ParamKey::new(ParamKind::EntityEmb, e.0 as u64);
            data.extend_from_slice(self.snapshot.get(key)?.data());
            keys.push(key);
        }
        let matrix = sess
            .tape
            .matrix_parameter(keys, Tensor::matrix(unique.len(), dim, data)?)?;
        let mut embeddings = HashMap::new();
        for (&e, &i) in &local {
            let gathered = sess.tape.gather_rows(matrix, &[i])?;
            embeddings.insert(e, sess.tape.row(gathered, 0)?);
        }
        Ok(EncodedBatch { embeddings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderKind;
    use crate::rng::{self, Stream};
    use crate::sampler::{sample_subgraph, SamplerConfig};
    use crate::store::{build_graph, AttrMatrix, DatasetSplit, Triple, Vocab};

    fn toy_graph(triples: Vec<Triple>, n: usize, attrs: Option<AttrMatrix>) -> KnowledgeGraph {
        let mut ev = Vocab::new();
        for i in 0..n {
            ev.intern(&format!("e{i}"));
        }
        let mut rv = Vocab::new();
        rv.intern("r0");
        let split = DatasetSplit {
            train: triples,
            valid: vec![],
            test: vec![],
        };
        build_graph(&split, ev, rv, attrs, true, n).unwrap()
    }

    fn spec_for(g: &KnowledgeGraph, cfg: &EncoderConfig, encoder: EncoderKind) -> ModelSpec {
        ModelSpec {
            dim: cfg.dim,
            attention_hidden: cfg.attention_hidden,
            n_entities: g.n_train_entities,
            n_relations: g.n_relations(),
            inverse_edges: g.inverse_edges,
            share_relation_tables: false,
            decoder: DecoderKind::TransE,
            encoder,
            use_attributes: cfg.use_attributes,
            attr_dim: g.attributes.as_ref().map(|a| a.dim()),
            init_seed: 11,
        }
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            hops: 1,
            dim: 4,
            attention_hidden: 3,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn base_embedding_is_row_lookup() {
        let g = toy_graph(vec![Triple::new(0, 0, 1)], 3, None);
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let node = enc.base_embedding(&mut sess, EntityId(1)).unwrap();
        let expected = params
            .get(ParamKey::new(ParamKind::EntityEmb, 1))
            .unwrap();
        assert_eq!(sess.tape.value(node), expected);
    }

    #[test]
    fn identity_attr_projection_returns_attributes() {
        let d = 4;
        let attrs = AttrMatrix::new(
            3,
            d,
            vec![
                0.1, 0.2, 0.3, 0.4, //
                1.0, -1.0, 2.0, 0.5, //
                0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        let g = toy_graph(vec![Triple::new(0, 0, 1)], 3, Some(attrs));
        let cfg = EncoderConfig {
            use_attributes: true,
            ..small_cfg()
        };
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let mut params = spec.init_all().unwrap();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        params.insert(
            ParamKey::new(ParamKind::AttrProj, ATTR_PROJ),
            Tensor::matrix(d, d, eye).unwrap(),
        );
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let node = enc.base_embedding(&mut sess, EntityId(1)).unwrap();
        assert_eq!(sess.tape.value(node).data(), &[1.0, -1.0, 2.0, 0.5]);
    }

    #[test]
    fn unseen_entity_paths() {
        let g = toy_graph(vec![Triple::new(0, 0, 1)], 3, None);
        let mut cfg = small_cfg();
        let mut spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        spec.n_entities = 2; // entity 2 unseen
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let node = enc.base_embedding(&mut sess, EntityId(2)).unwrap();
        assert!(sess.tape.value(node).data().iter().all(|&v| v == 0.0));

        cfg.strict_coverage = true;
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        assert!(matches!(
            enc.base_embedding(&mut sess, EntityId(2)),
            Err(KgError::Coverage(_))
        ));
    }

    fn entry(neighbor: u32) -> NeighborEntry {
        NeighborEntry {
            relation: crate::store::RelationId(0),
            neighbor: EntityId(neighbor),
            direction: Direction::Outgoing,
        }
    }

    #[test]
    fn zero_attention_vector_gives_uniform_weights() {
        let g = toy_graph(
            vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2)],
            4,
            None,
        );
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let mut params = spec.init_all().unwrap();
        params.insert(
            ParamKey::new(ParamKind::AttnWeight, ATTN_U),
            Tensor::zeros(vec![cfg.attention_hidden]),
        );
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let h = enc.base_embedding(&mut sess, EntityId(0)).unwrap();
        let entries: Vec<(NeighborEntry, NodeId)> = (1..4)
            .map(|i| {
                let node = enc.base_embedding(&mut sess, EntityId(i)).unwrap();
                (entry(i), node)
            })
            .collect();
        let alpha = enc.attention_weights(&mut sess, h, &entries).unwrap();
        for &a in sess.tape.value(alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_attention_is_one() {
        let g = toy_graph(vec![Triple::new(0, 0, 1)], 2, None);
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let h = enc.base_embedding(&mut sess, EntityId(0)).unwrap();
        let nbr = enc.base_embedding(&mut sess, EntityId(1)).unwrap();
        let alpha = enc
            .attention_weights(&mut sess, h, &[(entry(1), nbr)])
            .unwrap();
        assert_eq!(sess.tape.value(alpha).data(), &[1.0]);
    }

    #[test]
    fn two_neighbor_logits_match_closed_form_softmax() {
        // Hand-built parameters force logits (1, 0): u = [1, 0, 0] and
        // W_a row 0 reads the neighbor embedding's first coordinate.
        let g = toy_graph(
            vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2)],
            3,
            None,
        );
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let mut params = spec.init_all().unwrap();
        let d = cfg.dim;
        let hidden = cfg.attention_hidden;
        let mut u = vec![0.0; hidden];
        u[0] = 1.0;
        params.insert(
            ParamKey::new(ParamKind::AttnWeight, ATTN_U),
            Tensor::vector(u),
        );
        let mut w = vec![0.0; hidden * 3 * d];
        w[2 * d] = 1.0; // picks neighbor_emb[0]
        params.insert(
            ParamKey::new(ParamKind::AttnWeight, ATTN_W),
            Tensor::matrix(hidden, 3 * d, w).unwrap(),
        );
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        params.insert(
            ParamKey::new(ParamKind::EntityEmb, 1),
            Tensor::vector(e1),
        );
        params.insert(
            ParamKey::new(ParamKind::EntityEmb, 2),
            Tensor::zeros(vec![d]),
        );
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let h = enc.base_embedding(&mut sess, EntityId(0)).unwrap();
        let n1 = enc.base_embedding(&mut sess, EntityId(1)).unwrap();
        let n2 = enc.base_embedding(&mut sess, EntityId(2)).unwrap();
        let alpha = enc
            .attention_weights(&mut sess, h, &[(entry(1), n1), (entry(2), n2)])
            .unwrap();
        let e = std::f64::consts::E;
        let got = sess.tape.value(alpha).data();
        assert!((got[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((got[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn aggregate_special_cases() {
        let g = toy_graph(
            vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2)],
            3,
            None,
        );
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let mut params = spec.init_all().unwrap();
        params.insert(
            ParamKey::new(ParamKind::AttnWeight, ATTN_U),
            Tensor::zeros(vec![cfg.attention_hidden]),
        );
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let h = enc.base_embedding(&mut sess, EntityId(0)).unwrap();

        // Single neighbor: aggregation is its embedding.
        let v = sess
            .tape
            .constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let agg = enc.aggregate(&mut sess, h, &[(entry(1), v)]).unwrap();
        assert_eq!(sess.tape.value(agg).data(), &[1.0, 2.0, 3.0, 4.0]);

        // Two neighbors, equal logits: average.
        let w = sess
            .tape
            .constant(Tensor::vector(vec![3.0, 2.0, 1.0, 0.0]))
            .unwrap();
        let agg = enc
            .aggregate(&mut sess, h, &[(entry(1), v), (entry(2), w)])
            .unwrap();
        for (got, want) in sess.tape.value(agg).data().iter().zip([2.0, 2.0, 2.0, 2.0]) {
            assert!((got - want).abs() < 1e-12);
        }

        // No neighbors: zero vector.
        let agg = enc.aggregate(&mut sess, h, &[]).unwrap();
        assert!(sess.tape.value(agg).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn three_neighbor_aggregate_matches_scalar_arithmetic() {
        let g = toy_graph(
            vec![
                Triple::new(0, 0, 1),
                Triple::new(0, 0, 2),
                Triple::new(0, 0, 3),
            ],
            4,
            None,
        );
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let h = enc.base_embedding(&mut sess, EntityId(0)).unwrap();
        let entries: Vec<(NeighborEntry, NodeId)> = (1..4)
            .map(|i| {
                let node = enc.base_embedding(&mut sess, EntityId(i)).unwrap();
                (entry(i), node)
            })
            .collect();
        let alpha = enc.attention_weights(&mut sess, h, &entries).unwrap();
        let alpha_vals = sess.tape.value(alpha).data().to_vec();
        let agg = enc.aggregate(&mut sess, h, &entries).unwrap();
        let got = sess.tape.value(agg).data().to_vec();
        let mut want = vec![0.0; cfg.dim];
        for (i, (_, nbr)) in entries.iter().enumerate() {
            let vals = sess.tape.value(*nbr).data();
            for (j, w) in want.iter_mut().enumerate() {
                *w += alpha_vals[i] * vals[j];
            }
        }
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_seed_matches_manual_lstm_unroll() {
        let g = toy_graph(vec![Triple::new(1, 0, 2)], 3, None);
        let cfg = EncoderConfig {
            hops: 2,
            dim: 4,
            attention_hidden: 3,
            ..EncoderConfig::default()
        };
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let scfg = SamplerConfig {
            fanout_per_hop: vec![4, 4],
            ..SamplerConfig::default()
        };
        let mut rng = rng::stream(1, Stream::Batch, 0, 0);
        let sg = sample_subgraph(&[EntityId(0)], &g, &scfg, &mut rng).unwrap();
        let mut sess = Session::new();
        let batch = enc.encode(&mut sess, &sg).unwrap();
        let got = sess.tape.value(batch.embeddings[&EntityId(0)]).clone();

        // Independent unroll: zero message both hops.
        let mut sess2 = Session::new();
        let weights = enc.lstm_weights(&mut sess2).unwrap();
        let mut h = enc.base_embedding(&mut sess2, EntityId(0)).unwrap();
        let mut c = sess2.tape.constant(Tensor::zeros(vec![cfg.dim])).unwrap();
        for _ in 0..2 {
            let zero = sess2.tape.constant(Tensor::zeros(vec![cfg.dim])).unwrap();
            let (h2, c2) = lstm_cell(&mut sess2.tape, zero, h, c, &weights).unwrap();
            h = h2;
            c = c2;
        }
        let want = sess2.tape.value(h);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn one_hop_gradient_reaches_neighbor_base() {
        let g = toy_graph(vec![Triple::new(0, 0, 1)], 2, None);
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let scfg = SamplerConfig {
            fanout_per_hop: vec![4],
            ..SamplerConfig::default()
        };
        let mut rng = rng::stream(2, Stream::Batch, 0, 0);
        let sg = sample_subgraph(&[EntityId(0)], &g, &scfg, &mut rng).unwrap();
        let mut sess = Session::new();
        let batch = enc.encode(&mut sess, &sg).unwrap();
        let e1 = batch.embeddings[&EntityId(0)];
        let loss = sess.tape.dot(e1, e1).unwrap();
        let grads = sess.tape.backward(loss).unwrap();
        let gb = &grads[&ParamKey::new(ParamKind::EntityEmb, 1)];
        assert!(gb.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn neighbor_order_does_not_change_encoding() {
        let triples: Vec<Triple> = (1..6).map(|i| Triple::new(0, 0, i)).collect();
        let g = toy_graph(triples, 6, None);
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let scfg = SamplerConfig {
            fanout_per_hop: vec![8],
            ..SamplerConfig::default()
        };
        let mut rng = rng::stream(3, Stream::Batch, 0, 0);
        let sg = sample_subgraph(&[EntityId(0)], &g, &scfg, &mut rng).unwrap();
        let mut shuffled = sg.clone();
        shuffled.sampled[0].reverse();

        let run = |sub: &SubGraph| {
            let mut sess = Session::new();
            let batch = enc.encode(&mut sess, sub).unwrap();
            sess.tape.value(batch.embeddings[&EntityId(0)]).clone()
        };
        let a = run(&sg);
        let b = run(&shuffled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_is_local_to_k_hops() {
        // Chain 0→1→2→3; with K=2 around seed 0, entity 3 is 3 hops out
        // and must not influence the encoding at all.
        let g = toy_graph(
            vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2), Triple::new(2, 0, 3)],
            4,
            None,
        );
        let cfg = EncoderConfig {
            hops: 2,
            dim: 4,
            attention_hidden: 3,
            ..EncoderConfig::default()
        };
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let params = spec.init_all().unwrap();
        let scfg = SamplerConfig {
            fanout_per_hop: vec![4, 4],
            ..SamplerConfig::default()
        };
        let mut rng = rng::stream(4, Stream::Batch, 0, 0);
        let sg = sample_subgraph(&[EntityId(0)], &g, &scfg, &mut rng).unwrap();
        assert!(!sg.index.contains_key(&EntityId(3)));

        let encode_with = |params: &ParamSet| {
            let enc = Encoder {
                spec: &spec,
                cfg: &cfg,
                graph: &g,
                snapshot: params,
            };
            let mut sess = Session::new();
            let batch = enc.encode(&mut sess, &sg).unwrap();
            sess.tape.value(batch.embeddings[&EntityId(0)]).clone()
        };
        let base = encode_with(&params);
        let mut perturbed = params.clone();
        perturbed.insert(
            ParamKey::new(ParamKind::EntityEmb, 3),
            Tensor::vector(vec![100.0, -100.0, 42.0, 7.0]),
        );
        let after = encode_with(&perturbed);
        assert_eq!(base, after);
    }

    #[test]
    fn hop_mismatch_is_contract_error() {
        let g = toy_graph(vec![Triple::new(0, 0, 1)], 2, None);
        let cfg = small_cfg(); // hops = 1
        let spec = spec_for(&g, &cfg, EncoderKind::Gnn);
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let scfg = SamplerConfig {
            fanout_per_hop: vec![4, 4],
            ..SamplerConfig::default()
        };
        let mut rng = rng::stream(5, Stream::Batch, 0, 0);
        let sg = sample_subgraph(&[EntityId(0)], &g, &scfg, &mut rng).unwrap();
        let mut sess = Session::new();
        assert!(matches!(
            enc.encode(&mut sess, &sg),
            Err(KgError::Contract(_))
        ));
    }

    #[test]
    fn lookup_encode_returns_rows_and_sparse_grads() {
        let g = toy_graph(vec![Triple::new(0, 0, 1)], 4, None);
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Lookup);
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let batch = enc
            .lookup_encode(&mut sess, &[EntityId(2), EntityId(0)])
            .unwrap();
        let row2 = sess.tape.value(batch.embeddings[&EntityId(2)]).clone();
        assert_eq!(
            &row2,
            params.get(ParamKey::new(ParamKind::EntityEmb, 2)).unwrap()
        );

        let e = batch.embeddings[&EntityId(2)];
        let loss = sess.tape.dot(e, e).unwrap();
        let grads = sess.tape.backward(loss).unwrap();
        let keys: Vec<ParamKey> = grads.keys().copied().collect();
        assert_eq!(keys, vec![ParamKey::new(ParamKind::EntityEmb, 2)]);
    }

    #[test]
    fn lookup_encode_rejects_unknown_rows() {
        let g = toy_graph(vec![Triple::new(0, 0, 1)], 2, None);
        let cfg = small_cfg();
        let spec = spec_for(&g, &cfg, EncoderKind::Lookup);
        let params = spec.init_all().unwrap();
        let enc = Encoder {
            spec: &spec,
            cfg: &cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        assert!(matches!(
            enc.lookup_encode(&mut sess, &[EntityId(9)]),
            Err(KgError::Lookup(_))
        ));
    }
}
