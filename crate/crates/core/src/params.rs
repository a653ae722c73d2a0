//! Parameter keys, the in-memory parameter set, and the model layout.
//!
//! Every trainable tensor is addressed by a `(kind, id)` key. Embedding
//! tables are stored row-wise — one key per entity or relation — which is
//! what makes pulls and pushes against the parameter server sparse.
//!
//! [`ModelSpec`] fixes the full key set and the shape and deterministic
//! initialization of every key, so the local runtime and all shard
//! servers materialize bit-identical parameters from a seed.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::decoder::DecoderKind;
use crate::encoder::EncoderKind;
use crate::error::{KgError, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Both relation-embedding ids used by the encoder's attention, per
/// stored direction: `Outgoing` uses the forward row, `Incoming` a
/// learned inverse row.
pub const LSTM_W_INPUT: u64 = 0;
pub const LSTM_W_FORGET: u64 = 1;
pub const LSTM_W_CELL: u64 = 2;
pub const LSTM_W_OUTPUT: u64 = 3;
pub const LSTM_B_INPUT: u64 = 4;
pub const LSTM_B_FORGET: u64 = 5;
pub const LSTM_B_CELL: u64 = 6;
pub const LSTM_B_OUTPUT: u64 = 7;
pub const ATTN_U: u64 = 0;
pub const ATTN_W: u64 = 1;
pub const ATTR_PROJ: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ParamKind {
    EntityEmb = 0,
    RelationEmb = 1,
    Hyperplane = 2,
    ProjMatrix = 3,
    AttnWeight = 4,
    LstmWeight = 5,
    AttrProj = 6,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => ParamKind::EntityEmb,
            1 => ParamKind::RelationEmb,
            2 => ParamKind::Hyperplane,
            3 => ParamKind::ProjMatrix,
            4 => ParamKind::AttnWeight,
            5 => ParamKind::LstmWeight,
            6 => ParamKind::AttrProj,
            other => {
                return Err(KgError::Protocol {
                    code: 0x03,
                    message: format!("unknown parameter kind {other}"),
                })
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::EntityEmb => "entity_emb",
            ParamKind::RelationEmb => "relation_emb",
            ParamKind::Hyperplane => "hyperplane",
            ParamKind::ProjMatrix => "proj_matrix",
            ParamKind::AttnWeight => "attn_weight",
            ParamKind::LstmWeight => "lstm_weight",
            ParamKind::AttrProj => "attr_proj",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub kind: ParamKind,
    pub id: u64,
}

impl ParamKey {
    pub fn new(kind: ParamKind, id: u64) -> Self {
        ParamKey { kind, id }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind.name(), self.id)
    }
}

/// One registered parameter.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub key: ParamKey,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Sparse map from parameter key to tensor value.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: HashMap<ParamKey, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: ParamKey) -> Result<&Tensor> {
        self.map
            .get(&key)
            .ok_or_else(|| KgError::Lookup(format!("parameter {key} not present")))
    }

    pub fn get_opt(&self, key: ParamKey) -> Option<&Tensor> {
        self.map.get(&key)
    }

    pub fn get_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        self.map.get_mut(&key)
    }

    pub fn insert(&mut self, key: ParamKey, value: Tensor) {
        self.map.insert(key, value);
    }

    pub fn contains(&self, key: ParamKey) -> bool {
        self.map.contains_key(&key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn keys_sorted(&self) -> Vec<ParamKey> {
        let mut keys: Vec<ParamKey> = self.map.keys().copied().collect();
        keys.sort();
        keys
    }
}

impl FromIterator<(ParamKey, Tensor)> for ParamSet {
    fn from_iter<T: IntoIterator<Item = (ParamKey, Tensor)>>(iter: T) -> Self {
        ParamSet {
            map: iter.into_iter().collect(),
        }
    }
}

/// Full description of a model's parameter layout: which keys exist,
/// their shapes, and their seeded initialization.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub dim: usize,
    pub attention_hidden: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub inverse_edges: bool,
    pub share_relation_tables: bool,
    pub decoder: DecoderKind,
    pub encoder: EncoderKind,
    pub use_attributes: bool,
    pub attr_dim: Option<usize>,
    pub init_seed: u64,
}

impl ModelSpec {
    /// Decoder relation embedding row.
    pub fn decoder_rel(&self, r: u32) -> ParamKey {
        ParamKey::new(ParamKind::RelationEmb, r as u64)
    }

    fn attn_base(&self) -> u64 {
        if self.share_relation_tables {
            0
        } else {
            self.n_relations as u64
        }
    }

    /// Attention relation row for an outgoing edge under relation `r`.
    pub fn attn_rel_out(&self, r: u32) -> ParamKey {
        ParamKey::new(ParamKind::RelationEmb, self.attn_base() + r as u64)
    }

    /// Attention relation row for an incoming edge (learned inverse).
    pub fn attn_rel_in(&self, r: u32) -> ParamKey {
        ParamKey::new(
            ParamKind::RelationEmb,
            self.attn_base() + self.n_relations as u64 + r as u64,
        )
    }

    /// Whether free entity embedding rows are part of the model. They are
    /// not when a GNN encoder derives base embeddings from attributes.
    pub fn uses_free_entity_rows(&self) -> bool {
        self.encoder == EncoderKind::Lookup || !self.attribute_path()
    }

    /// Whether base embeddings come from the attribute projection.
    pub fn attribute_path(&self) -> bool {
        self.use_attributes && self.attr_dim.is_some()
    }

    fn max_relation_row(&self) -> u64 {
        let r = self.n_relations as u64;
        if self.encoder == EncoderKind::Gnn {
            self.attn_base() + if self.inverse_edges { 2 * r } else { r }
        } else {
            r
        }
    }

    /// Every key this model registers, sorted.
    pub fn all_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        if self.uses_free_entity_rows() {
            for e in 0..self.n_entities as u64 {
                keys.push(ParamKey::new(ParamKind::EntityEmb, e));
            }
        }
        for id in 0..self.max_relation_row() {
            keys.push(ParamKey::new(ParamKind::RelationEmb, id));
        }
        match self.decoder {
            DecoderKind::TransH => {
                for r in 0..self.n_relations as u64 {
                    keys.push(ParamKey::new(ParamKind::Hyperplane, r));
                }
            }
            DecoderKind::TransR => {
                for r in 0..self.n_relations as u64 {
                    keys.push(ParamKey::new(ParamKind::ProjMatrix, r));
                }
            }
            DecoderKind::TransE | DecoderKind::DistMult => {}
        }
        if self.encoder == EncoderKind::Gnn {
            keys.push(ParamKey::new(ParamKind::AttnWeight, ATTN_U));
            keys.push(ParamKey::new(ParamKind::AttnWeight, ATTN_W));
            for id in 0..8 {
                keys.push(ParamKey::new(ParamKind::LstmWeight, id));
            }
            if self.attribute_path() {
                keys.push(ParamKey::new(ParamKind::AttrProj, ATTR_PROJ));
            }
        }
        keys.sort();
        keys
    }

    /// Shape of a key under this layout. Errors on out-of-range ids.
    pub fn shape_of(&self, key: ParamKey) -> Result<Vec<usize>> {
        let d = self.dim;
        match key.kind {
            ParamKind::EntityEmb => {
                if key.id >= self.n_entities as u64 {
                    return Err(KgError::Lookup(format!("entity row {} out of range", key.id)));
                }
                Ok(vec![d])
            }
            ParamKind::RelationEmb => {
                if key.id >= self.max_relation_row() {
                    return Err(KgError::Lookup(format!(
                        "relation row {} out of range",
                        key.id
                    )));
                }
                Ok(vec![d])
            }
            ParamKind::Hyperplane | ParamKind::ProjMatrix => {
                if key.id >= self.n_relations as u64 {
                    return Err(KgError::Lookup(format!(
                        "{} row {} out of range",
                        key.kind.name(),
                        key.id
                    )));
                }
                if key.kind == ParamKind::Hyperplane {
                    Ok(vec![d])
                } else {
                    Ok(vec![d, d])
                }
            }
            ParamKind::AttnWeight => match key.id {
                ATTN_U => Ok(vec![self.attention_hidden]),
                ATTN_W => Ok(vec![self.attention_hidden, 3 * d]),
                other => Err(KgError::Lookup(format!("attn_weight id {other}"))),
            },
            ParamKind::LstmWeight => match key.id {
                0..=3 => Ok(vec![d, 2 * d]),
                4..=7 => Ok(vec![d]),
                other => Err(KgError::Lookup(format!("lstm_weight id {other}"))),
            },
            ParamKind::AttrProj => {
                let attr_dim = self.attr_dim.ok_or_else(|| {
                    KgError::Lookup("attr_proj key without attribute dimension".into())
                })?;
                Ok(vec![d, attr_dim])
            }
        }
    }

    /// Deterministic initial value for a key. Embedding-style tensors use
    /// uniform(−6/√cols, 6/√cols); TransH normals are renormalized to
    /// unit length; TransR matrices start at identity; LSTM biases are
    /// zero except the forget gate's, which starts at one.
    pub fn init_tensor(&self, key: ParamKey) -> Result<Tensor> {
        let shape = self.shape_of(key)?;
        match (key.kind, key.id) {
            (ParamKind::ProjMatrix, _) => {
                let d = self.dim;
                let mut data = vec![0.0; d * d];
                for i in 0..d {
                    data[i * d + i] = 1.0;
                }
                Tensor::matrix(d, d, data)
            }
            (ParamKind::LstmWeight, LSTM_B_FORGET) => {
                Ok(Tensor::vector(vec![1.0; self.dim]))
            }
            (ParamKind::LstmWeight, id) if id >= 4 => Ok(Tensor::zeros(shape)),
            _ => {
                let cols = *shape.last().unwrap();
                let bound = 6.0 / (cols as f64).sqrt();
                let mut rng = rng::stream(
                    self.init_seed,
                    Stream::ParamInit,
                    key.kind.code() as u64,
                    key.id,
                );
                let mut data: Vec<f64> = (0..shape.iter().product::<usize>())
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                if key.kind == ParamKind::Hyperplane {
                    let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for v in data.iter_mut() {
                            *v /= norm;
                        }
                    } else {
                        data[0] = 1.0;
                    }
                }
                Tensor::new(shape, data)
            }
        }
    }

    /// Materializes every parameter.
    pub fn init_all(&self) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for key in self.all_keys() {
            set.insert(key, self.init_tensor(key)?);
        }
        Ok(set)
    }

    pub fn parameter(&self, key: ParamKey) -> Result<Parameter> {
        Ok(Parameter {
            key,
            value: self.init_tensor(key)?,
            requires_grad: true,
        })
    }
}
