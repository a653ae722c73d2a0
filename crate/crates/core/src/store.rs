//! Immutable knowledge-graph storage: triple lists, vocabularies,
//! per-entity adjacency, and optional attribute features.
//!
//! Construction is single-threaded; after [`build_graph`] the graph is
//! read-only and safe to share across workers. Adjacency is built from
//! the train split only and each list is sorted, so iteration order is
//! deterministic everywhere downstream.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{KgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }

    fn as_tuple(&self) -> (u32, u32, u32) {
        (self.head.0, self.relation.0, self.tail.0)
    }
}

/// Edge direction as seen from the entity owning the adjacency list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Outgoing = 0,
    Incoming = 1,
}

/// One adjacency entry; mirrors exactly one stored triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborEntry {
    pub relation: RelationId,
    pub neighbor: EntityId,
    pub direction: Direction,
}

/// Bijective name ↔ dense-id map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(|s| s.as_str())
    }

    /// Returns the id for `name`, adding it in first-seen order.
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Writes one `name⟨TAB⟩id` line per entry.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, name) in self.names.iter().enumerate() {
            out.push_str(name);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Loads a `name⟨TAB⟩id` mapping file; ids must be dense in `[0, n)`.
pub fn load_id_map(path: &Path) -> Result<Vocab> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(KgError::parse(
                &file,
                ln + 1,
                format!("expected 2 tab-separated fields, got {}", fields.len()),
            ));
        }
        let id: u32 = fields[1]
            .trim()
            .parse()
            .map_err(|_| KgError::parse(&file, ln + 1, "id is not an integer"))?;
        pairs.push((fields[0].to_string(), id));
    }
    pairs.sort_by_key(|(_, id)| *id);
    let mut vocab = Vocab::new();
    for (expect, (name, id)) in pairs.into_iter().enumerate() {
        if id as usize != expect {
            return Err(KgError::Contract(format!(
                "{file}: ids are not dense, expected {expect} got {id}"
            )));
        }
        vocab.intern(&name);
    }
    Ok(vocab)
}

enum VocabMode<'a> {
    Extend(&'a mut Vocab),
    Frozen(&'a Vocab),
}

impl VocabMode<'_> {
    fn resolve(&mut self, name: &str, file: &str, line: usize) -> Result<u32> {
        match self {
            VocabMode::Extend(v) => Ok(v.intern(name)),
            VocabMode::Frozen(v) => v.get(name).ok_or_else(|| {
                KgError::Lookup(format!("{file}:{line}: unknown symbol `{name}`"))
            }),
        }
    }
}

fn parse_triples(
    path: &Path,
    entities: &mut VocabMode<'_>,
    relations: &mut VocabMode<'_>,
) -> Result<Vec<Triple>> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut triples = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::parse(
                &file,
                ln + 1,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(KgError::parse(&file, ln + 1, "empty field"));
        }
        let h = entities.resolve(fields[0], &file, ln + 1)?;
        let r = relations.resolve(fields[1], &file, ln + 1)?;
        let t = entities.resolve(fields[2], &file, ln + 1)?;
        triples.push(Triple::new(h, r, t));
    }
    Ok(triples)
}

/// Loads a TSV triple file. When vocabularies are supplied they are
/// frozen: unknown symbols are lookup errors. Otherwise fresh
/// vocabularies are built in first-seen order.
pub fn load_triples(
    path: &Path,
    entity_vocab: Option<Vocab>,
    relation_vocab: Option<Vocab>,
) -> Result<(Vec<Triple>, Vocab, Vocab)> {
    let mut ev = entity_vocab.unwrap_or_default();
    let ev_frozen = !ev.is_empty();
    let mut rv = relation_vocab.unwrap_or_default();
    let rv_frozen = !rv.is_empty();
    let triples = {
        let mut emode = if ev_frozen {
            VocabMode::Frozen(&ev)
        } else {
            VocabMode::Extend(&mut ev)
        };
        // Work around double-borrow: split into two passes is not needed;
        // relations and entities are distinct vocabs.
        let mut rmode = if rv_frozen {
            VocabMode::Frozen(&rv)
        } else {
            VocabMode::Extend(&mut rv)
        };
        parse_triples(path, &mut emode, &mut rmode)?
    };
    Ok((triples, ev, rv))
}

/// Train/valid/test triple lists over shared vocabularies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

/// A loaded dataset: splits, vocabularies, and how many entities were
/// seen by the end of the train file (entities interned later are
/// unseen at training time).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: DatasetSplit,
    pub entity_vocab: Vocab,
    pub relation_vocab: Vocab,
    pub attributes: Option<AttrMatrix>,
    pub n_train_entities: usize,
}

impl Dataset {
    /// Loads `train.tsv` plus optional `valid.tsv` / `test.tsv` from a
    /// directory, extending vocabularies in file order. `entity2id.tsv`
    /// and `relation2id.tsv` are honored when present; `attributes.tsv`
    /// is loaded when present.
    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let e2id = dir.join("entity2id.tsv");
        let r2id = dir.join("relation2id.tsv");
        let mut entity_vocab = if e2id.exists() {
            Some(load_id_map(&e2id)?)
        } else {
            None
        };
        let mut relation_vocab = if r2id.exists() {
            Some(load_id_map(&r2id)?)
        } else {
            None
        };
        let entities_frozen = entity_vocab.is_some();
        let relations_frozen = relation_vocab.is_some();

        let mut ev = entity_vocab.take().unwrap_or_default();
        let mut rv = relation_vocab.take().unwrap_or_default();

        let load = |name: &str, ev: &mut Vocab, rv: &mut Vocab| -> Result<Vec<Triple>> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(Vec::new());
            }
            let mut em = if entities_frozen {
                VocabMode::Frozen(ev)
            } else {
                VocabMode::Extend(ev)
            };
            let mut rm = if relations_frozen {
                VocabMode::Frozen(rv)
            } else {
                VocabMode::Extend(rv)
            };
            parse_triples(&path, &mut em, &mut rm)
        };

        let train_path = dir.join("train.tsv");
        if !train_path.exists() {
            return Err(KgError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} not found", train_path.display()),
            )));
        }
        let train = load("train.tsv", &mut ev, &mut rv)?;
        // Entities interned from this point on were not available to
        // training (with supplied id files everything counts as seen).
        let n_train_entities = ev.len();
        let valid = load("valid.tsv", &mut ev, &mut rv)?;
        let test = load("test.tsv", &mut ev, &mut rv)?;

        let attr_path = dir.join("attributes.tsv");
        let attributes = if attr_path.exists() {
            Some(load_attributes(&attr_path, &ev)?)
        } else {
            None
        };

        Ok(Dataset {
            split: DatasetSplit { train, valid, test },
            entity_vocab: ev,
            relation_vocab: rv,
            attributes,
            n_train_entities,
        })
    }
}

/// Dense |E|×d_attr attribute matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttrMatrix {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl AttrMatrix {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(KgError::Dimension(format!(
                "attribute matrix {n}×{dim} needs {} values, got {}",
                n * dim,
                data.len()
            )));
        }
        Ok(AttrMatrix { n, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, e: EntityId) -> &[f64] {
        let i = e.0 as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Loads `entity⟨TAB⟩v1,v2,...` attribute lines; entities missing from
/// the file get zero rows.
pub fn load_attributes(path: &Path, entities: &Vocab) -> Result<AttrMatrix> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut dim: Option<usize> = None;
    let mut rows: Vec<(u32, Vec<f64>)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(KgError::parse(
                &file,
                ln + 1,
                format!("expected 2 tab-separated fields, got {}", fields.len()),
            ));
        }
        let id = entities
            .get(fields[0])
            .ok_or_else(|| KgError::Lookup(format!("{file}:{}: unknown entity", ln + 1)))?;
        let values: Vec<f64> = fields[1]
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| KgError::parse(&file, ln + 1, format!("bad number `{v}`")))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(KgError::parse(
                    &file,
                    ln + 1,
                    format!("attribute width {} differs from {}", values.len(), d),
                ));
            }
            _ => {}
        }
        rows.push((id, values));
    }
    let dim = dim.unwrap_or(0);
    let mut data = vec![0.0; entities.len() * dim];
    for (id, values) in rows {
        data[id as usize * dim..(id as usize + 1) * dim].copy_from_slice(&values);
    }
    AttrMatrix::new(entities.len(), dim, data)
}

/// The immutable in-memory graph served to samplers, encoders, and
/// evaluation.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub triples: Vec<Triple>,
    adjacency: Vec<Vec<NeighborEntry>>,
    pub entity_vocab: Vocab,
    pub relation_vocab: Vocab,
    pub attributes: Option<AttrMatrix>,
    all_known: HashSet<(u32, u32, u32)>,
    pub inverse_edges: bool,
    pub n_train_entities: usize,
}

/// Builds adjacency from the train split; `all_known` covers all three
/// splits for filtered evaluation.
pub fn build_graph(
    split: &DatasetSplit,
    entity_vocab: Vocab,
    relation_vocab: Vocab,
    attributes: Option<AttrMatrix>,
    inverse_edges: bool,
    n_train_entities: usize,
) -> Result<KnowledgeGraph> {
    let ne = entity_vocab.len();
    let nr = relation_vocab.len();
    if let Some(attrs) = &attributes {
        if attrs.rows() != ne {
            return Err(KgError::Dimension(format!(
                "attribute matrix has {} rows for {} entities",
                attrs.rows(),
                ne
            )));
        }
    }
    let mut adjacency: Vec<Vec<NeighborEntry>> = vec![Vec::new(); ne];
    let mut all_known = HashSet::new();
    let check = |t: &Triple| -> Result<()> {
        if t.head.0 as usize >= ne || t.tail.0 as usize >= ne || t.relation.0 as usize >= nr {
            return Err(KgError::Lookup(format!(
                "triple ({}, {}, {}) out of vocabulary range",
                t.head.0, t.relation.0, t.tail.0
            )));
        }
        Ok(())
    };
    for t in &split.train {
        check(t)?;
        adjacency[t.head.0 as usize].push(NeighborEntry {
            relation: t.relation,
            neighbor: t.tail,
            direction: Direction::Outgoing,
        });
        if inverse_edges {
            adjacency[t.tail.0 as usize].push(NeighborEntry {
                relation: t.relation,
                neighbor: t.head,
                direction: Direction::Incoming,
            });
        }
    }
    for list in adjacency.iter_mut() {
        list.sort_by_key(|e| (e.relation, e.neighbor, e.direction));
    }
    for t in split.train.iter().chain(&split.valid).chain(&split.test) {
        check(t)?;
        all_known.insert(t.as_tuple());
    }
    Ok(KnowledgeGraph {
        triples: split.train.clone(),
        adjacency,
        entity_vocab,
        relation_vocab,
        attributes,
        all_known,
        inverse_edges,
        n_train_entities: n_train_entities.min(ne),
    })
}

impl KnowledgeGraph {
    pub fn n_entities(&self) -> usize {
        self.entity_vocab.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_vocab.len()
    }

    /// Sorted adjacency of `e`; empty for isolated entities.
    pub fn neighbors(&self, e: EntityId) -> Result<&[NeighborEntry]> {
        self.adjacency
            .get(e.0 as usize)
            .map(|v| v.as_slice())
            .ok_or_else(|| KgError::Lookup(format!("entity id {} out of range", e.0)))
    }

    pub fn is_known(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.all_known.contains(&(head.0, relation.0, tail.0))
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.adjacency.get(e.0 as usize).map_or(0, |v| v.len())
    }
}

// ---------------------------------------------------------------------
// Binary dataset cache (written by `prepare`, read by every command).

const CACHE_MAGIC: &[u8; 4] = b"KGCH";
const CACHE_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_triples(buf: &mut Vec<u8>, triples: &[Triple]) {
    put_u32(buf, triples.len() as u32);
    for t in triples {
        put_u32(buf, t.head.0);
        put_u32(buf, t.relation.0);
        put_u32(buf, t.tail.0);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(KgError::Checkpoint("truncated cache file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| KgError::Checkpoint("bad utf8 in cache".into()))
    }

    fn triples(&mut self) -> Result<Vec<Triple>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let h = self.u32()?;
            let r = self.u32()?;
            let t = self.u32()?;
            out.push(Triple::new(h, r, t));
        }
        Ok(out)
    }
}

/// FNV-1a fingerprint of the source files, stored in the cache so a
/// stale cache is rebuilt.
pub fn fingerprint_files(paths: &[&Path]) -> Result<u64> {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for p in paths {
        if !p.exists() {
            continue;
        }
        let mut file = fs::File::open(p)?;
        let mut buf = [0u8; 8192];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            for &b in &buf[..n] {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    Ok(hash)
}

/// Serializes a dataset to the binary cache format.
pub fn save_cache(path: &Path, ds: &Dataset, fingerprint: u64) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    put_u32(&mut buf, CACHE_VERSION);
    put_u64(&mut buf, fingerprint);
    put_u32(&mut buf, ds.entity_vocab.len() as u32);
    for name in ds.entity_vocab.names() {
        put_str(&mut buf, name);
    }
    put_u32(&mut buf, ds.relation_vocab.len() as u32);
    for name in ds.relation_vocab.names() {
        put_str(&mut buf, name);
    }
    put_u64(&mut buf, ds.n_train_entities as u64);
    put_triples(&mut buf, &ds.split.train);
    put_triples(&mut buf, &ds.split.valid);
    put_triples(&mut buf, &ds.split.test);
    match &ds.attributes {
        None => put_u32(&mut buf, 0),
        Some(attrs) => {
            put_u32(&mut buf, 1);
            put_u32(&mut buf, attrs.rows() as u32);
            put_u32(&mut buf, attrs.dim() as u32);
            for i in 0..attrs.rows() {
                for v in attrs.row(EntityId(i as u32)) {
                    put_u64(&mut buf, v.to_bits());
                }
            }
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a binary cache back. Returns the dataset and its stored source
/// fingerprint.
pub fn load_cache(path: &Path) -> Result<(Dataset, u64)> {
    let data = fs::read(path)?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
    };
    if cur.take(4)? != CACHE_MAGIC {
        return Err(KgError::Checkpoint("bad cache magic".into()));
    }
    let version = cur.u32()?;
    if version != CACHE_VERSION {
        return Err(KgError::Checkpoint(format!(
            "cache version {version}, expected {CACHE_VERSION}"
        )));
    }
    let fingerprint = cur.u64()?;
    let mut entity_vocab = Vocab::new();
    let ne = cur.u32()? as usize;
    for _ in 0..ne {
        let name = cur.string()?;
        entity_vocab.intern(&name);
    }
    let mut relation_vocab = Vocab::new();
    let nr = cur.u32()? as usize;
    for _ in 0..nr {
        let name = cur.string()?;
        relation_vocab.intern(&name);
    }
    let n_train_entities = cur.u64()? as usize;
    let train = cur.triples()?;
    let valid = cur.triples()?;
    let test = cur.triples()?;
    let attributes = if cur.u32()? == 1 {
        let rows = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut vals = Vec::with_capacity(rows * dim);
        for _ in 0..rows * dim {
            vals.push(f64::from_bits(cur.u64()?));
        }
        Some(AttrMatrix::new(rows, dim, vals)?)
    } else {
        None
    };
    Ok((
        Dataset {
            split: DatasetSplit { train, valid, test },
            entity_vocab,
            relation_vocab,
            attributes,
            n_train_entities,
        },
        fingerprint,
    ))
}
