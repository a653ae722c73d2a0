//! Deterministic synthetic knowledge graphs for tests, sweeps, and the
//! bundled example data.
//!
//! Each generator fixes vocabulary order and triple order, so datasets
//! are bit-identical across runs and machines.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::rng::{self, Stream};
use crate::store::{
    build_graph, AttrMatrix, DatasetSplit, KnowledgeGraph, Triple, Vocab,
};

#[derive(Debug, Clone)]
pub struct SynthData {
    pub split: DatasetSplit,
    pub entity_vocab: Vocab,
    pub relation_vocab: Vocab,
    pub attributes: Option<AttrMatrix>,
    pub n_train_entities: usize,
}

impl SynthData {
    pub fn graph(&self, inverse_edges: bool) -> Result<KnowledgeGraph> {
        build_graph(
            &self.split,
            self.entity_vocab.clone(),
            self.relation_vocab.clone(),
            self.attributes.clone(),
            inverse_edges,
            self.n_train_entities,
        )
    }

    /// Writes `train.tsv` / `valid.tsv` / `test.tsv` (and
    /// `attributes.tsv` when present) in the load format.
    pub fn write_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let dump = |triples: &[Triple]| -> String {
            let mut out = String::new();
            for t in triples {
                out.push_str(self.entity_vocab.name(t.head.0).unwrap());
                out.push('\t');
                out.push_str(self.relation_vocab.name(t.relation.0).unwrap());
                out.push('\t');
                out.push_str(self.entity_vocab.name(t.tail.0).unwrap());
                out.push('\n');
            }
            out
        };
        std::fs::write(dir.join("train.tsv"), dump(&self.split.train))?;
        if !self.split.valid.is_empty() {
            std::fs::write(dir.join("valid.tsv"), dump(&self.split.valid))?;
        }
        if !self.split.test.is_empty() {
            std::fs::write(dir.join("test.tsv"), dump(&self.split.test))?;
        }
        if let Some(attrs) = &self.attributes {
            let mut out = String::new();
            for e in 0..attrs.rows() as u32 {
                out.push_str(self.entity_vocab.name(e).unwrap());
                out.push('\t');
                let row = attrs.row(crate::store::EntityId(e));
                let rendered: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&rendered.join(","));
                out.push('\n');
            }
            std::fs::write(dir.join("attributes.tsv"), out)?;
        }
        Ok(())
    }
}

fn vocab_from(names: impl IntoIterator<Item = String>) -> Vocab {
    let mut v = Vocab::new();
    for n in names {
        v.intern(&n);
    }
    v
}

/// The bundled 12-entity / 40-triple graph: two parallel columns over
/// six levels. `step` links every entity to both entities one level
/// down, `jump` is its two-level composition, and `pair` symmetrically
/// ties the top and bottom level pairs. Train carries all 40 triples.
pub fn tiny_kg() -> SynthData {
    let mut names = Vec::new();
    for level in 0..6 {
        names.push(format!("L{level}"));
        names.push(format!("R{level}"));
    }
    let entity_vocab = vocab_from(names);
    let relation_vocab = vocab_from(["step", "jump", "pair"].map(String::from));
    let id = |side: usize, level: usize| (level * 2 + side) as u32;

    let mut train = Vec::new();
    for level in 0..5 {
        for src in 0..2 {
            for dst in 0..2 {
                train.push(Triple::new(id(src, level), 0, id(dst, level + 1)));
            }
        }
    }
    for level in 0..4 {
        for src in 0..2 {
            for dst in 0..2 {
                train.push(Triple::new(id(src, level), 1, id(dst, level + 2)));
            }
        }
    }
    train.push(Triple::new(id(0, 0), 2, id(1, 0)));
    train.push(Triple::new(id(1, 0), 2, id(0, 0)));
    train.push(Triple::new(id(0, 5), 2, id(1, 5)));
    train.push(Triple::new(id(1, 5), 2, id(0, 5)));
    assert_eq!(train.len(), 40);

    SynthData {
        split: DatasetSplit {
            train,
            valid: vec![],
            test: vec![],
        },
        entity_vocab,
        relation_vocab,
        attributes: None,
        n_train_entities: 12,
    }
}

/// A pointer-cycle graph where the target of `points_at` is readable
/// only from graph context: mids form a directed `next` cycle, each
/// head attaches to one mid via `at`, and `points_at(head) = ` the mid
/// after the head's mid. The cycle makes the rule inexpressible as a
/// translation, so lookup embeddings cannot solve held-out heads while
/// a context encoder can. `test_frac` of the heads keep their
/// `points_at` triple out of training.
pub fn pointer_cycle_kg(
    cycle_len: usize,
    heads: usize,
    test_frac: f64,
    seed: u64,
) -> SynthData {
    let mut names: Vec<String> = (0..cycle_len).map(|i| format!("m{i}")).collect();
    names.extend((0..heads).map(|i| format!("h{i}")));
    let entity_vocab = vocab_from(names);
    let relation_vocab = vocab_from(["next", "at", "points_at"].map(String::from));
    let mid = |j: usize| (j % cycle_len) as u32;
    let head = |i: usize| (cycle_len + i) as u32;

    let mut rng = rng::stream(seed, Stream::DataGen, 0, 0);
    let mut train = Vec::new();
    for j in 0..cycle_len {
        train.push(Triple::new(mid(j), 0, mid(j + 1)));
    }
    let mut rule = Vec::new();
    for i in 0..heads {
        let j = rng.gen_range(0..cycle_len);
        train.push(Triple::new(head(i), 1, mid(j)));
        rule.push(Triple::new(head(i), 2, mid(j + 1)));
    }
    let mut order: Vec<usize> = (0..heads).collect();
    order.shuffle(&mut rng);
    let n_test = ((heads as f64) * test_frac).round() as usize;
    let mut test = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            test.push(rule[i]);
        } else {
            train.push(rule[i]);
        }
    }

    SynthData {
        split: DatasetSplit {
            train,
            valid: vec![],
            test,
        },
        entity_vocab,
        relation_vocab,
        attributes: None,
        n_train_entities: cycle_len + heads,
    }
}

/// Clustered attribute graph for the inductive path: entities carry a
/// noisy one-hot type vector, `like` links entities of the same type,
/// and `held_out` entities appear in no training triple at all — their
/// test queries are answerable only through attributes.
pub fn attribute_kg(
    types: usize,
    per_type: usize,
    held_out_per_type: usize,
    seed: u64,
) -> SynthData {
    let total_per_type = per_type + held_out_per_type;
    let n = types * total_per_type;
    let n_train = types * per_type;
    // Training entities first so held-out ids sit past the trained range.
    let mut names = Vec::with_capacity(n);
    for ty in 0..types {
        for i in 0..per_type {
            names.push(format!("t{ty}e{i}"));
        }
    }
    for ty in 0..types {
        for i in 0..held_out_per_type {
            names.push(format!("t{ty}x{i}"));
        }
    }
    let entity_vocab = vocab_from(names);
    let relation_vocab = vocab_from(["like"].map(String::from));
    let train_id = |ty: usize, i: usize| (ty * per_type + i) as u32;
    let held_id = |ty: usize, i: usize| (n_train + ty * held_out_per_type + i) as u32;

    let mut rng = rng::stream(seed, Stream::DataGen, 1, 0);
    // `like` is dense within a type: every ordered same-type pair is a
    // positive, so filtered negatives are always cross-type and the
    // task is solvable from attributes alone.
    let mut train = Vec::new();
    for ty in 0..types {
        for i in 0..per_type {
            for j in 0..per_type {
                if j != i {
                    train.push(Triple::new(train_id(ty, i), 0, train_id(ty, j)));
                }
            }
        }
    }
    let mut test = Vec::new();
    for ty in 0..types {
        for i in 0..held_out_per_type {
            for j in 0..per_type {
                test.push(Triple::new(held_id(ty, i), 0, train_id(ty, j)));
            }
        }
    }

    let attr_dim = types;
    let mut data = vec![0.0; n * attr_dim];
    for e in 0..n {
        let ty = if e < n_train {
            e / per_type
        } else {
            (e - n_train) / held_out_per_type
        };
        for a in 0..attr_dim {
            let base = if a == ty { 1.0 } else { 0.0 };
            data[e * attr_dim + a] = base + rng.gen_range(-0.05..0.05);
        }
    }
    let attributes = AttrMatrix::new(n, attr_dim, data).unwrap();

    SynthData {
        split: DatasetSplit {
            train,
            valid: vec![],
            test,
        },
        entity_vocab,
        relation_vocab,
        attributes: Some(attributes),
        n_train_entities: n_train,
    }
}

/// Community-structured random graph at a chosen scale, for wall-time
/// and scaling studies: tails are drawn from the head's community, so
/// there is real signal but nothing adversarial.
pub fn community_kg(
    n_entities: usize,
    n_triples: usize,
    n_relations: usize,
    community: usize,
    test_frac: f64,
    seed: u64,
) -> SynthData {
    let entity_vocab = vocab_from((0..n_entities).map(|i| format!("e{i}")));
    let relation_vocab = vocab_from((0..n_relations).map(|r| format!("r{r}")));
    let mut rng = rng::stream(seed, Stream::DataGen, 2, 0);
    let mut all = Vec::with_capacity(n_triples);
    let communities = n_entities.div_ceil(community);
    for _ in 0..n_triples {
        let h = rng.gen_range(0..n_entities);
        let c = h / community;
        let lo = c * community;
        let hi = ((c + 1) * community).min(n_entities);
        let mut t = rng.gen_range(lo..hi);
        if t == h {
            t = lo + ((t - lo) + 1) % (hi - lo);
        }
        let r = (c + rng.gen_range(0..n_relations.min(2))) % n_relations;
        all.push(Triple::new(h as u32, r as u32, t as u32));
    }
    let _ = communities;
    all.sort_by_key(|t| (t.head.0, t.relation.0, t.tail.0));
    all.dedup();
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((all.len() as f64) * test_frac).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            test.push(all[i]);
        } else {
            train.push(all[i]);
        }
    }
    SynthData {
        split: DatasetSplit {
            train,
            valid: vec![],
            test,
        },
        entity_vocab,
        relation_vocab,
        attributes: None,
        n_train_entities: n_entities,
    }
}
