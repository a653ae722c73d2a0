//! Evaluation: link-prediction ranking (HR@k, mean rank), triplet
//! classification AUC, and the hop/worker sweep harnesses.
//!
//! Ranking scores every candidate entity with the tape-free energy path
//! over embeddings encoded once per checkpoint. Subgraph sampling at
//! evaluation time uses its own fixed seed, independent of training, so
//! evaluating one checkpoint twice gives identical numbers. Ties rank
//! optimistically: only strictly better candidates count.

use std::path::Path;

use crate::decoder::{self, DecoderKind, Norm};
use crate::encoder::{Encoder, EncoderConfig, EncoderKind, Session};
use crate::error::{KgError, Result};
use crate::params::{ModelSpec, ParamKey, ParamKind, ParamSet};
use crate::rng::{self, Stream};
use crate::sampler::{corrupt, sample_subgraph, SamplerConfig};
use crate::store::{EntityId, KnowledgeGraph, Triple};
use crate::trainer::{self, EpochReport, TrainConfig};

/// Default seed for evaluation-time sampling and negative generation.
pub const DEFAULT_EVAL_SEED: u64 = 20_200_613;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    Raw,
    Filtered,
}

impl RankMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "raw" => RankMode::Raw,
            "filtered" => RankMode::Filtered,
            other => return Err(KgError::config("mode", format!("unknown mode `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            RankMode::Raw => "raw",
            RankMode::Filtered => "filtered",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
    Both,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Head => "head",
            Side::Tail => "tail",
            Side::Both => "both",
        }
    }
}

/// Hit ratios and mean rank for one (mode, side) selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub mode: RankMode,
    pub side: Side,
    /// `(k, HR@k)` pairs in ascending `k`.
    pub hits: Vec<(usize, f64)>,
    pub mean_rank: f64,
}

impl RankingResult {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.hits.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Hops,
    Workers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub setting: usize,
    pub hr10: f64,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

/// A trained model frozen for scoring: every entity encoded once, plus
/// the decoder-side relation parameters.
pub struct RankedModel {
    pub kind: DecoderKind,
    pub norm: Norm,
    emb: Vec<Vec<f64>>,
    rel: Vec<Vec<f64>>,
    extra: Vec<Vec<f64>>,
}

impl RankedModel {
    /// Assembles a scorer from raw embedding tables, mainly for tests
    /// and oracles. `extra` is per-relation hyperplanes (TransH) or
    /// flat projection matrices (TransR), empty otherwise.
    pub fn from_parts(
        kind: DecoderKind,
        norm: Norm,
        emb: Vec<Vec<f64>>,
        rel: Vec<Vec<f64>>,
        extra: Vec<Vec<f64>>,
    ) -> Self {
        RankedModel {
            kind,
            norm,
            emb,
            rel,
            extra,
        }
    }

    /// Encodes all candidate entities with the configured encoder. GNN
    /// encodings sample each entity's subgraph from the evaluation seed
    /// only, so they do not depend on batch composition.
    pub fn build(
        graph: &KnowledgeGraph,
        spec: &ModelSpec,
        cfg: &TrainConfig,
        enc_cfg: &EncoderConfig,
        samp_cfg: &SamplerConfig,
        params: &ParamSet,
        eval_seed: u64,
    ) -> Result<Self> {
        let n = graph.n_entities();
        let mut emb = Vec::with_capacity(n);
        match cfg.encoder {
            EncoderKind::Lookup => {
                for e in 0..n as u64 {
                    if e < spec.n_entities as u64 {
                        emb.push(
                            params
                                .get(ParamKey::new(ParamKind::EntityEmb, e))?
                                .data()
                                .to_vec(),
                        );
                    } else {
                        emb.push(vec![0.0; spec.dim]);
                    }
                }
            }
            EncoderKind::Gnn => {
                let encoder = Encoder {
                    spec,
                    cfg: enc_cfg,
                    graph,
                    snapshot: params,
                };
                for e in 0..n as u32 {
                    let mut rng = rng::stream(eval_seed, Stream::EvalSample, e as u64, 0);
                    let sg = sample_subgraph(&[EntityId(e)], graph, samp_cfg, &mut rng)?;
                    let mut sess = Session::new();
                    let batch = encoder.encode(&mut sess, &sg)?;
                    emb.push(sess.tape.value(batch.embeddings[&EntityId(e)]).data().to_vec());
                }
            }
        }
        let nr = graph.n_relations();
        let mut rel = Vec::with_capacity(nr);
        let mut extra = Vec::new();
        for r in 0..nr as u32 {
            rel.push(params.get(spec.decoder_rel(r))?.data().to_vec());
            match cfg.decoder {
                DecoderKind::TransH => extra.push(
                    params
                        .get(ParamKey::new(ParamKind::Hyperplane, r as u64))?
                        .data()
                        .to_vec(),
                ),
                DecoderKind::TransR => extra.push(
                    params
                        .get(ParamKey::new(ParamKind::ProjMatrix, r as u64))?
                        .data()
                        .to_vec(),
                ),
                _ => {}
            }
        }
        Ok(RankedModel {
            kind: cfg.decoder,
            norm: cfg.norm,
            emb,
            rel,
            extra,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.emb.len()
    }

    pub fn energy(&self, h: u32, r: u32, t: u32) -> f64 {
        let extra = if self.extra.is_empty() {
            None
        } else {
            Some(self.extra[r as usize].as_slice())
        };
        decoder::energy(
            self.kind,
            self.norm,
            &self.emb[h as usize],
            &self.rel[r as usize],
            extra,
            &self.emb[t as usize],
        )
    }
}

/// Optimistic ranks of a test triple's head and tail against all
/// candidate entities: `1 +` the number of strictly lower-energy
/// candidates. Filtered mode skips candidates that form other known
/// triples.
pub fn rank_triple(
    model: &RankedModel,
    g: &KnowledgeGraph,
    t: &Triple,
    mode: RankMode,
) -> (usize, usize) {
    let n = model.n_entities() as u32;
    let target_tail = model.energy(t.head.0, t.relation.0, t.tail.0);
    let mut tail_rank = 1;
    for e in 0..n {
        if e == t.tail.0 {
            continue;
        }
        if mode == RankMode::Filtered && g.is_known(t.head, t.relation, EntityId(e)) {
            continue;
        }
        if model.energy(t.head.0, t.relation.0, e) < target_tail {
            tail_rank += 1;
        }
    }
    let target_head = model.energy(t.head.0, t.relation.0, t.tail.0);
    let mut head_rank = 1;
    for e in 0..n {
        if e == t.head.0 {
            continue;
        }
        if mode == RankMode::Filtered && g.is_known(EntityId(e), t.relation, t.tail) {
            continue;
        }
        if model.energy(e, t.relation.0, t.tail.0) < target_head {
            head_rank += 1;
        }
    }
    (head_rank, tail_rank)
}

/// All `(head_rank, tail_rank)` pairs in test order.
pub fn ranks(
    model: &RankedModel,
    g: &KnowledgeGraph,
    test: &[Triple],
    mode: RankMode,
) -> Result<Vec<(usize, usize)>> {
    if test.is_empty() {
        return Err(KgError::Contract("link prediction over empty test".into()));
    }
    Ok(test.iter().map(|t| rank_triple(model, g, t, mode)).collect())
}

fn summarize(rank_list: &[usize], ks: &[usize], mode: RankMode, side: Side) -> RankingResult {
    let n = rank_list.len() as f64;
    let hits = ks
        .iter()
        .map(|&k| {
            let h = rank_list.iter().filter(|&&r| r <= k).count() as f64 / n;
            (k, h)
        })
        .collect();
    let mean_rank = rank_list.iter().sum::<usize>() as f64 / n;
    RankingResult {
        mode,
        side,
        hits,
        mean_rank,
    }
}

/// HR@k averaged over head and tail queries.
pub fn link_prediction(
    model: &RankedModel,
    g: &KnowledgeGraph,
    test: &[Triple],
    ks: &[usize],
    mode: RankMode,
) -> Result<RankingResult> {
    let pairs = ranks(model, g, test, mode)?;
    let all: Vec<usize> = pairs.iter().flat_map(|&(h, t)| [h, t]).collect();
    Ok(summarize(&all, ks, mode, Side::Both))
}

/// Per-side plus both-averaged tables, for the CSV report.
pub fn link_prediction_report(
    model: &RankedModel,
    g: &KnowledgeGraph,
    test: &[Triple],
    ks: &[usize],
    mode: RankMode,
) -> Result<Vec<RankingResult>> {
    let pairs = ranks(model, g, test, mode)?;
    let heads: Vec<usize> = pairs.iter().map(|&(h, _)| h).collect();
    let tails: Vec<usize> = pairs.iter().map(|&(_, t)| t).collect();
    let all: Vec<usize> = pairs.iter().flat_map(|&(h, t)| [h, t]).collect();
    Ok(vec![
        summarize(&heads, ks, mode, Side::Head),
        summarize(&tails, ks, mode, Side::Tail),
        summarize(&all, ks, mode, Side::Both),
    ])
}

/// AUC by the rank-sum identity over scores `−energy`, ties counting
/// one half. Negatives are one filtered corruption per positive, drawn
/// from `seed`.
pub fn triplet_classification(
    model: &RankedModel,
    g: &KnowledgeGraph,
    test: &[Triple],
    seed: u64,
) -> Result<ClassificationResult> {
    if test.is_empty() {
        return Err(KgError::Contract("classification over empty test".into()));
    }
    let cfg = SamplerConfig {
        negatives_per_positive: 1,
        filter_false_negatives: true,
        ..SamplerConfig::default()
    };
    let mut pos_scores = Vec::with_capacity(test.len());
    let mut neg_scores = Vec::with_capacity(test.len());
    for (i, t) in test.iter().enumerate() {
        pos_scores.push(-model.energy(t.head.0, t.relation.0, t.tail.0));
        let mut rng = rng::stream(seed, Stream::EvalNegatives, i as u64, 0);
        let neg = corrupt(t, g, &cfg, &mut rng)?[0].triple;
        neg_scores.push(-model.energy(neg.head.0, neg.relation.0, neg.tail.0));
    }
    let auc = rank_sum_auc(&pos_scores, &neg_scores);
    Ok(ClassificationResult {
        auc,
        positives: pos_scores.len(),
        negatives: neg_scores.len(),
        seed,
    })
}

/// Mann–Whitney AUC from rank sums with average ranks on ties.
pub fn rank_sum_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut scored: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        // Ranks are 1-based; tied entries share the average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &scored[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Validation filtered HR@10, used by early stopping.
pub fn validation_hr10(
    graph: &KnowledgeGraph,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    samp_cfg: &SamplerConfig,
    params: &ParamSet,
    valid: &[Triple],
) -> Result<f64> {
    let model = RankedModel::build(graph, spec, cfg, enc_cfg, samp_cfg, params, DEFAULT_EVAL_SEED)?;
    let result = link_prediction(&model, graph, valid, &[10], RankMode::Filtered)?;
    Ok(result.hr(10).unwrap())
}

/// Trains one model per hop count (same seed throughout) and evaluates
/// filtered HR@10 on the test split.
pub fn sweep_hops(
    graph: &KnowledgeGraph,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    samp_cfg: &SamplerConfig,
    test: &[Triple],
    hop_values: &[usize],
) -> Result<SweepReport> {
    if hop_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KgError::Contract(
            "sweep settings must be strictly increasing".into(),
        ));
    }
    let mut points = Vec::new();
    for &hops in hop_values {
        let enc = EncoderConfig {
            hops,
            ..enc_cfg.clone()
        };
        let samp = samp_cfg.clone().with_hops(hops);
        let spec = trainer::model_spec(graph, cfg, &enc, false);
        let outcome = trainer::train_local(graph, &spec, cfg, &enc, &samp, &[], None)?;
        let model = RankedModel::build(
            graph,
            &spec,
            cfg,
            &enc,
            &samp,
            &outcome.params,
            DEFAULT_EVAL_SEED,
        )?;
        let hr10 = link_prediction(&model, graph, test, &[10], RankMode::Filtered)?
            .hr(10)
            .unwrap();
        let epoch_seconds = mean_epoch_seconds(&outcome.reports);
        points.push(SweepPoint {
            setting: hops,
            hr10,
            epoch_seconds,
        });
    }
    Ok(SweepReport {
        axis: SweepAxis::Hops,
        points,
    })
}

/// One distributed run per worker count; records mean epoch wall time
/// and final filtered HR@10.
pub fn sweep_workers(
    graph: &KnowledgeGraph,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    samp_cfg: &SamplerConfig,
    test: &[Triple],
    worker_counts: &[usize],
) -> Result<SweepReport> {
    if worker_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KgError::Contract(
            "sweep settings must be strictly increasing".into(),
        ));
    }
    let mut points = Vec::new();
    for &workers in worker_counts {
        let spec = trainer::model_spec(graph, cfg, enc_cfg, false);
        let shards = (workers / 2).max(1);
        let outcome = crate::ps::run_distributed(
            graph,
            &spec,
            cfg,
            enc_cfg,
            samp_cfg,
            workers,
            shards,
            None,
        )?;
        let model = RankedModel::build(
            graph,
            &spec,
            cfg,
            enc_cfg,
            samp_cfg,
            &outcome.params,
            DEFAULT_EVAL_SEED,
        )?;
        let hr10 = link_prediction(&model, graph, test, &[10], RankMode::Filtered)?
            .hr(10)
            .unwrap();
        points.push(SweepPoint {
            setting: workers,
            hr10,
            epoch_seconds: mean_epoch_seconds(&outcome.reports),
        });
    }
    Ok(SweepReport {
        axis: SweepAxis::Workers,
        points,
    })
}

pub fn mean_epoch_seconds(reports: &[EpochReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.seconds).sum::<f64>() / reports.len() as f64
}

// ---------------------------------------------------------------------
// CSV emitters.

pub fn ranking_csv(results: &[RankingResult]) -> String {
    let mut out = String::from("mode,side,k,hit_ratio,mean_rank\n");
    for r in results {
        for (k, hr) in &r.hits {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.mode.name(),
                r.side.name(),
                k,
                hr,
                r.mean_rank
            ));
        }
    }
    out
}

pub fn classification_csv(r: &ClassificationResult) -> String {
    format!(
        "auc,n_pos,n_neg,seed\n{},{},{},{}\n",
        r.auc, r.positives, r.negatives, r.seed
    )
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("setting,hr10,epoch_seconds\n");
    for p in &report.points {
        out.push_str(&format!("{},{},{}\n", p.setting, p.hr10, p.epoch_seconds));
    }
    out
}

/// `(x, y)` series matching the sweep figures: metric curve and
/// epoch-time curve.
pub fn sweep_xy_csv(report: &SweepReport) -> (String, String) {
    let mut hr = String::from("x,y\n");
    let mut secs = String::from("x,y\n");
    for p in &report.points {
        hr.push_str(&format!("{},{}\n", p.setting, p.hr10));
        secs.push_str(&format!("{},{}\n", p.setting, p.epoch_seconds));
    }
    (hr, secs)
}

pub fn write_csv(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(emb: Vec<Vec<f64>>, rel: Vec<Vec<f64>>) -> RankedModel {
        RankedModel {
            kind: DecoderKind::TransE,
            norm: Norm::L2,
            emb,
            rel,
            extra: vec![],
        }
    }

    fn toy_graph(n: usize, train: Vec<Triple>) -> KnowledgeGraph {
        use crate::store::{build_graph, DatasetSplit, Vocab};
        let mut ev = Vocab::new();
        for i in 0..n {
            ev.intern(&format!("e{i}"));
        }
        let mut rv = Vocab::new();
        rv.intern("r0");
        build_graph(
            &DatasetSplit {
                train,
                valid: vec![],
                test: vec![],
            },
            ev,
            rv,
            None,
            true,
            n,
        )
        .unwrap()
    }

    #[test]
    fn strictly_best_tail_ranks_first() {
        let emb = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0]];
        let rel = vec![vec![1.0, 0.0]];
        let model = toy_model(emb, rel);
        let g = toy_graph(3, vec![]);
        let (h, t) = rank_triple(&model, &g, &Triple::new(0, 0, 1), RankMode::Raw);
        assert_eq!(t, 1);
        assert_eq!(h, 1);
    }

    #[test]
    fn all_ties_rank_first_optimistically() {
        let emb = vec![vec![0.0, 0.0]; 4];
        let rel = vec![vec![0.0, 0.0]];
        let model = toy_model(emb, rel);
        let g = toy_graph(4, vec![]);
        let (h, t) = rank_triple(&model, &g, &Triple::new(0, 0, 1), RankMode::Raw);
        assert_eq!((h, t), (1, 1));
    }

    #[test]
    fn filtering_removes_known_competitors() {
        // Candidate 2 is a better tail but (0, r0, 2) is a known triple.
        let emb = vec![vec![0.0, 0.0], vec![1.1, 0.0], vec![1.0, 0.0]];
        let rel = vec![vec![1.0, 0.0]];
        let model = toy_model(emb, rel);
        let g = toy_graph(3, vec![Triple::new(0, 0, 2)]);
        let query = Triple::new(0, 0, 1);
        let (_, raw_tail) = rank_triple(&model, &g, &query, RankMode::Raw);
        let (_, filt_tail) = rank_triple(&model, &g, &query, RankMode::Filtered);
        assert_eq!(raw_tail, 2);
        assert_eq!(filt_tail, 1);
    }

    #[test]
    fn hr_is_monotone_in_k_and_filtered_dominates_raw() {
        let mut rng = rng::stream(7, Stream::EvalNegatives, 0, 0);
        use rand::Rng;
        let n = 30;
        let emb: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rel = vec![(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()];
        let model = toy_model(emb, rel);
        let train: Vec<Triple> = (0..40)
            .map(|i| Triple::new(i % 30, 0, (i * 11 + 3) % 30))
            .collect();
        let g = toy_graph(30, train.clone());
        let test: Vec<Triple> = (0..15).map(|i| Triple::new(i, 0, (i + 5) % 30)).collect();
        let raw = link_prediction(&model, &g, &test, &[1, 3, 10], RankMode::Raw).unwrap();
        let filt = link_prediction(&model, &g, &test, &[1, 3, 10], RankMode::Filtered).unwrap();
        for w in raw.hits.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        for (r, f) in raw.hits.iter().zip(&filt.hits) {
            assert!(f.1 >= r.1);
        }
    }

    #[test]
    fn separated_scores_have_auc_one_and_ties_half() {
        assert_eq!(rank_sum_auc(&[3.0, 4.0], &[1.0, 2.0]), 1.0);
        assert_eq!(rank_sum_auc(&[1.0, 1.0], &[1.0, 1.0]), 0.5);
        assert_eq!(rank_sum_auc(&[1.0], &[2.0]), 0.0);
    }

    #[test]
    fn rank_sum_auc_matches_pairwise_oracle() {
        use rand::Rng;
        for seed in 0..30u64 {
            let mut rng = rng::stream(seed, Stream::EvalNegatives, 1, 1);
            let np = rng.gen_range(1..40);
            let nn = rng.gen_range(1..40);
            // Coarse grid forces plenty of ties.
            let pos: Vec<f64> = (0..np).map(|_| rng.gen_range(-3..3) as f64).collect();
            let neg: Vec<f64> = (0..nn).map(|_| rng.gen_range(-3..3) as f64).collect();
            let mut wins = 0.0;
            for p in &pos {
                for q in &neg {
                    if p > q {
                        wins += 1.0;
                    } else if p == q {
                        wins += 0.5;
                    }
                }
            }
            let oracle = wins / (np as f64 * nn as f64);
            let got = rank_sum_auc(&pos, &neg);
            assert_eq!(got, oracle, "seed {seed}");
        }
    }

    #[test]
    fn empty_test_split_is_contract_error() {
        let model = toy_model(vec![vec![0.0]], vec![vec![0.0]]);
        let g = toy_graph(1, vec![]);
        assert!(matches!(
            link_prediction(&model, &g, &[], &[10], RankMode::Raw),
            Err(KgError::Contract(_))
        ));
        assert!(matches!(
            triplet_classification(&model, &g, &[], 1),
            Err(KgError::Contract(_))
        ));
    }

    #[test]
    fn sweep_settings_must_increase() {
        let g = toy_graph(3, vec![Triple::new(0, 0, 1)]);
        let cfg = TrainConfig::default();
        let enc = EncoderConfig::default();
        let samp = SamplerConfig::default();
        assert!(sweep_hops(&g, &cfg, &enc, &samp, &[Triple::new(0, 0, 1)], &[2, 2]).is_err());
    }
}
