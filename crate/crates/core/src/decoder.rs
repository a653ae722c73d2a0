//! Knowledge-aware scoring functions over (e_h, e_r, e_t).
//!
//! Every decoder returns an energy where lower means more plausible, so
//! one margin objective trains all four. DistMult's similarity is
//! negated to fit the convention.

use log::warn;

use crate::error::{KgError, Result};
use crate::params::{ModelSpec, ParamKey, ParamKind, ParamSet};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    TransE,
    TransH,
    TransR,
    DistMult,
}

impl DecoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "transe" => DecoderKind::TransE,
            "transh" => DecoderKind::TransH,
            "transr" => DecoderKind::TransR,
            "distmult" => DecoderKind::DistMult,
            other => {
                return Err(KgError::config(
                    "decoder",
                    format!("unknown decoder `{other}`"),
                ))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::TransE => "transe",
            DecoderKind::TransH => "transh",
            DecoderKind::TransR => "transr",
            DecoderKind::DistMult => "distmult",
        }
    }

    /// Translational decoders carry the entity-norm-clip convention.
    pub fn is_translational(self) -> bool {
        !matches!(self, DecoderKind::DistMult)
    }

    /// The extra per-relation parameter this decoder needs, if any.
    pub fn extra_kind(self) -> Option<ParamKind> {
        match self {
            DecoderKind::TransH => Some(ParamKind::Hyperplane),
            DecoderKind::TransR => Some(ParamKind::ProjMatrix),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "l1" => Norm::L1,
            "l2" => Norm::L2,
            other => return Err(KgError::config("norm", format!("unknown norm `{other}`"))),
        })
    }
}

fn norm_node(tape: &mut Tape, v: NodeId, norm: Norm) -> Result<NodeId> {
    match norm {
        Norm::L1 => tape.l1_norm(v),
        Norm::L2 => tape.l2_norm(v),
    }
}

/// `‖e_h + e_r − e_t‖`
pub fn score_trans_e(
    tape: &mut Tape,
    h: NodeId,
    r: NodeId,
    t: NodeId,
    norm: Norm,
) -> Result<NodeId> {
    let hr = tape.add(h, r)?;
    let diff = tape.sub(hr, t)?;
    norm_node(tape, diff, norm)
}

/// `‖(e_h − (w·e_h)w) + e_r − (e_t − (w·e_t)w)‖` with unit normal `w`.
pub fn score_trans_h(
    tape: &mut Tape,
    h: NodeId,
    r: NodeId,
    w: NodeId,
    t: NodeId,
    norm: Norm,
    strict: bool,
) -> Result<NodeId> {
    if strict {
        let n = tape.value(w).l2();
        if (n - 1.0).abs() > 1e-6 {
            return Err(KgError::Constraint(format!(
                "hyperplane normal has norm {n}, expected 1"
            )));
        }
    }
    let h_perp = project(tape, h, w)?;
    let t_perp = project(tape, t, w)?;
    let hr = tape.add(h_perp, r)?;
    let diff = tape.sub(hr, t_perp)?;
    norm_node(tape, diff, norm)
}

fn project(tape: &mut Tape, v: NodeId, w: NodeId) -> Result<NodeId> {
    let comp = tape.dot(w, v)?;
    let along = tape.scale_by(w, comp)?;
    tape.sub(v, along)
}

/// `‖M_r e_h + e_r − M_r e_t‖`
pub fn score_trans_r(
    tape: &mut Tape,
    h: NodeId,
    r: NodeId,
    m: NodeId,
    t: NodeId,
    norm: Norm,
) -> Result<NodeId> {
    let mh = tape.matvec(m, h)?;
    let mt = tape.matvec(m, t)?;
    let hr = tape.add(mh, r)?;
    let diff = tape.sub(hr, mt)?;
    norm_node(tape, diff, norm)
}

/// `−Σ_i e_h[i]·r[i]·e_t[i]` (negated similarity). The product is
/// grouped `r·(h·t)` so head/tail symmetry holds bit-exactly.
pub fn score_dist_mult(tape: &mut Tape, h: NodeId, r: NodeId, t: NodeId) -> Result<NodeId> {
    let ht = tape.mul(h, t)?;
    let rht = tape.mul(r, ht)?;
    let s = tape.sum(rht)?;
    tape.scale(s, -1.0)
}

/// Unified tape-side scoring; `extra` is the hyperplane normal for
/// TransH and the projection matrix for TransR.
pub fn score(
    tape: &mut Tape,
    kind: DecoderKind,
    norm: Norm,
    h: NodeId,
    r: NodeId,
    extra: Option<NodeId>,
    t: NodeId,
) -> Result<NodeId> {
    match kind {
        DecoderKind::TransE => score_trans_e(tape, h, r, t, norm),
        DecoderKind::TransH => {
            let w = extra.ok_or_else(|| KgError::Contract("TransH needs a normal".into()))?;
            score_trans_h(tape, h, r, w, t, norm, false)
        }
        DecoderKind::TransR => {
            let m = extra.ok_or_else(|| KgError::Contract("TransR needs a matrix".into()))?;
            score_trans_r(tape, h, r, m, t, norm)
        }
        DecoderKind::DistMult => score_dist_mult(tape, h, r, t),
    }
}

fn norm_slice(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Tape-free energy over plain slices; the fast path for evaluation.
/// For TransR, `extra` is the row-major d×d matrix.
pub fn energy(
    kind: DecoderKind,
    norm: Norm,
    h: &[f64],
    r: &[f64],
    extra: Option<&[f64]>,
    t: &[f64],
) -> f64 {
    let d = h.len();
    match kind {
        DecoderKind::TransE => {
            let diff: Vec<f64> = (0..d).map(|i| h[i] + r[i] - t[i]).collect();
            norm_slice(&diff, norm)
        }
        DecoderKind::TransH => {
            let w = extra.expect("TransH energy needs a normal");
            let wh: f64 = (0..d).map(|i| w[i] * h[i]).sum();
            let wt: f64 = (0..d).map(|i| w[i] * t[i]).sum();
            let diff: Vec<f64> = (0..d)
                .map(|i| (h[i] - wh * w[i]) + r[i] - (t[i] - wt * w[i]))
                .collect();
            norm_slice(&diff, norm)
        }
        DecoderKind::TransR => {
            let m = extra.expect("TransR energy needs a matrix");
            let mut diff = vec![0.0; d];
            for i in 0..d {
                let mut acc = r[i];
                for j in 0..d {
                    acc += m[i * d + j] * (h[j] - t[j]);
                }
                diff[i] = acc;
            }
            norm_slice(&diff, norm)
        }
        DecoderKind::DistMult => -(0..d).map(|i| r[i] * (h[i] * t[i])).sum::<f64>(),
    }
}

/// Per-key constraint applied after every optimizer step: hyperplane
/// normals renormalize to unit length (degenerate rows reinitialize),
/// and in baseline lookup mode with a translational decoder entity
/// embeddings clip to the unit ball.
pub fn apply_key_constraint(key: ParamKey, value: &mut Tensor, spec: &ModelSpec) -> Result<()> {
    match key.kind {
        ParamKind::Hyperplane => {
            let n = value.l2();
            if n > 0.0 {
                for v in value.data_mut() {
                    *v /= n;
                }
            } else {
                warn!("hyperplane {key} collapsed to zero; reinitializing");
                *value = spec.init_tensor(key)?;
            }
        }
        ParamKind::EntityEmb if clip_entities(spec) => {
            let n = value.l2();
            if n > 1.0 {
                for v in value.data_mut() {
                    *v /= n;
                }
            }
        }
        _ => {}
    }
    Ok(())
}

fn clip_entities(spec: &ModelSpec) -> bool {
    spec.encoder == crate::encoder::EncoderKind::Lookup && spec.decoder.is_translational()
}

/// Sweeps every parameter with [`apply_key_constraint`].
pub fn post_step_constraints(params: &mut ParamSet, spec: &ModelSpec) -> Result<()> {
    for (key, value) in params.iter_mut() {
        apply_key_constraint(*key, value, spec)?;
    }
    Ok(())
}
