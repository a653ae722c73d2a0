//! Shared oracles for integration tests: central finite differences
//! and small graph builders. These never call the tape's backward pass,
//! so they stay independent of the path they check.

#![allow(dead_code)]

use std::collections::HashMap;

use kgnn::params::{ModelSpec, ParamKey, ParamSet};
use kgnn::store::{build_graph, DatasetSplit, KnowledgeGraph, Triple, Vocab};
use kgnn::tape::GradMap;
use kgnn::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Central finite difference of `loss` w.r.t. every coordinate of every
/// listed key.
pub fn fd_gradient(
    params: &ParamSet,
    keys: &[ParamKey],
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> HashMap<ParamKey, Vec<f64>> {
    let mut out = HashMap::new();
    let mut work = params.clone();
    for &key in keys {
        let n = params.get(key).unwrap().numel();
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let original = params.get(key).unwrap().data()[i];
            set_coord(&mut work, key, i, original + FD_STEP);
            let plus = loss(&work);
            set_coord(&mut work, key, i, original - FD_STEP);
            let minus = loss(&work);
            set_coord(&mut work, key, i, original);
            grad.push((plus - minus) / (2.0 * FD_STEP));
        }
        out.insert(key, grad);
    }
    out
}

fn set_coord(params: &mut ParamSet, key: ParamKey, i: usize, v: f64) {
    params.get_mut(key).unwrap().data_mut()[i] = v;
}

/// Worst relative error between analytic and finite-difference
/// gradients over all keys in `numeric`. Missing analytic entries count
/// as zero gradients.
pub fn max_rel_error(
    analytic: &GradMap,
    numeric: &HashMap<ParamKey, Vec<f64>>,
) -> (f64, Option<ParamKey>) {
    let mut worst = 0.0;
    let mut worst_key = None;
    for (key, num) in numeric {
        let zero;
        let ana = match analytic.get(key) {
            Some(t) => t.data(),
            None => {
                zero = vec![0.0; num.len()];
                &zero
            }
        };
        for (a, n) in ana.iter().zip(num.iter()) {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            if err > worst {
                worst = err;
                worst_key = Some(*key);
            }
        }
    }
    (worst, worst_key)
}

/// Directional finite difference along `direction` for one key.
pub fn fd_directional(
    params: &ParamSet,
    key: ParamKey,
    direction: &[f64],
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let mut work = params.clone();
    let base = params.get(key).unwrap().clone();
    let perturbed = |sign: f64| -> Tensor {
        let data = base
            .data()
            .iter()
            .zip(direction)
            .map(|(x, d)| x + sign * FD_STEP * d)
            .collect();
        Tensor::new(base.shape().to_vec(), data).unwrap()
    };
    work.insert(key, perturbed(1.0));
    let plus = loss(&work);
    work.insert(key, perturbed(-1.0));
    let minus = loss(&work);
    (plus - minus) / (2.0 * FD_STEP)
}

pub fn make_graph(
    triples: Vec<Triple>,
    n_entities: usize,
    n_relations: usize,
    inverse: bool,
) -> KnowledgeGraph {
    let mut ev = Vocab::new();
    for i in 0..n_entities {
        ev.intern(&format!("e{i}"));
    }
    let mut rv = Vocab::new();
    for i in 0..n_relations {
        rv.intern(&format!("r{i}"));
    }
    build_graph(
        &DatasetSplit {
            train: triples,
            valid: vec![],
            test: vec![],
        },
        ev,
        rv,
        None,
        inverse,
        n_entities,
    )
    .unwrap()
}

/// Keys with a materialized value in `params`, intersected with the
/// model's key set.
pub fn model_keys(spec: &ModelSpec, params: &ParamSet) -> Vec<ParamKey> {
    spec.all_keys()
        .into_iter()
        .filter(|k| params.contains(*k))
        .collect()
}
