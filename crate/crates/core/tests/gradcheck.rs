//! Gradient checks against central finite differences: primitives,
//! the LSTM cell, deep compositions, and full model forwards.

mod common;

use common::{fd_gradient, max_rel_error, FD_TOLERANCE};

use kgnn::decoder::DecoderKind;
use kgnn::encoder::{Encoder, EncoderConfig, EncoderKind, Session};
use kgnn::params::{ParamKey, ParamKind, ParamSet};
use kgnn::rng::{self, Stream};
use kgnn::sampler::{sample_subgraph, SamplerConfig};
use kgnn::store::{EntityId, Triple};
use kgnn::tape::{lstm_cell, LstmWeights, NodeId, Tape};
use kgnn::tensor::Tensor;
use kgnn::trainer::{model_spec, TrainConfig, Trainer};
use rand::Rng;

fn key(id: u64) -> ParamKey {
    ParamKey::new(ParamKind::EntityEmb, id)
}

fn random_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Checks one scalar-valued tape program against finite differences
/// over a single vector input.
fn check_unary(
    name: &str,
    x: Vec<f64>,
    build: impl Fn(&mut Tape, NodeId) -> NodeId,
) {
    let mut params = ParamSet::new();
    params.insert(key(0), Tensor::vector(x));
    let loss = |p: &ParamSet| {
        let mut tape = Tape::new();
        let xn = tape.parameter(key(0), p.get(key(0)).unwrap().clone()).unwrap();
        let out = build(&mut tape, xn);
        tape.value(out).item()
    };
    let numeric = fd_gradient(&params, &[key(0)], loss);
    let analytic = {
        let mut tape = Tape::new();
        let xn = tape
            .parameter(key(0), params.get(key(0)).unwrap().clone())
            .unwrap();
        let out = build(&mut tape, xn);
        tape.backward(out).unwrap()
    };
    let (err, _) = max_rel_error(&analytic, &numeric);
    assert!(err < FD_TOLERANCE, "{name}: max rel err {err}");
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = rng::stream(100, Stream::Batch, 0, 0);
    for trial in 0..5u64 {
        // Inputs kept away from kinks (|x| > 1e-3 after perturbation).
        let safe: Vec<f64> = random_vector(&mut rng, 6)
            .into_iter()
            .map(|v| if v.abs() < 1e-2 { v + 0.05 } else { v })
            .collect();
        let weight = random_vector(&mut rng, 6);
        let w2 = weight.clone();

        check_unary(&format!("sigmoid/{trial}"), safe.clone(), |t, x| {
            let s = t.sigmoid(x).unwrap();
            t.sum(s).unwrap()
        });
        check_unary(&format!("tanh/{trial}"), safe.clone(), |t, x| {
            let s = t.tanh(x).unwrap();
            t.sum(s).unwrap()
        });
        check_unary(&format!("leaky/{trial}"), safe.clone(), |t, x| {
            let s = t.relu_leaky(x, 0.2).unwrap();
            t.sum(s).unwrap()
        });
        check_unary(&format!("hinge/{trial}"), safe.clone(), |t, x| {
            let s = t.hinge(x).unwrap();
            t.sum(s).unwrap()
        });
        check_unary(&format!("l1/{trial}"), safe.clone(), |t, x| {
            t.l1_norm(x).unwrap()
        });
        check_unary(&format!("l2/{trial}"), safe.clone(), |t, x| {
            t.l2_norm(x).unwrap()
        });
        check_unary(&format!("softmax/{trial}"), safe.clone(), move |t, x| {
            let s = t.softmax(x).unwrap();
            let w = t.constant(Tensor::vector(w2.clone())).unwrap();
            t.dot(s, w).unwrap()
        });
        check_unary(&format!("scale/{trial}"), safe.clone(), |t, x| {
            let s = t.scale(x, -1.7).unwrap();
            let d = t.dot(s, x).unwrap();
            t.scale(d, 0.5).unwrap()
        });
        let wv = weight.clone();
        check_unary(&format!("mul_sum/{trial}"), safe.clone(), move |t, x| {
            let w = t.constant(Tensor::vector(wv.clone())).unwrap();
            let m = t.mul(x, w).unwrap();
            t.sum(m).unwrap()
        });
        check_unary(&format!("index_scaleby/{trial}"), safe.clone(), |t, x| {
            let a = t.index(x, 2).unwrap();
            let scaled = t.scale_by(x, a).unwrap();
            t.sum(scaled).unwrap()
        });
    }
}

#[test]
fn matrix_gradients_match_finite_differences() {
    let mut rng = rng::stream(101, Stream::Batch, 0, 0);
    let m_key = ParamKey::new(ParamKind::ProjMatrix, 0);
    let v_key = key(1);
    let mut params = ParamSet::new();
    params.insert(m_key, Tensor::matrix(3, 4, random_vector(&mut rng, 12)).unwrap());
    params.insert(v_key, Tensor::vector(random_vector(&mut rng, 4)));

    let loss = |p: &ParamSet| {
        let mut tape = Tape::new();
        let m = tape.parameter(m_key, p.get(m_key).unwrap().clone()).unwrap();
        let v = tape.parameter(v_key, p.get(v_key).unwrap().clone()).unwrap();
        let mv = tape.matvec(m, v).unwrap();
        let l = tape.dot(mv, mv).unwrap();
        tape.value(l).item()
    };
    let numeric = fd_gradient(&params, &[m_key, v_key], loss);
    let analytic = {
        let mut tape = Tape::new();
        let m = tape
            .parameter(m_key, params.get(m_key).unwrap().clone())
            .unwrap();
        let v = tape
            .parameter(v_key, params.get(v_key).unwrap().clone())
            .unwrap();
        let mv = tape.matvec(m, v).unwrap();
        let l = tape.dot(mv, mv).unwrap();
        tape.backward(l).unwrap()
    };
    let (err, k) = max_rel_error(&analytic, &numeric);
    assert!(err < FD_TOLERANCE, "matvec: err {err} at {k:?}");
}

#[test]
fn matmul_and_gather_gradients_match_finite_differences() {
    let mut rng = rng::stream(102, Stream::Batch, 0, 0);
    let a_key = ParamKey::new(ParamKind::ProjMatrix, 0);
    let b_key = ParamKey::new(ParamKind::ProjMatrix, 1);
    let mut params = ParamSet::new();
    params.insert(a_key, Tensor::matrix(2, 3, random_vector(&mut rng, 6)).unwrap());
    params.insert(b_key, Tensor::matrix(3, 2, random_vector(&mut rng, 6)).unwrap());

    let loss = |p: &ParamSet| {
        let mut tape = Tape::new();
        let a = tape.parameter(a_key, p.get(a_key).unwrap().clone()).unwrap();
        let b = tape.parameter(b_key, p.get(b_key).unwrap().clone()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let r0 = tape.gather_rows(c, &[1, 0]).unwrap();
        let row = tape.row(r0, 0).unwrap();
        let l = tape.dot(row, row).unwrap();
        tape.value(l).item()
    };
    let numeric = fd_gradient(&params, &[a_key, b_key], loss);
    let analytic = {
        let mut tape = Tape::new();
        let a = tape
            .parameter(a_key, params.get(a_key).unwrap().clone())
            .unwrap();
        let b = tape
            .parameter(b_key, params.get(b_key).unwrap().clone())
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        let r0 = tape.gather_rows(c, &[1, 0]).unwrap();
        let row = tape.row(r0, 0).unwrap();
        let l = tape.dot(row, row).unwrap();
        tape.backward(l).unwrap()
    };
    let (err, k) = max_rel_error(&analytic, &numeric);
    assert!(err < FD_TOLERANCE, "matmul/gather: err {err} at {k:?}");
}

#[test]
fn three_layer_composition_gradcheck() {
    // sum(tanh(W2 · leaky(W1 · sigmoid(W0 · x)))) over every parameter.
    let mut rng = rng::stream(103, Stream::Batch, 0, 0);
    for trial in 0..3u64 {
        let d = 5;
        let keys: Vec<ParamKey> = (0..3)
            .map(|i| ParamKey::new(ParamKind::ProjMatrix, i))
            .collect();
        let x_key = key(0);
        let mut params = ParamSet::new();
        for &k in &keys {
            params.insert(
                k,
                Tensor::matrix(d, d, random_vector(&mut rng, d * d)).unwrap(),
            );
        }
        params.insert(x_key, Tensor::vector(random_vector(&mut rng, d)));

        let run = |p: &ParamSet, tape: &mut Tape| -> NodeId {
            let x = tape.parameter(x_key, p.get(x_key).unwrap().clone()).unwrap();
            let w0 = tape.parameter(keys[0], p.get(keys[0]).unwrap().clone()).unwrap();
            let w1 = tape.parameter(keys[1], p.get(keys[1]).unwrap().clone()).unwrap();
            let w2 = tape.parameter(keys[2], p.get(keys[2]).unwrap().clone()).unwrap();
            let h0 = tape.matvec(w0, x).unwrap();
            let a0 = tape.sigmoid(h0).unwrap();
            let h1 = tape.matvec(w1, a0).unwrap();
            let a1 = tape.relu_leaky(h1, 0.1).unwrap();
            let h2 = tape.matvec(w2, a1).unwrap();
            let a2 = tape.tanh(h2).unwrap();
            tape.sum(a2).unwrap()
        };
        let mut all_keys = keys.clone();
        all_keys.push(x_key);
        let numeric = fd_gradient(&params, &all_keys, |p| {
            let mut tape = Tape::new();
            let out = run(p, &mut tape);
            tape.value(out).item()
        });
        let analytic = {
            let mut tape = Tape::new();
            let out = run(&params, &mut tape);
            tape.backward(out).unwrap()
        };
        let (err, k) = max_rel_error(&analytic, &numeric);
        assert!(err < FD_TOLERANCE, "trial {trial}: err {err} at {k:?}");
    }
}

#[test]
fn lstm_cell_gradcheck_every_weight() {
    let mut rng = rng::stream(104, Stream::Batch, 0, 0);
    let d = 4;
    let mut params = ParamSet::new();
    for gate in 0..4u64 {
        params.insert(
            ParamKey::new(ParamKind::LstmWeight, gate),
            Tensor::matrix(d, 2 * d, random_vector(&mut rng, d * 2 * d)).unwrap(),
        );
        params.insert(
            ParamKey::new(ParamKind::LstmWeight, 4 + gate),
            Tensor::vector(random_vector(&mut rng, d)),
        );
    }
    let x_key = key(0);
    let h_key = key(1);
    let c_key = key(2);
    params.insert(x_key, Tensor::vector(random_vector(&mut rng, d)));
    params.insert(h_key, Tensor::vector(random_vector(&mut rng, d)));
    params.insert(c_key, Tensor::vector(random_vector(&mut rng, d)));

    let run = |p: &ParamSet, tape: &mut Tape| -> NodeId {
        let x = tape.parameter(x_key, p.get(x_key).unwrap().clone()).unwrap();
        let h = tape.parameter(h_key, p.get(h_key).unwrap().clone()).unwrap();
        let c = tape.parameter(c_key, p.get(c_key).unwrap().clone()).unwrap();
        let mut w = Vec::new();
        let mut b = Vec::new();
        for gate in 0..4u64 {
            let wk = ParamKey::new(ParamKind::LstmWeight, gate);
            let bk = ParamKey::new(ParamKind::LstmWeight, 4 + gate);
            w.push(tape.parameter(wk, p.get(wk).unwrap().clone()).unwrap());
            b.push(tape.parameter(bk, p.get(bk).unwrap().clone()).unwrap());
        }
        let weights = LstmWeights {
            w: [w[0], w[1], w[2], w[3]],
            b: [b[0], b[1], b[2], b[3]],
        };
        let (h_out, _c_out) = lstm_cell(tape, x, h, c, &weights).unwrap();
        tape.sum(h_out).unwrap()
    };

    let all_keys: Vec<ParamKey> = params.iter().map(|(k, _)| *k).collect();
    let numeric = fd_gradient(&params, &all_keys, |p| {
        let mut tape = Tape::new();
        let out = run(p, &mut tape);
        tape.value(out).item()
    });
    let analytic = {
        let mut tape = Tape::new();
        let out = run(&params, &mut tape);
        tape.backward(out).unwrap()
    };
    let (err, k) = max_rel_error(&analytic, &numeric);
    assert!(err < FD_TOLERANCE, "lstm: err {err} at {k:?}");
}

#[test]
fn full_encode_gradcheck_on_toy_graph() {
    // Five entities, two relations, K=2: every parameter of the GNN
    // encoder against finite differences.
    let triples = vec![
        Triple::new(0, 0, 1),
        Triple::new(1, 0, 2),
        Triple::new(2, 1, 3),
        Triple::new(3, 1, 4),
        Triple::new(4, 0, 0),
    ];
    let g = common::make_graph(triples, 5, 2, true);
    let cfg = TrainConfig {
        decoder: DecoderKind::TransE,
        encoder: EncoderKind::Gnn,
        seed: 21,
        ..TrainConfig::default()
    };
    let enc_cfg = EncoderConfig {
        hops: 2,
        dim: 4,
        attention_hidden: 3,
        ..EncoderConfig::default()
    };
    let samp_cfg = SamplerConfig {
        fanout_per_hop: vec![3, 2],
        ..SamplerConfig::default()
    };
    let spec = model_spec(&g, &cfg, &enc_cfg, false);
    let params = spec.init_all().unwrap();
    let mut rng = rng::stream(7, Stream::Batch, 0, 0);
    let sg = sample_subgraph(&[EntityId(0), EntityId(3)], &g, &samp_cfg, &mut rng).unwrap();

    let loss_of = |p: &ParamSet| -> f64 {
        let enc = Encoder {
            spec: &spec,
            cfg: &enc_cfg,
            graph: &g,
            snapshot: p,
        };
        let mut sess = Session::new();
        let batch = enc.encode(&mut sess, &sg).unwrap();
        let a = batch.embeddings[&EntityId(0)];
        let b = batch.embeddings[&EntityId(3)];
        let la = sess.tape.dot(a, a).unwrap();
        let lb = sess.tape.dot(b, b).unwrap();
        let l = sess.tape.add(la, lb).unwrap();
        sess.tape.value(l).item()
    };

    let keys = common::model_keys(&spec, &params);
    let numeric = fd_gradient(&params, &keys, loss_of);
    let analytic = {
        let enc = Encoder {
            spec: &spec,
            cfg: &enc_cfg,
            graph: &g,
            snapshot: &params,
        };
        let mut sess = Session::new();
        let batch = enc.encode(&mut sess, &sg).unwrap();
        let a = batch.embeddings[&EntityId(0)];
        let b = batch.embeddings[&EntityId(3)];
        let la = sess.tape.dot(a, a).unwrap();
        let lb = sess.tape.dot(b, b).unwrap();
        let l = sess.tape.add(la, lb).unwrap();
        sess.tape.backward(l).unwrap()
    };
    let (err, k) = max_rel_error(&analytic, &numeric);
    assert!(err < FD_TOLERANCE, "encode: err {err} at {k:?}");
}

#[test]
fn full_model_margin_loss_gradcheck_each_decoder() {
    // The whole training forward (encode → decode → margin loss) on a
    // 6-entity graph, one decoder per run.
    let triples = vec![
        Triple::new(0, 0, 1),
        Triple::new(1, 1, 2),
        Triple::new(2, 0, 3),
        Triple::new(3, 1, 4),
        Triple::new(4, 0, 5),
        Triple::new(5, 1, 0),
    ];
    let g = common::make_graph(triples.clone(), 6, 2, true);
    for (i, decoder) in [
        DecoderKind::TransE,
        DecoderKind::TransH,
        DecoderKind::TransR,
        DecoderKind::DistMult,
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = TrainConfig {
            decoder,
            encoder: EncoderKind::Gnn,
            seed: 31 + i as u64,
            margin: 1.0,
            ..TrainConfig::default()
        };
        let enc_cfg = EncoderConfig {
            hops: 2,
            dim: 4,
            attention_hidden: 3,
            ..EncoderConfig::default()
        };
        let samp_cfg = SamplerConfig {
            fanout_per_hop: vec![3, 2],
            seed: cfg.seed,
            ..SamplerConfig::default()
        };
        let spec = model_spec(&g, &cfg, &enc_cfg, false);
        let params = spec.init_all().unwrap();
        let trainer = Trainer {
            graph: &g,
            spec: &spec,
            cfg: &cfg,
            enc_cfg: &enc_cfg,
            samp_cfg: &samp_cfg,
        };
        let mut rng = rng::stream(cfg.seed, Stream::Batch, 0, 0);
        let plan = trainer.plan_batch(&triples[0..3], &mut rng).unwrap();

        let numeric = fd_gradient(&params, &plan.keys, |p| {
            trainer.run_batch(&plan, p).unwrap().loss_sum
        });
        let analytic = trainer.run_batch(&plan, &params).unwrap().grads;
        let (err, k) = max_rel_error(&analytic, &numeric);
        assert!(err < FD_TOLERANCE, "{decoder:?}: err {err} at {k:?}");
    }
}
