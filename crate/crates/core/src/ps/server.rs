//! Shard server: owns its slice of the parameter space plus the Adam
//! state for it, and applies updates where the parameters live.
//!
//! Per-key mutual exclusion: every entry sits behind its own mutex, so
//! pulls see whole values, pushes on one key serialize, and distinct
//! keys proceed in parallel.

use std::collections::HashMap;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, warn};

use crate::adam::{AdamHyper, AdamSlot};
use crate::checkpoint;
use crate::error::{KgError, Result};
use crate::params::{ModelSpec, ParamKey};
use crate::tensor::Tensor;
use crate::trainer::{apply_push, epoch_dir};

use super::protocol::{
    decode_request, encode_reply, read_frame, write_frame, Reply, Request, ERR_INTERNAL,
    ERR_SHAPE_MISMATCH, ERR_UNKNOWN_KEY, OP_SHUTDOWN,
};
use super::ShardMap;

struct Entry {
    value: Tensor,
    slot: AdamSlot,
}

pub struct ShardServer {
    pub shard_id: usize,
    entries: HashMap<ParamKey, Mutex<Entry>>,
    hyper: AdamHyper,
    spec: ModelSpec,
    out_dir: Option<PathBuf>,
    stop: AtomicBool,
}

impl ShardServer {
    /// Materializes this shard's keys from the seeded initialization
    /// (with the constraint sweep applied), identical to what the local
    /// runtime builds for the same seed.
    pub fn init(
        spec: &ModelSpec,
        map: ShardMap,
        shard_id: usize,
        hyper: AdamHyper,
        out_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let mut entries = HashMap::new();
        for key in spec.all_keys() {
            if map.shard_of(key) != shard_id {
                continue;
            }
            let mut value = spec.init_tensor(key)?;
            crate::decoder::apply_key_constraint(key, &mut value, spec)?;
            let shape = value.shape().to_vec();
            entries.insert(
                key,
                Mutex::new(Entry {
                    value,
                    slot: AdamSlot::new(shape),
                }),
            );
        }
        Ok(ShardServer {
            shard_id,
            entries,
            hyper,
            spec: spec.clone(),
            out_dir,
            stop: AtomicBool::new(false),
        })
    }

    pub fn n_keys(&self) -> usize {
        self.entries.len()
    }

    /// Handles one request. This is the single implementation behind
    /// both transports.
    pub fn handle(&self, req: Request) -> Reply {
        match req {
            Request::Pull(keys) => {
                let mut records = Vec::with_capacity(keys.len());
                for key in keys {
                    match self.entries.get(&key) {
                        Some(entry) => {
                            let guard = entry.lock().unwrap();
                            records.push((key, guard.value.data().to_vec()));
                        }
                        None => {
                            return Reply::Error {
                                code: ERR_UNKNOWN_KEY,
                                message: format!("shard {} does not hold {key}", self.shard_id),
                            }
                        }
                    }
                }
                Reply::Pull(records)
            }
            Request::Push(records) => {
                for (key, grad_values) in records {
                    let Some(entry) = self.entries.get(&key) else {
                        return Reply::Error {
                            code: ERR_UNKNOWN_KEY,
                            message: format!("shard {} does not hold {key}", self.shard_id),
                        };
                    };
                    let mut guard = entry.lock().unwrap();
                    if grad_values.len() != guard.value.numel() {
                        return Reply::Error {
                            code: ERR_SHAPE_MISMATCH,
                            message: format!(
                                "gradient for {key} has {} values, parameter {}",
                                grad_values.len(),
                                guard.value.numel()
                            ),
                        };
                    }
                    let grad = Tensor::new(guard.value.shape().to_vec(), grad_values)
                        .expect("shape already checked");
                    let entry = &mut *guard;
                    if let Err(e) = apply_push(
                        key,
                        &mut entry.value,
                        &mut entry.slot,
                        &grad,
                        &self.hyper,
                        &self.spec,
                    ) {
                        return Reply::Error {
                            code: ERR_INTERNAL,
                            message: e.to_string(),
                        };
                    }
                }
                Reply::Push
            }
            // Shard-side BARRIER is a fence: requests are handled
            // synchronously, so arriving here means prior pushes landed.
            Request::Barrier { .. } => Reply::Barrier,
            Request::Checkpoint { epoch } => match self.write_checkpoint(epoch) {
                Ok(()) => Reply::Checkpoint,
                Err(e) => Reply::Error {
                    code: ERR_INTERNAL,
                    message: e.to_string(),
                },
            },
            Request::Shutdown => {
                self.stop.store(true, Ordering::SeqCst);
                Reply::Shutdown
            }
        }
    }

    /// Raw-frame entry point shared by the TCP loop and replay tests.
    pub fn handle_frame(&self, opcode: u8, payload: &[u8]) -> (u8, Vec<u8>) {
        let reply = match decode_request(opcode, payload) {
            Ok(req) => self.handle(req),
            Err(e) => Reply::Error {
                code: super::protocol::ERR_MALFORMED,
                message: e.to_string(),
            },
        };
        encode_reply(&reply)
    }

    /// Sorted snapshot of this shard's parameters.
    pub fn dump(&self) -> Vec<(ParamKey, Tensor)> {
        let mut out: Vec<(ParamKey, Tensor)> = self
            .entries
            .iter()
            .map(|(k, e)| (*k, e.lock().unwrap().value.clone()))
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    fn write_checkpoint(&self, epoch: u32) -> Result<()> {
        let Some(out_dir) = &self.out_dir else {
            return Err(KgError::Contract(
                "shard has no output directory configured".into(),
            ));
        };
        let dir = epoch_dir(out_dir, epoch as usize);
        let path = dir.join(format!("shard-{:04}.kgnn", self.shard_id));
        checkpoint::write(&path, self.dump())
    }

    pub fn should_stop(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Accept loop for the TCP transport; returns once a SHUTDOWN frame
    /// has been served.
    pub fn serve_tcp(self: Arc<Self>, listener: TcpListener) -> Result<()> {
        listener.set_nonblocking(true)?;
        let mut handles = Vec::new();
        loop {
            if self.should_stop() {
                break;
            }
            match listener.accept() {
                Ok((stream, peer)) => {
                    debug!("shard {}: connection from {peer}", self.shard_id);
                    stream.set_nodelay(true).ok();
                    stream.set_nonblocking(false)?;
                    let server = Arc::clone(&self);
                    handles.push(std::thread::spawn(move || server.serve_conn(stream)));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => {
                    warn!("shard {} accept error: {e}", self.shard_id);
                    break;
                }
            }
        }
        for h in handles {
            let _ = h.join();
        }
        Ok(())
    }

    fn serve_conn(&self, mut stream: TcpStream) {
        loop {
            let (opcode, payload) = match read_frame(&mut stream) {
                Ok(f) => f,
                Err(_) => return, // peer closed
            };
            let (reply_op, reply_payload) = self.handle_frame(opcode, &payload);
            if write_frame(&mut stream, reply_op, &reply_payload).is_err() {
                return;
            }
            if opcode == OP_SHUTDOWN {
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderKind;
    use crate::encoder::EncoderKind;
    use crate::params::ParamKind;

    fn spec() -> ModelSpec {
        ModelSpec {
            dim: 4,
            attention_hidden: 3,
            n_entities: 10,
            n_relations: 2,
            inverse_edges: true,
            share_relation_tables: false,
            decoder: DecoderKind::TransH,
            encoder: EncoderKind::Lookup,
            use_attributes: false,
            attr_dim: None,
            init_seed: 3,
        }
    }

    fn single_shard() -> ShardServer {
        ShardServer::init(&spec(), ShardMap::new(1), 0, AdamHyper::default(), None).unwrap()
    }

    #[test]
    fn pull_returns_exactly_requested_keys() {
        let server = single_shard();
        let keys = vec![
            ParamKey::new(ParamKind::EntityEmb, 0),
            ParamKey::new(ParamKind::EntityEmb, 5),
        ];
        match server.handle(Request::Pull(keys.clone())) {
            Reply::Pull(records) => {
                assert_eq!(records.len(), 2);
                assert_eq!(records[0].0, keys[0]);
                assert_eq!(records[1].0, keys[1]);
                assert_eq!(records[0].1.len(), 4);
            }
            other => panic!("unexpected reply {other:?}"),
        }
    }

    #[test]
    fn push_then_pull_reads_own_write() {
        let server = single_shard();
        let key = ParamKey::new(ParamKind::EntityEmb, 1);
        let before = match server.handle(Request::Pull(vec![key])) {
            Reply::Pull(r) => r[0].1.clone(),
            other => panic!("{other:?}"),
        };
        assert!(matches!(
            server.handle(Request::Push(vec![(key, vec![1.0, 0.0, 0.0, 0.0])])),
            Reply::Push
        ));
        let after = match server.handle(Request::Pull(vec![key])) {
            Reply::Pull(r) => r[0].1.clone(),
            other => panic!("{other:?}"),
        };
        assert_ne!(before, after);
    }

    #[test]
    fn unknown_key_and_shape_mismatch_codes() {
        let server = single_shard();
        let bogus = ParamKey::new(ParamKind::EntityEmb, 999);
        match server.handle(Request::Pull(vec![bogus])) {
            Reply::Error { code, .. } => assert_eq!(code, ERR_UNKNOWN_KEY),
            other => panic!("{other:?}"),
        }
        let key = ParamKey::new(ParamKind::EntityEmb, 1);
        match server.handle(Request::Push(vec![(key, vec![1.0])])) {
            Reply::Error { code, .. } => assert_eq!(code, ERR_SHAPE_MISMATCH),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn concurrent_disjoint_pushes_match_sequential_replay() {
        let spec = spec();
        let hyper = AdamHyper::default();
        let server = Arc::new(
            ShardServer::init(&spec, ShardMap::new(1), 0, hyper, None).unwrap(),
        );
        let rounds = 200;
        let keys: Vec<ParamKey> = (0..4)
            .map(|i| ParamKey::new(ParamKind::EntityEmb, i))
            .collect();

        std::thread::scope(|s| {
            for (w, &key) in keys.iter().enumerate() {
                let server = Arc::clone(&server);
                s.spawn(move || {
                    for round in 0..rounds {
                        let g = (w as f64 + 1.0) * 0.01 + round as f64 * 1e-5;
                        let reply =
                            server.handle(Request::Push(vec![(key, vec![g, -g, g, 0.5 * g])]));
                        assert!(matches!(reply, Reply::Push));
                    }
                });
            }
        });

        // Sequential replay on a fresh server.
        let replay =
            ShardServer::init(&spec, ShardMap::new(1), 0, AdamHyper::default(), None).unwrap();
        for (w, &key) in keys.iter().enumerate() {
            for round in 0..rounds {
                let g = (w as f64 + 1.0) * 0.01 + round as f64 * 1e-5;
                replay.handle(Request::Push(vec![(key, vec![g, -g, g, 0.5 * g])]));
            }
        }
        for &key in &keys {
            let a = match server.handle(Request::Pull(vec![key])) {
                Reply::Pull(r) => r[0].1.clone(),
                other => panic!("{other:?}"),
            };
            let b = match replay.handle(Request::Pull(vec![key])) {
                Reply::Pull(r) => r[0].1.clone(),
                other => panic!("{other:?}"),
            };
            assert_eq!(a, b, "{key}");
        }
    }

    #[test]
    fn pulls_never_observe_torn_values() {
        // The forget-gate bias initializes exactly uniform; uniform
        // gradients keep it uniform after every whole Adam update. A
        // torn read would mix two versions and break that equality.
        let mut model = spec();
        model.encoder = EncoderKind::Gnn;
        let server = Arc::new(
            ShardServer::init(&model, ShardMap::new(1), 0, AdamHyper::default(), None).unwrap(),
        );
        let key = ParamKey::new(ParamKind::LstmWeight, crate::params::LSTM_B_FORGET);
        let stop = AtomicBool::new(false);
        std::thread::scope(|s| {
            let srv = Arc::clone(&server);
            let stop_ref = &stop;
            s.spawn(move || {
                for i in 0..2000 {
                    let g = if i % 2 == 0 { 1.0 } else { -1.0 };
                    srv.handle(Request::Push(vec![(key, vec![g; 4])]));
                }
                stop_ref.store(true, Ordering::SeqCst);
            });
            let srv = Arc::clone(&server);
            s.spawn(move || {
                while !stop_ref.load(Ordering::SeqCst) {
                    if let Reply::Pull(r) = srv.handle(Request::Pull(vec![key])) {
                        let v = &r[0].1;
                        assert!(
                            v.iter().all(|&x| x == v[0]),
                            "torn read observed: {v:?}"
                        );
                    }
                }
            });
        });
    }
}
