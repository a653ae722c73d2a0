//! Worker-side access to shard servers and the coordinator.
//!
//! The same request/reply types ride both transports; TCP adds frames
//! and bounded reconnect-retry (5 attempts, exponential backoff).

use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use log::warn;

use crate::error::{KgError, Result};
use crate::params::{ModelSpec, ParamKey, ParamSet};
use crate::tape::GradMap;
use crate::tensor::Tensor;
use crate::trainer::ParameterAccess;

use super::coordinator::Coordinator;
use super::protocol::{
    decode_reply, encode_request, read_frame, write_frame, Reply, Request,
};
use super::server::ShardServer;
use super::ShardMap;

const RETRY_ATTEMPTS: usize = 5;
const RETRY_BASE: Duration = Duration::from_millis(20);

#[derive(Clone)]
pub enum Endpoint {
    InProc(Arc<ShardServer>),
    Tcp(String),
}

/// One connection to a server, over either transport.
pub enum Conn {
    InProc(Arc<ShardServer>),
    Tcp { addr: String, stream: Option<TcpStream> },
}

impl Conn {
    fn connect(endpoint: Endpoint) -> Self {
        match endpoint {
            Endpoint::InProc(server) => Conn::InProc(server),
            Endpoint::Tcp(addr) => Conn::Tcp { addr, stream: None },
        }
    }

    fn request_once(&mut self, req: &Request) -> Result<Reply> {
        match self {
            Conn::InProc(server) => Ok(server.handle(req.clone())),
            Conn::Tcp { addr, stream } => {
                if stream.is_none() {
                    let s = TcpStream::connect(addr.as_str())?;
                    s.set_nodelay(true).ok();
                    *stream = Some(s);
                }
                let s = stream.as_mut().unwrap();
                let (op, payload) = encode_request(req);
                let outcome = write_frame(s, op, &payload).and_then(|_| read_frame(s));
                match outcome {
                    Ok((reply_op, reply_payload)) => decode_reply(reply_op, &reply_payload),
                    Err(e) => {
                        *stream = None; // force reconnect on retry
                        Err(e)
                    }
                }
            }
        }
    }

    /// One request with transport-level retries. Protocol errors from
    /// the server are returned immediately; only transport failures
    /// retry.
    fn request(&mut self, req: &Request) -> Result<Reply> {
        let mut delay = RETRY_BASE;
        let mut last_err = None;
        for attempt in 0..RETRY_ATTEMPTS {
            match self.request_once(req) {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    warn!("ps request attempt {} failed: {e}", attempt + 1);
                    last_err = Some(e);
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
        Err(last_err.unwrap_or_else(|| KgError::Contract("retry loop without error".into())))
    }
}

/// Pull/push client over all shards.
pub struct PsClient {
    conns: Vec<Conn>,
    map: ShardMap,
    spec: ModelSpec,
}

impl PsClient {
    pub fn connect(endpoints: Vec<Endpoint>, spec: ModelSpec) -> Self {
        let map = ShardMap::new(endpoints.len());
        PsClient {
            conns: endpoints.into_iter().map(Conn::connect).collect(),
            map,
            spec,
        }
    }

    fn reply_error(reply: Reply) -> KgError {
        match reply {
            Reply::Error { code, message } => KgError::Protocol { code, message },
            other => KgError::Protocol {
                code: super::protocol::ERR_MALFORMED,
                message: format!("unexpected reply {other:?}"),
            },
        }
    }

    pub fn shutdown_all(&mut self) -> Result<()> {
        for conn in self.conns.iter_mut() {
            match conn.request(&Request::Shutdown)? {
                Reply::Shutdown => {}
                other => return Err(Self::reply_error(other)),
            }
        }
        Ok(())
    }

    pub fn checkpoint_all(&mut self, epoch: u32) -> Result<()> {
        for conn in self.conns.iter_mut() {
            match conn.request(&Request::Checkpoint { epoch })? {
                Reply::Checkpoint => {}
                other => return Err(Self::reply_error(other)),
            }
        }
        Ok(())
    }

    /// Pulls every key of the model, for final evaluation.
    pub fn pull_all(&mut self) -> Result<ParamSet> {
        let keys = self.spec.all_keys();
        self.pull(&keys)
    }
}

impl ParameterAccess for PsClient {
    fn pull(&mut self, keys: &[ParamKey]) -> Result<ParamSet> {
        let mut by_shard: Vec<Vec<ParamKey>> = vec![Vec::new(); self.conns.len()];
        for &k in keys {
            by_shard[self.map.shard_of(k)].push(k);
        }
        let mut out = ParamSet::new();
        for (shard, shard_keys) in by_shard.into_iter().enumerate() {
            if shard_keys.is_empty() {
                continue;
            }
            match self.conns[shard].request(&Request::Pull(shard_keys))? {
                Reply::Pull(records) => {
                    for (key, values) in records {
                        let shape = self.spec.shape_of(key)?;
                        out.insert(key, Tensor::new(shape, values)?);
                    }
                }
                other => return Err(Self::reply_error(other)),
            }
        }
        Ok(out)
    }

    fn push(&mut self, grads: GradMap) -> Result<()> {
        let mut by_shard: Vec<Vec<(ParamKey, Vec<f64>)>> = vec![Vec::new(); self.conns.len()];
        let mut entries: Vec<(ParamKey, Tensor)> = grads.into_iter().collect();
        entries.sort_by_key(|(k, _)| *k);
        for (k, g) in entries {
            by_shard[self.map.shard_of(k)].push((k, g.into_data()));
        }
        for (shard, records) in by_shard.into_iter().enumerate() {
            if records.is_empty() {
                continue;
            }
            match self.conns[shard].request(&Request::Push(records))? {
                Reply::Push => {}
                other => return Err(Self::reply_error(other)),
            }
        }
        Ok(())
    }
}

/// Coordinator handle: the epoch barrier, over either transport.
pub enum CoordHandle {
    InProc(Arc<Coordinator>),
    Tcp(Box<Conn>),
}

impl CoordHandle {
    pub fn in_proc(coordinator: Arc<Coordinator>) -> Self {
        CoordHandle::InProc(coordinator)
    }

    pub fn tcp(addr: String) -> Self {
        CoordHandle::Tcp(Box::new(Conn::Tcp { addr, stream: None }))
    }

    /// Blocks until the coordinator releases the epoch barrier.
    pub fn barrier(&mut self, worker: u64, epoch: u32) -> Result<()> {
        match self {
            CoordHandle::InProc(c) => c.barrier(worker, epoch),
            CoordHandle::Tcp(conn) => match conn.request(&Request::Barrier { worker, epoch })? {
                Reply::Barrier => Ok(()),
                other => Err(PsClient::reply_error(other)),
            },
        }
    }
}
