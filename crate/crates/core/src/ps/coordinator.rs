//! Coordinator: worker registration, epoch barriers, checkpoint
//! triggers, and the in-process distributed training driver.
//!
//! Workers run fully asynchronously within an epoch and synchronize at
//! the epoch edge: the coordinator waits for every registered worker,
//! triggers shard checkpoints while the store is quiescent, then
//! releases the barrier.

use std::collections::HashSet;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use log::{info, warn};

use crate::encoder::EncoderConfig;
use crate::error::{KgError, Result};
use crate::params::{ModelSpec, ParamSet};
use crate::rng::{self, Stream};
use crate::sampler::SamplerConfig;
use crate::store::KnowledgeGraph;
use crate::trainer::{
    self, epoch_batches, EpochReport, TrainConfig, TrainOutcome, Trainer,
};

use super::client::{CoordHandle, Endpoint, PsClient};
use super::protocol::{
    decode_request, encode_reply, read_frame, write_frame, Reply, Request, ERR_INTERNAL,
};
use super::server::ShardServer;
use super::ShardMap;

const BARRIER_TIMEOUT: Duration = Duration::from_secs(600);

/// Barrier log entry, for asserting epoch isolation in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierEvent {
    Arrive { worker: u64, epoch: u32 },
    Release { epoch: u32 },
}

struct BarrierState {
    arrived: HashSet<u64>,
    released_epoch: i64,
    failed: bool,
}

pub struct Coordinator {
    workers: usize,
    state: Mutex<BarrierState>,
    cv: Condvar,
    events: Mutex<Vec<BarrierEvent>>,
}

impl Coordinator {
    pub fn new(workers: usize) -> Self {
        Coordinator {
            workers,
            state: Mutex::new(BarrierState {
                arrived: HashSet::new(),
                released_epoch: -1,
                failed: false,
            }),
            cv: Condvar::new(),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Worker side: registers arrival at `epoch`'s end barrier and
    /// blocks until the coordinator releases it.
    pub fn barrier(&self, worker: u64, epoch: u32) -> Result<()> {
        self.events
            .lock()
            .unwrap()
            .push(BarrierEvent::Arrive { worker, epoch });
        let mut state = self.state.lock().unwrap();
        state.arrived.insert(worker);
        self.cv.notify_all();
        let deadline = Instant::now() + BARRIER_TIMEOUT;
        while state.released_epoch < epoch as i64 {
            if state.failed {
                return Err(KgError::Contract("coordinator aborted the run".into()));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(KgError::Contract(format!(
                    "barrier timeout at epoch {epoch}"
                )));
            }
            let (s, _) = self.cv.wait_timeout(state, deadline - now).unwrap();
            state = s;
        }
        Ok(())
    }

    /// Coordinator side: waits until every worker arrived at `epoch`.
    pub fn wait_arrivals(&self, epoch: u32) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        let deadline = Instant::now() + BARRIER_TIMEOUT;
        while state.arrived.len() < self.workers {
            if state.failed {
                return Err(KgError::Contract(format!(
                    "a worker died before the epoch {epoch} barrier"
                )));
            }
            let now = Instant::now();
            if now >= deadline {
                state.failed = true;
                self.cv.notify_all();
                return Err(KgError::Contract(format!(
                    "coordinator timed out waiting for workers at epoch {epoch}"
                )));
            }
            let (s, _) = self.cv.wait_timeout(state, deadline - now).unwrap();
            state = s;
        }
        Ok(())
    }

    /// Coordinator side: opens the next epoch.
    pub fn release(&self, epoch: u32) {
        let mut state = self.state.lock().unwrap();
        state.arrived.clear();
        state.released_epoch = epoch as i64;
        self.events
            .lock()
            .unwrap()
            .push(BarrierEvent::Release { epoch });
        self.cv.notify_all();
    }

    /// Marks the run failed and wakes every blocked worker.
    pub fn abort(&self) {
        self.state.lock().unwrap().failed = true;
        self.cv.notify_all();
    }

    pub fn events(&self) -> Vec<BarrierEvent> {
        self.events.lock().unwrap().clone()
    }

    /// TCP front end: serves BARRIER frames (blocking until release)
    /// until `stop` is set.
    pub fn serve_tcp(self: Arc<Self>, listener: TcpListener, stop: Arc<AtomicBool>) -> Result<()> {
        listener.set_nonblocking(true)?;
        let mut handles = Vec::new();
        loop {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    let coord = Arc::clone(&self);
                    handles.push(std::thread::spawn(move || {
                        coord.serve_conn(stream);
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => {
                    warn!("coordinator accept error: {e}");
                    break;
                }
            }
        }
        for h in handles {
            let _ = h.join();
        }
        Ok(())
    }

    fn serve_conn(&self, mut stream: std::net::TcpStream) {
        loop {
            let (opcode, payload) = match read_frame(&mut stream) {
                Ok(f) => f,
                Err(_) => return,
            };
            let reply = match decode_request(opcode, &payload) {
                Ok(Request::Barrier { worker, epoch }) => match self.barrier(worker, epoch) {
                    Ok(()) => Reply::Barrier,
                    Err(e) => Reply::Error {
                        code: ERR_INTERNAL,
                        message: e.to_string(),
                    },
                },
                Ok(Request::Shutdown) => Reply::Shutdown,
                Ok(other) => Reply::Error {
                    code: ERR_INTERNAL,
                    message: format!("coordinator cannot serve {other:?}"),
                },
                Err(e) => Reply::Error {
                    code: super::protocol::ERR_MALFORMED,
                    message: e.to_string(),
                },
            };
            let (op, body) = encode_reply(&reply);
            if write_frame(&mut stream, op, &body).is_err() {
                return;
            }
            if op == super::protocol::OP_SHUTDOWN {
                return;
            }
        }
    }
}

/// Per-worker epoch statistics, merged into `EpochReport`s by the
/// driver.
#[derive(Debug, Clone, Default)]
pub struct WorkerEpochStats {
    pub loss_sum: f64,
    pub pairs: usize,
    pub active_pairs: usize,
}

/// The worker body shared by the in-process driver and the `serve
/// worker` command: stripes the epoch's batch list by worker id, trains
/// each assigned batch against the parameter server, and synchronizes
/// at the epoch barrier.
#[allow(clippy::too_many_arguments)]
pub fn worker_loop(
    worker_id: u64,
    n_workers: usize,
    graph: &KnowledgeGraph,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    samp_cfg: &SamplerConfig,
    client: &mut PsClient,
    coord: &mut CoordHandle,
) -> Result<Vec<WorkerEpochStats>> {
    let trainer = Trainer {
        graph,
        spec,
        cfg,
        enc_cfg,
        samp_cfg,
    };
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&graph.triples, cfg.batch_size, cfg.seed, epoch);
        let mut s = WorkerEpochStats::default();
        for (batch_idx, batch) in batches.iter().enumerate() {
            if batch_idx % n_workers != worker_id as usize {
                continue;
            }
            let mut rng = rng::stream(cfg.seed, Stream::Batch, epoch as u64, batch_idx as u64);
            let result = trainer.train_batch(batch, client, &mut rng)?;
            s.loss_sum += result.loss_sum;
            s.pairs += result.pairs;
            s.active_pairs += result.active_pairs;
        }
        stats.push(s);
        coord.barrier(worker_id, epoch as u32)?;
    }
    Ok(stats)
}

pub struct RunSummary {
    pub params: ParamSet,
    pub reports: Vec<EpochReport>,
    pub events: Vec<BarrierEvent>,
}

impl RunSummary {
    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            reports: self.reports,
        }
    }
}

/// In-process distributed training: shard servers and workers as
/// threads, the coordinator on the calling thread. Checkpoints are
/// written per epoch while workers are parked at the barrier, exactly
/// like the local runtime's.
#[allow(clippy::too_many_arguments)]
pub fn run_distributed(
    graph: &KnowledgeGraph,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    samp_cfg: &SamplerConfig,
    workers: usize,
    shards: usize,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    Ok(run_distributed_summary(
        graph, spec, cfg, enc_cfg, samp_cfg, workers, shards, out_dir,
    )?
    .into_outcome())
}

/// Transport-level description of a running cluster: how workers reach
/// the shards and the coordinator.
pub struct DistRuntime {
    pub endpoints: Vec<Endpoint>,
    pub coordinator: Arc<Coordinator>,
    /// When set, workers reach the barrier over TCP at this address.
    pub coord_addr: Option<String>,
}

/// Coordinator-side epoch bookkeeping: triggers shard checkpoints while
/// workers are parked at the barrier, advances the LATEST marker, and
/// prunes old epochs.
pub fn checkpoint_epoch(
    client: &mut PsClient,
    out_dir: Option<&Path>,
    epoch: usize,
    keep: usize,
) -> Result<()> {
    let Some(dir) = out_dir else {
        return Ok(());
    };
    client.checkpoint_all(epoch as u32)?;
    trainer::write_latest_marker(dir, epoch)?;
    if epoch + 1 > keep {
        for old in 0..=(epoch - keep) {
            let old_dir = trainer::epoch_dir(dir, old);
            if old_dir.exists() {
                let _ = std::fs::remove_dir_all(&old_dir);
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn run_distributed_summary(
    graph: &KnowledgeGraph,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    samp_cfg: &SamplerConfig,
    workers: usize,
    shards: usize,
    out_dir: Option<&Path>,
) -> Result<RunSummary> {
    let map = ShardMap::new(shards);
    let mut servers = Vec::with_capacity(map.num_shards);
    for shard_id in 0..map.num_shards {
        servers.push(Arc::new(ShardServer::init(
            spec,
            map,
            shard_id,
            cfg.hyper(),
            out_dir.map(PathBuf::from),
        )?));
    }
    let runtime = DistRuntime {
        endpoints: servers.iter().map(|s| Endpoint::InProc(Arc::clone(s))).collect(),
        coordinator: Arc::new(Coordinator::new(workers)),
        coord_addr: None,
    };
    run_with_runtime(graph, spec, cfg, enc_cfg, samp_cfg, workers, &runtime, out_dir)
}

/// Drives a full training run against an already-running cluster.
#[allow(clippy::too_many_arguments)]
pub fn run_with_runtime(
    graph: &KnowledgeGraph,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    samp_cfg: &SamplerConfig,
    workers: usize,
    runtime: &DistRuntime,
    out_dir: Option<&Path>,
) -> Result<RunSummary> {
    cfg.validate()?;
    enc_cfg.validate()?;
    samp_cfg.validate()?;
    if workers == 0 {
        return Err(KgError::config("runtime.workers", "need at least one worker"));
    }
    let endpoints = runtime.endpoints.clone();
    let coordinator = Arc::clone(&runtime.coordinator);

    // Initialization checkpoint before any update.
    let mut driver_client = PsClient::connect(endpoints.clone(), spec.clone());
    checkpoint_epoch(&mut driver_client, out_dir, 0, cfg.checkpoints_to_keep)?;

    let mut wall_times = Vec::with_capacity(cfg.epochs);
    let mut worker_stats: Vec<Vec<WorkerEpochStats>> = Vec::new();

    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for worker_id in 0..workers {
            let endpoints = endpoints.clone();
            let coordinator = Arc::clone(&coordinator);
            let coord_abort = Arc::clone(&coordinator);
            let coord_addr = runtime.coord_addr.clone();
            let spec_ref = spec;
            handles.push(scope.spawn(move || -> Result<Vec<WorkerEpochStats>> {
                let mut client = PsClient::connect(endpoints, spec_ref.clone());
                let mut coord = match coord_addr {
                    Some(addr) => CoordHandle::tcp(addr),
                    None => CoordHandle::in_proc(coordinator),
                };
                let result = worker_loop(
                    worker_id as u64,
                    workers,
                    graph,
                    spec_ref,
                    cfg,
                    enc_cfg,
                    samp_cfg,
                    &mut client,
                    &mut coord,
                );
                if result.is_err() {
                    coord_abort.abort();
                }
                result
            }));
        }

        // Coordinator loop on this thread.
        let mut coord_err = None;
        for epoch in 0..cfg.epochs {
            let start = Instant::now();
            if let Err(e) = coordinator.wait_arrivals(epoch as u32) {
                coord_err = Some(e);
                break;
            }
            let elapsed = start.elapsed().as_secs_f64();
            if let Err(e) = checkpoint_epoch(
                &mut driver_client,
                out_dir,
                epoch + 1,
                cfg.checkpoints_to_keep,
            ) {
                coordinator.abort();
                coord_err = Some(e);
                break;
            }
            wall_times.push(elapsed);
            coordinator.release(epoch as u32);
            info!("epoch {} complete in {:.2}s", epoch + 1, elapsed);
        }

        let mut first_worker_err = None;
        for handle in handles {
            match handle.join() {
                Ok(Ok(stats)) => worker_stats.push(stats),
                Ok(Err(e)) => {
                    if first_worker_err.is_none() {
                        first_worker_err = Some(e);
                    }
                    coordinator.abort();
                }
                Err(_) => {
                    if first_worker_err.is_none() {
                        first_worker_err =
                            Some(KgError::Contract("worker thread panicked".into()));
                    }
                    coordinator.abort();
                }
            }
        }
        if let Some(e) = first_worker_err {
            return Err(e);
        }
        if let Some(e) = coord_err {
            return Err(e);
        }
        Ok(())
    })?;

    // Merge worker stats into per-epoch reports; wall time is the
    // coordinator's measurement of the whole epoch.
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        let mut active = 0usize;
        for stats in &worker_stats {
            if let Some(s) = stats.get(epoch) {
                loss_sum += s.loss_sum;
                pairs += s.pairs;
                active += s.active_pairs;
            }
        }
        reports.push(EpochReport {
            epoch: epoch + 1,
            mean_loss: if pairs > 0 {
                loss_sum / pairs as f64
            } else {
                0.0
            },
            seconds: wall_times.get(epoch).copied().unwrap_or(0.0),
            active_pairs: active,
        });
    }

    let mut client = PsClient::connect(endpoints, spec.clone());
    let params = client.pull_all()?;
    Ok(RunSummary {
        params,
        reports,
        events: coordinator.events(),
    })
}
