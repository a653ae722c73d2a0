//! `kgnn` — train and evaluate knowledge-graph embedding models from a
//! flat config file, locally or against parameter-server processes.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::info;

use kgnn::checkpoint;
use kgnn::config::{RunConfig, RuntimeMode, Transport};
use kgnn::error::KgError;
use kgnn::eval::{self, RankMode};
use kgnn::params::{ModelSpec, ParamSet};
use kgnn::ps::{
    run_distributed, worker_loop, CoordHandle, Coordinator, Endpoint, PsClient, ShardMap,
    ShardServer,
};
use kgnn::store::{build_graph, Dataset, KnowledgeGraph};
use kgnn::trainer::{self, model_spec, train_local, TrainOutcome};

#[derive(Parser)]
#[command(name = "kgnn", about = "Knowledge-graph representation learning", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse TSV splits, write vocabulary files and a binary dataset
    /// cache. Idempotent: a fresh cache is detected and kept.
    Prepare {
        /// Directory holding train.tsv (and optionally valid/test/attributes).
        data_dir: PathBuf,
    },
    /// Train under the configured runtime; writes checkpoints and an
    /// epoch CSV to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank the test split and run triplet classification against a
    /// checkpoint; writes metric CSVs.
    Eval {
        /// Checkpoint file, epoch directory, or a training output
        /// directory (its LATEST checkpoint is used).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// raw or filtered; overrides `eval.mode`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per hop count and report filtered HR@10.
    SweepHops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated hop counts, strictly increasing.
        #[arg(long, default_value = "1,2,3,4")]
        points: String,
    },
    /// One distributed run per worker count; reports epoch wall time
    /// and filtered HR@10.
    SweepWorkers {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated worker counts, strictly increasing.
        #[arg(long, default_value = "1,2,4,8")]
        points: String,
    },
    /// Long-running parameter-server processes for the TCP transport.
    Serve {
        #[command(subcommand)]
        role: ServeRole,
    },
}

#[derive(Subcommand)]
enum ServeRole {
    /// One shard server; exits on a SHUTDOWN frame.
    Shard {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        shard_id: usize,
        /// Listen address, e.g. 127.0.0.1:7001. Defaults to the
        /// config's endpoint for this shard id.
        #[arg(long)]
        listen: Option<String>,
    },
    /// The coordinator: serves the epoch barrier, triggers checkpoints,
    /// and shuts the shards down when training completes.
    Coordinator {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        listen: Option<String>,
    },
    /// One worker process.
    Worker {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        worker_id: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let level = std::env::var("KGNN_LOG").unwrap_or_else(|_| "error".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();

    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &KgError) -> u8 {
    match e {
        KgError::Config { .. } => 2,
        KgError::NonFiniteLoss { .. } => 3,
        KgError::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), KgError> {
    match cli.command {
        Command::Prepare { data_dir } => cmd_prepare(&data_dir),
        Command::Train { config, out, seed } => {
            let cfg = load_config(&config, out, seed)?;
            cmd_train(&cfg)
        }
        Command::Eval {
            checkpoint,
            config,
            out,
            mode,
            seed,
        } => {
            let mut cfg = load_config(&config, out, seed)?;
            if let Some(mode) = mode {
                cfg.eval_mode = RankMode::parse(&mode)?;
            }
            cmd_eval(&cfg, &checkpoint)
        }
        Command::SweepHops {
            config,
            out,
            seed,
            points,
        } => {
            let cfg = load_config(&config, out, seed)?;
            cmd_sweep_hops(&cfg, &parse_points(&points)?)
        }
        Command::SweepWorkers {
            config,
            out,
            seed,
            points,
        } => {
            let cfg = load_config(&config, out, seed)?;
            cmd_sweep_workers(&cfg, &parse_points(&points)?)
        }
        Command::Serve { role } => match role {
            ServeRole::Shard {
                config,
                shard_id,
                listen,
            } => {
                let cfg = load_config(&config, None, None)?;
                cmd_serve_shard(&cfg, shard_id, listen)
            }
            ServeRole::Coordinator { config, listen } => {
                let cfg = load_config(&config, None, None)?;
                cmd_serve_coordinator(&cfg, listen)
            }
            ServeRole::Worker {
                config,
                worker_id,
                seed,
            } => {
                let cfg = load_config(&config, None, seed)?;
                cmd_serve_worker(&cfg, worker_id)
            }
        },
    }
}

fn parse_points(s: &str) -> Result<Vec<usize>, KgError> {
    let points: Result<Vec<usize>, _> = s.split(',').map(|x| x.trim().parse()).collect();
    points.map_err(|_| KgError::config("points", format!("unparseable list `{s}`")))
}

fn load_config(
    path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<RunConfig, KgError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------
// prepare

fn cache_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("kgnn-cache")
}

fn source_fingerprint(data_dir: &Path) -> Result<u64, KgError> {
    let names = [
        "train.tsv",
        "valid.tsv",
        "test.tsv",
        "attributes.tsv",
        "entity2id.tsv",
        "relation2id.tsv",
    ];
    let paths: Vec<PathBuf> = names.iter().map(|n| data_dir.join(n)).collect();
    let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    kgnn::store::fingerprint_files(&refs)
}

fn cmd_prepare(data_dir: &Path) -> Result<(), KgError> {
    let fingerprint = source_fingerprint(data_dir)?;
    let cache = cache_dir(data_dir).join("dataset.bin");
    if cache.exists() {
        if let Ok((_, stored)) = kgnn::store::load_cache(&cache) {
            if stored == fingerprint {
                println!("up-to-date");
                return Ok(());
            }
        }
    }
    let ds = Dataset::load_dir(data_dir)?;
    std::fs::create_dir_all(cache_dir(data_dir))?;
    kgnn::store::save_cache(&cache, &ds, fingerprint)?;
    ds.entity_vocab
        .save_tsv(&cache_dir(data_dir).join("entities.tsv"))?;
    ds.relation_vocab
        .save_tsv(&cache_dir(data_dir).join("relations.tsv"))?;
    println!(
        "prepared {} entities, {} relations, {}/{}/{} triples",
        ds.entity_vocab.len(),
        ds.relation_vocab.len(),
        ds.split.train.len(),
        ds.split.valid.len(),
        ds.split.test.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// shared loading

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, KgError> {
    let cache = cache_dir(&cfg.data_dir).join("dataset.bin");
    if cache.exists() {
        let (ds, stored) = kgnn::store::load_cache(&cache)?;
        if stored == source_fingerprint(&cfg.data_dir)? {
            return Ok(ds);
        }
        info!("cache is stale; re-reading TSV files");
    }
    Dataset::load_dir(&cfg.data_dir)
}

fn load_graph(cfg: &RunConfig) -> Result<(KnowledgeGraph, Dataset), KgError> {
    let ds = load_dataset(cfg)?;
    let graph = build_graph(
        &ds.split,
        ds.entity_vocab.clone(),
        ds.relation_vocab.clone(),
        ds.attributes.clone(),
        cfg.inverse_edges,
        ds.n_train_entities,
    )?;
    Ok((graph, ds))
}

fn spec_for(cfg: &RunConfig, graph: &KnowledgeGraph) -> ModelSpec {
    model_spec(graph, &cfg.train, &cfg.encoder, cfg.share_relation_tables)
}

fn echo_config(cfg: &RunConfig) -> Result<(), KgError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.effective"), cfg.to_text())?;
    Ok(())
}

// ---------------------------------------------------------------------
// train

fn cmd_train(cfg: &RunConfig) -> Result<(), KgError> {
    cfg.validate()?;
    echo_config(cfg)?;
    let (graph, ds) = load_graph(cfg)?;
    let spec = spec_for(cfg, &graph);
    let samp = cfg.sampler_config();

    let outcome: TrainOutcome = match (cfg.runtime.mode, cfg.runtime.transport) {
        (RuntimeMode::Local, _) => train_local(
            &graph,
            &spec,
            &cfg.train,
            &cfg.encoder,
            &samp,
            &ds.split.valid,
            Some(&cfg.out_dir),
        )?,
        (RuntimeMode::Distributed, Transport::InProc) => run_distributed(
            &graph,
            &spec,
            &cfg.train,
            &cfg.encoder,
            &samp,
            cfg.runtime.workers,
            cfg.runtime.resolved_shards(),
            Some(&cfg.out_dir),
        )?,
        (RuntimeMode::Distributed, Transport::Tcp) => {
            // Shards and the coordinator run as `serve` processes; this
            // process contributes every worker.
            let endpoints: Vec<Endpoint> = cfg
                .runtime
                .endpoints
                .iter()
                .map(|a| Endpoint::Tcp(a.clone()))
                .collect();
            let coord_addr = cfg.runtime.coordinator.clone().ok_or_else(|| {
                KgError::config("runtime.coordinator", "tcp transport needs a coordinator")
            })?;
            let n_workers = cfg.runtime.workers;
            let mut stats = Vec::new();
            std::thread::scope(|s| -> Result<(), KgError> {
                let mut handles = Vec::new();
                for worker_id in 0..n_workers {
                    let endpoints = endpoints.clone();
                    let coord_addr = coord_addr.clone();
                    let (graph, spec, train, enc, samp) =
                        (&graph, &spec, &cfg.train, &cfg.encoder, &samp);
                    handles.push(s.spawn(move || {
                        let mut client = PsClient::connect(endpoints, spec.clone());
                        let mut coord = CoordHandle::tcp(coord_addr);
                        worker_loop(
                            worker_id as u64,
                            n_workers,
                            graph,
                            spec,
                            train,
                            enc,
                            samp,
                            &mut client,
                            &mut coord,
                        )
                    }));
                }
                for h in handles {
                    match h.join() {
                        Ok(Ok(s)) => stats.push(s),
                        Ok(Err(e)) => return Err(e),
                        Err(_) => {
                            return Err(KgError::Contract("worker thread panicked".into()))
                        }
                    }
                }
                Ok(())
            })?;
            // Parameters live in the coordinator's checkpoints; this
            // side only aggregates the workers' loss statistics. The
            // shards may already be shut down by the coordinator.
            let mut reports = Vec::new();
            for epoch in 0..cfg.train.epochs {
                let mut loss = 0.0;
                let mut pairs = 0usize;
                let mut active = 0usize;
                for s in &stats {
                    if let Some(e) = s.get(epoch) {
                        loss += e.loss_sum;
                        pairs += e.pairs;
                        active += e.active_pairs;
                    }
                }
                reports.push(kgnn::trainer::EpochReport {
                    epoch: epoch + 1,
                    mean_loss: if pairs > 0 { loss / pairs as f64 } else { 0.0 },
                    seconds: 0.0,
                    active_pairs: active,
                });
            }
            TrainOutcome {
                params: ParamSet::new(),
                reports,
            }
        }
    };

    for r in &outcome.reports {
        println!(
            "epoch {} loss {:.6} active_pairs {} ({:.2}s)",
            r.epoch, r.mean_loss, r.active_pairs, r.seconds
        );
    }
    std::fs::write(
        cfg.out_dir.join("epochs.csv"),
        trainer::reports_to_csv(&outcome.reports),
    )?;
    println!("done: {} epochs", outcome.reports.len());
    Ok(())
}

// ---------------------------------------------------------------------
// eval

fn resolve_checkpoint(path: &Path) -> Result<PathBuf, KgError> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.join("checkpoints").join("LATEST").exists() {
        let epoch = trainer::read_latest_marker(path)?;
        return Ok(trainer::epoch_dir(path, epoch));
    }
    if path.is_dir() {
        return Ok(path.to_path_buf());
    }
    Err(KgError::Checkpoint(format!(
        "checkpoint path {} not found",
        path.display()
    )))
}

fn load_params(path: &Path, spec: &ModelSpec) -> Result<ParamSet, KgError> {
    let resolved = resolve_checkpoint(path)?;
    let entries = if resolved.is_dir() {
        checkpoint::read_epoch_dir(&resolved)?
    } else {
        checkpoint::read(&resolved)?
    };
    let entries = checkpoint::restore_shapes(entries, spec)?;
    Ok(entries.into_iter().collect())
}

fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<(), KgError> {
    cfg.validate()?;
    let (graph, ds) = load_graph(cfg)?;
    let spec = spec_for(cfg, &graph);
    let params = load_params(checkpoint_path, &spec)?;
    let samp = cfg.sampler_config();
    if ds.split.test.is_empty() {
        return Err(KgError::Contract(
            "eval needs a non-empty test split".into(),
        ));
    }

    let model = eval::RankedModel::build(
        &graph,
        &spec,
        &cfg.train,
        &cfg.encoder,
        &samp,
        &params,
        cfg.eval_seed,
    )?;
    let report = eval::link_prediction_report(
        &model,
        &graph,
        &ds.split.test,
        &cfg.eval_ks,
        cfg.eval_mode,
    )?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    eval::write_csv(&cfg.out_dir.join("ranking.csv"), &eval::ranking_csv(&report))?;
    let classification =
        eval::triplet_classification(&model, &graph, &ds.split.test, cfg.eval_seed)?;
    eval::write_csv(
        &cfg.out_dir.join("classification.csv"),
        &eval::classification_csv(&classification),
    )?;
    for r in &report {
        for (k, hr) in &r.hits {
            println!(
                "{} {} HR@{k} {:.4} (mean rank {:.2})",
                r.mode.name(),
                r.side.name(),
                hr,
                r.mean_rank
            );
        }
    }
    println!(
        "auc {:.4} over {} positives / {} negatives",
        classification.auc, classification.positives, classification.negatives
    );
    Ok(())
}

// ---------------------------------------------------------------------
// sweeps

fn write_derived_configs(
    cfg: &RunConfig,
    axis: &str,
    points: &[usize],
    derive: impl Fn(&mut RunConfig, usize),
) -> Result<(), KgError> {
    for &p in points {
        let mut derived = cfg.clone();
        derived.out_dir = cfg.out_dir.join("sweeps").join(format!("{axis}-{p}"));
        derive(&mut derived, p);
        std::fs::create_dir_all(&derived.out_dir)?;
        std::fs::write(derived.out_dir.join("config.effective"), derived.to_text())?;
    }
    Ok(())
}

fn cmd_sweep_hops(cfg: &RunConfig, points: &[usize]) -> Result<(), KgError> {
    cfg.validate()?;
    echo_config(cfg)?;
    let (graph, ds) = load_graph(cfg)?;
    write_derived_configs(cfg, "hops", points, |c, p| c.encoder.hops = p)?;
    let samp = cfg.sampler_config();
    let report = eval::sweep_hops(
        &graph,
        &cfg.train,
        &cfg.encoder,
        &samp,
        &ds.split.test,
        points,
    )?;
    emit_sweep(cfg, "hops", &report)
}

fn cmd_sweep_workers(cfg: &RunConfig, points: &[usize]) -> Result<(), KgError> {
    cfg.validate()?;
    echo_config(cfg)?;
    let (graph, ds) = load_graph(cfg)?;
    write_derived_configs(cfg, "workers", points, |c, p| c.runtime.workers = p)?;
    let samp = cfg.sampler_config();
    let report = eval::sweep_workers(
        &graph,
        &cfg.train,
        &cfg.encoder,
        &samp,
        &ds.split.test,
        points,
    )?;
    emit_sweep(cfg, "workers", &report)
}

fn emit_sweep(cfg: &RunConfig, axis: &str, report: &eval::SweepReport) -> Result<(), KgError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    eval::write_csv(
        &cfg.out_dir.join(format!("sweep-{axis}.csv")),
        &eval::sweep_csv(report),
    )?;
    let (hr, secs) = eval::sweep_xy_csv(report);
    eval::write_csv(&cfg.out_dir.join(format!("sweep-{axis}-hr10.xy.csv")), &hr)?;
    eval::write_csv(
        &cfg.out_dir.join(format!("sweep-{axis}-seconds.xy.csv")),
        &secs,
    )?;
    for p in &report.points {
        println!(
            "{axis}={} hr10={:.4} epoch_seconds={:.3}",
            p.setting, p.hr10, p.epoch_seconds
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------
// serve

fn cmd_serve_shard(
    cfg: &RunConfig,
    shard_id: usize,
    listen: Option<String>,
) -> Result<(), KgError> {
    let (graph, _) = load_graph(cfg)?;
    let spec = spec_for(cfg, &graph);
    let map = ShardMap::new(cfg.runtime.resolved_shards());
    let addr = match listen {
        Some(a) => a,
        None => cfg
            .runtime
            .endpoints
            .get(shard_id)
            .cloned()
            .ok_or_else(|| {
                KgError::config("runtime.endpoints", "no endpoint for this shard id")
            })?,
    };
    let server = Arc::new(ShardServer::init(
        &spec,
        map,
        shard_id,
        cfg.hyper(),
        Some(cfg.out_dir.clone()),
    )?);
    let listener = TcpListener::bind(&addr)?;
    println!("shard {shard_id} serving {} keys on {addr}", server.n_keys());
    server.serve_tcp(listener)
}

fn cmd_serve_coordinator(cfg: &RunConfig, listen: Option<String>) -> Result<(), KgError> {
    let addr = listen
        .or_else(|| cfg.runtime.coordinator.clone())
        .ok_or_else(|| KgError::config("runtime.coordinator", "no coordinator address"))?;
    let (graph, _) = load_graph(cfg)?;
    let spec = spec_for(cfg, &graph);
    let coordinator = Arc::new(Coordinator::new(cfg.runtime.workers));
    let stop = Arc::new(AtomicBool::new(false));
    let listener = TcpListener::bind(&addr)?;
    println!(
        "coordinator on {addr}: {} workers, {} epochs",
        cfg.runtime.workers, cfg.train.epochs
    );
    let barrier_thread = {
        let coordinator = Arc::clone(&coordinator);
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || coordinator.serve_tcp(listener, stop))
    };

    let endpoints: Vec<Endpoint> = cfg
        .runtime
        .endpoints
        .iter()
        .map(|a| Endpoint::Tcp(a.clone()))
        .collect();
    let mut client = PsClient::connect(endpoints.clone(), spec.clone());
    kgnn::ps::coordinator::checkpoint_epoch(
        &mut client,
        Some(&cfg.out_dir),
        0,
        cfg.train.checkpoints_to_keep,
    )?;
    for epoch in 0..cfg.train.epochs {
        coordinator.wait_arrivals(epoch as u32)?;
        kgnn::ps::coordinator::checkpoint_epoch(
            &mut client,
            Some(&cfg.out_dir),
            epoch + 1,
            cfg.train.checkpoints_to_keep,
        )?;
        coordinator.release(epoch as u32);
        println!("epoch {} checkpointed", epoch + 1);
    }
    client.shutdown_all()?;
    stop.store(true, std::sync::atomic::Ordering::SeqCst);
    let _ = barrier_thread.join();
    println!("run complete");
    Ok(())
}

fn cmd_serve_worker(cfg: &RunConfig, worker_id: u64) -> Result<(), KgError> {
    let (graph, _) = load_graph(cfg)?;
    let spec = spec_for(cfg, &graph);
    let samp = cfg.sampler_config();
    let endpoints: Vec<Endpoint> = cfg
        .runtime
        .endpoints
        .iter()
        .map(|a| Endpoint::Tcp(a.clone()))
        .collect();
    let coord_addr = cfg.runtime.coordinator.clone().ok_or_else(|| {
        KgError::config("runtime.coordinator", "tcp transport needs a coordinator")
    })?;
    let mut client = PsClient::connect(endpoints, spec.clone());
    let mut coord = CoordHandle::tcp(coord_addr);
    let stats = worker_loop(
        worker_id,
        cfg.runtime.workers,
        &graph,
        &spec,
        &cfg.train,
        &cfg.encoder,
        &samp,
        &mut client,
        &mut coord,
    )?;
    for (epoch, s) in stats.iter().enumerate() {
        println!(
            "worker {worker_id} epoch {} loss_sum {:.4} pairs {}",
            epoch + 1,
            s.loss_sum,
            s.pairs
        );
    }
    Ok(())
}
