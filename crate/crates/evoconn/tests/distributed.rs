//! Coordinator/worker integration tests over TCP loopback, including the
//! fault-injection and re-sync paths and a scripted-peer check of the
//! stale-broadcast rule.

use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use evoconn::config::RunConfig;
use evoconn::dist::{
    coordinator_run, worker_run, CoordinatorOptions, CoordinatorReport, Direction, WorkerOptions,
};
use evoconn::eval::{apply_update, generation_seed, initial_distribution, train, Evaluator};
use evoconn::protocol::{recv_message, send_message, Message, PROTOCOL_VERSION};

fn mask_config(dir: &std::path::Path, tag: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task.name = "mask_match".into();
    cfg.task.obs_dim = 16;
    cfg.task.act_dim = 16;
    cfg.task.target_seed = 3;
    cfg.network.n_neurons = 16;
    cfg.network.allow_self_connections = true;
    cfg.optimizer.population_size = 64;
    cfg.run.generations = 10;
    cfg.run.seed = 21;
    cfg.run.checkpoint_path = dir.join(format!("{tag}.ecrc"));
    cfg.run.metrics_path = dir.join(format!("{tag}.csv"));
    cfg
}

fn options() -> CoordinatorOptions {
    CoordinatorOptions {
        worker_wait: Duration::from_secs(30),
    }
}

fn spawn_worker(addr: String, id: u64) -> std::thread::JoinHandle<evoconn::Result<()>> {
    std::thread::spawn(move || {
        worker_run(
            &addr,
            WorkerOptions {
                worker_id: id,
                ..WorkerOptions::default()
            },
        )
    })
}

fn run_distributed(
    cfg: &RunConfig,
    workers: usize,
) -> (CoordinatorReport, Vec<evoconn::Result<()>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handles: Vec<_> = (0..workers)
        .map(|k| spawn_worker(addr.clone(), k as u64))
        .collect();
    let report = coordinator_run(cfg, listener, options()).unwrap();
    let results = handles.into_iter().map(|h| h.join().unwrap()).collect();
    (report, results)
}

#[test]
fn single_worker_matches_local_train() {
    let dir = tempfile::tempdir().unwrap();
    let local = mask_config(dir.path(), "local");
    train(&local).unwrap();

    let dist = mask_config(dir.path(), "dist");
    let (_report, results) = run_distributed(&dist, 1);
    for r in results {
        r.unwrap();
    }

    assert_eq!(
        std::fs::read(&local.run.checkpoint_path).unwrap(),
        std::fs::read(&dist.run.checkpoint_path).unwrap()
    );
}

#[test]
fn worker_killed_mid_generation_does_not_change_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let local = mask_config(dir.path(), "local");
    train(&local).unwrap();

    let dist = mask_config(dir.path(), "dist");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();

    // A saboteur that completes the handshake, accepts one assignment and
    // drops the connection without answering.
    let saboteur = {
        let addr = addr.clone();
        std::thread::spawn(move || {
            let stream = TcpStream::connect(&addr).unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut writer = stream;
            send_message(
                &mut writer,
                &Message::Hello {
                    worker_id: 666,
                    protocol_version: PROTOCOL_VERSION,
                    next_gen: 0,
                },
            )
            .unwrap();
            loop {
                match recv_message(&mut reader).unwrap() {
                    Some(Message::Assign { .. }) => break, // vanish mid-generation
                    Some(_) => continue,
                    None => break,
                }
            }
        })
    };

    let good = spawn_worker(addr, 1);
    let report = coordinator_run(&dist, listener, options()).unwrap();
    saboteur.join().unwrap();
    good.join().unwrap().unwrap();

    assert_eq!(report.train.history.len(), 10);
    assert_eq!(
        std::fs::read(&local.run.checkpoint_path).unwrap(),
        std::fs::read(&dist.run.checkpoint_path).unwrap()
    );
}

/// A scripted worker that behaves correctly but disconnects after applying
/// `quit_after` broadcasts, then reconnects announcing its progress; the
/// coordinator must replay only the missed tail.
#[test]
fn restarted_worker_resyncs_from_its_last_generation() {
    let dir = tempfile::tempdir().unwrap();
    let local = mask_config(dir.path(), "local");
    train(&local).unwrap();

    let dist = mask_config(dir.path(), "dist");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();

    let scripted = {
        let addr = addr.clone();
        let cfg = dist.clone();
        std::thread::spawn(move || -> evoconn::Result<()> {
            let evaluator = Evaluator::from_config(&cfg)?;
            let net = cfg.network_config()?;
            let mut dist_state = initial_distribution(&cfg, &net)?;
            let mut applied: u64 = 0;
            let quit_after = 4u64;
            let mut first_session = true;

            loop {
                let stream = TcpStream::connect(&addr)?;
                let mut reader = BufReader::new(stream.try_clone()?);
                let mut writer = stream;
                send_message(
                    &mut writer,
                    &Message::Hello {
                        worker_id: 7,
                        protocol_version: PROTOCOL_VERSION,
                        next_gen: applied,
                    },
                )?;
                match recv_message(&mut reader)? {
                    Some(Message::Config { .. }) => {}
                    other => panic!("expected config, got {other:?}"),
                }
                loop {
                    match recv_message(&mut reader)? {
                        Some(Message::Assign {
                            gen,
                            gen_seed,
                            index_lo,
                            index_hi,
                        }) => {
                            assert_eq!(gen, applied, "assignment before replica caught up");
                            let values =
                                evaluator.evaluate_range(&dist_state, gen_seed, index_lo, index_hi)?;
                            send_message(
                                &mut writer,
                                &Message::Returns {
                                    gen,
                                    index_lo,
                                    values,
                                },
                            )?;
                        }
                        Some(Message::AllReturns { gen, values }) => {
                            assert_eq!(gen, applied, "replay must be dense and in order");
                            let gen_seed = generation_seed(cfg.run.seed, gen);
                            dist_state = apply_update(&dist_state, &cfg, gen_seed, &values)?;
                            applied += 1;
                            if first_session && applied == quit_after {
                                first_session = false;
                                // drop the connection between generations
                                break;
                            }
                        }
                        Some(Message::Shutdown) => return Ok(()),
                        Some(other) => panic!("unexpected {other:?}"),
                        None => panic!("coordinator closed unexpectedly"),
                    }
                }
            }
        })
    };

    let report = coordinator_run(&dist, listener, options()).unwrap();
    scripted.join().unwrap().unwrap();

    assert_eq!(report.train.history.len(), 10);
    assert_eq!(
        std::fs::read(&local.run.checkpoint_path).unwrap(),
        std::fs::read(&dist.run.checkpoint_path).unwrap()
    );
}

#[test]
fn version_mismatch_is_refused_and_worker_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mask_config(dir.path(), "ver");
    cfg.run.generations = 1;
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();

    // stale-version peer: must be refused
    let stale = {
        let addr = addr.clone();
        std::thread::spawn(move || -> Result<(), String> {
            let stream = TcpStream::connect(&addr).map_err(|e| e.to_string())?;
            let mut reader = BufReader::new(stream.try_clone().map_err(|e| e.to_string())?);
            let mut writer = stream;
            send_message(
                &mut writer,
                &Message::Hello {
                    worker_id: 9,
                    protocol_version: PROTOCOL_VERSION + 1,
                    next_gen: 0,
                },
            )
            .map_err(|e| e.to_string())?;
            match recv_message(&mut reader) {
                Ok(Some(Message::Config { config_toml, .. })) if config_toml.is_empty() => Ok(()),
                Ok(None) => Ok(()), // plain close is also a refusal
                other => Err(format!("expected refusal, got {other:?}")),
            }
        })
    };

    let good = spawn_worker(addr, 2);
    let report = coordinator_run(&cfg, listener, options()).unwrap();
    stale.join().unwrap().unwrap();
    good.join().unwrap().unwrap();
    assert_eq!(report.train.history.len(), 1);
}

#[test]
fn worker_ignores_stale_broadcasts() {
    // Scripted coordinator: sends generation 0 twice (the second is stale
    // and must be ignored), then generation 1. If the worker wrongly
    // applied the stale broadcast its replica would diverge and its
    // generation-1 returns would differ from the reference.
    let dir = tempfile::tempdir().unwrap();
    let cfg = mask_config(dir.path(), "stale");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();

    let worker = spawn_worker(addr, 3);

    let (stream, _) = listener.accept().unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;

    match recv_message(&mut reader).unwrap() {
        Some(Message::Hello { next_gen: 0, .. }) => {}
        other => panic!("expected hello, got {other:?}"),
    }
    send_message(
        &mut writer,
        &Message::Config {
            protocol_version: PROTOCOL_VERSION,
            config_toml: cfg.to_toml(),
        },
    )
    .unwrap();

    // reference replica to compute expected values
    let evaluator = Evaluator::from_config(&cfg).unwrap();
    let net = cfg.network_config().unwrap();
    let mut reference = initial_distribution(&cfg, &net).unwrap();
    let n = cfg.optimizer.population_size as u64;

    // generation 0
    let seed0 = generation_seed(cfg.run.seed, 0);
    send_message(
        &mut writer,
        &Message::Assign {
            gen: 0,
            gen_seed: seed0,
            index_lo: 0,
            index_hi: n,
        },
    )
    .unwrap();
    let values0 = match recv_message(&mut reader).unwrap() {
        Some(Message::Returns { gen: 0, index_lo: 0, values }) => values,
        other => panic!("expected returns, got {other:?}"),
    };
    let expected0 = evaluator.evaluate_range(&reference, seed0, 0, n).unwrap();
    assert_eq!(values0, expected0);

    send_message(&mut writer, &Message::AllReturns { gen: 0, values: values0.clone() }).unwrap();
    reference = apply_update(&reference, &cfg, seed0, &values0).unwrap();

    // stale duplicate of generation 0: must be ignored, not applied
    send_message(&mut writer, &Message::AllReturns { gen: 0, values: values0.clone() }).unwrap();

    // generation 1 proves the replica was not double-updated
    let seed1 = generation_seed(cfg.run.seed, 1);
    send_message(
        &mut writer,
        &Message::Assign {
            gen: 1,
            gen_seed: seed1,
            index_lo: 0,
            index_hi: n,
        },
    )
    .unwrap();
    let values1 = match recv_message(&mut reader).unwrap() {
        Some(Message::Returns { gen: 1, index_lo: 0, values }) => values,
        other => panic!("expected returns, got {other:?}"),
    };
    let expected1 = evaluator.evaluate_range(&reference, seed1, 0, n).unwrap();
    assert_eq!(values1, expected1);

    send_message(&mut writer, &Message::Shutdown).unwrap();
    worker.join().unwrap().unwrap();
}

#[test]
fn traffic_is_scalar_only_and_linear_in_population() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mask_config(dir.path(), "traffic");
    let (report, results) = run_distributed(&cfg, 2);
    for r in results {
        r.unwrap();
    }

    let n = cfg.optimizer.population_size;
    let generations = cfg.run.generations;
    // every matrix of this model dwarfs any legal frame
    let model_bytes = 3 * 16 * 16 * 4;
    let per_gen_budget = 64 * n + 4096;

    let mut by_gen = vec![0usize; generations as usize];
    for frame in &report.traffic {
        assert!(
            (1..=6).contains(&frame.tag),
            "unknown tag {} on the wire",
            frame.tag
        );
        assert!(
            frame.wire_len < model_bytes,
            "frame of {} bytes could hold a {}-byte matrix",
            frame.wire_len,
            model_bytes
        );
        if frame.tag != 2 {
            // everything except the config handshake counts toward the
            // per-generation scalar budget
            by_gen[frame.generation as usize] += frame.wire_len;
        }
    }
    for (gen, bytes) in by_gen.iter().enumerate() {
        assert!(
            *bytes <= per_gen_budget,
            "generation {gen} moved {bytes} bytes, budget {per_gen_budget}"
        );
    }

    // and the inbound/outbound split exists at all
    assert!(report.traffic.iter().any(|f| f.direction == Direction::Inbound));
    assert!(report.traffic.iter().any(|f| f.direction == Direction::Outbound));
}
