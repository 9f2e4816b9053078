//! Coordinator plus two workers over TCP loopback, compared against the
//! same run executed in a single process.
//!
//! Only seeds, index ranges and scalar returns cross the wire; every node
//! applies the identical update to its own model replica, so the final
//! checkpoints are byte-identical.
//!
//!     cargo run --release --example distributed_loopback

use std::net::TcpListener;

use evoconn::config::RunConfig;
use evoconn::dist::{coordinator_run, worker_run, CoordinatorOptions, WorkerOptions};
use evoconn::eval::train;

fn config(dir: &std::path::Path, tag: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task.name = "mask_match".into();
    cfg.task.obs_dim = 16;
    cfg.task.act_dim = 16;
    cfg.network.n_neurons = 16;
    cfg.network.allow_self_connections = true;
    cfg.optimizer.population_size = 64;
    cfg.run.generations = 10;
    cfg.run.seed = 5;
    cfg.run.checkpoint_path = dir.join(format!("{tag}.ecrc"));
    cfg.run.metrics_path = dir.join(format!("{tag}.csv"));
    cfg
}

fn main() -> Result<(), evoconn::Error> {
    let dir = std::env::temp_dir().join("evoconn_distributed");
    std::fs::create_dir_all(&dir)?;

    let local_cfg = config(&dir, "local");
    train(&local_cfg)?;

    let dist_cfg = config(&dir, "distributed");
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();

    let workers: Vec<_> = (0..2)
        .map(|k| {
            let addr = addr.clone();
            std::thread::spawn(move || {
                let opts = WorkerOptions {
                    worker_id: k,
                    ..WorkerOptions::default()
                };
                worker_run(&addr, opts)
            })
        })
        .collect();

    let report = coordinator_run(&dist_cfg, listener, CoordinatorOptions::default())?;
    for w in workers {
        w.join().expect("worker thread")?;
    }

    let local = std::fs::read(&local_cfg.run.checkpoint_path)?;
    let distributed = std::fs::read(&dist_cfg.run.checkpoint_path)?;
    println!("generations: {}", report.train.history.len());
    println!("frames on the wire: {}", report.traffic.len());
    let bytes: usize = report.traffic.iter().map(|f| f.wire_len).sum();
    println!("bytes on the wire: {bytes}");
    println!(
        "checkpoints byte-identical: {}",
        if local == distributed { "yes" } else { "NO" }
    );
    Ok(())
}
