//! The dense-weight evolution-strategies baseline on the point-mass task.
//!
//! Same network, same tasks, same evaluation plumbing as the connection
//! search; only the parameterization differs (real weights perturbed with
//! mirrored Gaussian noise instead of Bernoulli connection probabilities).
//!
//!     cargo run --release --example es_baseline

use evoconn::config::RunConfig;
use evoconn::eval::train;

fn main() -> Result<(), evoconn::Error> {
    let dir = std::env::temp_dir().join("evoconn_es_baseline");
    std::fs::create_dir_all(&dir)?;

    let mut cfg = RunConfig::default();
    cfg.task.name = "pointmass".into();
    cfg.network.n_neurons = 32;
    cfg.optimizer.algorithm = "es".into();
    cfg.optimizer.population_size = 128;
    cfg.optimizer.learning_rate = 0.15;
    cfg.optimizer.sigma = 0.3;
    cfg.optimizer.weight_decay = 0.1;
    cfg.run.generations = 20;
    cfg.run.checkpoint_path = dir.join("es_center.ecrc");
    cfg.run.metrics_path = dir.join("es.csv");

    let result = train(&cfg)?;
    for row in result.history.iter().step_by(2) {
        println!(
            "gen {:>3}  mean {:>8.3}  max {:>8.3}  center {:>8.3}",
            row.generation, row.ret_mean, row.ret_max, row.elite_ret
        );
    }
    println!("center checkpoint: {}", cfg.run.checkpoint_path.display());
    Ok(())
}
