//! Evolve 1-bit connectivity for pendulum swing-up.
//!
//! Trains a small spiking network whose connections are Bernoulli samples;
//! each generation evaluates the population in parallel and nudges the
//! connection probabilities toward higher episode returns.
//!
//!     cargo run --release --example train_pendulum [generations] [population] [seed] [eta]

use evoconn::config::RunConfig;
use evoconn::eval::train;

fn main() -> Result<(), evoconn::Error> {
    let mut args = std::env::args().skip(1);
    let generations: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let population: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(512);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let eta: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.15);

    let dir = std::env::temp_dir().join("evoconn_pendulum");
    std::fs::create_dir_all(&dir)?;

    let mut cfg = RunConfig::default();
    cfg.task.name = "pendulum".into();
    cfg.network.n_neurons = 64;
    cfg.optimizer.population_size = population;
    cfg.optimizer.learning_rate = eta;
    cfg.run.generations = generations;
    cfg.run.seed = seed;
    cfg.run.checkpoint_path = dir.join("pendulum.ecrc");
    cfg.run.metrics_path = dir.join("pendulum.csv");

    println!(
        "pendulum swing-up: {} neurons, population {population}, {generations} generations",
        cfg.network.n_neurons
    );
    let result = train(&cfg)?;
    for row in &result.history {
        if row.generation % 5 == 0 || row.generation + 1 == generations {
            println!(
                "gen {:>4}  mean {:>9.2}  max {:>9.2}  elite {:>9.2}  ({:.2}s)",
                row.generation, row.ret_mean, row.ret_max, row.elite_ret, row.seconds
            );
        }
    }
    println!("checkpoint: {}", cfg.run.checkpoint_path.display());
    println!("evaluate it with: evoconn eval <checkpoint> --task pendulum --episodes 8");
    Ok(())
}
