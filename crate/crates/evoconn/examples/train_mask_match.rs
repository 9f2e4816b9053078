//! Recover a hidden 64-bit connection mask from bit-match fitness alone.
//!
//! The fitness of a sampled genome is the number of connection bits that
//! agree with a hidden target. The probability model starts at 0.5
//! everywhere and is pushed by the population update until thresholding
//! reproduces the target exactly.
//!
//!     cargo run --release --example train_mask_match

use evoconn::config::RunConfig;
use evoconn::eval::{train, Distribution};

fn main() -> Result<(), evoconn::Error> {
    let dir = std::env::temp_dir().join("evoconn_mask_match");
    std::fs::create_dir_all(&dir)?;

    let mut cfg = RunConfig::default();
    cfg.task.name = "mask_match".into();
    cfg.task.target_seed = 7;
    // 4 neurons, 8 inputs, 4 outputs with self-connections allowed:
    // 32 + 16 + 16 = 64 evolvable bits
    cfg.task.obs_dim = 8;
    cfg.task.act_dim = 4;
    cfg.network.n_neurons = 4;
    cfg.network.allow_self_connections = true;
    cfg.optimizer.population_size = 256;
    cfg.run.generations = 300;
    cfg.run.seed = 1;
    cfg.run.checkpoint_path = dir.join("mask_match.ecrc");
    cfg.run.metrics_path = dir.join("mask_match.csv");

    let result = train(&cfg)?;

    for row in result.history.iter().step_by(20) {
        println!(
            "gen {:>3}  mean {:6.2}  max {:6.2}  elite {:6.2}",
            row.generation, row.ret_mean, row.ret_max, row.elite_ret
        );
    }

    let Distribution::Connection(model) = &result.distribution else {
        unreachable!("ec run");
    };
    let evaluator = evoconn::eval::Evaluator::from_config(&cfg)?;
    let solved = match &evaluator.task {
        evoconn::eval::Task::MaskMatch(fitness) => &model.extract() == fitness.target(),
        _ => false,
    };
    println!("best elite return: {}", result.best_elite);
    println!("target recovered: {solved}");
    println!("metrics: {}", cfg.run.metrics_path.display());
    Ok(())
}
