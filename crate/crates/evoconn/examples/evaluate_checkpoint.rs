//! Persistence round trip: train briefly, save a checkpoint, reload it,
//! extract the boolean mask, and roll the extracted policy out.
//!
//!     cargo run --release --example evaluate_checkpoint

use evoconn::config::RunConfig;
use evoconn::eval::{episode_seed, train, Evaluator, Individual, Task};
use evoconn::io::{load_checkpoint, load_mask, save_mask};

fn main() -> Result<(), evoconn::Error> {
    let dir = std::env::temp_dir().join("evoconn_eval_demo");
    std::fs::create_dir_all(&dir)?;

    let mut cfg = RunConfig::default();
    cfg.task.name = "pointmass".into();
    cfg.network.n_neurons = 32;
    cfg.optimizer.population_size = 128;
    cfg.run.generations = 15;
    cfg.run.checkpoint_path = dir.join("pointmass.ecrc");
    cfg.run.metrics_path = dir.join("pointmass.csv");
    train(&cfg)?;

    // reload and threshold into the deployment mask
    let (net, model) = load_checkpoint(&cfg.run.checkpoint_path)?;
    let genome = model.extract();
    let mask_path = dir.join("pointmass.ecmk");
    save_mask(&mask_path, &genome)?;
    let reloaded = load_mask(&mask_path)?;
    assert_eq!(reloaded, genome);
    println!(
        "mask {} holds {} connections over {} possible",
        mask_path.display(),
        genome.w_in.count_ones() + genome.w_rec.count_ones() + genome.w_out.count_ones(),
        genome.total_bits()
    );

    // roll the extracted policy out over a few fresh episodes
    let evaluator = Evaluator::new(net, Task::PointMass);
    let individual = Individual::Mask(reloaded);
    let mut total = 0.0;
    let episodes = 8;
    for e in 0..episodes {
        let ret = evaluator.evaluate_individual(&individual, episode_seed(123, e))?;
        println!("episode {e}: return {ret:.3}");
        total += ret as f64;
    }
    println!("mean return: {:.3}", total / episodes as f64);
    Ok(())
}
