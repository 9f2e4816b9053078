//! Population evaluation and the generation loop.
//!
//! One generation samples N individuals from the current search
//! distribution, rolls each out for one episode (or scores it directly on
//! a genome-level fitness), and feeds the returns to the update rule.
//! Individuals are always re-derived from `(generation seed, index)`; the
//! engine never holds the whole population in memory, and a gauge tracks
//! how many sampled genomes are simultaneously alive so that contract is
//! observable.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::es::{self, DenseGenome, DenseSynapses};
use crate::network::{Genome, Network, NetworkConfig, NeuronState, Synapses};
use crate::optimizer;
use crate::probability::ProbabilityModel;
use crate::rng;
use crate::tasks::{
    episode_return, pendulum_env, pointmass_env, Environment, MaskMatchFitness, Policy,
};

/// Seed for one generation, derived from the run seed. Every node in a
/// distributed run derives the same value locally.
pub fn generation_seed(run_seed: u64, generation: u64) -> u64 {
    rng::derive(&[run_seed, rng::TAG_GENERATION, generation])
}

/// Episode seed for population member `index`; each individual sees its
/// own episode initialization within a generation.
pub fn episode_seed(gen_seed: u64, index: u64) -> u64 {
    rng::derive(&[gen_seed, rng::TAG_EPISODE, index])
}

/// Episode seed for the extracted / center policy evaluation.
pub fn elite_seed(gen_seed: u64) -> u64 {
    rng::derive(&[gen_seed, rng::TAG_ELITE])
}

/// The search distribution a generation samples from.
#[derive(Clone, Debug)]
pub enum Distribution {
    /// Bernoulli probabilities over boolean connections.
    Connection(ProbabilityModel),
    /// Gaussian perturbations around dense weights.
    Weight {
        center: DenseGenome,
        sigma: f64,
        dale_signs: bool,
    },
}

/// One sampled population member.
#[derive(Clone, Debug)]
pub enum Individual {
    Mask(Genome),
    Weights { genome: DenseGenome, dale_signs: bool },
}

impl Distribution {
    pub fn individual(&self, gen_seed: u64, index: u64) -> Individual {
        match self {
            Distribution::Connection(model) => {
                Individual::Mask(model.sample_genome(gen_seed, index))
            }
            Distribution::Weight { center, sigma, dale_signs } => Individual::Weights {
                genome: es::perturb(center, *sigma, gen_seed, index),
                dale_signs: *dale_signs,
            },
        }
    }

    /// The deployment candidate: thresholded mask or the current center.
    pub fn elite(&self) -> Individual {
        match self {
            Distribution::Connection(model) => Individual::Mask(model.extract()),
            Distribution::Weight { center, dale_signs, .. } => Individual::Weights {
                genome: center.clone(),
                dale_signs: *dale_signs,
            },
        }
    }
}

/// Counts sampled genomes that are currently alive, and the high-water
/// mark, so tests can assert evaluation never materializes the population.
#[derive(Debug, Default)]
pub struct GenomeGauge {
    live: AtomicUsize,
    peak: AtomicUsize,
}

pub struct GenomeTicket<'a>(&'a GenomeGauge);

impl GenomeGauge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ticket(&self) -> GenomeTicket<'_> {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        GenomeTicket(self)
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.peak.store(self.live(), Ordering::SeqCst);
    }
}

impl Drop for GenomeTicket<'_> {
    fn drop(&mut self) {
        self.0.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// What a population member is scored on.
pub enum Task {
    Pendulum,
    PointMass,
    MaskMatch(MaskMatchFitness),
}

impl Task {
    /// Build the task named in the config. The hidden mask-match target is
    /// sampled at probability 0.5 from the target seed.
    pub fn from_config(cfg: &RunConfig, net: &NetworkConfig) -> Result<Task> {
        match cfg.task.name.as_str() {
            "pendulum" => Ok(Task::Pendulum),
            "pointmass" => Ok(Task::PointMass),
            "mask_match" => {
                let model = ProbabilityModel::uniform(net, cfg.optimizer.epsilon);
                let target_key = rng::derive(&[cfg.task.target_seed, rng::TAG_TARGET]);
                Ok(Task::MaskMatch(MaskMatchFitness::new(
                    model.sample_genome(target_key, 0),
                )))
            }
            other => Err(Error::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Pendulum => "pendulum",
            Task::PointMass => "pointmass",
            Task::MaskMatch(_) => "mask_match",
        }
    }

    pub fn make_env(&self) -> Option<Box<dyn Environment>> {
        match self {
            Task::Pendulum => Some(Box::new(pendulum_env())),
            Task::PointMass => Some(Box::new(pointmass_env())),
            Task::MaskMatch(_) => None,
        }
    }
}

/// A spiking policy: network plus carried neuron state.
struct SpikingPolicy<'a, S: Synapses> {
    net: Network<'a, S>,
    state: NeuronState,
}

impl<'a, S: Synapses> SpikingPolicy<'a, S> {
    fn new(net: Network<'a, S>) -> Self {
        let state = net.initial_state();
        SpikingPolicy { net, state }
    }
}

impl<S: Synapses> Policy for SpikingPolicy<'_, S> {
    fn reset(&mut self) {
        self.state = self.net.initial_state();
    }

    fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        let (next, action) = self.net.control_step(&self.state, obs)?;
        self.state = next;
        Ok(action)
    }
}

/// Scores individuals against one task under one network configuration.
pub struct Evaluator {
    pub net: NetworkConfig,
    pub task: Task,
    pub gauge: GenomeGauge,
}

impl Evaluator {
    pub fn new(net: NetworkConfig, task: Task) -> Self {
        Evaluator {
            net,
            task,
            gauge: GenomeGauge::new(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let net = cfg.network_config()?;
        let task = Task::from_config(cfg, &net)?;
        Ok(Evaluator::new(net, task))
    }

    /// Score one individual on one episode.
    pub fn evaluate_individual(&self, individual: &Individual, episode_seed: u64) -> Result<f32> {
        match (&self.task, individual) {
            (Task::MaskMatch(fitness), Individual::Mask(genome)) => {
                Ok(fitness.score(genome)? as f32)
            }
            (Task::MaskMatch(_), Individual::Weights { .. }) => Err(Error::InvalidConfig(
                "mask_match scores boolean genomes; use the ec algorithm".into(),
            )),
            (task, individual) => {
                let mut env = task.make_env().expect("environment-backed task");
                let bounds = env.spec().action_bounds();
                let ret = match individual {
                    Individual::Mask(genome) => {
                        let net = Network::new(genome, &self.net, &bounds)?;
                        let mut policy = SpikingPolicy::new(net);
                        episode_return(env.as_mut(), &mut policy, episode_seed)?
                    }
                    Individual::Weights { genome, dale_signs } => {
                        let syn = DenseSynapses { genome, dale_signs: *dale_signs };
                        let net = Network::new(&syn, &self.net, &bounds)?;
                        let mut policy = SpikingPolicy::new(net);
                        episode_return(env.as_mut(), &mut policy, episode_seed)?
                    }
                };
                Ok(ret as f32)
            }
        }
    }

    /// Returns for population indices `[lo, hi)`. Parallel over indices;
    /// the result depends only on `(distribution, gen_seed, lo, hi)`, not
    /// on thread count or scheduling.
    pub fn evaluate_range(
        &self,
        dist: &Distribution,
        gen_seed: u64,
        lo: u64,
        hi: u64,
    ) -> Result<Vec<f32>> {
        (lo..hi)
            .into_par_iter()
            .map(|i| {
                let _ticket = self.gauge.ticket();
                let individual = dist.individual(gen_seed, i);
                self.evaluate_individual(&individual, episode_seed(gen_seed, i))
                    .map_err(|e| e.at_index(i))
            })
            .collect()
    }

    /// Returns for a full population of size `n`.
    pub fn evaluate_population(
        &self,
        dist: &Distribution,
        gen_seed: u64,
        n: u64,
    ) -> Result<Vec<f32>> {
        self.evaluate_range(dist, gen_seed, 0, n)
    }

    /// Return of the deployment candidate for this generation.
    pub fn evaluate_elite(&self, dist: &Distribution, gen_seed: u64) -> Result<f32> {
        self.evaluate_individual(&dist.elite(), elite_seed(gen_seed))
    }
}

/// Per-generation metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationStats {
    pub generation: u64,
    pub ret_mean: f64,
    pub ret_max: f64,
    pub ret_min: f64,
    pub ret_std: f64,
    pub elite_ret: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "gen,ret_mean,ret_max,ret_min,ret_std,elite_ret,seconds";

impl GenerationStats {
    fn from_returns(generation: u64, returns: &[f32], elite_ret: f64, seconds: f64) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().map(|&r| r as f64).sum::<f64>() / n;
        let var = returns
            .iter()
            .map(|&r| (r as f64 - mean) * (r as f64 - mean))
            .sum::<f64>()
            / n;
        let max = returns.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let min = returns.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        GenerationStats {
            generation,
            ret_mean: mean,
            ret_max: max,
            ret_min: min,
            ret_std: var.sqrt(),
            elite_ret,
            seconds,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.generation,
            self.ret_mean,
            self.ret_max,
            self.ret_min,
            self.ret_std,
            self.elite_ret,
            self.seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub distribution: Distribution,
    pub history: Vec<GenerationStats>,
    /// Best elite return seen so far (a best-so-far register, so it is
    /// non-decreasing across generations).
    pub best_elite: f64,
}

/// Apply one generation's update to the distribution. Exactly this
/// function runs on every node of a distributed run, which is what keeps
/// replicas byte-identical.
pub fn apply_update(
    dist: &Distribution,
    cfg: &RunConfig,
    gen_seed: u64,
    returns: &[f32],
) -> Result<Distribution> {
    match dist {
        Distribution::Connection(model) => {
            let next = optimizer::ec_update(
                model,
                gen_seed,
                returns,
                cfg.optimizer.learning_rate,
                cfg.shaping()?,
            )?;
            Ok(Distribution::Connection(next))
        }
        Distribution::Weight { center, sigma, dale_signs } => {
            let next = es::es_update(
                center,
                gen_seed,
                returns,
                cfg.optimizer.learning_rate,
                *sigma,
                cfg.optimizer.weight_decay,
            )?;
            Ok(Distribution::Weight {
                center: next,
                sigma: *sigma,
                dale_signs: *dale_signs,
            })
        }
    }
}

/// Initial distribution for a run: maximum-entropy probabilities for the
/// connection search, a zero center for the dense baseline.
pub fn initial_distribution(cfg: &RunConfig, net: &NetworkConfig) -> Result<Distribution> {
    match cfg.optimizer.algorithm.as_str() {
        "ec" => Ok(Distribution::Connection(ProbabilityModel::uniform(
            net,
            cfg.optimizer.epsilon,
        ))),
        "es" => Ok(Distribution::Weight {
            center: DenseGenome::zeros(net),
            sigma: cfg.optimizer.sigma,
            dale_signs: cfg.optimizer.dale_separation,
        }),
        other => Err(Error::InvalidConfig(format!("unknown algorithm '{other}'"))),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn write_checkpoint(cfg: &RunConfig, net: &NetworkConfig, dist: &Distribution) -> Result<()> {
    ensure_parent(&cfg.run.checkpoint_path)?;
    match dist {
        Distribution::Connection(model) => {
            crate::io::save_checkpoint(&cfg.run.checkpoint_path, net, model)
        }
        Distribution::Weight { center, .. } => {
            crate::io::save_dense_checkpoint(&cfg.run.checkpoint_path, net, center)
        }
    }
}

/// The generation loop, generic over where returns come from. Local
/// training passes an in-process evaluator; the coordinator passes the
/// distributed gather. Metrics go to `run.metrics_path` (one CSV row per
/// generation), checkpoints to `run.checkpoint_path`.
pub fn train_with<F>(cfg: &RunConfig, mut collect_returns: F) -> Result<TrainResult>
where
    F: FnMut(u64, u64, &Distribution) -> Result<Vec<f32>>,
{
    cfg.validate()?;
    let net = cfg.network_config()?;
    let evaluator = Evaluator::from_config(cfg)?;
    let mut dist = initial_distribution(cfg, &net)?;

    ensure_parent(&cfg.run.metrics_path)?;
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&cfg.run.metrics_path).map_err(|source| Error::File {
            path: cfg.run.metrics_path.clone(),
            source,
        })?,
    );
    writeln!(metrics, "{METRICS_HEADER}")?;

    let mut history = Vec::with_capacity(cfg.run.generations as usize);
    let mut best_elite = f64::NEG_INFINITY;

    for gen in 0..cfg.run.generations {
        let started = Instant::now();
        let gen_seed = generation_seed(cfg.run.seed, gen);
        let returns = collect_returns(gen, gen_seed, &dist)?;
        if returns.len() != cfg.optimizer.population_size {
            return Err(Error::Protocol(format!(
                "generation {gen} returned {} values for population {}",
                returns.len(),
                cfg.optimizer.population_size
            )));
        }
        dist = apply_update(&dist, cfg, gen_seed, &returns)?;
        let elite = evaluator.evaluate_elite(&dist, gen_seed)? as f64;
        best_elite = best_elite.max(elite);

        let stats =
            GenerationStats::from_returns(gen, &returns, elite, started.elapsed().as_secs_f64());
        writeln!(metrics, "{}", stats.csv_row())?;
        metrics.flush()?;
        history.push(stats);

        if cfg.run.checkpoint_every > 0 && (gen + 1) % cfg.run.checkpoint_every == 0 {
            write_checkpoint(cfg, &net, &dist)?;
        }
    }

    write_checkpoint(cfg, &net, &dist)?;
    Ok(TrainResult {
        distribution: dist,
        history,
        best_elite,
    })
}

/// Single-process training: sample, evaluate and update locally.
pub fn train(cfg: &RunConfig) -> Result<TrainResult> {
    let evaluator = Evaluator::from_config(cfg)?;
    let n = cfg.optimizer.population_size as u64;
    train_with(cfg, |_gen, gen_seed, dist| {
        evaluator.evaluate_population(dist, gen_seed, n)
    })
}
