use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use evoconn::config::{load_config, RunConfig};
use evoconn::dist::{coordinator_run, worker_run, CoordinatorOptions, WorkerOptions};
use evoconn::error::Error;
use evoconn::eval::{episode_seed, train, Evaluator, Individual};
use evoconn::io::{load_any_checkpoint, load_checkpoint, save_mask, CheckpointPayload};

#[derive(Parser)]
#[command(
    name = "evoconn",
    about = "Evolve 1-bit connectivity for recurrent spiking policies",
    version
)]
struct Cli {
    /// Override the run seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Evaluation threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the metrics CSV path from the config file.
    #[arg(long, global = true, value_name = "PATH")]
    metrics_out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training loop from a config file.
    Train { config: PathBuf },

    /// Roll out the deployment policy of a checkpoint and print the mean
    /// return.
    Eval {
        checkpoint: PathBuf,
        /// Task to roll out on: pendulum or pointmass.
        #[arg(long)]
        task: String,
        /// Episodes to average over.
        #[arg(long, default_value_t = 8)]
        episodes: u64,
    },

    /// Threshold a probability checkpoint into a boolean mask file.
    Extract {
        checkpoint: PathBuf,
        mask_out: PathBuf,
    },

    /// Compare packed-integer and dense-real kernel throughput.
    Bench {
        #[arg(long, default_value_t = 256)]
        neurons: usize,
        /// 0 picks an iteration count automatically.
        #[arg(long, default_value_t = 0)]
        iters: usize,
    },

    /// Drive a distributed run; workers connect to the listen address.
    Coordinator {
        config: PathBuf,
        #[arg(long, default_value = "0.0.0.0:7171")]
        listen: String,
    },

    /// Evaluate assignments for a coordinator.
    Worker {
        #[arg(long)]
        connect: String,
    },
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.run.threads = threads;
    }
    if let Some(path) = &cli.metrics_out {
        cfg.run.metrics_path = path.clone();
    }
}

fn install_pool(threads: usize) -> Result<(), Error> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train { config } => {
            let mut cfg = load_config(config)?;
            apply_overrides(&mut cfg, &cli);
            install_pool(cfg.run.threads)?;
            let result = train(&cfg)?;
            let gens = result.history.len();
            println!("generations={gens}");
            if let Some(last) = result.history.last() {
                println!("final_mean_return={}", last.ret_mean);
            }
            println!("best_elite_return={}", result.best_elite);
            println!("checkpoint={}", cfg.run.checkpoint_path.display());
            println!("metrics={}", cfg.run.metrics_path.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            task,
            episodes,
        } => {
            install_pool(cli.threads.unwrap_or(0))?;
            let (net, payload) = load_any_checkpoint(checkpoint)?;
            let mut cfg = RunConfig::default();
            cfg.task.name = task.clone();
            let individual = match payload {
                CheckpointPayload::Connection(model) => Individual::Mask(model.extract()),
                CheckpointPayload::Weights(center) => Individual::Weights {
                    genome: center,
                    dale_signs: cfg.optimizer.dale_separation,
                },
            };
            let task_impl = evoconn::eval::Task::from_config(&cfg, &net)?;
            let spec = task_impl
                .make_env()
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("task '{task}' has no environment to roll out"))
                })?
                .spec()
                .clone();
            if spec.obs_dim != net.obs_dim || spec.act_dim != net.act_dim {
                return Err(Error::DimensionMismatch(format!(
                    "checkpoint was trained for {}x{} I/O, task '{task}' wants {}x{}",
                    net.obs_dim, net.act_dim, spec.obs_dim, spec.act_dim
                )));
            }
            let evaluator = Evaluator::new(net, task_impl);
            let seed = cli.seed.unwrap_or(0);
            let episodes = (*episodes).max(1);
            let mut total = 0.0;
            for e in 0..episodes {
                let ret = evaluator.evaluate_individual(&individual, episode_seed(seed, e))?;
                println!("episode={e} return={ret}");
                total += ret as f64;
            }
            println!("mean_return={}", total / episodes as f64);
            Ok(())
        }
        Command::Extract {
            checkpoint,
            mask_out,
        } => {
            let (_, model) = load_checkpoint(checkpoint)?;
            let genome = model.extract();
            save_mask(mask_out, &genome)?;
            println!(
                "mask={} connections={}",
                mask_out.display(),
                genome.w_in.count_ones() + genome.w_rec.count_ones() + genome.w_out.count_ones()
            );
            Ok(())
        }
        Command::Bench { neurons, iters } => {
            let report = evoconn::bench::kernel_bench(*neurons, *iters, cli.seed.unwrap_or(0));
            println!("neurons={} iters={}", report.neurons, report.iters);
            println!(
                "packed_ops_per_sec={:.3e} ({:.4}s)",
                report.packed_ops_per_sec, report.packed_secs
            );
            println!(
                "dense_ops_per_sec={:.3e} ({:.4}s)",
                report.dense_ops_per_sec, report.dense_secs
            );
            println!("ratio={:.2}", report.ratio);
            Ok(())
        }
        Command::Coordinator { config, listen } => {
            let mut cfg = load_config(config)?;
            apply_overrides(&mut cfg, &cli);
            install_pool(cfg.run.threads)?;
            let listener = std::net::TcpListener::bind(listen).map_err(|e| {
                Error::Protocol(format!("cannot listen on {listen}: {e}"))
            })?;
            eprintln!("listening on {}", listener.local_addr()?);
            let report = coordinator_run(&cfg, listener, CoordinatorOptions::default())?;
            if let Some(last) = report.train.history.last() {
                println!("final_mean_return={}", last.ret_mean);
            }
            println!("best_elite_return={}", report.train.best_elite);
            println!("checkpoint={}", cfg.run.checkpoint_path.display());
            Ok(())
        }
        Command::Worker { connect } => {
            install_pool(cli.threads.unwrap_or(0))?;
            worker_run(connect, WorkerOptions::default())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    // 0 success, 1 usage error, 2 config error, 3 runtime error
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version through the error path too
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
