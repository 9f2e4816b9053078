//! Run configuration: one structured text file with `key = value` entries
//! in `[network]`, `[optimizer]`, `[task]` and `[run]` sections, so a run
//! is reproducible from a single artifact. Unknown keys are rejected with
//! a list of the offenders; missing keys take the documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::optimizer::ReturnShaping;

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub n_neurons: usize,
    pub excitatory_ratio: f64,
    pub dt_ms: f64,
    pub sim_steps_per_control: usize,
    pub tau_syn_ms: f64,
    pub tau_m_ms: f64,
    pub tau_out_ms: f64,
    /// Explicit resistances; when absent they follow the
    /// variance-preserving defaults derived from the sizes above.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_in: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_out: Option<f64>,
    pub allow_self_connections: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            n_neurons: 256,
            excitatory_ratio: 0.5,
            dt_ms: 0.5,
            sim_steps_per_control: 33,
            tau_syn_ms: 5.0,
            tau_m_ms: 10.0,
            tau_out_ms: 10.0,
            r_in: None,
            r_h: None,
            r_out: None,
            allow_self_connections: false,
        }
    }
}

const NETWORK_KEYS: &[&str] = &[
    "n_neurons",
    "excitatory_ratio",
    "dt_ms",
    "sim_steps_per_control",
    "tau_syn_ms",
    "tau_m_ms",
    "tau_out_ms",
    "r_in",
    "r_h",
    "r_out",
    "allow_self_connections",
];

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    /// "ec" evolves connection probabilities; "es" evolves dense weights.
    pub algorithm: String,
    pub population_size: usize,
    pub learning_rate: f64,
    pub epsilon: f32,
    /// raw | centered | centered_rank
    pub shaping: String,
    /// Gaussian noise scale (dense baseline only).
    pub sigma: f64,
    /// Weight decay factor (dense baseline only).
    pub weight_decay: f64,
    /// Keep the excitatory/inhibitory split in the dense baseline.
    pub dale_separation: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            algorithm: "ec".into(),
            population_size: 10240,
            learning_rate: 0.15,
            epsilon: 1e-3,
            shaping: "centered_rank".into(),
            sigma: 0.3,
            weight_decay: 0.1,
            dale_separation: true,
        }
    }
}

const OPTIMIZER_KEYS: &[&str] = &[
    "algorithm",
    "population_size",
    "learning_rate",
    "epsilon",
    "shaping",
    "sigma",
    "weight_decay",
    "dale_separation",
];

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// pendulum | pointmass | mask_match
    pub name: String,
    /// Seed the hidden target mask is derived from (mask_match only).
    pub target_seed: u64,
    /// Genome I/O shape for tasks without an environment (mask_match only).
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            name: "pendulum".into(),
            target_seed: 42,
            obs_dim: 8,
            act_dim: 4,
        }
    }
}

const TASK_KEYS: &[&str] = &["name", "target_seed", "obs_dim", "act_dim"];

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub generations: u64,
    pub seed: u64,
    /// Worker threads for population evaluation; 0 leaves the pool default.
    pub threads: usize,
    /// Write a checkpoint every this many generations; 0 = only at the end.
    pub checkpoint_every: u64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            generations: 100,
            seed: 0,
            threads: 0,
            checkpoint_every: 0,
            checkpoint_path: PathBuf::from("checkpoint.ecrc"),
            metrics_path: PathBuf::from("metrics.csv"),
        }
    }
}

const RUN_KEYS: &[&str] = &[
    "generations",
    "seed",
    "threads",
    "checkpoint_every",
    "checkpoint_path",
    "metrics_path",
];

#[derive(Clone, Debug, PartialEq, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub optimizer: OptimizerSection,
    pub task: TaskSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn shaping(&self) -> Result<ReturnShaping> {
        self.optimizer.shaping.parse()
    }

    /// The fully resolved network description for this run's task: I/O
    /// dimensions come from the task, resistances fall back to the derived
    /// defaults.
    pub fn network_config(&self) -> Result<NetworkConfig> {
        use crate::tasks::Environment as _;
        let (obs_dim, act_dim) = match self.task.name.as_str() {
            "pendulum" => {
                let e = crate::tasks::pendulum_env();
                (e.spec().obs_dim, e.spec().act_dim)
            }
            "pointmass" => {
                let e = crate::tasks::pointmass_env();
                (e.spec().obs_dim, e.spec().act_dim)
            }
            "mask_match" => (self.task.obs_dim, self.task.act_dim),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown task '{other}' (expected pendulum, pointmass or mask_match)"
                )))
            }
        };
        let n = &self.network;
        let mut cfg = NetworkConfig {
            n_neurons: n.n_neurons,
            excitatory_ratio: n.excitatory_ratio,
            dt_ms: n.dt_ms,
            sim_steps_per_control: n.sim_steps_per_control,
            tau_syn_ms: n.tau_syn_ms,
            tau_m_ms: n.tau_m_ms,
            tau_out_ms: n.tau_out_ms,
            obs_dim,
            act_dim,
            r_in: 0.0,
            r_h: 0.0,
            r_out: 0.0,
            allow_self_connections: n.allow_self_connections,
        };
        cfg.r_in = n.r_in.unwrap_or_else(|| cfg.default_r_in());
        cfg.r_h = n.r_h.unwrap_or_else(|| cfg.default_r_h());
        cfg.r_out = n.r_out.unwrap_or_else(|| cfg.default_r_out());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network_config()?;
        self.shaping()?;
        let o = &self.optimizer;
        match o.algorithm.as_str() {
            "ec" | "es" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown algorithm '{other}' (expected ec or es)"
                )))
            }
        }
        if o.population_size < 2 {
            return Err(Error::InvalidConfig(
                "population_size must be at least 2".into(),
            ));
        }
        if o.algorithm == "es" && o.population_size % 2 != 0 {
            return Err(Error::InvalidConfig(
                "es uses mirrored sampling; population_size must be even".into(),
            ));
        }
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                o.learning_rate
            )));
        }
        if !(o.epsilon > 0.0 && o.epsilon < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 0.5), got {}",
                o.epsilon
            )));
        }
        if o.algorithm == "es" && !(o.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive, got {}",
                o.sigma
            )));
        }
        if o.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                o.weight_decay
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Collect every unknown `section.key` in the document before handing it
/// to the typed deserializer, so the error names all offenders at once.
fn scan_unknown_keys(doc: &toml::Table) -> Vec<String> {
    let sections: [(&str, &[&str]); 4] = [
        ("network", NETWORK_KEYS),
        ("optimizer", OPTIMIZER_KEYS),
        ("task", TASK_KEYS),
        ("run", RUN_KEYS),
    ];
    let mut unknown = Vec::new();
    for (name, value) in doc {
        match sections.iter().find(|(s, _)| s == name) {
            None => unknown.push(name.clone()),
            Some((_, keys)) => {
                if let toml::Value::Table(table) = value {
                    for key in table.keys() {
                        if !keys.contains(&key.as_str()) {
                            unknown.push(format!("{name}.{key}"));
                        }
                    }
                } else {
                    unknown.push(name.clone());
                }
            }
        }
    }
    unknown
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let doc: toml::Table = text
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("config is not valid TOML: {e}")))?;
    let unknown = scan_unknown_keys(&doc);
    if !unknown.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "unknown config keys: {}",
            unknown.join(", ")
        )));
    }
    let cfg: RunConfig = toml::from_str(text)
        .map_err(|e| Error::InvalidConfig(format!("config does not typecheck: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}
