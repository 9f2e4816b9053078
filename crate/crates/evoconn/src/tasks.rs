//! Tasks: environments, episode rollouts and direct genome fitness.
//!
//! Environments are small value types, deterministic in `(reset seed,
//! action sequence)`, with finite rewards and bounded observations. They
//! stand in for full physics benchmarks while keeping the same sequential
//! decision structure: act, observe, accumulate return over a fixed
//! horizon.

use crate::error::{Error, Result};
use crate::network::Genome;
use crate::rng::{CounterRng, TAG_ENV};

/// Static task interface data.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentSpec {
    pub name: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
}

impl EnvironmentSpec {
    pub fn action_bounds(&self) -> Vec<(f64, f64)> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(&lo, &hi)| (lo, hi))
            .collect()
    }
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvironmentSpec;
    /// Start a new episode; deterministic in `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Advance one step. Returns `(observation, reward, done)`.
    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64, bool);
}

/// Anything that maps observations to in-bounds actions across an episode.
pub trait Policy {
    fn reset(&mut self);
    fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>>;
}

/// Sum of rewards over one episode from `reset(seed)`, with the policy
/// state reset at the start. Errors on non-finite rewards.
pub fn episode_return(
    env: &mut dyn Environment,
    policy: &mut dyn Policy,
    seed: u64,
) -> Result<f64> {
    policy.reset();
    let horizon = env.spec().horizon;
    let mut obs = env.reset(seed);
    let mut total = 0.0;
    for _ in 0..horizon {
        let action = policy.act(&obs)?;
        let (next_obs, reward, done) = env.step(&action);
        if !reward.is_finite() {
            return Err(Error::NonFinite(format!("reward {reward}")));
        }
        total += reward;
        obs = next_obs;
        if done {
            break;
        }
    }
    Ok(total)
}

fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    (x + PI).rem_euclid(TAU) - PI
}

/// Torque-limited pendulum swing-up. State `(theta, theta_dot)` with
/// `theta = 0` upright; observation `(cos theta, sin theta, theta_dot)`;
/// reward `-(wrap(theta)^2 + 0.1 theta_dot^2 + 0.001 u^2)`. Episodes start
/// near the hanging position with a small seeded jitter. Integration is
/// semi-implicit Euler with the angular velocity clamped to +-8.
pub struct Pendulum {
    spec: EnvironmentSpec,
    theta: f64,
    theta_dot: f64,
}

impl Pendulum {
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const HORIZON: usize = 200;
    const RESET_JITTER: f64 = 0.05;

    pub fn new() -> Self {
        Pendulum {
            spec: EnvironmentSpec {
                name: "pendulum".into(),
                obs_dim: 3,
                act_dim: 1,
                action_low: vec![-Self::MAX_TORQUE],
                action_high: vec![Self::MAX_TORQUE],
                horizon: Self::HORIZON,
            },
            theta: std::f64::consts::PI,
            theta_dot: 0.0,
        }
    }

    /// Place the pendulum at an exact state (used by tests and demos).
    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    /// Total mechanical energy of the free rod (kinetic + potential);
    /// conserved under zero torque.
    pub fn energy(&self) -> f64 {
        let inertia = Self::MASS * Self::LENGTH * Self::LENGTH / 3.0;
        0.5 * inertia * self.theta_dot * self.theta_dot
            + 0.5 * Self::MASS * Self::GRAVITY * Self::LENGTH * self.theta.cos()
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = CounterRng::from_key(&[seed, TAG_ENV]);
        self.theta = std::f64::consts::PI + Self::RESET_JITTER * rng.next_symmetric();
        self.theta_dot = Self::RESET_JITTER * rng.next_symmetric();
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64, bool) {
        assert_eq!(action.len(), 1);
        let torque = action[0].clamp(-Self::MAX_TORQUE, Self::MAX_TORQUE);
        // cost on the pre-step state and the applied torque
        let angle = wrap_angle(self.theta);
        let reward = -(angle * angle
            + 0.1 * self.theta_dot * self.theta_dot
            + 0.001 * torque * torque);

        let accel = 3.0 * Self::GRAVITY / (2.0 * Self::LENGTH) * self.theta.sin()
            + 3.0 * torque / (Self::MASS * Self::LENGTH * Self::LENGTH);
        self.theta_dot =
            (self.theta_dot + accel * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += self.theta_dot * Self::DT;

        (self.observation(), reward, false)
    }
}

pub fn pendulum_env() -> Pendulum {
    Pendulum::new()
}

/// 1-D double integrator steering toward a seeded target position.
/// Observation `(x, v, target - x)`; reward `-|target - x|` per step.
pub struct PointMass {
    spec: EnvironmentSpec,
    x: f64,
    v: f64,
    target: f64,
}

impl PointMass {
    pub const DT: f64 = 0.1;
    pub const MAX_FORCE: f64 = 1.0;
    pub const MAX_SPEED: f64 = 10.0;
    pub const HORIZON: usize = 100;

    pub fn new() -> Self {
        PointMass {
            spec: EnvironmentSpec {
                name: "pointmass".into(),
                obs_dim: 3,
                act_dim: 1,
                action_low: vec![-Self::MAX_FORCE],
                action_high: vec![Self::MAX_FORCE],
                horizon: Self::HORIZON,
            },
            x: 0.0,
            v: 0.0,
            target: 0.0,
        }
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn state(&self) -> (f64, f64) {
        (self.x, self.v)
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.x, self.v, self.target - self.x]
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = CounterRng::from_key(&[seed, TAG_ENV]);
        self.x = 0.0;
        self.v = 0.0;
        self.target = rng.next_symmetric();
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64, bool) {
        assert_eq!(action.len(), 1);
        let force = action[0].clamp(-Self::MAX_FORCE, Self::MAX_FORCE);
        self.v = (self.v + force * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.x += self.v * Self::DT;
        let reward = -(self.target - self.x).abs();
        (self.observation(), reward, false)
    }
}

pub fn pointmass_env() -> PointMass {
    PointMass::new()
}

/// Direct genome fitness: the number of connection bits that agree with a
/// hidden target mask, over all three blocks.
#[derive(Clone, Debug)]
pub struct MaskMatchFitness {
    target: Genome,
}

impl MaskMatchFitness {
    pub fn new(target: Genome) -> Self {
        MaskMatchFitness { target }
    }

    pub fn target(&self) -> &Genome {
        &self.target
    }

    pub fn max_score(&self) -> usize {
        self.target.total_bits()
    }

    pub fn score(&self, genome: &Genome) -> Result<f64> {
        Ok(genome.matching_bits(&self.target)? as f64)
    }
}
