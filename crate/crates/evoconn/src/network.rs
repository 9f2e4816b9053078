//! Recurrent spiking network dynamics with excitatory/inhibitory groups.
//!
//! Neurons are leaky integrate-and-fire with exponential synapses,
//! discretized with timestep `dt_ms`. Neurons `[0, n_excitatory)` form the
//! excitatory group and the rest the inhibitory group; a presynaptic spike
//! contributes with its group's sign. With 1-bit connections the recurrent
//! drive is an exact integer spike count (AND + popcount) and only becomes
//! a float when scaled by the membrane resistance.

use crate::bits::{BitMatrix, BitVector};
use crate::error::{Error, Result};

/// Firing threshold on the membrane potential; spikes are strict `v > 1`.
pub const SPIKE_THRESHOLD: f64 = 1.0;

/// `e^(-dt/tau)`: per-step decay of a first-order exponential filter.
pub fn decay_coefficient(dt_ms: f64, tau_ms: f64) -> Result<f64> {
    if !(tau_ms > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "time constant must be positive, got {tau_ms}"
        )));
    }
    if !(dt_ms >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "timestep must be non-negative, got {dt_ms}"
        )));
    }
    Ok((-dt_ms / tau_ms).exp())
}

/// Static description of one network: sizes, time constants, resistances.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub n_neurons: usize,
    pub excitatory_ratio: f64,
    pub dt_ms: f64,
    pub sim_steps_per_control: usize,
    pub tau_syn_ms: f64,
    pub tau_m_ms: f64,
    pub tau_out_ms: f64,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub r_in: f64,
    pub r_h: f64,
    pub r_out: f64,
    pub allow_self_connections: bool,
}

impl NetworkConfig {
    /// Defaults for everything except the I/O dimensions; resistances are
    /// derived with [`NetworkConfig::with_default_resistances`].
    pub fn new(n_neurons: usize, obs_dim: usize, act_dim: usize) -> Self {
        NetworkConfig {
            n_neurons,
            excitatory_ratio: 0.5,
            dt_ms: 0.5,
            sim_steps_per_control: 33,
            tau_syn_ms: 5.0,
            tau_m_ms: 10.0,
            tau_out_ms: 10.0,
            obs_dim,
            act_dim,
            r_in: 0.0,
            r_h: 0.0,
            r_out: 0.0,
            allow_self_connections: false,
        }
        .with_default_resistances()
    }

    /// Variance-preserving resistance defaults:
    /// `r_in = 0.1 * tau_m * sqrt(2/obs_dim)`,
    /// `r_h = (tau_m / tau_syn) * sqrt(2/n)`,
    /// `r_out = 5 * tau_out * sqrt(2/n)` (time constants in ms).
    pub fn with_default_resistances(mut self) -> Self {
        self.r_in = self.default_r_in();
        self.r_h = self.default_r_h();
        self.r_out = self.default_r_out();
        self
    }

    pub fn default_r_in(&self) -> f64 {
        0.1 * self.tau_m_ms * (2.0 / self.obs_dim as f64).sqrt()
    }

    pub fn default_r_h(&self) -> f64 {
        1.0 * (self.tau_m_ms / self.tau_syn_ms) * (2.0 / self.n_neurons as f64).sqrt()
    }

    pub fn default_r_out(&self) -> f64 {
        5.0 * self.tau_out_ms * (2.0 / self.n_neurons as f64).sqrt()
    }

    /// Size of the excitatory group; the remainder is inhibitory.
    pub fn n_excitatory(&self) -> usize {
        (self.excitatory_ratio * self.n_neurons as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_neurons == 0 {
            return fail("n_neurons must be at least 1".into());
        }
        if !(self.excitatory_ratio > 0.0 && self.excitatory_ratio < 1.0) {
            return fail(format!(
                "excitatory_ratio must lie in (0, 1), got {}",
                self.excitatory_ratio
            ));
        }
        let n_exc = self.n_excitatory();
        if n_exc < 1 || self.n_neurons - n_exc < 1 {
            return fail(format!(
                "both neuron groups must be non-empty (n={}, excitatory={})",
                self.n_neurons, n_exc
            ));
        }
        if !(self.dt_ms > 0.0) {
            return fail(format!("dt_ms must be positive, got {}", self.dt_ms));
        }
        for (name, tau) in [
            ("tau_syn_ms", self.tau_syn_ms),
            ("tau_m_ms", self.tau_m_ms),
            ("tau_out_ms", self.tau_out_ms),
        ] {
            if !(tau > 0.0) {
                return fail(format!("{name} must be positive, got {tau}"));
            }
        }
        if self.sim_steps_per_control < 1 {
            return fail("sim_steps_per_control must be at least 1".into());
        }
        if self.obs_dim == 0 || self.act_dim == 0 {
            return fail("obs_dim and act_dim must be at least 1".into());
        }
        for (name, r) in [("r_in", self.r_in), ("r_h", self.r_h), ("r_out", self.r_out)] {
            if !r.is_finite() {
                return fail(format!("{name} must be finite, got {r}"));
            }
        }
        Ok(())
    }
}

/// One sampled set of boolean connection matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genome {
    /// observation -> neurons, `n_neurons x obs_dim`
    pub w_in: BitMatrix,
    /// neurons -> neurons, `n_neurons x n_neurons`
    pub w_rec: BitMatrix,
    /// neurons -> outputs, `act_dim x n_neurons`
    pub w_out: BitMatrix,
}

impl Genome {
    pub fn zeros(n_neurons: usize, obs_dim: usize, act_dim: usize) -> Self {
        Genome {
            w_in: BitMatrix::zeros(n_neurons, obs_dim),
            w_rec: BitMatrix::zeros(n_neurons, n_neurons),
            w_out: BitMatrix::zeros(act_dim, n_neurons),
        }
    }

    pub fn total_bits(&self) -> usize {
        self.w_in.rows() * self.w_in.cols()
            + self.w_rec.rows() * self.w_rec.cols()
            + self.w_out.rows() * self.w_out.cols()
    }

    /// Positions at which the two genomes agree, over all three blocks.
    pub fn matching_bits(&self, other: &Genome) -> Result<usize> {
        Ok(self.w_in.count_matching(&other.w_in)?
            + self.w_rec.count_matching(&other.w_rec)?
            + self.w_out.count_matching(&other.w_out)?)
    }

    pub fn matches_config(&self, cfg: &NetworkConfig) -> bool {
        self.w_in.rows() == cfg.n_neurons
            && self.w_in.cols() == cfg.obs_dim
            && self.w_rec.rows() == cfg.n_neurons
            && self.w_rec.cols() == cfg.n_neurons
            && self.w_out.rows() == cfg.act_dim
            && self.w_out.cols() == cfg.n_neurons
    }

    pub fn diagonal_is_zero(&self) -> bool {
        (0..self.w_rec.rows().min(self.w_rec.cols())).all(|i| !self.w_rec.get(i, i))
    }
}

/// Per-neuron dynamic state plus the output trace.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    /// membrane potentials, length `n_neurons`
    pub membrane: Vec<f64>,
    /// synaptic currents, length `n_neurons`
    pub current: Vec<f64>,
    /// leaky readout trace, length `act_dim`
    pub trace: Vec<f64>,
    /// spikes emitted on the last step
    pub spikes: BitVector,
}

impl NeuronState {
    pub fn zeros(n_neurons: usize, act_dim: usize) -> Self {
        NeuronState {
            membrane: vec![0.0; n_neurons],
            current: vec![0.0; n_neurons],
            trace: vec![0.0; act_dim],
            spikes: BitVector::zeros(n_neurons),
        }
    }
}

/// Connection weights as seen by the dynamics. The packed genome and the
/// dense baseline both implement this, so the simulation loop is shared.
pub trait Synapses: Sync {
    /// `(n_neurons, obs_dim, act_dim)`
    fn dims(&self) -> (usize, usize, usize);

    /// Signed recurrent drive from the (group-masked) previous spikes.
    fn recurrent_drive(&self, s_exc: &BitVector, s_inh: &BitVector, out: &mut [f64]);

    /// Input projection of the observation, before any resistance scaling.
    fn input_drive(&self, obs: &[f64], out: &mut [f64]);

    /// Signed readout drive from the (group-masked) current spikes.
    fn output_drive(&self, s_exc: &BitVector, s_inh: &BitVector, out: &mut [f64]);
}

impl Synapses for Genome {
    fn dims(&self) -> (usize, usize, usize) {
        (self.w_rec.rows(), self.w_in.cols(), self.w_out.rows())
    }

    fn recurrent_drive(&self, s_exc: &BitVector, s_inh: &BitVector, out: &mut [f64]) {
        // Exact integer spike counts per group, combined as exc - inh.
        let eb = s_exc.as_bytes();
        let ib = s_inh.as_bytes();
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.w_rec.row_bytes(i);
            let exc = crate::bits::packed_row_popcount(row, eb);
            let inh = crate::bits::packed_row_popcount(row, ib);
            *o = (exc as i64 - inh as i64) as f64;
        }
    }

    fn input_drive(&self, obs: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, x) in obs.iter().enumerate() {
                if self.w_in.get(i, j) {
                    acc += x;
                }
            }
            *o = acc;
        }
    }

    fn output_drive(&self, s_exc: &BitVector, s_inh: &BitVector, out: &mut [f64]) {
        let eb = s_exc.as_bytes();
        let ib = s_inh.as_bytes();
        for (k, o) in out.iter_mut().enumerate() {
            let row = self.w_out.row_bytes(k);
            let exc = crate::bits::packed_row_popcount(row, eb);
            let inh = crate::bits::packed_row_popcount(row, ib);
            *o = (exc as i64 - inh as i64) as f64;
        }
    }
}

struct StepScratch {
    s_exc: BitVector,
    s_inh: BitVector,
    drive: Vec<f64>,
    raw_out: Vec<f64>,
}

impl StepScratch {
    fn new(n_neurons: usize, act_dim: usize) -> Self {
        StepScratch {
            s_exc: BitVector::zeros(n_neurons),
            s_inh: BitVector::zeros(n_neurons),
            drive: vec![0.0; n_neurons],
            raw_out: vec![0.0; act_dim],
        }
    }
}

/// A network bound to one set of synapses, with decay coefficients and
/// group masks precomputed. All step methods are pure functions of their
/// inputs; nothing is cached between calls.
pub struct Network<'a, S: Synapses> {
    syn: &'a S,
    cfg: &'a NetworkConfig,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    decay_syn: f64,
    decay_mem: f64,
    decay_out: f64,
    /// Input currents are injected into `c` (which the membrane update
    /// scales by `r_h`), so they carry `r_in / r_h` to land at an
    /// effective membrane-level scale of `r_in`.
    input_gain: f64,
    exc_mask: BitVector,
    inh_mask: BitVector,
}

impl<'a, S: Synapses> Network<'a, S> {
    /// `action_bounds` holds one `(low, high)` pair per action dimension.
    pub fn new(
        syn: &'a S,
        cfg: &'a NetworkConfig,
        action_bounds: &[(f64, f64)],
    ) -> Result<Self> {
        cfg.validate()?;
        let (n, obs, act) = syn.dims();
        if n != cfg.n_neurons || obs != cfg.obs_dim || act != cfg.act_dim {
            return Err(Error::DimensionMismatch(format!(
                "synapses are ({n}, {obs}, {act}), config wants ({}, {}, {})",
                cfg.n_neurons, cfg.obs_dim, cfg.act_dim
            )));
        }
        if action_bounds.len() != cfg.act_dim {
            return Err(Error::DimensionMismatch(format!(
                "{} action bounds for act_dim {}",
                action_bounds.len(),
                cfg.act_dim
            )));
        }
        let n_exc = cfg.n_excitatory();
        let mut exc_mask = BitVector::zeros(cfg.n_neurons);
        let mut inh_mask = BitVector::zeros(cfg.n_neurons);
        for i in 0..cfg.n_neurons {
            if i < n_exc {
                exc_mask.set(i, true);
            } else {
                inh_mask.set(i, true);
            }
        }
        Ok(Network {
            syn,
            cfg,
            action_low: action_bounds.iter().map(|b| b.0).collect(),
            action_high: action_bounds.iter().map(|b| b.1).collect(),
            decay_syn: decay_coefficient(cfg.dt_ms, cfg.tau_syn_ms)?,
            decay_mem: decay_coefficient(cfg.dt_ms, cfg.tau_m_ms)?,
            decay_out: decay_coefficient(cfg.dt_ms, cfg.tau_out_ms)?,
            input_gain: cfg.r_in / cfg.r_h,
            exc_mask,
            inh_mask,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.cfg
    }

    pub fn initial_state(&self) -> NeuronState {
        NeuronState::zeros(self.cfg.n_neurons, self.cfg.act_dim)
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.cfg.obs_dim {
            return Err(Error::DimensionMismatch(format!(
                "observation of length {} for obs_dim {}",
                obs.len(),
                self.cfg.obs_dim
            )));
        }
        if let Some(bad) = obs.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("observation component {bad}")));
        }
        Ok(())
    }

    /// External input current per neuron: `(r_in / r_h) * (w_in . obs)`.
    /// Constant while the observation is held fixed, so the control step
    /// computes it once for all its substeps.
    fn external_input(&self, obs: &[f64], out: &mut [f64]) {
        self.syn.input_drive(obs, out);
        for v in out.iter_mut() {
            *v *= self.input_gain;
        }
    }

    /// One dt of membrane/synapse dynamics followed by the readout filter,
    /// updating `state` in place. `ext` is the precomputed input current.
    fn step_into(&self, state: &mut NeuronState, ext: &[f64], scratch: &mut StepScratch) {
        // Recurrent drive comes from the previous step's spikes.
        state.spikes.and_into(&self.exc_mask, &mut scratch.s_exc);
        state.spikes.and_into(&self.inh_mask, &mut scratch.s_inh);
        self.syn
            .recurrent_drive(&scratch.s_exc, &scratch.s_inh, &mut scratch.drive);

        for i in 0..self.cfg.n_neurons {
            let c = self.decay_syn * state.current[i] + scratch.drive[i] + ext[i];
            state.current[i] = c;
            let v = self.decay_mem * state.membrane[i] + self.cfg.r_h * c;
            let fired = v > SPIKE_THRESHOLD;
            state.spikes.set(i, fired);
            state.membrane[i] = if fired { 0.0 } else { v };
        }

        // Readout sees the spikes just emitted.
        state.spikes.and_into(&self.exc_mask, &mut scratch.s_exc);
        state.spikes.and_into(&self.inh_mask, &mut scratch.s_inh);
        self.syn
            .output_drive(&scratch.s_exc, &scratch.s_inh, &mut scratch.raw_out);
        for (t, raw) in state.trace.iter_mut().zip(&scratch.raw_out) {
            let scaled = self.cfg.r_out * raw;
            *t = self.decay_out * *t + (1.0 - self.decay_out) * scaled;
        }
    }

    /// One discretization step of the neuron equations. The readout trace
    /// passes through unchanged; see [`Network::readout_step`].
    pub fn lif_step(&self, state: &NeuronState, obs: &[f64]) -> Result<NeuronState> {
        self.check_obs(obs)?;
        let mut scratch = StepScratch::new(self.cfg.n_neurons, self.cfg.act_dim);
        let mut ext = vec![0.0; self.cfg.n_neurons];
        self.external_input(obs, &mut ext);

        let mut next = state.clone();
        let saved_trace = state.trace.clone();
        self.step_into(&mut next, &ext, &mut scratch);
        next.trace = saved_trace;
        Ok(next)
    }

    /// Leaky readout update: `trace' = d*trace + (1-d)*r_out*(signed spike
    /// counts)`. Returns the new trace and the readout (which is the trace).
    pub fn readout_step(&self, trace: &[f64], spikes: &BitVector) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(trace.len(), self.cfg.act_dim);
        let mut scratch = StepScratch::new(self.cfg.n_neurons, self.cfg.act_dim);
        spikes.and_into(&self.exc_mask, &mut scratch.s_exc);
        spikes.and_into(&self.inh_mask, &mut scratch.s_inh);
        self.syn
            .output_drive(&scratch.s_exc, &scratch.s_inh, &mut scratch.raw_out);
        let next: Vec<f64> = trace
            .iter()
            .zip(&scratch.raw_out)
            .map(|(t, raw)| self.decay_out * t + (1.0 - self.decay_out) * self.cfg.r_out * raw)
            .collect();
        (next.clone(), next)
    }

    /// Run `sim_steps_per_control` substeps with the observation held
    /// fixed, then squash the trace through tanh and map it onto the
    /// action bounds.
    pub fn control_step(
        &self,
        state: &NeuronState,
        obs: &[f64],
    ) -> Result<(NeuronState, Vec<f64>)> {
        self.check_obs(obs)?;
        let mut scratch = StepScratch::new(self.cfg.n_neurons, self.cfg.act_dim);
        let mut ext = vec![0.0; self.cfg.n_neurons];
        self.external_input(obs, &mut ext);

        let mut next = state.clone();
        for _ in 0..self.cfg.sim_steps_per_control {
            self.step_into(&mut next, &ext, &mut scratch);
        }
        let action: Vec<f64> = next
            .trace
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let unit = t.tanh(); // (-1, 1)
                let (lo, hi) = (self.action_low[k], self.action_high[k]);
                lo + (unit + 1.0) * 0.5 * (hi - lo)
            })
            .collect();
        Ok((next, action))
    }
}
