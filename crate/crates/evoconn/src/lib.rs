//! Training recurrent spiking policies by evolving their connectivity.
//!
//! Networks here have no weights to tune: every connection is a single
//! bit, sampled from a per-connection Bernoulli probability. A score-
//! function gradient estimate over those probabilities, built from nothing
//! but sampled populations and their episode returns, moves the
//! distribution toward better-performing wiring; thresholding at 0.5
//! yields the boolean network that ships. Inference is integer-only --
//! spike propagation is bitwise AND plus popcount -- and whole populations
//! can be reconstructed anywhere from a pair of integers, which keeps
//! distributed evaluation down to seeds and scalar returns on the wire.
//!
//! Module map:
//!
//! * [`bits`] -- packed boolean matrices and the popcount matvec kernel
//! * [`network`] -- leaky integrate-and-fire dynamics with excitatory and
//!   inhibitory groups, shared by bit-masked and dense weights
//! * [`probability`] -- the Bernoulli connection model: sample, clip,
//!   extract
//! * [`optimizer`] -- return shaping, the gradient estimator and the
//!   probability update
//! * [`es`] -- dense-weight evolution-strategies baseline on the same
//!   network
//! * [`tasks`] -- environments (pendulum swing-up, point mass) and direct
//!   genome fitness (mask match)
//! * [`eval`] -- population evaluation and the generation loop
//! * [`dist`] -- coordinator/worker runtime with seed-only traffic
//! * [`protocol`] -- the length-prefixed wire format
//! * [`config`], [`io`], [`bench`] -- run configuration, persistence and
//!   the kernel throughput comparison
//!
//! The crate's `examples/` directory has one runnable program per major
//! capability; `evoconn --help` lists the command-line surface.

pub mod bench;
pub mod bits;
pub mod config;
pub mod dist;
pub mod error;
pub mod es;
pub mod eval;
pub mod io;
pub mod matrix;
pub mod network;
pub mod optimizer;
pub mod probability;
pub mod protocol;
pub mod rng;
pub mod tasks;

pub use bits::{packed_matvec, BitMatrix, BitVector};
pub use config::{load_config, parse_config, RunConfig};
pub use error::{Error, Result};
pub use eval::{train, Distribution, Evaluator, Individual};
pub use network::{decay_coefficient, Genome, Network, NetworkConfig, NeuronState};
pub use optimizer::{ec_update, nes_gradient, shape_returns, ReturnShaping};
pub use probability::ProbabilityModel;
