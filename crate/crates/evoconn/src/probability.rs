//! Bernoulli connection-probability model: initialization, genome
//! sampling, clipping and deterministic extraction.
//!
//! Each connection is an independent Bernoulli variable; the model holds
//! one probability per connection for the input, recurrent and output
//! blocks. Probabilities live in `[epsilon, 1-epsilon]` so the gradient
//! estimator's denominator stays bounded and some exploration always
//! remains. Sampling is keyed by `(generation seed, population index,
//! block id, entry offset)`, so any worker can reproduce any individual
//! from two integers.

use crate::error::{Error, Result};
use crate::matrix::RealMatrix;
use crate::network::{Genome, NetworkConfig};
use crate::rng::CounterRng;

/// Default exploration floor.
pub const DEFAULT_EPSILON: f32 = 1e-3;

/// Identifies a connection block inside sampling keys and file layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Input = 0,
    Recurrent = 1,
    Output = 2,
}

pub const BLOCKS: [Block; 3] = [Block::Input, Block::Recurrent, Block::Output];

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityModel {
    pub p_in: RealMatrix,
    pub p_rec: RealMatrix,
    pub p_out: RealMatrix,
    pub epsilon: f32,
    /// With self-connections disabled the recurrent diagonal is pinned to
    /// `epsilon`, sampled as 0 and extracted as 0.
    pub allow_self_connections: bool,
}

impl ProbabilityModel {
    /// Maximum-entropy start: every probability 0.5.
    pub fn uniform(cfg: &NetworkConfig, epsilon: f32) -> Self {
        Self::with_shapes(
            (cfg.n_neurons, cfg.obs_dim),
            (cfg.n_neurons, cfg.n_neurons),
            (cfg.act_dim, cfg.n_neurons),
            epsilon,
            cfg.allow_self_connections,
        )
        .expect("network config shapes are valid by construction")
    }

    /// Build from explicit block shapes (rows, cols). Zero-sized blocks are
    /// allowed; the recurrent block must be square when self-connections
    /// are pinned.
    pub fn with_shapes(
        in_shape: (usize, usize),
        rec_shape: (usize, usize),
        out_shape: (usize, usize),
        epsilon: f32,
        allow_self_connections: bool,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 0.5), got {epsilon}"
            )));
        }
        if !allow_self_connections && rec_shape.0 != rec_shape.1 {
            return Err(Error::InvalidConfig(
                "recurrent block must be square to pin its diagonal".into(),
            ));
        }
        let mut model = ProbabilityModel {
            p_in: RealMatrix::filled(in_shape.0, in_shape.1, 0.5),
            p_rec: RealMatrix::filled(rec_shape.0, rec_shape.1, 0.5),
            p_out: RealMatrix::filled(out_shape.0, out_shape.1, 0.5),
            epsilon,
            allow_self_connections,
        };
        model.pin_diagonal();
        Ok(model)
    }

    pub fn blocks(&self) -> [(Block, &RealMatrix); 3] {
        [
            (Block::Input, &self.p_in),
            (Block::Recurrent, &self.p_rec),
            (Block::Output, &self.p_out),
        ]
    }

    pub fn block(&self, b: Block) -> &RealMatrix {
        match b {
            Block::Input => &self.p_in,
            Block::Recurrent => &self.p_rec,
            Block::Output => &self.p_out,
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut RealMatrix {
        match b {
            Block::Input => &mut self.p_in,
            Block::Recurrent => &mut self.p_rec,
            Block::Output => &mut self.p_out,
        }
    }

    pub fn total_entries(&self) -> usize {
        self.p_in.len() + self.p_rec.len() + self.p_out.len()
    }

    pub fn same_shape(&self, other: &ProbabilityModel) -> bool {
        self.p_in.same_shape(&other.p_in)
            && self.p_rec.same_shape(&other.p_rec)
            && self.p_out.same_shape(&other.p_out)
    }

    fn pin_diagonal(&mut self) {
        if !self.allow_self_connections {
            let eps = self.epsilon;
            let n = self.p_rec.rows();
            for i in 0..n {
                self.p_rec.set(i, i, eps);
            }
        }
    }

    #[inline]
    fn is_pinned(&self, block: Block, row: usize, col: usize) -> bool {
        !self.allow_self_connections && block == Block::Recurrent && row == col
    }

    /// Clamp every probability into `[epsilon, 1-epsilon]` and re-pin the
    /// diagonal. Idempotent.
    pub fn clip(&mut self) {
        let lo = self.epsilon;
        let hi = 1.0 - self.epsilon;
        for b in BLOCKS {
            for v in self.block_mut(b).data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
        self.pin_diagonal();
    }

    /// Deterministic mask: bit set iff probability strictly exceeds 0.5,
    /// so a tie at exactly 0.5 extracts to 0.
    pub fn extract(&self) -> Genome {
        let to_bits = |m: &RealMatrix, pin: bool| {
            let mut out = crate::bits::BitMatrix::zeros(m.rows(), m.cols());
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    if pin && r == c {
                        continue;
                    }
                    if m.get(r, c) > 0.5 {
                        out.set(r, c, true);
                    }
                }
            }
            out
        };
        let pin = !self.allow_self_connections;
        Genome {
            w_in: to_bits(&self.p_in, false),
            w_rec: to_bits(&self.p_rec, pin),
            w_out: to_bits(&self.p_out, false),
        }
    }

    /// Visit every entry of every block in canonical order with its
    /// sampled bit for population member `index`. This single path backs
    /// both genome materialization and the update pass, so the bits they
    /// see are identical by construction.
    pub fn for_each_sampled_bit<F>(&self, gen_seed: u64, index: u64, mut f: F)
    where
        F: FnMut(Block, usize, usize, bool),
    {
        for (block, m) in self.blocks() {
            let block_id = block as u64;
            for row in 0..m.rows() {
                for col in 0..m.cols() {
                    let bit = if self.is_pinned(block, row, col) {
                        false
                    } else {
                        let offset = (row * m.cols() + col) as u64;
                        let mut rng =
                            CounterRng::from_key(&[gen_seed, index, block_id, offset]);
                        rng.next_bool(m.get(row, col) as f64)
                    };
                    f(block, row, col, bit);
                }
            }
        }
    }

    /// Draw population member `index` of the generation keyed by
    /// `gen_seed`. Identical arguments give bit-identical genomes on any
    /// platform and under any scheduling.
    pub fn sample_genome(&self, gen_seed: u64, index: u64) -> Genome {
        let mut genome = Genome {
            w_in: crate::bits::BitMatrix::zeros(self.p_in.rows(), self.p_in.cols()),
            w_rec: crate::bits::BitMatrix::zeros(self.p_rec.rows(), self.p_rec.cols()),
            w_out: crate::bits::BitMatrix::zeros(self.p_out.rows(), self.p_out.cols()),
        };
        self.for_each_sampled_bit(gen_seed, index, |block, row, col, bit| {
            if bit {
                match block {
                    Block::Input => genome.w_in.set(row, col, true),
                    Block::Recurrent => genome.w_rec.set(row, col, true),
                    Block::Output => genome.w_out.set(row, col, true),
                }
            }
        });
        genome
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetworkConfig {
        NetworkConfig::new(8, 3, 2)
    }

    #[test]
    fn uniform_init_is_half_with_pinned_diagonal() {
        let model = ProbabilityModel::uniform(&small_config(), DEFAULT_EPSILON);
        for (block, m) in model.blocks() {
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    let expected = if block == Block::Recurrent && r == c {
                        DEFAULT_EPSILON
                    } else {
                        0.5
                    };
                    assert_eq!(m.get(r, c), expected);
                }
            }
        }
    }

    #[test]
    fn extract_of_uniform_init_is_all_zero() {
        let model = ProbabilityModel::uniform(&small_config(), DEFAULT_EPSILON);
        let genome = model.extract();
        assert_eq!(genome.w_in.count_ones(), 0);
        assert_eq!(genome.w_rec.count_ones(), 0);
        assert_eq!(genome.w_out.count_ones(), 0);
    }

    #[test]
    fn extract_threshold_rule() {
        let mut model =
            ProbabilityModel::with_shapes((1, 3), (1, 1), (0, 1), DEFAULT_EPSILON, true).unwrap();
        model.p_in.set(0, 0, 0.7);
        model.p_in.set(0, 1, 0.5);
        model.p_in.set(0, 2, 0.3);
        let g = model.extract();
        assert!(g.w_in.get(0, 0));
        assert!(!g.w_in.get(0, 1)); // tie maps to 0
        assert!(!g.w_in.get(0, 2));
    }

    #[test]
    fn extract_near_one_is_all_ones_except_diagonal() {
        let mut model = ProbabilityModel::uniform(&small_config(), DEFAULT_EPSILON);
        for b in BLOCKS {
            for v in model.block_mut(b).data_mut() {
                *v = 1.0 - DEFAULT_EPSILON;
            }
        }
        model.clip(); // re-pins the diagonal
        let g = model.extract();
        assert_eq!(g.w_in.count_ones(), 8 * 3);
        assert_eq!(g.w_out.count_ones(), 2 * 8);
        assert_eq!(g.w_rec.count_ones(), 8 * 8 - 8);
        assert!(g.diagonal_is_zero());
    }

    #[test]
    fn clip_clamps_and_is_idempotent() {
        let mut model =
            ProbabilityModel::with_shapes((1, 3), (2, 2), (1, 2), DEFAULT_EPSILON, true).unwrap();
        model.p_in.set(0, 0, 1.2);
        model.p_in.set(0, 1, -0.3);
        model.p_in.set(0, 2, 0.4);
        model.clip();
        assert_eq!(model.p_in.get(0, 0), 0.999);
        assert_eq!(model.p_in.get(0, 1), 0.001);
        assert_eq!(model.p_in.get(0, 2), 0.4);
        let once = model.clone();
        model.clip();
        assert_eq!(model, once);
    }

    #[test]
    fn sampling_is_deterministic_and_index_sensitive() {
        let model = ProbabilityModel::uniform(&small_config(), DEFAULT_EPSILON);
        let a = model.sample_genome(42, 7);
        let b = model.sample_genome(42, 7);
        assert_eq!(a, b);
        let c = model.sample_genome(42, 8);
        assert_ne!(a, c);
        let d = model.sample_genome(43, 7);
        assert_ne!(a, d);
    }

    #[test]
    fn sampled_diagonal_is_zero_when_pinned() {
        let model = ProbabilityModel::uniform(&small_config(), DEFAULT_EPSILON);
        for i in 0..20 {
            assert!(model.sample_genome(1, i).diagonal_is_zero());
        }
    }

    #[test]
    fn sampling_rate_tracks_probability() {
        // one entry at 1 - eps over a 256x256-draw population
        let mut model =
            ProbabilityModel::with_shapes((0, 0), (256, 256), (0, 0), DEFAULT_EPSILON, true)
                .unwrap();
        for v in model.p_rec.data_mut() {
            *v = 1.0 - DEFAULT_EPSILON;
        }
        let g = model.sample_genome(9, 0);
        let frac = g.w_rec.count_ones() as f64 / (256.0 * 256.0);
        assert!((frac - 0.999).abs() < 0.002);
    }

    #[test]
    fn entry_mean_over_many_draws() {
        let model =
            ProbabilityModel::with_shapes((1, 1), (1, 1), (1, 1), DEFAULT_EPSILON, true).unwrap();
        let n = 100_000u64;
        let mut ones = 0usize;
        for i in 0..n {
            if model.sample_genome(3, i).w_in.get(0, 0) {
                ones += 1;
            }
        }
        let mean = ones as f64 / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn extraction_maximizes_per_entry_likelihood() {
        let mut model = ProbabilityModel::uniform(&small_config(), DEFAULT_EPSILON);
        let mut rng = CounterRng::from_key(&[123]);
        for b in BLOCKS {
            for v in model.block_mut(b).data_mut() {
                *v = rng.next_f64() as f32;
            }
        }
        model.clip();
        let g = model.extract();
        for (block, m) in model.blocks() {
            let bits = match block {
                Block::Input => &g.w_in,
                Block::Recurrent => &g.w_rec,
                Block::Output => &g.w_out,
            };
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    let p = m.get(r, c) as f64;
                    let bit = bits.get(r, c);
                    let p_bit = if bit { p } else { 1.0 - p };
                    assert!(p_bit >= 0.5 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn parallel_and_serial_sampling_agree() {
        use rayon::prelude::*;
        let model = ProbabilityModel::uniform(&small_config(), DEFAULT_EPSILON);
        let serial: Vec<Genome> = (0..32).map(|i| model.sample_genome(5, i)).collect();
        let parallel: Vec<Genome> = (0..32u64)
            .into_par_iter()
            .map(|i| model.sample_genome(5, i))
            .collect();
        assert_eq!(serial, parallel);
    }
}
