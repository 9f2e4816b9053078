//! Dense-weight evolution-strategies baseline on the same network.
//!
//! Searches real-valued weight matrices directly with mirrored Gaussian
//! perturbations and a centered-rank weighted update. Shares the
//! simulation, task and evaluation plumbing with the connection-probability
//! path, so comparisons hold everything else fixed.

use crate::error::{Error, Result};
use crate::matrix::RealMatrix;
use crate::network::{NetworkConfig, Synapses};
use crate::optimizer::{shape_returns, tree_reduce, ReturnShaping};
use crate::probability::{Block, BLOCKS};
use crate::rng::CounterRng;

/// Real-valued counterpart of the boolean genome. At evaluation time the
/// weights act through their magnitude with the presynaptic group's sign,
/// so the baseline also respects the excitatory/inhibitory split (a config
/// switch turns that off).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGenome {
    pub w_in: RealMatrix,
    pub w_rec: RealMatrix,
    pub w_out: RealMatrix,
}

impl DenseGenome {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        DenseGenome {
            w_in: RealMatrix::zeros(cfg.n_neurons, cfg.obs_dim),
            w_rec: RealMatrix::zeros(cfg.n_neurons, cfg.n_neurons),
            w_out: RealMatrix::zeros(cfg.act_dim, cfg.n_neurons),
        }
    }

    pub fn block(&self, b: Block) -> &RealMatrix {
        match b {
            Block::Input => &self.w_in,
            Block::Recurrent => &self.w_rec,
            Block::Output => &self.w_out,
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut RealMatrix {
        match b {
            Block::Input => &mut self.w_in,
            Block::Recurrent => &mut self.w_rec,
            Block::Output => &mut self.w_out,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.w_in.all_finite() && self.w_rec.all_finite() && self.w_out.all_finite()
    }

    pub fn total_entries(&self) -> usize {
        self.w_in.len() + self.w_rec.len() + self.w_out.len()
    }
}

/// Mirrored perturbation: member `2k` adds `sigma * eps_k`, member `2k+1`
/// subtracts it. The noise is keyed by `(gen_seed, pair, block, entry)` so
/// the update pass can re-derive it without storing perturbations.
pub fn perturb(center: &DenseGenome, sigma: f64, gen_seed: u64, index: u64) -> DenseGenome {
    let pair = index / 2;
    let sign = if index % 2 == 0 { 1.0 } else { -1.0 };
    let mut out = center.clone();
    for block in BLOCKS {
        let m = out.block_mut(block);
        let cols = m.cols();
        for row in 0..m.rows() {
            for col in 0..cols {
                let mut rng =
                    CounterRng::from_key(&[gen_seed, pair, block as u64, (row * cols + col) as u64]);
                let eps = rng.next_normal();
                let v = m.get(row, col) as f64 + sign * sigma * eps;
                m.set(row, col, v as f32);
            }
        }
    }
    out
}

const UPDATE_LEAF_PAIRS: u64 = 32;

/// Mirrored-pair ES step:
/// `center' = (1 - eta*decay) * center + eta/(N*sigma) * sum_i shaped_i * eps_i`.
///
/// The sum is taken pairwise, `(shaped_{2k} - shaped_{2k+1}) * eps_k`, so a
/// pair with equal returns contributes exactly zero.
pub fn es_update(
    center: &DenseGenome,
    gen_seed: u64,
    returns: &[f32],
    learning_rate: f64,
    sigma: f64,
    weight_decay: f64,
) -> Result<DenseGenome> {
    if returns.len() % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "mirrored sampling needs an even population, got {}",
            returns.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let shaped = shape_returns(returns, ReturnShaping::CenteredRank)?;
    let n = shaped.len() as f64;
    let pairs = (shaped.len() / 2) as u64;

    struct Acc {
        g_in: Vec<f64>,
        g_rec: Vec<f64>,
        g_out: Vec<f64>,
    }
    let zeros = |c: &DenseGenome| Acc {
        g_in: vec![0.0; c.w_in.len()],
        g_rec: vec![0.0; c.w_rec.len()],
        g_out: vec![0.0; c.w_out.len()],
    };

    let acc = tree_reduce(
        0,
        pairs,
        UPDATE_LEAF_PAIRS,
        &|lo, hi| {
            let mut acc = zeros(center);
            for pair in lo..hi {
                let weight = shaped[(2 * pair) as usize] - shaped[(2 * pair + 1) as usize];
                if weight == 0.0 {
                    continue;
                }
                for block in BLOCKS {
                    let m = center.block(block);
                    let slot = match block {
                        Block::Input => &mut acc.g_in,
                        Block::Recurrent => &mut acc.g_rec,
                        Block::Output => &mut acc.g_out,
                    };
                    for idx in 0..m.len() {
                        let mut rng = CounterRng::from_key(&[
                            gen_seed,
                            pair,
                            block as u64,
                            idx as u64,
                        ]);
                        slot[idx] += weight * rng.next_normal();
                    }
                }
            }
            acc
        },
        &|mut a, b| {
            for (x, y) in a.g_in.iter_mut().zip(b.g_in) {
                *x += y;
            }
            for (x, y) in a.g_rec.iter_mut().zip(b.g_rec) {
                *x += y;
            }
            for (x, y) in a.g_out.iter_mut().zip(b.g_out) {
                *x += y;
            }
            a
        },
    );

    let keep = 1.0 - learning_rate * weight_decay;
    let step = learning_rate / (n * sigma);
    let mut next = center.clone();
    for (block, acc_block) in [
        (Block::Input, &acc.g_in),
        (Block::Recurrent, &acc.g_rec),
        (Block::Output, &acc.g_out),
    ] {
        let m = next.block_mut(block);
        for (v, &g) in m.data_mut().iter_mut().zip(acc_block) {
            *v = (keep * (*v as f64) + step * g) as f32;
        }
    }
    Ok(next)
}

/// View of a dense genome as synaptic weights for the dynamics. With
/// `dale_signs` the magnitude is used and the presynaptic group supplies
/// the sign; without it the raw signed weights act directly.
pub struct DenseSynapses<'a> {
    pub genome: &'a DenseGenome,
    pub dale_signs: bool,
}

impl DenseSynapses<'_> {
    #[inline]
    fn weight(&self, raw: f32) -> f64 {
        if self.dale_signs {
            raw.abs() as f64
        } else {
            raw as f64
        }
    }
}

impl Synapses for DenseSynapses<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        (
            self.genome.w_rec.rows(),
            self.genome.w_in.cols(),
            self.genome.w_out.rows(),
        )
    }

    fn recurrent_drive(
        &self,
        s_exc: &crate::bits::BitVector,
        s_inh: &crate::bits::BitVector,
        out: &mut [f64],
    ) {
        let exc: Vec<usize> = s_exc.iter_set().collect();
        let inh: Vec<usize> = s_inh.iter_set().collect();
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.genome.w_rec.row(i);
            let mut acc = 0.0;
            for &j in &exc {
                acc += self.weight(row[j]);
            }
            if self.dale_signs {
                for &j in &inh {
                    acc -= self.weight(row[j]);
                }
            } else {
                for &j in &inh {
                    acc += self.weight(row[j]);
                }
            }
            *o = acc;
        }
    }

    fn input_drive(&self, obs: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.genome.w_in.row(i);
            *o = row
                .iter()
                .zip(obs)
                .map(|(&w, &x)| self.weight(w) * x)
                .sum();
        }
    }

    fn output_drive(
        &self,
        s_exc: &crate::bits::BitVector,
        s_inh: &crate::bits::BitVector,
        out: &mut [f64],
    ) {
        let exc: Vec<usize> = s_exc.iter_set().collect();
        let inh: Vec<usize> = s_inh.iter_set().collect();
        for (k, o) in out.iter_mut().enumerate() {
            let row = self.genome.w_out.row(k);
            let mut acc = 0.0;
            for &j in &exc {
                acc += self.weight(row[j]);
            }
            if self.dale_signs {
                for &j in &inh {
                    acc -= self.weight(row[j]);
                }
            } else {
                for &j in &inh {
                    acc += self.weight(row[j]);
                }
            }
            *o = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_center() -> (NetworkConfig, DenseGenome) {
        let cfg = NetworkConfig::new(6, 2, 1);
        (cfg.clone(), DenseGenome::zeros(&cfg))
    }

    #[test]
    fn zero_sigma_returns_center() {
        let (_, center) = small_center();
        let p = perturb(&center, 0.0, 1, 0);
        assert_eq!(p, center);
    }

    #[test]
    fn mirrored_pair_averages_to_center() {
        let (_, center) = small_center();
        let a = perturb(&center, 0.3, 9, 0);
        let b = perturb(&center, 0.3, 9, 1);
        for block in BLOCKS {
            let (ma, mb, mc) = (a.block(block), b.block(block), center.block(block));
            for i in 0..ma.len() {
                let avg = 0.5 * (ma.data()[i] as f64 + mb.data()[i] as f64);
                assert_eq!(avg as f32, mc.data()[i]);
            }
        }
    }

    #[test]
    fn perturbation_variance_near_sigma_squared() {
        let (_, center) = small_center();
        let sigma = 0.3;
        let mut values = Vec::new();
        for i in 0..300u64 {
            let p = perturb(&center, sigma, 31, 2 * i);
            values.extend(p.w_rec.data().iter().map(|&v| v as f64));
        }
        let n = values.len() as f64; // 300 * 36 = 10800 draws
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var - sigma * sigma).abs() < 0.05 * sigma * sigma);
    }

    #[test]
    fn equal_returns_decay_the_center() {
        let (cfg, _) = small_center();
        let mut center = DenseGenome::zeros(&cfg);
        center.w_rec.set(0, 0, 2.0);
        center.w_in.set(0, 0, -4.0);
        let next = es_update(&center, 10, &[1.0; 8], 0.15, 0.3, 0.1).unwrap();
        let keep = 1.0 - 0.15 * 0.1;
        assert_eq!(next.w_rec.get(0, 0), (keep * 2.0) as f32);
        assert_eq!(next.w_in.get(0, 0), (keep * -4.0) as f32);
    }

    #[test]
    fn hand_computed_two_member_update() {
        // N=2 mirrored, centered ranks of [1, 0] are [0.5, -0.5]:
        // delta = (0.01 / (2 * 0.3)) * (0.5 - (-0.5)) * eps0
        let (_, center) = small_center();
        let (eta, sigma) = (0.01, 0.3);
        let next = es_update(&center, 8, &[1.0, 0.0], eta, sigma, 0.0).unwrap();
        let coeff = eta / (2.0 * sigma);
        for block in BLOCKS {
            let m = next.block(block);
            let cols = m.cols();
            for row in 0..m.rows() {
                for col in 0..cols {
                    let mut rng =
                        CounterRng::from_key(&[8, 0, block as u64, (row * cols + col) as u64]);
                    let eps = rng.next_normal();
                    let expected = (coeff * eps) as f32;
                    assert_eq!(m.get(row, col), expected);
                    assert!((m.get(row, col) as f64 - 0.016_666_7 * eps).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (cfg, _) = small_center();
        let mut center = DenseGenome::zeros(&cfg);
        center.w_out.set(0, 3, 1.5);
        let next = es_update(&center, 4, &[2.0, 1.0, 0.0, 3.0], 0.0, 0.3, 0.1).unwrap();
        assert_eq!(next, center);
    }

    #[test]
    fn identical_returns_within_pairs_cancel_exactly() {
        let (cfg, _) = small_center();
        let mut center = DenseGenome::zeros(&cfg);
        center.w_rec.set(1, 1, 0.5);
        // pairs (3,3) and (1,1): gradient term vanishes, only decay acts
        let next = es_update(&center, 5, &[3.0, 3.0, 1.0, 1.0], 0.15, 0.3, 0.0).unwrap();
        assert_eq!(next, center);
    }

    #[test]
    fn odd_population_is_rejected() {
        let (_, center) = small_center();
        assert!(es_update(&center, 1, &[1.0, 2.0, 3.0], 0.1, 0.3, 0.0).is_err());
    }

    #[test]
    fn dale_synapses_use_magnitudes_with_group_signs() {
        let cfg = NetworkConfig::new(4, 2, 1);
        let mut genome = DenseGenome::zeros(&cfg);
        genome.w_rec.set(0, 1, -2.0); // presynaptic neuron 1 is excitatory
        genome.w_rec.set(0, 3, 1.5); // presynaptic neuron 3 is inhibitory
        let dale = DenseSynapses { genome: &genome, dale_signs: true };
        let raw = DenseSynapses { genome: &genome, dale_signs: false };

        let mut s_exc = crate::bits::BitVector::zeros(4);
        let mut s_inh = crate::bits::BitVector::zeros(4);
        s_exc.set(1, true);
        s_inh.set(3, true);

        let mut out = vec![0.0; 4];
        dale.recurrent_drive(&s_exc, &s_inh, &mut out);
        assert_eq!(out[0], 2.0 - 1.5);
        raw.recurrent_drive(&s_exc, &s_inh, &mut out);
        assert_eq!(out[0], -2.0 + 1.5);
    }
}
